//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{random_chunks, word_tokenizer};
use lantree::analysis::{bias_eval, gen_arithmetic_qa, qa_oracle, ArithOp};
use lantree::data_tree::{
    build_data_tree, build_data_tree_parallel, BuildConfig, DataTree, DataTreeNode,
};
use lantree::gpt_tree::{flatten_model, FlattenConfig, GptTree, GptTreeNode, TreeShape};
use lantree::metrics::{compare, tree_mse, tree_recall_at_k};
use lantree::mle::{mle_verify, ContextCounts, MleProblem, DEFAULT_ITERS, DEFAULT_LR};
use lantree::probe::{BackendDescriptor, ClientOptions, FrequencyOracle, ProbeClient};
use lantree::viz::{sankey_to_tree, tree_to_sankey, ProbTree, SankeyOptions};
use lantree::{Chunk, OccurrenceMode, TokenId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))?;
    Ok(took)
}

/// Every `seed`-initial n-gram of length up to `max_depth + 1`, counted by
/// scanning each chunk position.
fn brute_counts(
    chunks: &[Chunk],
    seed: TokenId,
    max_depth: usize,
    mode: OccurrenceMode,
) -> BTreeMap<Vec<TokenId>, u64> {
    let mut out = BTreeMap::new();
    for c in chunks {
        let t = &c.tokens;
        for i in 0..t.len() {
            if t[i] != seed || (mode == OccurrenceMode::ChunkInitial && i > 0) {
                continue;
            }
            for j in i + 1..=t.len().min(i + 1 + max_depth) {
                *out.entry(t[i..j].to_vec()).or_insert(0) += 1;
            }
        }
    }
    out
}

fn tree_counts(tree: &DataTree) -> BTreeMap<Vec<TokenId>, u64> {
    fn go(n: &DataTreeNode, path: &mut Vec<TokenId>, out: &mut BTreeMap<Vec<TokenId>, u64>) {
        path.push(n.token);
        if n.count > 0 {
            out.insert(path.clone(), n.count);
        }
        for c in n.children.values() {
            go(c, path, out);
        }
        path.pop();
    }
    let mut out = BTreeMap::new();
    go(&tree.root, &mut Vec::new(), &mut out);
    out
}

fn data_tree_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xda7a);
    let corpora = 120;
    let mut edges = 0usize;
    for i in 0..corpora {
        let vocab = rng.gen_range(1..=20u32);
        let docs = rng.gen_range(0..=100);
        let chunks = random_chunks(&mut rng, vocab, docs, 50);
        let seed = rng.gen_range(0..vocab);
        let max_depth = rng.gen_range(1..=8);
        let mode = if i % 4 == 3 {
            OccurrenceMode::ChunkInitial
        } else {
            OccurrenceMode::AnyOccurrence
        };
        let tree = build_data_tree(&chunks, seed, "h", BuildConfig { max_depth, mode })
            .map_err(|e| e.to_string())?;
        let brute = brute_counts(&chunks, seed, max_depth, mode);
        let got = tree_counts(&tree);
        ensure(got == brute, || {
            format!("corpus {i}: tree counts differ from the scan")
        })?;
        for (path, &n) in &brute {
            if path.len() < 2 {
                continue;
            }
            let (h, w) = path.split_at(path.len() - 1);
            let f = tree
                .conditional_prob(h, w[0])
                .map_err(|e| e.to_string())?
                .ok_or_else(|| format!("corpus {i}: context {h:?} absent"))?;
            let want = (n, brute[h]);
            ensure((f.count, f.total) == want, || {
                format!("corpus {i}: p({w:?}|{h:?}) = {f:?}, scan {want:?}")
            })?;
            ensure(f.value() == want.0 as f64 / want.1 as f64, || {
                format!("corpus {i}: ratio")
            })?;
            edges += 1;
        }
    }
    let took = within(Duration::from_secs(10), start)?;
    Ok(format!(
        "{corpora} corpora, {edges} edges exact in {took:.2?}"
    ))
}

fn random_table(rng: &mut ChaCha8Rng) -> MleProblem {
    let contexts = (0..rng.gen_range(1..=10))
        .map(|i| {
            let mut counts: BTreeMap<TokenId, u64> = (0..rng.gen_range(1..=8u32))
                .map(|w| (w, rng.gen_range(0..=100)))
                .collect();
            if counts.values().all(|&c| c == 0) {
                counts.insert(0, 1);
            }
            ContextCounts {
                id: format!("h{i}"),
                counts,
            }
        })
        .collect();
    MleProblem { contexts }
}

fn mle_theorem() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x31e);
    let tables = 60;
    let mut worst = 0.0f64;
    for i in 0..tables {
        let r = mle_verify(&random_table(&mut rng), 1e-4, DEFAULT_LR, DEFAULT_ITERS);
        ensure(r.passed, || {
            format!(
                "table {i}: worst deviation {:e} ({:?})",
                r.worst_deviation, r.error
            )
        })?;
        worst = worst.max(r.worst_deviation);
    }
    let took = within(Duration::from_secs(30), start)?;
    Ok(format!(
        "{tables} tables, worst deviation {worst:.3e} < 1e-4 in {took:.2?}"
    ))
}

fn closed_loop() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc105ed);
    let mut worst = 0.0f64;
    let mut runs = 0;
    for _ in 0..20 {
        let vocab = rng.gen_range(2..=12u32);
        let tok = word_tokenizer(vocab as usize);
        let chunks = random_chunks(&mut rng, vocab, 60, 40);
        let seed = chunks
            .iter()
            .flat_map(|c| c.tokens.first())
            .copied()
            .next()
            .unwrap_or(0);
        let t = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=5);
        let data = build_data_tree(
            &chunks,
            seed,
            tok.hash(),
            BuildConfig {
                max_depth: t + 1,
                mode: OccurrenceMode::AnyOccurrence,
            },
        )
        .map_err(|e| e.to_string())?;
        let oracle =
            FrequencyOracle::new("oracle", tok, [data.clone()]).map_err(|e| e.to_string())?;
        let client = ProbeClient::connect(Arc::new(oracle), "oracle", ClientOptions::default())
            .map_err(|e| e.to_string())?;
        let gpt = flatten_model(
            &client,
            seed,
            &FlattenConfig {
                depth: t,
                branch: k,
                checkpoint: None,
            },
        )
        .map_err(|e| e.to_string())?;
        let r = compare(&gpt, &data).map_err(|e| e.to_string())?;
        ensure(r.mse < 1e-12, || format!("mse {:e}", r.mse))?;
        ensure(r.recall_at_5 == 1.0, || {
            format!("recall@5 {}", r.recall_at_5)
        })?;
        ensure(r.nodes_uncovered == 0, || {
            format!("{} uncovered", r.nodes_uncovered)
        })?;
        worst = worst.max(r.mse);
        runs += 1;
    }
    Ok(format!(
        "{runs} oracle loops: mse <= {worst:.1e}, recall@5 1.0, 0 uncovered"
    ))
}

fn parallel_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a7);
    let mut trees = 0;
    for _ in 0..10 {
        let vocab = rng.gen_range(2..=10u32);
        let chunks = random_chunks(&mut rng, vocab, 150, 60);
        let config = BuildConfig {
            max_depth: rng.gen_range(1..=6),
            mode: OccurrenceMode::AnyOccurrence,
        };
        let seed = rng.gen_range(0..vocab);
        let reference = build_data_tree(&chunks, seed, "h", config)
            .map_err(|e| e.to_string())?
            .to_bytes();
        for workers in [1, 2, 8] {
            let mut shuffled = chunks.clone();
            shuffled.shuffle(&mut rng);
            let bytes = build_data_tree_parallel(&shuffled, seed, "h", config, workers)
                .map_err(|e| e.to_string())?
                .to_bytes();
            ensure(bytes == reference, || {
                format!("{workers} workers produced different bytes")
            })?;
            trees += 1;
        }
    }
    Ok(format!(
        "{trees} shuffled builds over 1/2/8 workers byte-identical"
    ))
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x7219);
    let mut cases = 0;
    for i in 0..40 {
        let vocab = rng.gen_range(1..=12u32);
        let tok = word_tokenizer(vocab as usize);
        let docs = rng.gen_range(1..40);
        let chunks = random_chunks(&mut rng, vocab, docs, 30);
        let seed = rng.gen_range(0..vocab);
        let data = build_data_tree(
            &chunks,
            seed,
            tok.hash(),
            BuildConfig {
                max_depth: rng.gen_range(1..=6),
                mode: OccurrenceMode::AnyOccurrence,
            },
        )
        .map_err(|e| e.to_string())?;
        let p = dir.path().join(format!("d{i}.tree"));
        data.save(&p).map_err(|e| e.to_string())?;
        ensure(
            DataTree::load(&p).map_err(|e| e.to_string())? == data,
            || "data tree save/load".into(),
        )?;
        ensure(
            DataTree::from_json(&data.to_json()).map_err(|e| e.to_string())? == data,
            || "data tree json".into(),
        )?;

        let oracle =
            FrequencyOracle::new("m", tok.clone(), [data.clone()]).map_err(|e| e.to_string())?;
        let client = ProbeClient::connect(Arc::new(oracle), "m", ClientOptions::default())
            .map_err(|e| e.to_string())?;
        let gpt = flatten_model(
            &client,
            seed,
            &FlattenConfig {
                depth: 3,
                branch: 3,
                checkpoint: None,
            },
        )
        .map_err(|e| e.to_string())?;
        let p = dir.path().join(format!("g{i}.tree"));
        gpt.save(&p).map_err(|e| e.to_string())?;
        ensure(GptTree::load(&p).map_err(|e| e.to_string())? == gpt, || {
            "probed tree save/load".into()
        })?;

        let opts = SankeyOptions {
            max_depth: rng.gen_range(1..=5),
            max_children: rng.gen_range(1..=5),
            floor: 0.0,
        };
        for (name, tree) in [
            ("data", &data as &dyn ProbTree),
            ("probed", &gpt as &dyn ProbTree),
        ] {
            let doc = tree_to_sankey(tree, &tok, &opts).map_err(|e| e.to_string())?;
            let back = sankey_to_tree(&doc, &tok).map_err(|e| e.to_string())?;
            let want = tree
                .prob_root(opts.max_depth)
                .map(|r| truncate(&r, opts.max_children));
            ensure(back == want, || {
                format!("{name} tree -> sankey -> tree differs (case {i})")
            })?;
        }
        cases += 1;
    }
    Ok(format!(
        "{cases} random cases: save/load, json and sankey round-trips are identity"
    ))
}

fn truncate(n: &GptTreeNode, k: usize) -> GptTreeNode {
    let mut kids: Vec<&GptTreeNode> = n.children.iter().filter(|c| c.prob > 0.0).collect();
    kids.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.token.cmp(&b.token)));
    GptTreeNode {
        token: n.token,
        prob: n.prob,
        children: kids.into_iter().take(k).map(|c| truncate(c, k)).collect(),
    }
}

/// A probed tree whose edges are the data tree's exact frequencies.
fn mirror(data: &DataTree, depth: usize) -> GptTree {
    fn go(n: &DataTreeNode, prob: f64, left: usize) -> GptTreeNode {
        GptTreeNode {
            token: n.token,
            prob,
            children: if left == 0 {
                Vec::new()
            } else {
                n.ranked_children()
                    .into_iter()
                    .map(|c| go(c, c.count as f64 / n.count as f64, left - 1))
                    .collect()
            },
        }
    }
    let root = go(&data.root, 1.0, depth);
    let mut count = 0;
    root.walk(&mut Vec::new(), &mut |_, _| count += 1);
    GptTree {
        seed: data.seed,
        root,
        shape: TreeShape {
            depth,
            branch: usize::MAX,
            node_count: count,
        },
        backend: BackendDescriptor {
            endpoint: "mirror".into(),
            model_id: "mirror".into(),
            tokenizer_hash: data.meta.tokenizer_hash.clone(),
        },
    }
}

fn metric_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa19);
    let mut checked = 0;
    for i in 0..30 {
        let vocab = rng.gen_range(2..=10u32);
        let tok = word_tokenizer(vocab as usize);
        let config = BuildConfig {
            max_depth: 4,
            mode: OccurrenceMode::AnyOccurrence,
        };
        let a = random_chunks(&mut rng, vocab, 50, 30);
        let b = random_chunks(&mut rng, vocab, 50, 30);
        let data = build_data_tree(&a, 0, tok.hash(), config).map_err(|e| e.to_string())?;
        let other = build_data_tree(&b, 0, tok.hash(), config).map_err(|e| e.to_string())?;
        if data.is_empty() || other.is_empty() {
            continue;
        }
        let oracle = FrequencyOracle::new("m", tok.clone(), [other]).map_err(|e| e.to_string())?;
        let client = ProbeClient::connect(Arc::new(oracle), "m", ClientOptions::default())
            .map_err(|e| e.to_string())?;
        let gpt = flatten_model(
            &client,
            0,
            &FlattenConfig {
                depth: 3,
                branch: 4,
                checkpoint: None,
            },
        )
        .map_err(|e| e.to_string())?;

        // recall@k never decreases with k
        let mut last = 0.0;
        for k in 1..=vocab as usize + 1 {
            match tree_recall_at_k(&gpt, &data, k) {
                Ok(r) => {
                    ensure(r.recall >= last, || {
                        format!("case {i}: recall@{k} {} < {last}", r.recall)
                    })?;
                    last = r.recall;
                }
                Err(lantree::metrics::MetricError::NoOverlap) => break,
                Err(e) => return Err(e.to_string()),
            }
        }

        // zero iff edgewise equal
        let mut same = mirror(&data, 3);
        let m = tree_mse(&same, &data).map_err(|e| e.to_string())?;
        ensure(m.mse == 0.0, || {
            format!("case {i}: mirrored tree mse {:e}", m.mse)
        })?;
        if let Some(c) = same.root.children.first_mut() {
            c.prob = (c.prob + 0.25) % 1.0;
            let m = tree_mse(&same, &data).map_err(|e| e.to_string())?;
            ensure(m.mse > 0.0, || {
                format!("case {i}: perturbed edge gave mse 0")
            })?;
        }

        // repeating the corpus scales every count without changing anything else
        let factor = rng.gen_range(2..=5);
        let scaled_chunks: Vec<Chunk> = (0..factor).flat_map(|_| a.iter().cloned()).collect();
        let scaled =
            build_data_tree(&scaled_chunks, 0, tok.hash(), config).map_err(|e| e.to_string())?;
        ensure(scaled.root.count == data.root.count * factor as u64, || {
            "counts did not scale".into()
        })?;
        for (path, n) in tree_counts(&data) {
            if path.len() < 2 {
                continue;
            }
            let (h, w) = path.split_at(path.len() - 1);
            let p1 = data.conditional_prob(h, w[0]).unwrap().unwrap().value();
            let p2 = scaled.conditional_prob(h, w[0]).unwrap().unwrap().value();
            ensure(p1 == p2, || {
                format!("case {i}: p({w:?}|{h:?}) changed under scaling (count {n})")
            })?;
        }
        let (r1, r2) = match (compare(&gpt, &data), compare(&gpt, &scaled)) {
            (Ok(r1), Ok(r2)) => (r1, r2),
            (Err(e1), Err(e2)) if e1 == e2 => continue,
            other => return Err(format!("case {i}: comparisons disagree: {other:?}")),
        };
        ensure(r1.mse == r2.mse && r1.recall_at_5 == r2.recall_at_5, || {
            format!("case {i}: metrics changed under scaling")
        })?;
        ensure(
            (r1.nodes_compared, r1.nodes_uncovered) == (r2.nodes_compared, r2.nodes_uncovered),
            || "coverage changed".into(),
        )?;
        checked += 1;
    }
    ensure(checked >= 20, || format!("only {checked} usable cases"))?;
    Ok(format!(
        "{checked} cases: recall monotone in k, mse zero iff equal, scaling invariant"
    ))
}

fn bias_oracle() -> Outcome {
    let pairs = gen_arithmetic_qa(500, 2024, &ArithOp::ALL).map_err(|e| e.to_string())?;
    let oracle = qa_oracle("qa", &pairs).map_err(|e| e.to_string())?;
    let client = ProbeClient::connect(Arc::new(oracle), "qa", ClientOptions::default())
        .map_err(|e| e.to_string())?;
    let r = bias_eval(
        &client,
        &pairs,
        Some(lantree::analysis::DEFAULT_REPLACEMENT),
    )
    .map_err(|e| e.to_string())?;
    ensure(r.acc_original == 1.0, || {
        format!("acc_original {}", r.acc_original)
    })?;
    Ok(format!(
        "n = {}, acc_original {}, acc_perturbed {}",
        r.n,
        r.acc_original,
        r.acc_perturbed.unwrap_or(f64::NAN)
    ))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("data-tree exactness", data_tree_exactness),
        ("mle equals conditional frequency", mle_theorem),
        ("closed-loop self-consistency", closed_loop),
        ("parallel determinism", parallel_determinism),
        ("round-trips", round_trips),
        ("metric algebra", metric_algebra),
        ("bias-harness oracle", bias_oracle),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
