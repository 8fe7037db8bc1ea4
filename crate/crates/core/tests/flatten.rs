//! Probe accounting and checkpoint resume of the breadth-first flatten.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::{random_chunks, word_tokenizer};
use lantree::data_tree::{build_data_tree, BuildConfig, OccurrenceMode};
use lantree::gpt_tree::{flatten_model, FlattenConfig, GptTreeError, TreeShape};
use lantree::probe::{
    ClientOptions, FrequencyOracle, ProbeClient, RetryPolicy, Transport, TransportError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Oracle whose next-token endpoint starts failing after `budget` calls.
struct Flaky {
    inner: FrequencyOracle,
    budget: AtomicUsize,
    probes: AtomicUsize,
}

impl Transport for Flaky {
    fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        if path == lantree::probe::protocol::NEXT_TOKEN_PATH {
            self.probes.fetch_add(1, Ordering::SeqCst);
            if self
                .budget
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
                .is_err()
            {
                return Err(TransportError::Network("connection refused".into()));
            }
        }
        self.inner.post(path, body)
    }

    fn get(&self, path: &str) -> Result<Vec<u8>, TransportError> {
        self.inner.get(path)
    }

    fn endpoint(&self) -> String {
        self.inner.endpoint()
    }
}

fn fixture(seed: u64) -> FrequencyOracle {
    let tok = word_tokenizer(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunks = random_chunks(&mut rng, 4, 40, 30);
    let tree = build_data_tree(
        &chunks,
        0,
        tok.hash(),
        BuildConfig {
            max_depth: 6,
            mode: OccurrenceMode::AnyOccurrence,
        },
    )
    .unwrap();
    FrequencyOracle::new("m", tok, [tree]).unwrap()
}

fn connect(budget: usize, seed: u64) -> (Arc<Flaky>, ProbeClient) {
    let flaky = Arc::new(Flaky {
        inner: fixture(seed),
        budget: AtomicUsize::new(budget),
        probes: AtomicUsize::new(0),
    });
    let t: Arc<dyn Transport> = flaky.clone();
    let opts = ClientOptions {
        retry: RetryPolicy {
            attempts: 1,
            initial_backoff: Duration::ZERO,
        },
        ..ClientOptions::default()
    };
    (flaky, ProbeClient::connect(t, "m", opts).unwrap())
}

#[test]
fn one_probe_per_expanded_node() {
    for (t, k) in [(1, 1), (2, 2), (3, 3), (4, 2)] {
        let (flaky, client) = connect(usize::MAX, 1);
        let tree = flatten_model(
            &client,
            0,
            &FlattenConfig {
                depth: t,
                branch: k,
                checkpoint: None,
            },
        )
        .unwrap();
        let mut expanded = 0;
        let mut count = 0;
        tree.root.walk(&mut Vec::new(), &mut |path, _| {
            count += 1;
            expanded += (path.len() <= t) as usize;
        });
        assert_eq!(count, tree.shape.node_count);
        assert_eq!(client.probe_calls() as usize, expanded);
        assert_eq!(flaky.probes.load(Ordering::SeqCst), expanded);
        assert!(tree.shape.node_count as u128 <= TreeShape::max_nodes(t, k));
    }
}

#[test]
fn full_expansion_reaches_the_bound() {
    // every token follows every token, so nothing dies out
    let tok = word_tokenizer(3);
    let mut tokens = Vec::new();
    for a in 0..3u32 {
        for b in 0..3 {
            for c in 0..3 {
                tokens.extend([a, b, c]);
            }
        }
    }
    let chunk = lantree::Chunk {
        doc_id: "d".into(),
        offset: 0,
        tokens,
    };
    let tree = build_data_tree(
        [&chunk],
        0,
        tok.hash(),
        BuildConfig {
            max_depth: 3,
            mode: OccurrenceMode::AnyOccurrence,
        },
    )
    .unwrap();
    let oracle = FrequencyOracle::new("m", tok, [tree]).unwrap();
    let client = ProbeClient::connect(Arc::new(oracle), "m", ClientOptions::default()).unwrap();
    let g = flatten_model(
        &client,
        0,
        &FlattenConfig {
            depth: 2,
            branch: 2,
            checkpoint: None,
        },
    )
    .unwrap();
    assert_eq!(g.shape.node_count, 7);
    assert_eq!(client.probe_calls(), 3);
}

#[test]
fn resume_after_failure_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("seed.ckpt.json");
    let cfg = FlattenConfig {
        depth: 4,
        branch: 3,
        checkpoint: Some(ck.clone()),
    };

    let (_, clean) = connect(usize::MAX, 9);
    let reference = flatten_model(
        &clean,
        0,
        &FlattenConfig {
            checkpoint: None,
            ..cfg.clone()
        },
    )
    .unwrap();
    let total = clean.probe_calls() as usize;
    assert!(total > 6);

    let (_, broken) = connect(total / 2, 9);
    match flatten_model(&broken, 0, &cfg) {
        Err(GptTreeError::Backend {
            checkpoint: Some(p),
            ..
        }) => assert_eq!(p, ck),
        other => panic!("expected a checkpointed failure, got {other:?}"),
    }
    assert!(ck.exists());

    let (flaky, healthy) = connect(usize::MAX, 9);
    let resumed = flatten_model(&healthy, 0, &cfg).unwrap();
    assert_eq!(resumed.to_bytes(), reference.to_bytes());
    // completed expansions were not probed again
    assert!(flaky.probes.load(Ordering::SeqCst) < total);
    assert!(!ck.exists());
}

#[test]
fn stale_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("seed.ckpt.json");
    let cfg = FlattenConfig {
        depth: 3,
        branch: 2,
        checkpoint: Some(ck.clone()),
    };
    let (_, broken) = connect(1, 3);
    assert!(flatten_model(&broken, 0, &cfg).is_err());
    let (_, healthy) = connect(usize::MAX, 3);
    let other = FlattenConfig { branch: 3, ..cfg };
    assert!(matches!(
        flatten_model(&healthy, 0, &other),
        Err(GptTreeError::StaleCheckpoint { .. })
    ));
}
