"""Exercises the bindings end to end; exits nonzero on the first failure."""

import json
import os
import tempfile

import lantree

DOCS = [
    "the cat sat on the mat",
    "the dog sat on the log",
    "the cat ran to the dog",
    "a cat and the dog sat",
]


def main():
    tok = lantree.Tokenizer.from_texts(DOCS)
    the = tok.id_of("the")
    cat, dog = tok.id_of("cat"), tok.id_of("dog")
    assert tok.detokenize(tok.tokenize(DOCS[0])) == DOCS[0]

    data = lantree.DataTree.build(DOCS, tok, the, max_depth=4)
    assert data.count == 7, data
    assert data.conditional_prob([the], cat) == (2, 7)
    assert data.top_k([the], 1) == [(dog, 3, 7)]
    assert data.conditional_prob([the, the], cat) is None
    parallel = lantree.DataTree.build(list(reversed(DOCS)), tok, the, max_depth=4, workers=3)
    assert parallel.top_k([the], 5) == data.top_k([the], 5)

    gpt = lantree.flatten_oracle([data], tok, the, depth=3, branch=3)
    report = lantree.compare(gpt, data)
    assert report["mse"] < 1e-12 and report["recall_at_5"] == 1.0, report
    assert report["nodes_uncovered"] == 0
    assert abs(gpt.path_prob([the, cat]) - 2 / 7) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        for tree, cls in ((data, lantree.DataTree), (gpt, lantree.GptTree)):
            path = os.path.join(tmp, "t.tree")
            tree.save(path)
            assert cls.load(path) == tree
            assert cls.from_json(tree.to_json()) == tree

    mle = lantree.mle_verify(data)
    assert mle["passed"], mle

    pairs = lantree.gen_arithmetic_qa(20, seed=7)
    assert len(pairs) == 20
    for q, a in pairs:
        assert lantree.evaluate_question(q) == a
    q = pairs[0][0]
    assert lantree.perturb_last_token(q) == q[:-1] + "。"

    table = lantree.cooccur(DOCS, tok, ["cat", "dog"], window=3)
    assert table["marginals"]["cat"] == 6, table

    doc = lantree.sankey(data, tok, max_depth=2)
    assert doc["nodes"][0]["label"] == "the"
    assert json.loads(json.dumps(doc)) == doc
    assert lantree.sankey_html(gpt, tok).lstrip().lower().startswith("<!doctype html")

    try:
        lantree.DataTree.build(DOCS, tok, the, mode="everywhere")
    except lantree.LantreeError:
        pass
    else:
        raise AssertionError("bad mode accepted")

    print("smoke test ok:", data, gpt)


if __name__ == "__main__":
    main()
