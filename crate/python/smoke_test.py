"""Smoke test for the iupac_infill extension module.

Run after `pip install -e crates/python --no-build-isolation`:
`python python/smoke_test.py [model.ckpt]`. Pass a checkpoint
path to also exercise model editing.
"""

import sys

import iupac_infill as ii


def main() -> None:
    vocab = ii.Vocabulary()
    tokens = vocab.tokenize("2-acetyloxybenzoic acid")
    assert [s for s, _ in tokens] == ["2", "-", "acet", "yl", "oxy", "benzo", "ic acid"], tokens
    assert tokens[0][1] == "Locant"
    assert vocab.detokenize([s for s, _ in tokens]) == "2-acetyloxybenzoic acid"
    assert len(vocab) >= 400

    enc, target = ii.corrupt(vocab, "2-acetyloxybenzoic acid", [(2, 3)], "high")
    assert enc == ["<high>", "2", "-", "<s1>", "benzo", "ic acid"], enc
    assert target == ["<s1>", "acet", "yl", "oxy", "<s2>"], target
    validity, name = ii.apply_infill(vocab, enc, ["<s1>", "decyl", "<s2>"], "2-acetyloxybenzoic acid")
    assert (validity, name) == ("Valid", "2-decylbenzoic acid"), (validity, name)
    assert ii.apply_infill(vocab, enc, target, "2-acetyloxybenzoic acid")[0] == "Identity"

    plan = ii.sample_mask_plan(128, seed=3)
    assert plan == ii.sample_mask_plan(128, seed=3)
    assert all(b[0] > a[0] + a[1] for a, b in zip(plan, plan[1:]))

    assert len(ii.enumerate_spans(128)) == 630
    assert ii.baseline_eligible(vocab, "2-acetyloxybenzoic acid", "2-decylbenzoic acid")
    assert abs(ii.sign_test_p(8, 10) - 56 / 1024) < 1e-12
    assert ii.bucketize(6.2) == "high" and ii.bucketize(-1.0) == "low"
    assert abs(vocab.proxy_property("2-decylbenzoic acid") - 6.2) < 1e-9

    records = vocab.synthetic_corpus(seed=1, size=50)
    assert len(records) == 50 and records == vocab.synthetic_corpus(seed=1, size=50)

    if len(sys.argv) > 1:
        model = ii.Model.load(sys.argv[1])
        assert model.step > 0
        candidates = model.edit(vocab, "2-acetyloxybenzoic acid", [(2, 3)], "high", temperature=1.0, k=8, seed=7)
        assert candidates == model.edit(vocab, "2-acetyloxybenzoic acid", [(2, 3)], "high", temperature=1.0, k=8, seed=7)
        for c in candidates:
            print(f"{c['validity']:<16} {c['name']}  ->  {c['property_after']}")

    print("smoke test passed")


if __name__ == "__main__":
    main()
