#!/usr/bin/env python3
"""Smoke test for the safr_py extension module.

Build the module first:

    cargo build -p safr-py            # or --release

then run:

    python3 python/smoke_test.py
"""

import math
import os
import shutil
import sys
import tempfile


def load_module():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    candidates = [
        os.path.join(root, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("libsafr_py.so", "safr_py.so", "libsafr_py.dylib")
    ]
    built = next((p for p in candidates if os.path.exists(p)), None)
    if built is None:
        sys.exit("safr_py not built; run `cargo build -p safr-py` first")
    stage = tempfile.mkdtemp(prefix="safr_py_")
    shutil.copy(built, os.path.join(stage, "safr_py.so"))
    sys.path.insert(0, stage)
    import safr_py

    return safr_py


def approx(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    safr = load_module()

    # tokenizer
    assert safr.tokenize("A great movie, really!") == [
        "a", "great", "movie", ",", "really", "!",
    ]

    # metrics against hand-computed values for two orthogonal rows
    rows = [[2.0, 0.0], [0.0, 3.0]]
    gram = safr.interference_matrix(rows)
    assert gram == [[4.0, 0.0], [0.0, 9.0]]
    assert safr.polysemanticity(rows) == [0.0, 0.0]
    assert safr.capacity(rows) == [1.0, 1.0]
    cos = safr.cosine_matrix([[1.0, 0.0], [1.0, 1.0]])
    assert approx(cos[0][1], 1.0 / math.sqrt(2.0))

    # loss terms
    assert approx(safr.interaction_loss([[[0.5, 0.5], [0.5, 0.5]]]), 0.25)
    assert safr.interaction_loss([[[1.0, 0.0], [0.0, 1.0]]]) == 0.0
    assert safr.importance_loss(rows, 2) <= 1e-6  # sqrt floor keeps it just above 0

    # deletion count rule
    assert safr.deletion_count(10, 30.0) == 3
    assert safr.deletion_count(10, 0.0) == 0
    assert safr.deletion_count(2, 10.0) == 1
    assert safr.deletion_count(1, 90.0) == 0

    # synthetic corpus is deterministic and balanced
    corpus = safr.synth_corpus(10, 7)
    assert corpus == safr.synth_corpus(10, 7)
    assert sum(label for label, _ in corpus) == 5

    # model: init, encode, predict, trace, ranking
    vocab = ["<pad>", "<unk>", "great", "awful", "movie", "the"]
    model = safr.Model.init(vocab, classes=2, embed_dim=8, ff_dim=16, heads=2, seed=5)
    assert model.vocab == vocab
    ids = model.encode("the movie was great")
    assert ids == [5, 4, 1, 2]  # "was" is out of vocabulary
    label = model.predict(ids)
    assert label in (0, 1)

    trace = model.trace(ids)
    assert len(trace["logits"]) == 2
    assert len(trace["mask_probs"]) == len(ids)
    assert len(trace["fc1"]) == len(ids) and len(trace["fc1"][0]) == 16  # ff_dim
    for head in trace["attn_weights"]:
        for row in head:
            assert approx(sum(row), 1.0)

    caps = model.layer_capacity(ids, "fc1")
    ranking = model.rank_by_capacity(ids, "fc1")
    assert sorted(ranking) == list(range(len(ids)))
    assert all(caps[a] >= caps[b] for a, b in zip(ranking, ranking[1:]))

    # save / load round trip preserves behavior
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ck")
        model.save(path)
        loaded = safr.Model.load(path)
        assert loaded.predict(ids) == label
        # checkpoints hold f32 tensors, so logits agree only to f32 precision
        for a, b in zip(loaded.trace(ids)["logits"], trace["logits"]):
            assert approx(a, b, 1e-5)

    print("smoke test passed")


if __name__ == "__main__":
    main()
