"""Smoke test for the fssr extension module.

Build first, e.g. `maturin develop -m crates/py/Cargo.toml`, or
`cargo build -p fssr-py --features extension-module` and put
target/debug/libfssr.so on sys.path as fssr.so.
"""

import math
import os
import sys
import tempfile

import fssr


def main():
    clip = fssr.synthetic_clip(3, 0)
    assert len(clip) == 48000, len(clip)
    spec = fssr.spectrogram(clip)
    assert spec.shape == (128, 300), spec.shape
    assert spec.normalized

    model = fssr.Model("capsnet_m", 50, seed=1)
    assert model.count_parameters() == 8196864
    emb = model.embed([spec, fssr.spectrogram(fssr.synthetic_clip(4, 0))])
    assert len(emb) == 2 and len(emb[0]) == model.embedding_dim

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path, tag="smoke")
        again = fssr.Model.load(path)
        assert again.embed([spec]) == emb[:1]

    support = [[0.0, 0.0], [4.0, 0.0]]
    query = [[0.1, 0.0], [3.9, 0.2]]
    loss, acc = fssr.prototypical_loss(support, [0, 1], query, [0, 1])
    assert acc == 1.0 and loss < 0.1, (loss, acc)

    logp = fssr.classify_query([0.0, 0.0], support)
    assert abs(sum(math.exp(v) for v in logp) - 1.0) < 1e-12

    labels = [f"s{i}" for i in range(10) for _ in range(6)]
    oracle = [[1.0 if j == int(l[1:]) else 0.0 for j in range(10)] for l in labels]
    mean, ci = fssr.evaluate_embeddings(oracle, labels, n_way=5, k_shot=1, n_episodes=100)
    assert mean == 1.0 and ci == 0.0, (mean, ci)

    checks = fssr.selftest(0)
    assert all(ok for _, _, ok in checks), [c for c in checks if not c[2]]

    try:
        fssr.Model("alexnet", 10)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown arch accepted")

    print(f"ok: {model!r}, {spec!r}, {len(checks)} selftest checks")


if __name__ == "__main__":
    sys.exit(main())
