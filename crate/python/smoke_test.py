"""Smoke test for the sci_py extension.

Build and run from the repository root:

    cargo build --release -p sci-py
    cp target/release/libsci_py.so python/sci_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import sci_py  # noqa: E402

FAST = """
[stage1]
epochs = 2
lr = 3.5e-4
schedule = "cosine"

[stage2]
epochs = 2
lr = 3.5e-4
schedule = "step_decay"
milestones = [1]
"""


def main():
    f_id = [1.0, 2.0, 0.5]
    f_clo = [0.3, -1.0, 2.0]
    proj = sci_py.project(f_clo, f_id)
    ort = sci_py.orthogonalize(f_id, proj)
    assert abs(abs(sci_py.cosine_sim(ort, f_id)) - 1.0) < 1e-5

    ds = sci_py.Dataset.generate(seed=3)
    train, query, gallery = ds.counts()
    assert train + query + gallery == len(ds)
    pixels, (pid, clothes, camera) = ds.sample(0)
    h, w = ds.image_size()
    assert len(pixels) == h * w * 3

    model = sci_py.Model.train(seed=3, config=FAST, dataset=ds)
    emb = model.embed(pixels)
    assert all(math.isfinite(x) for x in emb)
    metrics = model.evaluate(ds, ["general", "cloth_changing"], 10)
    for name, m in metrics.items():
        assert 0.0 <= m["rank1"] <= 1.0, name

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "checkpoint.bin")
        model.save(path)
        again = sci_py.Model.load(path)
        assert again.embed(pixels) == emb
        ds.save(os.path.join(tmp, "data"))
        assert len(sci_py.Dataset.load(os.path.join(tmp, "data"))) == len(ds)

    r = sci_py.evaluate_embeddings(
        [[1.0, 0.0]], [[0.6, 0.8], [0.0, 1.0]], [(0, 0, 0)], [(0, 1, 1), (1, 2, 1)], "general", 2
    )
    assert r["cmc"] == [1.0, 1.0] and r["map"] == 1.0

    try:
        sci_py.Dataset.generate(seed=1, config="bogus = 1")
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    print(f"ok: {len(ds)} images, variant {model.variant}, metrics {metrics}")


if __name__ == "__main__":
    main()
