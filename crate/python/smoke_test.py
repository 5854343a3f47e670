"""Quick end-to-end check of the `mtdl` extension module.

Build and install it first:

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import math
import os
import tempfile

import mtdl


def main():
    train, test = mtdl.generate(classes=3, dim=8, length=12, segment=3, train=60, test=20, seed=1)
    assert len(train) == 60 and len(test) == 20
    seq = train[0]
    assert len(seq) == 12 and seq.dim == 8
    assert sum(seq.mask) == 3

    model = mtdl.Model(input_dim=8, hidden=8, memory_dim=12, controller_width=4, classes=3, seed=2)
    probs = model.probabilities(seq)
    assert len(probs) == 3 and math.isclose(sum(probs), 1.0, rel_tol=1e-12)
    assert model.predict(seq) == max(range(3), key=probs.__getitem__)

    trace = model.trace(seq)
    assert [t for t, _, _ in trace] == list(range(1, 13))
    assert all((a > 0.5) == s for _, a, s in trace)

    history = model.fit(train, epochs=3, lr=0.05, batch_size=16, seed=3)
    assert [h["epoch"] for h in history] == [1, 2, 3]
    assert all(math.isfinite(h["loss"]) for h in history)
    metrics = model.evaluate(test)
    assert 0.0 <= metrics["accuracy"] <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "m.ckpt")
        model.save(ckpt)
        back = mtdl.Model.load(ckpt)
        assert back.epochs_done == 3
        assert back.config() == model.config()
        assert back.probabilities(seq) == model.probabilities(seq)

        path = os.path.join(tmp, "x.mtdl")
        mtdl.write_feature_file(path, seq)
        again = mtdl.read_feature_file(path)
        assert again.features() == seq.features() and again.label == seq.label

    fused, cls = mtdl.fuse([[0.2, 0.5, 0.3], [0.4, 0.1, 0.5]])
    assert cls == 2 and math.isclose(fused[2], 0.4)

    try:
        mtdl.Model(history="median")
    except ValueError as e:
        assert "history" in str(e)
    else:
        raise AssertionError("bad history mode accepted")

    print("smoke test ok: train acc %.3f, test acc %.3f" % (history[-1]["accuracy"], metrics["accuracy"]))


if __name__ == "__main__":
    main()
