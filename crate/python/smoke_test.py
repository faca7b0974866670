"""Smoke test for the deepword_py extension.

Build the extension and put it on the path, for example:

    cargo build --release -p deepword-py
    cp target/release/libdeepword_py.so python/deepword_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import deepword_py as dw


def main():
    train = dw.generate(120, "mixed", seed=1)
    test = dw.generate(30, "hard", seed=2)
    assert len(train) == 120
    assert dw.generate(120, "mixed", seed=1) == train

    s = train[0]
    assert dw.Scene.from_json(s.to_json()) == s
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "scenes.jsonl")
        dw.write_scenes(test, path)
        assert dw.read_scenes(path) == test

    a = (550.0, 325.0, 650.0, 375.0, 0.9, "vehicle", 0)
    b = (600.0, 350.0, 620.0, 370.0, 0.9, "wheel", 1)
    g = dw.pair_geometry(a, a, 1000.0, 500.0)
    assert g["d"] == 0.0 and g["log_ratio"] is None
    assert 0.0 < dw.iou(a, b) < 1.0

    prior = dw.PriorModel.fit(train)
    assert prior.probability("wv", None) == 1.0
    for x in (-3.0, -1.0, 0.0, 1.0):
        assert 0.0 <= prior.probability("ww", x) <= 1.0
    assert math.isclose(sum(w for _, _, w in prior.components("wv")), 1.0, rel_tol=1e-9)

    base = [dw.logic_assign(sc) for sc in test]
    report = dw.score(test, base)
    assert 0.0 <= report["assignment_accuracy"] <= 1.0

    net = dw.RelNet.train(train, prior, {"epochs": 3, "model": {"features": 16, "geo_hidden": 16}})
    assert len(net.history) == 3
    preds = [net.predict(sc) for sc in test]
    model_report = dw.score(test, preds)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        net.save(path)
        again = dw.RelNet.load(path)
        assert [again.predict(sc) for sc in test] == preds

    print(
        "baseline %.4f  model(3 epochs) %.4f  params %d"
        % (report["assignment_accuracy"], model_report["assignment_accuracy"], net.parameter_count)
    )
    print("smoke test passed")


if __name__ == "__main__":
    main()
