"""Smoke test for the ncdg extension module.

Build and run:

    cargo build --release -p ncdg-python --features extension-module
    cp target/release/libncdg_py.so crates/python/python/ncdg.so
    python3 crates/python/python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.environ.get("NCDG_PYTHON_PATH") or os.path.dirname(os.path.abspath(__file__)))

import ncdg  # noqa: E402


def normalized(layer):
    out = []
    for row in layer:
        lo, hi = min(row), max(row)
        out.append([0.0 if hi == lo else (v - lo) / (hi - lo) for v in row])
    return out


def reference_coverage_loss(outputs, activated, t):
    activated = [list(a) for a in activated]
    norm = [normalized(layer) for layer in outputs]
    for li, layer in enumerate(norm):
        for row in layer:
            for j, v in enumerate(row):
                if v > t:
                    activated[li][j] = True
    loss = 0.0
    for li, layer in enumerate(norm):
        for j in range(len(activated[li])):
            if not activated[li][j]:
                loss += sum(row[j] for row in layer) / len(layer)
    return loss, activated


def main():
    assert ncdg.param_count() == 8_609_674

    cfg = ncdg.resolve_config(overrides={"beta": "0"})
    assert cfg["beta"] == "0" and cfg["lambda"] == "0.1" and cfg["t"] == "0.005"

    report = json.loads(ncdg.gradcheck("mlp-small"))
    assert report["pass"], report
    assert report["first_order"]["max_rel_err"] < 1e-4
    assert report["second_order"]["max_rel_err"] < 1e-4

    assert math.isclose(ncdg.l_sim([[1.0, 0.0]], [[0.0, 1.0]]), math.sqrt(2.0))

    outputs = [
        [[0.1, 0.9, 0.4, 0.2], [0.8, 0.3, 0.0, 0.5]],
        [[2.0, -1.0, 0.5], [0.0, 1.0, 0.3]],
    ]
    start = [[False] * 4, [True, False, False]]
    for t in (0.3, 0.7, 0.95):
        loss, act = ncdg.coverage_loss(outputs, start, t)
        want_loss, want_act = reference_coverage_loss(outputs, start, t)
        assert act == want_act, (t, act, want_act)
        assert math.isclose(loss, want_loss, rel_tol=1e-12, abs_tol=1e-15), (t, loss, want_loss)

    try:
        ncdg.resolve_config(overrides={"nope": "1"})
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    with tempfile.TemporaryDirectory() as d:
        try:
            ncdg.train(os.path.join(d, "run"), overrides={"data_root": os.path.join(d, "missing")})
        except ValueError as e:
            assert "train-images-idx3-ubyte" in str(e), e
        else:
            raise AssertionError("training without data succeeded")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
