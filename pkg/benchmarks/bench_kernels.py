"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel is timed at a few sizes typical of a training step (top-k and
cosine over one bag) and of evaluation (AUC over a test split, and larger).
Outputs are checked for agreement before timing.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from cate import _pykernels

try:
    from cate import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng):
    for n in (80, 2_000, 50_000):
        scores = rng.standard_normal(n)
        yield "topk_indices", f"N={n},k=10", (scores, 10)
    for n, c, m in ((80, 32, 5), (2_000, 32, 5), (2_000, 512, 5)):
        feats = rng.standard_normal((n, c)).astype(np.float32)
        anchors = rng.standard_normal((m, c))
        anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
        yield "cosine_max_scores", f"N={n},C={c},m={m}", (feats, anchors)
    for n in (60, 2_000, 100_000):
        scores = np.round(rng.standard_normal(n), 2)  # rounding creates ties
        labels = rng.integers(0, 2, n).astype(bool)
        yield "mann_whitney_auc", f"n={n}", (scores, labels)


def best_time(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="also write results here")
    args = parser.parse_args(argv)
    if _ckernels is None:
        parser.exit(1, "compiled kernels not built; run `pip install -e . --no-build-isolation` first\n")

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<20}{'size':<22}{'python us':>12}{'cython us':>12}{'speedup':>9}")
    for name, size, inputs in cases(rng):
        py_fn, c_fn = getattr(_pykernels, name), getattr(_ckernels, name)
        np.testing.assert_allclose(np.asarray(c_fn(*inputs)), np.asarray(py_fn(*inputs)), rtol=1e-6, atol=1e-9)
        t_py, t_c = best_time(py_fn, inputs, args.repeat), best_time(c_fn, inputs, args.repeat)
        rows.append({"kernel": name, "size": size, "python_s": t_py, "cython_s": t_c, "speedup": t_py / t_c})
        print(f"{name:<20}{size:<22}{t_py * 1e6:>12.1f}{t_c * 1e6:>12.1f}{t_py / t_c:>8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
