"""Compare the compiled kernel against the numpy fallback.

Run:  python3 benchmarks/bench_backends.py [--quick]

The compiled kernel wins on the small shapes that dominate attacks and the
convex-instance trainer (single samples, tiny layers); BLAS-backed numpy
wins once layers are wide enough for gemm efficiency to matter. Training
uses whichever backend was selected at import.
"""

import argparse
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from amun.backends import numpy_backend  # noqa: E402

try:
    from amun.backends import _fastcore
except ImportError:
    _fastcore = None

CASES = [
    ("attack step (1x[8,48,48,4])", (8, 48, 48, 4), 1, dict(want_params=False, want_inputs=True)),
    ("convex trainer (40x[2,2])", (2, 2), 40, dict(want_params=True, want_inputs=False)),
    ("train batch (32x[8,48,48,4])", (8, 48, 48, 4), 32, dict(want_params=True, want_inputs=False)),
    ("train batch (64x[20,64,64,4])", (20, 64, 64, 4), 64, dict(want_params=True, want_inputs=False)),
]


def time_call(fn, *args, budget=0.4, **kw):
    fn(*args, **kw)  # warm up
    n = 0
    t0 = time.perf_counter()
    while time.perf_counter() - t0 < budget:
        fn(*args, **kw)
        n += 1
    return (time.perf_counter() - t0) / n


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true", help="shorter timing budget")
    args = ap.parse_args()
    budget = 0.05 if args.quick else 0.4

    rng = np.random.default_rng(0)
    rows = []
    for name, widths, n, kw in CASES:
        params = rng.normal(size=numpy_backend.param_count(widths))
        X = np.ascontiguousarray(rng.normal(size=(n, widths[0])))
        y = np.ascontiguousarray(rng.integers(0, widths[-1], size=n))
        t_np = time_call(numpy_backend.loss_and_grads, params, widths, X, y,
                         budget=budget, **kw)
        if _fastcore is not None:
            t_c = time_call(_fastcore.loss_and_grads, params, widths, X, y,
                            budget=budget, **kw)
            ratio = t_np / t_c
            rows.append((name, t_np * 1e6, t_c * 1e6, ratio))
        else:
            rows.append((name, t_np * 1e6, None, None))

    print(f"{'case':38} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for name, t_np, t_c, ratio in rows:
        if t_c is None:
            print(f"{name:38} {t_np:8.1f}us {'-':>10} {'-':>8}")
        else:
            print(f"{name:38} {t_np:8.1f}us {t_c:8.1f}us {ratio:7.2f}x")
    if _fastcore is None:
        print("\ncompiled kernel not built; run: python3 setup.py build_ext --inplace")


if __name__ == "__main__":
    main()
