"""Kernel backend selection.

Two interchangeable implementations of the MLP kernel: a Cython extension
and a numpy fallback. The compiled loops win on small workloads (attack
steps on single samples, tiny convex instances) where numpy's per-call
overhead dominates; BLAS-backed numpy wins on wide training batches. The
default "auto" mode dispatches per call on estimated work; AMUN_BACKEND
forces one implementation:

    AMUN_BACKEND=python     numpy only
    AMUN_BACKEND=compiled   extension only (raises if never built)
    AMUN_BACKEND=auto       size-aware dispatch (default)

Results are deterministic within a backend choice; the two implementations
may differ in last-ulp rounding.
"""

import os

from . import numpy_backend

try:
    from . import _fastcore
except ImportError:
    _fastcore = None

_choice = os.environ.get("AMUN_BACKEND", "auto")
if _choice == "compiled" and _fastcore is None:
    raise RuntimeError("AMUN_BACKEND=compiled but the extension is not built; "
                       "run: python3 setup.py build_ext --inplace")
if _choice not in ("auto", "python", "compiled"):
    raise RuntimeError(f"AMUN_BACKEND must be auto|python|compiled, got {_choice!r}")

# below this many multiply-accumulates per call, scalar loops beat BLAS
_SMALL_WORK = 50_000


def _macs(widths, n):
    return n * sum(i * o for i, o in zip(widths[:-1], widths[1:]))


def _pick(widths, n):
    if _choice == "python" or _fastcore is None:
        return numpy_backend
    if _choice == "compiled":
        return _fastcore
    return _fastcore if _macs(widths, n) < _SMALL_WORK else numpy_backend


def forward_batch(params, widths, X):
    return _pick(widths, X.shape[0]).forward_batch(params, widths, X)


def loss_and_grads(params, widths, X, y, want_params=True, want_inputs=False):
    return _pick(widths, X.shape[0]).loss_and_grads(
        params, widths, X, y, want_params, want_inputs)


layer_slices = numpy_backend.layer_slices
param_count = numpy_backend.param_count


def active_backend():
    """'numpy', 'compiled', or 'auto' (size-dispatched) as currently wired."""
    if _choice == "python" or _fastcore is None:
        return "numpy"
    if _choice == "compiled":
        return "compiled"
    return "auto"
