# Fused MLP kernel: forward, sum cross-entropy, and backward in C loops.
# Mirrors numpy_backend exactly at the contract level; last-ulp rounding may
# differ from BLAS, so cross-backend comparisons use tolerances.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

NAME = "compiled"


def layer_slices(widths):
    out = []
    pos = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w_end = pos + fan_in * fan_out
        out.append((pos, w_end, w_end + fan_out))
        pos = w_end + fan_out
    return out


def param_count(widths):
    return sum(i * o + o for i, o in zip(widths[:-1], widths[1:]))


cdef void _dense_forward(double[:, ::1] h, double[::1] params,
                         Py_ssize_t w0, Py_ssize_t fan_in, Py_ssize_t fan_out,
                         double[:, ::1] z, bint relu) noexcept nogil:
    cdef Py_ssize_t n = h.shape[0]
    cdef Py_ssize_t i, j, k, b0
    cdef double a
    b0 = w0 + fan_in * fan_out
    for i in range(n):
        for j in range(fan_out):
            z[i, j] = params[b0 + j]
        for k in range(fan_in):
            a = h[i, k]
            if a != 0.0:
                for j in range(fan_out):
                    z[i, j] += a * params[w0 + k * fan_out + j]
        if relu:
            for j in range(fan_out):
                if z[i, j] < 0.0:
                    z[i, j] = 0.0


def forward_batch(double[::1] params, widths, double[:, ::1] X):
    cdef list slices = layer_slices(widths)
    cdef Py_ssize_t nlayer = len(slices)
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t li
    cur = np.asarray(X)
    for li in range(nlayer):
        w0, _, _ = slices[li]
        z = np.empty((n, widths[li + 1]), dtype=np.float64)
        _dense_forward(cur, params, w0, widths[li], widths[li + 1],
                       z, li < nlayer - 1)
        cur = z
    return cur


def loss_and_grads(double[::1] params, widths, double[:, ::1] X,
                   long[::1] y, bint want_params=True, bint want_inputs=False):
    cdef list slices = layer_slices(widths)
    cdef Py_ssize_t nlayer = len(slices)
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t m = widths[nlayer]
    cdef Py_ssize_t i, j, k, li, fan_in, fan_out, w0, b0
    cdef double zmax, s, a, loss = 0.0

    # forward, keeping post-activation h of every layer (acts[0] is X)
    acts = [np.asarray(X)]
    cdef double[:, ::1] cur = X
    cdef double[:, ::1] znew
    for li in range(nlayer):
        w0 = slices[li][0]
        zarr = np.empty((n, widths[li + 1]), dtype=np.float64)
        znew = zarr
        _dense_forward(cur, params, w0, widths[li], widths[li + 1],
                       znew, li < nlayer - 1)
        acts.append(zarr)
        cur = znew

    # softmax + summed cross-entropy, rewriting logits into delta = p - onehot
    darr = np.array(acts[nlayer], dtype=np.float64, copy=True)
    cdef double[:, ::1] delta = darr
    with nogil:
        for i in range(n):
            zmax = delta[i, 0]
            for j in range(1, m):
                if delta[i, j] > zmax:
                    zmax = delta[i, j]
            s = 0.0
            for j in range(m):
                s += exp(delta[i, j] - zmax)
            loss += log(s) + zmax - delta[i, y[i]]
            for j in range(m):
                delta[i, j] = exp(delta[i, j] - zmax) / s
            delta[i, y[i]] -= 1.0

    if not (want_params or want_inputs):
        return loss, None, None

    gp_arr = np.zeros(params.shape[0], dtype=np.float64) if want_params else None
    cdef double[::1] gp
    if want_params:
        gp = gp_arr
    cdef double[:, ::1] h_prev, pre_prev, dprev

    for li in range(nlayer - 1, -1, -1):
        fan_in = widths[li]
        fan_out = widths[li + 1]
        w0 = slices[li][0]
        b0 = w0 + fan_in * fan_out
        h_prev = acts[li]
        if want_params:
            with nogil:
                for i in range(n):
                    for k in range(fan_in):
                        a = h_prev[i, k]
                        if a != 0.0:
                            for j in range(fan_out):
                                gp[w0 + k * fan_out + j] += a * delta[i, j]
                    for j in range(fan_out):
                        gp[b0 + j] += delta[i, j]
        if li > 0 or want_inputs:
            dprev_arr = np.zeros((n, fan_in), dtype=np.float64)
            dprev = dprev_arr
            with nogil:
                for i in range(n):
                    for j in range(fan_out):
                        a = delta[i, j]
                        if a != 0.0:
                            for k in range(fan_in):
                                dprev[i, k] += a * params[w0 + k * fan_out + j]
            if li > 0:
                # ReLU mask: acts[li] is post-activation, zero iff pre <= 0
                with nogil:
                    for i in range(n):
                        for k in range(fan_in):
                            if h_prev[i, k] <= 0.0:
                                dprev[i, k] = 0.0
            delta = dprev
            darr = dprev_arr

    gx = darr if want_inputs else None
    return loss, gp_arr, gx
