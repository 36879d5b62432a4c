"""Vectorized numpy implementation of the MLP kernel contract.

Both backends expose the same two functions over the flat parameter layout
(per layer: row-major weight matrix, then bias vector):

    forward_batch(params, widths, X)       -> logits
    loss_and_grads(params, widths, X, y,
                   want_params, want_inputs) -> (loss_sum, gP, gX)

Loss is the unnormalized sum of per-sample cross-entropies; callers divide
by the batch size themselves when they want mean-gradient SGD steps.
ReLU derivative at exactly zero is taken as zero.
"""

import numpy as np

NAME = "numpy"


def layer_slices(widths):
    """Offsets of each layer's (W, b) block inside the flat vector."""
    out = []
    pos = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w_end = pos + fan_in * fan_out
        out.append((pos, w_end, w_end + fan_out))
        pos = w_end + fan_out
    return out


def param_count(widths):
    return sum(i * o + o for i, o in zip(widths[:-1], widths[1:]))


def _unpack(params, widths):
    mats = []
    for (w0, w1, b1), fan_in, fan_out in zip(
        layer_slices(widths), widths[:-1], widths[1:]
    ):
        mats.append((params[w0:w1].reshape(fan_in, fan_out), params[w1:b1]))
    return mats


def forward_batch(params, widths, X):
    """Logits for a batch; hidden layers use ReLU, output is linear."""
    h = X
    mats = _unpack(params, widths)
    for li, (W, b) in enumerate(mats):
        z = h @ W + b
        h = np.maximum(z, 0.0) if li < len(mats) - 1 else z
    return h


def _softmax_and_loss(logits, y):
    # max-subtraction keeps exp() finite for the extreme logits attacks create
    zmax = logits.max(axis=1, keepdims=True)
    shifted = logits - zmax
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    probs = expz / denom
    lse = np.log(denom[:, 0]) + zmax[:, 0]
    loss = float(np.sum(lse - logits[np.arange(len(y)), y]))
    return probs, loss


def loss_and_grads(params, widths, X, y, want_params=True, want_inputs=False):
    """Sum cross-entropy and its gradients wrt parameters and/or inputs."""
    mats = _unpack(params, widths)
    nlayer = len(mats)

    acts = [X]
    pre = []
    h = X
    for li, (W, b) in enumerate(mats):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if li < nlayer - 1 else z
        acts.append(h)

    probs, loss = _softmax_and_loss(acts[-1], y)

    if not (want_params or want_inputs):
        return loss, None, None

    delta = probs.copy()
    delta[np.arange(len(y)), y] -= 1.0

    grad_params = np.zeros_like(params) if want_params else None
    slices = layer_slices(widths)
    for li in range(nlayer - 1, -1, -1):
        W, _ = mats[li]
        if want_params:
            w0, w1, b1 = slices[li]
            grad_params[w0:w1] = (acts[li].T @ delta).ravel()
            grad_params[w1:b1] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ W.T) * (pre[li - 1] > 0.0)
        elif want_inputs:
            delta = delta @ W.T

    grad_inputs = delta if want_inputs else None
    return loss, grad_params, grad_inputs
