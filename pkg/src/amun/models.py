"""Small deterministic classifiers: logistic regression and ReLU MLPs.

Parameters live in one flat float64 vector (per layer: row-major weights,
then biases). The loss is the *unnormalized sum* of per-sample
cross-entropies; SGD steps divide the batch gradient by the batch size so
learning rates stay in a familiar range.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import backends


class TrainingDiverged(Exception):
    """Loss became non-finite; carries the epoch/batch it happened in."""

    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor. logistic = single linear layer + softmax."""

    kind: str                     # "logistic" | "mlp"
    layer_widths: tuple           # input d, hidden sizes, output m
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")
        if len(self.layer_widths) < 2 or any(w < 1 for w in self.layer_widths):
            raise ValueError("layer_widths needs >= 2 positive entries")
        if self.kind == "logistic" and len(self.layer_widths) != 2:
            raise ValueError("logistic models have exactly two widths (d, m)")

    @property
    def dim(self):
        return self.layer_widths[0]

    @property
    def num_classes(self):
        return self.layer_widths[-1]

    @property
    def param_count(self):
        return backends.param_count(self.layer_widths)

    def descriptor(self):
        widths = ",".join(str(w) for w in self.layer_widths)
        return f"{self.kind} {widths} {self.activation}"

    @staticmethod
    def from_descriptor(text):
        parts = text.split()
        if len(parts) != 3:
            raise ValueError(f"bad spec descriptor {text!r}")
        return ModelSpec(parts[0], tuple(int(w) for w in parts[1].split(",")), parts[2])


@dataclass
class ModelState:
    """Flat parameter vector tied to its architecture."""

    spec: ModelSpec
    params: np.ndarray
    rng_seed: int
    last_train_loss: float = field(default=None, compare=False)
    last_train_acc: float = field(default=None, compare=False)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.param_count,):
            raise ValueError(
                f"params length {self.params.size} != spec count {self.spec.param_count}")
        if not np.isfinite(self.params).all():
            raise ValueError("params contain non-finite values")

    def copy(self):
        return ModelState(self.spec, self.params.copy(), self.rng_seed)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int = 64
    scheduler: tuple = None       # None or ("step", period, factor)
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.scheduler is not None:
            name, period, factor = self.scheduler
            if name != "step" or int(period) < 1 or not 0.0 < float(factor) <= 1.0:
                raise ValueError(f"bad scheduler {self.scheduler!r}")


def init_params(spec, seed):
    """Uniform weights scaled by 1/sqrt(fan_in), biases zero. Deterministic."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.param_count, dtype=np.float64)
    widths = spec.layer_widths
    for (w0, w1, _), fan_in in zip(backends.layer_slices(widths), widths[:-1]):
        bound = 1.0 / np.sqrt(fan_in)
        params[w0:w1] = rng.uniform(-bound, bound, size=w1 - w0)
    return ModelState(spec, params, seed)


def forward(state, x):
    """(logits, probs) for one input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (state.spec.dim,):
        raise ValueError(f"input has shape {x.shape}, model wants ({state.spec.dim},)")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    logits = backends.forward_batch(state.params, state.spec.layer_widths,
                                    x.reshape(1, -1))[0]
    return logits, softmax(logits)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def batch_logits(state, X):
    return backends.forward_batch(state.params, state.spec.layer_widths,
                                  np.ascontiguousarray(X, dtype=np.float64))


def predict(state, X):
    return np.argmax(batch_logits(state, X), axis=1)


def loss_and_grads(state, X, y, want_params=True, want_inputs=False):
    """Sum cross-entropy over the batch plus requested gradients."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if X.shape[1] != state.spec.dim:
        raise ValueError(f"batch dim {X.shape[1]} != model dim {state.spec.dim}")
    return backends.loss_and_grads(state.params, state.spec.layer_widths, X, y,
                                   want_params, want_inputs)


def dataset_loss_and_grads(state, data, idx, want_params=True, want_inputs=False):
    X, y = data.rows(idx)
    return loss_and_grads(state, X, y, want_params, want_inputs)


def per_sample_losses(state, X, y):
    """Cross-entropy of each row separately (the summed loss's terms)."""
    z = batch_logits(state, X)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return lse - z[np.arange(len(y)), np.asarray(y, dtype=np.int64)]


def epoch_learning_rate(learning_rate, scheduler, epoch):
    if scheduler is None:
        return learning_rate
    _, period, factor = scheduler
    return learning_rate * float(factor) ** (epoch // int(period))


def run_sgd(params, widths, X, y, *, epochs, learning_rate, batch_size,
            scheduler=None, weight_decay=0.0, seed=0, mask=None,
            direction=1.0, l1_lambda=0.0):
    """Mini-batch SGD on the mean cross-entropy of (X, y).

    Shared engine for training, fine-tuning (optionally masked), gradient
    ascent (direction=-1), and the L1-penalized variant. When batch_size
    covers the whole set the epoch permutation is skipped (one batch per
    epoch; shuffling would only perturb float summation order).
    """
    params = params.copy()
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        lr = epoch_learning_rate(learning_rate, scheduler, epoch)
        order = np.arange(n) if batch_size >= n else rng.permutation(n)
        for bi, start in enumerate(range(0, n, batch_size)):
            take = order[start:start + batch_size]
            loss, grad, _ = backends.loss_and_grads(
                params, widths, np.ascontiguousarray(X[take]),
                np.ascontiguousarray(y[take]), True, False)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, bi)
            grad /= take.size
            if weight_decay:
                grad += weight_decay * params
            if l1_lambda:
                grad += l1_lambda * np.sign(params)
            if mask is not None:
                grad *= mask
            params -= direction * lr * grad
    return params


def train(spec, data, idx, cfg):
    """Train from a fresh seeded init; deterministic for fixed inputs.

    The returned state carries the final full-pass train loss and accuracy.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("training index set is empty")
    X, y = data.rows(idx)
    state = init_params(spec, cfg.seed)
    params = run_sgd(state.params, spec.layer_widths, X, y,
                     epochs=cfg.epochs, learning_rate=cfg.learning_rate,
                     batch_size=cfg.batch_size, scheduler=cfg.scheduler,
                     weight_decay=cfg.weight_decay, seed=cfg.seed)
    out = ModelState(spec, params, cfg.seed)
    loss, _, _ = loss_and_grads(out, X, y, want_params=False)
    out.last_train_loss = loss
    out.last_train_acc = float(np.mean(predict(out, X) == y))
    return out


def accuracy(state, data, idx):
    """Fraction of rows whose argmax prediction equals the label."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("accuracy over an empty index set")
    X, y = data.rows(idx)
    return float(np.mean(predict(state, X) == y))


def fingerprint(state):
    """Short stable hash of (architecture, parameters)."""
    h = hashlib.sha256()
    h.update(state.spec.descriptor().encode())
    h.update(state.params.tobytes())
    return h.hexdigest()[:16]
