"""Minimal-radius L2 adversarial examples and the doubling-loop set builder.

The builder runs the configured attack at eps, 2*eps, 4*eps, ... until the
attacked point is misclassified relative to the *true* label, then records
it with the label the source model assigns. Samples the model already gets
wrong are attacked all the same.
"""

import base64
from dataclasses import dataclass, field

import numpy as np

from .data import FormatError
from .models import fingerprint, loss_and_grads, predict

ADVSET_MAGIC = "AMUN-ADVSET v1"
_DEADLOCK_OFFSET = 1e-6  # deterministic nudge out of zero-gradient starts


class AttackFailure(Exception):
    """No adversarial example within max_doublings for some samples."""

    def __init__(self, failed_ids):
        super().__init__(f"attack failed for sample ids {sorted(failed_ids)}")
        self.failed_ids = tuple(failed_ids)


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"             # "pgd" | "ffgsm"
    steps: int = 50
    step_fraction: float = 0.1    # step size = step_fraction * eps
    eps_init: float = None        # None -> default_eps_init(data)
    max_doublings: int = 20
    clamp_box: tuple = (0.0, 1.0)  # per-dimension (lo, hi), or None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pgd", "ffgsm"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.step_fraction <= 1.0:
            raise ValueError("step_fraction must be in (0,1]")
        if self.eps_init is not None and self.eps_init <= 0:
            raise ValueError("eps_init must be positive")
        if self.max_doublings < 1:
            raise ValueError("max_doublings must be >= 1")


@dataclass
class AdvRecord:
    orig_id: int
    x_adv: np.ndarray
    y_adv: int
    y_true: int
    delta: float     # ||x - x_adv||_2
    eps_used: float

    def __post_init__(self):
        self.x_adv = np.ascontiguousarray(self.x_adv, dtype=np.float64)
        if self.y_adv == self.y_true:
            raise ValueError("adversarial label equals the true label")
        if self.delta > self.eps_used + 1e-9:
            raise ValueError("perturbation exceeds the radius it was found at")


@dataclass
class AdvSet:
    records: list
    source_model_fingerprint: str
    failed_ids: tuple = ()

    @property
    def ids(self):
        return np.array([r.orig_id for r in self.records], dtype=np.int64)

    def features(self):
        return np.stack([r.x_adv for r in self.records])

    def labels(self):
        return np.array([r.y_adv for r in self.records], dtype=np.int64)

    def by_id(self):
        return {r.orig_id: r for r in self.records}


def _clamp(x, box):
    if box is None:
        return x
    return np.clip(x, box[0], box[1])


def _project_ball(x, center, eps):
    d = x - center
    norm = float(np.linalg.norm(d))
    if norm > eps:
        x = center + d * (eps / norm)
    return x


def _input_grad(state, x, y):
    _, _, gx = loss_and_grads(state, x.reshape(1, -1), np.array([y]),
                              want_params=False, want_inputs=True)
    return gx[0]


def pgd_l2(state, x, y, eps, cfg, record_trace=False):
    """Loss ascent on the true label inside the eps L2 ball around x.

    Starts at x exactly; each step moves step_fraction*eps along the
    normalized input gradient, then projects onto the ball and the clamp
    box. A zero gradient at the start is broken by a deterministic tiny
    offset; if it stays zero the point is returned as-is.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    cur = x.copy()
    step = cfg.step_fraction * eps
    trace = []
    for _ in range(cfg.steps):
        g = _input_grad(state, cur, y)
        gn = float(np.linalg.norm(g))
        if gn == 0.0:
            cur = _clamp(_project_ball(cur + _DEADLOCK_OFFSET, x, eps), cfg.clamp_box)
            g = _input_grad(state, cur, y)
            gn = float(np.linalg.norm(g))
            if gn == 0.0:
                break
        cur = cur + (step / gn) * g
        cur = _clamp(_project_ball(cur, x, eps), cfg.clamp_box)
        if record_trace:
            trace.append(cur.copy())
    return (cur, trace) if record_trace else cur


_FFGSM_RESTARTS = 5


def ffgsm_search(state, x, y, eps, cfg, record_trace=False):
    """Sign-gradient search: one gradient per restart, early exit on a flip.

    Each restart r > 0 starts from a small seeded random offset, recomputes
    the gradient sign there, and walks that fixed direction in
    step_fraction*eps increments, projecting onto the eps ball and the box.
    Deterministic given cfg.seed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    step = cfg.step_fraction * eps
    trace = []
    last = x.copy()
    for restart in range(_FFGSM_RESTARTS):
        if restart == 0:
            cur = x.copy()
        else:
            cur = _clamp(_project_ball(
                x + rng.normal(0.0, 0.1 * eps, size=x.shape), x, eps), cfg.clamp_box)
        g = _input_grad(state, cur, y)
        direction = np.sign(g)
        dn = float(np.linalg.norm(direction))
        if dn == 0.0:
            last = cur
            continue
        direction /= dn
        for _ in range(cfg.steps):
            cur = _clamp(_project_ball(cur + step * direction, x, eps), cfg.clamp_box)
            if record_trace:
                trace.append(cur.copy())
            if int(predict(state, cur.reshape(1, -1))[0]) != y:
                return (cur, trace) if record_trace else cur
        last = cur
    return (last, trace) if record_trace else last


def default_eps_init(data):
    """1% of the median nearest-neighbor distance of the training set."""
    med = median_nn_distance(data.rows(np.arange(data.n))[0])
    if med == 0.0:
        raise ValueError("degenerate dataset: median nearest-neighbor distance is 0")
    return 0.01 * med


def median_nn_distance(X):
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d2, np.inf)
    return float(np.median(np.sqrt(np.maximum(d2.min(axis=1), 0.0))))


def _attack_fn(cfg):
    return pgd_l2 if cfg.kind == "pgd" else ffgsm_search


def build_adversarial_set(state, cfg, data, forget_idx, strict=True):
    """Per-sample doubling loop; one record per forget sample.

    With strict=True any per-sample failure raises AttackFailure; otherwise
    failures are collected on the returned set's failed_ids.
    """
    forget_idx = np.asarray(forget_idx, dtype=np.int64)
    if forget_idx.size == 0:
        raise ValueError("forget index set is empty")
    eps_init = cfg.eps_init if cfg.eps_init is not None else default_eps_init(data)
    attack = _attack_fn(cfg)
    X, y = data.rows(forget_idx)
    ids = data.ids[forget_idx]
    records, failed = [], []
    for i in range(forget_idx.size):
        eps = eps_init
        found = None
        for _ in range(cfg.max_doublings):
            cand = attack(state, X[i], int(y[i]), eps, cfg)
            y_adv = int(predict(state, cand.reshape(1, -1))[0])
            if y_adv != int(y[i]):
                found = (cand, y_adv, eps)
                break
            eps = 2.0 * eps
        if found is None:
            failed.append(int(ids[i]))
            continue
        cand, y_adv, eps = found
        records.append(AdvRecord(int(ids[i]), cand, y_adv, int(y[i]),
                                 float(np.linalg.norm(cand - X[i])), eps))
    if failed and strict:
        raise AttackFailure(failed)
    return AdvSet(records, fingerprint(state), tuple(failed))


@dataclass
class DistanceReport:
    delta_min: float
    delta_median: float
    delta_max: float
    nn_median: float
    crowded: bool    # flagged when median delta >= median NN distance


def distance_report(adv, data):
    """Perturbation sizes vs the dataset's own nearest-neighbor scale."""
    if not adv.records:
        raise ValueError("empty adversarial set")
    deltas = np.array([r.delta for r in adv.records])
    nn_med = median_nn_distance(data.rows(np.arange(data.n))[0])
    d_med = float(np.median(deltas))
    return DistanceReport(float(deltas.min()), d_med, float(deltas.max()),
                          nn_med, d_med >= nn_med)


def save_advset(adv, path):
    """Versioned text format; float fields use repr so loads are bit-exact."""
    lines = [ADVSET_MAGIC, f"fingerprint,{adv.source_model_fingerprint}"]
    for r in adv.records:
        payload = base64.b64encode(
            np.ascontiguousarray(r.x_adv, dtype="<f8").tobytes()).decode("ascii")
        lines.append(f"{r.orig_id},{r.y_true},{r.y_adv},{r.eps_used!r},{r.delta!r},{payload}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_advset(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != ADVSET_MAGIC:
        raise FormatError(f"{path}: missing {ADVSET_MAGIC!r} header")
    if len(lines) < 2 or not lines[1].startswith("fingerprint,"):
        raise FormatError(f"{path}: missing fingerprint line")
    fp = lines[1].split(",", 1)[1]
    records = []
    for ln in lines[2:]:
        if not ln:
            continue
        try:
            orig_id, y_true, y_adv, eps_used, delta, payload = ln.split(",")
            x_adv = np.frombuffer(base64.b64decode(payload), dtype="<f8").copy()
            records.append(AdvRecord(int(orig_id), x_adv, int(y_adv), int(y_true),
                                     float(delta), float(eps_used)))
        except (ValueError, base64.binascii.Error) as exc:
            raise FormatError(f"{path}: bad record line {ln!r}") from exc
    return AdvSet(records, fp)
