"""Membership-inference evaluation: accuracy triple, threshold MIS,
shadow-ensemble likelihood-ratio scores, AUCs, and the gap against a
retrained reference.

Shadow scoring uses soft-margin Taylor-softmax confidences: the true-class
logit is penalized by a margin, logits are divided by a temperature, and
exp is replaced by its truncated (even-order) Taylor expansion before
normalizing. A sample's ratio compares the target model's confidence to the
mean confidence of the reference models that never saw the sample; its
score is the fraction of population samples whose ratio it dominates by a
factor gamma.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from .models import accuracy, batch_logits, softmax, train


@dataclass(frozen=True)
class MiaConfig:
    gamma: float = 2.0
    temperature: float = 2.0
    taylor_order: int = 2
    taylor_margin: float = 0.6

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.taylor_order < 2 or self.taylor_order % 2:
            raise ValueError("taylor_order must be even and >= 2")


DEFAULT_MIA = MiaConfig()

P_CLIP = 1e-12


def phi_scale(p):
    """Log-odds of the true-class probability, clipped away from {0,1}."""
    p = np.clip(p, P_CLIP, 1.0 - P_CLIP)
    return np.log(p / (1.0 - p))


def phi_inverse(v):
    return 1.0 / (1.0 + np.exp(-np.asarray(v, dtype=np.float64)))


def _truncated_exp(z, order):
    out = np.ones_like(z)
    term = np.ones_like(z)
    for k in range(1, order + 1):
        term = term * z / k
        out = out + term
    return out


def taylor_confidences(logits, y, cfg=DEFAULT_MIA):
    """Soft-margin Taylor-softmax share of the true class, batched.

    Logits are clamped to +-1e15 first so z**order cannot overflow for any
    sane order; beyond that scale the share is saturated anyway.
    """
    z = np.clip(np.asarray(logits, dtype=np.float64), -1e15, 1e15)
    if z.ndim == 1:
        z = z.reshape(1, -1).copy()
    else:
        z = z.copy()
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rows = np.arange(z.shape[0])
    z[rows, y] -= cfg.taylor_margin
    z /= cfg.temperature
    t = _truncated_exp(z, cfg.taylor_order)
    assert t.min() > 0.0, "even-order truncated exp went non-positive"
    return t[rows, y] / t.sum(axis=1)


def sm_taylor_softmax(logits, true_class, temperature=2.0, order=2, margin=0.6):
    """Single-vector convenience wrapper around taylor_confidences."""
    cfg = MiaConfig(temperature=temperature, taylor_order=order, taylor_margin=margin)
    return float(taylor_confidences(np.asarray(logits), int(true_class), cfg)[0])


def auc(pos_scores, neg_scores):
    """Mann-Whitney AUC, (wins + 0.5*ties) / (|pos|*|neg|), via midranks."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs non-empty score sets on both sides")
    both = np.concatenate([pos, neg])
    order = np.argsort(both, kind="mergesort")
    sv = both[order]
    ranks = np.empty(both.size, dtype=np.float64)
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    r_pos = ranks[:pos.size].sum()
    u = r_pos - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass
class ConfidenceRecord:
    sample_id: int
    phi: float
    raw_p: float
    membership: str   # retain | forget | test


@dataclass
class ShadowEnsemble:
    """K reference models; every pool sample is held out of exactly K/2."""

    models: list
    inclusion: np.ndarray       # (K, n_pool) bool
    population_idx: np.ndarray  # pool rows used as the comparison set Z
    pool: object                # the LabeledDataset the ensemble was built on
    train_offset: int           # pool row where held-out rows begin

    def __post_init__(self):
        self.inclusion = np.ascontiguousarray(self.inclusion, dtype=bool)
        self.population_idx = np.ascontiguousarray(self.population_idx, dtype=np.int64)
        k = len(self.models)
        if k % 2 or k < 2:
            raise ValueError("shadow count K must be even and >= 2")
        if self.inclusion.shape != (k, self.pool.n):
            raise ValueError("inclusion matrix shape mismatch")
        if not (self.inclusion.sum(axis=0) == k // 2).all():
            raise ValueError("each pool sample must appear in exactly K/2 models")
        self._conf_cache = {}

    def out_mean_conf(self, cfg=DEFAULT_MIA):
        """Per-pool-sample mean confidence over the models that exclude it."""
        key = (cfg.temperature, cfg.taylor_order, cfg.taylor_margin)
        if key not in self._conf_cache:
            X = self.pool.features
            y = self.pool.labels
            conf = np.stack([taylor_confidences(batch_logits(m, X), y, cfg)
                             for m in self.models])
            out = ~self.inclusion
            self._conf_cache[key] = (conf * out).sum(axis=0) / out.sum(axis=0)
        return self._conf_cache[key]


def train_shadow_ensemble(spec, data, K, cfg, seed, population_idx=None,
                          train_offset=None):
    """Balanced half-inclusion ensemble, deterministic given seed."""
    if K % 2 or K < 2:
        raise ValueError("K must be even and >= 2")
    rng = np.random.default_rng(seed)
    n = data.n
    half = np.zeros(K, dtype=bool)
    half[:K // 2] = True
    inclusion = np.empty((K, n), dtype=bool)
    for j in range(n):
        inclusion[:, j] = half[rng.permutation(K)]
    models = []
    for k in range(K):
        rows = np.flatnonzero(inclusion[k])
        models.append(train(spec, data, rows, replace(cfg, seed=seed * 1000003 + k)))
    if population_idx is None:
        population_idx = np.array([], dtype=np.int64)
    return ShadowEnsemble(models, inclusion,
                          np.asarray(population_idx, dtype=np.int64),
                          data, data.n if train_offset is None else train_offset)


def _target_ratios(target, ens, pool_rows, cfg):
    pool_rows = np.asarray(pool_rows, dtype=np.int64)
    X, y = ens.pool.rows(pool_rows)
    conf_t = taylor_confidences(batch_logits(target, X), y, cfg)
    out_mean = ens.out_mean_conf(cfg)[pool_rows]
    return conf_t / out_mean


def rmia_scores(target, ens, pool_rows, gamma=None, cfg=DEFAULT_MIA):
    """Batch scores: fraction of Z dominated by each sample at factor gamma."""
    gamma = cfg.gamma if gamma is None else gamma
    if ens.population_idx.size == 0:
        raise ValueError("ensemble has an empty population set")
    pop = _target_ratios(target, ens, ens.population_idx, cfg)
    ratios = _target_ratios(target, ens, pool_rows, cfg)
    return (ratios[:, None] / pop[None, :] >= gamma).mean(axis=1)


def rmia_score(target, ens, data, x_id, gamma=None, cfg=DEFAULT_MIA):
    """Score one sample identified by its pool id."""
    pos = np.flatnonzero(ens.pool.ids == x_id)
    if pos.size != 1:
        raise ValueError(f"sample id {x_id} not found in the ensemble pool")
    if (~ens.inclusion[:, pos[0]]).sum() == 0:
        raise ValueError(f"sample id {x_id} has no OUT reference models")
    return float(rmia_scores(target, ens, pos, gamma, cfg)[0])


def true_class_probs(state, X, y):
    probs = softmax(batch_logits(state, X))
    return probs[np.arange(len(y)), y]


def fit_member_threshold(member_conf, nonmember_conf):
    """Single threshold maximizing balanced accuracy for (>= thr -> member).

    Returns (threshold, balanced_accuracy, degenerate). Ties in balanced
    accuracy resolve toward the smallest threshold.
    """
    member = np.sort(np.asarray(member_conf, dtype=np.float64))
    non = np.sort(np.asarray(nonmember_conf, dtype=np.float64))
    if member.size == 0 or non.size == 0:
        raise ValueError("need both member and non-member confidences")
    cand = np.unique(np.concatenate([member, non]))
    tpr = (member.size - np.searchsorted(member, cand, side="left")) / member.size
    tnr = np.searchsorted(non, cand, side="left") / non.size
    bal = 0.5 * (tpr + tnr)
    best = int(np.argmax(bal))  # argmax takes the first (smallest) maximizer
    degenerate = bool(cand.size == 1)
    return float(cand[best]), float(bal[best]), degenerate


def mis_score(target, train_data, test_data, split, return_flag=False):
    """Percentage of forget samples the fitted threshold calls members.

    The threshold is fit on phi-scaled true-class confidences of retain
    (member) vs held-out test (non-member) samples.
    """
    for name, idx in (("retain", split.retain_idx), ("forget", split.forget_idx),
                      ("test", split.test_idx)):
        if np.asarray(idx).size == 0:
            raise ValueError(f"mis_score needs a non-empty {name} set")
    Xr, yr = train_data.rows(split.retain_idx)
    Xt, yt = test_data.rows(split.test_idx)
    Xf, yf = train_data.rows(split.forget_idx)
    thr, _, degenerate = fit_member_threshold(
        phi_scale(true_class_probs(target, Xr, yr)),
        phi_scale(true_class_probs(target, Xt, yt)))
    forget_phi = phi_scale(true_class_probs(target, Xf, yf))
    mis = 100.0 * float(np.mean(forget_phi >= thr))
    return (mis, degenerate) if return_flag else mis


@dataclass
class EvalReport:
    unlearn_acc: float
    retain_acc: float
    test_acc: float
    mis: float               # percent
    ft_auc: float = None     # forget-vs-test, in [0,1]
    fr_auc: float = None     # retain-vs-forget, in [0,1]
    avg_gap: float = None    # percent points, only with a retrain reference

    def __post_init__(self):
        for name in ("unlearn_acc", "retain_acc", "test_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        for name in ("ft_auc", "fr_auc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")

    @property
    def auc_gap(self):
        """fr_auc - ft_auc; large means forget looks like test, not retain."""
        if self.ft_auc is None or self.fr_auc is None:
            return None
        return self.fr_auc - self.ft_auc


EVAL_CSV_COLUMNS = ("method", "seed", "fraction", "access", "unlearn_acc",
                    "retain_acc", "test_acc", "mis", "ft_auc", "fr_auc", "avg_gap")


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def eval_csv_row(report, method, seed, fraction, access):
    return ",".join([method, str(seed), f"{fraction:g}", access,
                     _fmt(report.unlearn_acc), _fmt(report.retain_acc),
                     _fmt(report.test_acc), _fmt(report.mis),
                     _fmt(report.ft_auc), _fmt(report.fr_auc),
                     _fmt(report.avg_gap)])


def average_gap(report, ref):
    """Mean absolute difference of the four headline numbers, in percent.

    Accuracies and AUCs are put on the percent scale; the MIA slot uses
    ft_auc when both sides have one, else the threshold MIS.
    """
    diffs = [100.0 * abs(report.unlearn_acc - ref.unlearn_acc),
             100.0 * abs(report.retain_acc - ref.retain_acc),
             100.0 * abs(report.test_acc - ref.test_acc)]
    if report.ft_auc is not None and ref.ft_auc is not None:
        diffs.append(100.0 * abs(report.ft_auc - ref.ft_auc))
    else:
        diffs.append(abs(report.mis - ref.mis))
    return float(np.mean(diffs))


def evaluate(target, train_data, test_data, split, ens=None, retrain_ref=None,
             cfg=DEFAULT_MIA):
    """All headline quantities for one model against one split."""
    rep = EvalReport(
        unlearn_acc=accuracy(target, train_data, split.forget_idx),
        retain_acc=accuracy(target, train_data, split.retain_idx),
        test_acc=accuracy(target, test_data, split.test_idx),
        mis=mis_score(target, train_data, test_data, split),
    )
    if ens is not None:
        if ens.pool.n != train_data.n + test_data.n or ens.train_offset != train_data.n:
            raise ValueError("ensemble pool does not match train+test datasets")
        forget_rows = np.asarray(split.forget_idx, dtype=np.int64)
        retain_rows = np.asarray(split.retain_idx, dtype=np.int64)
        test_rows = ens.train_offset + np.asarray(split.test_idx, dtype=np.int64)
        s_forget = rmia_scores(target, ens, forget_rows, cfg=cfg)
        s_retain = rmia_scores(target, ens, retain_rows, cfg=cfg)
        s_test = rmia_scores(target, ens, test_rows, cfg=cfg)
        rep.ft_auc = auc(s_forget, s_test)
        rep.fr_auc = auc(s_retain, s_forget)
    if retrain_ref is not None:
        if ens is None and retrain_ref.ft_auc is not None:
            raise ValueError("retrain reference has AUCs but no ensemble was given")
        rep.avg_gap = average_gap(rep, retrain_ref)
    return rep


def confidence_records(target, train_data, test_data, split):
    """Raw and phi-scaled true-class confidences for histogram dumps."""
    out = []
    for name, data, idx in (("retain", train_data, split.retain_idx),
                            ("forget", train_data, split.forget_idx),
                            ("test", test_data, split.test_idx)):
        X, y = data.rows(idx)
        raw = np.clip(true_class_probs(target, X, y), P_CLIP, 1.0 - P_CLIP)
        phi = phi_scale(raw)
        ids = data.ids[np.asarray(idx, dtype=np.int64)]
        out.extend(ConfidenceRecord(int(i), float(p), float(r), name)
                   for i, p, r in zip(ids, phi, raw))
    return out


def save_confidences(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "membership", "raw_p", "phi"])
        for r in records:
            w.writerow([r.sample_id, r.membership, f"{r.raw_p:.12g}", f"{r.phi:.12g}"])
