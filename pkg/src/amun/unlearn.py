"""Unlearning methods: adversarial fine-tuning plus the standard baselines.

The adversarial route fine-tunes on the union of the available original
samples and the adversarial set (each adversarial point keeps the label the
source model gave it). Baselines: plain fine-tuning (ft), random relabeling
(rl), gradient ascent (ga), boundary shrink (bs), L1-penalized fine-tuning
(l1_sparse), saliency-masked relabeling (salun), and exact retraining.
"""

from dataclasses import dataclass, replace

import numpy as np

from .attacks import build_adversarial_set
from .data import LabeledDataset, SplitSpec
from .models import (ModelState, batch_logits, dataset_loss_and_grads,
                     fingerprint, loss_and_grads, predict, run_sgd, train)

ADV_METHODS = ("amun", "amun_salun")
SALUN_FAMILY = ("amun_salun", "salun")
RETAIN_ONLY_METHODS = ("ft", "l1_sparse")
ALL_METHODS = ("amun", "amun_salun", "ft", "rl", "ga", "bs", "l1_sparse",
               "salun", "retrain")


@dataclass(frozen=True)
class UnlearnConfig:
    method: str
    has_retain_access: bool = True
    epochs: int = 10
    learning_rate: float = 0.01
    scheduler: tuple = None
    salun_ratio: float = None        # only for salun-family methods
    l1_lambda: float = None          # only for l1_sparse
    large_forget_variant: bool = None  # None -> auto at forget_fraction >= 0.5
    seed: int = 0
    batch_size: int = 64
    allow_transfer: bool = False     # accept an AdvSet built on another model
    bs_eps: float = None             # FGSM step for bs; None -> attack default

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ValueError(f"unknown unlearning method {self.method!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.salun_ratio is not None:
            if self.method not in SALUN_FAMILY:
                raise ValueError("salun_ratio is only valid for salun-family methods")
            if not 0.1 <= self.salun_ratio <= 0.9:
                raise ValueError("salun_ratio must be in [0.1, 0.9]")
        if self.l1_lambda is not None:
            if self.method != "l1_sparse":
                raise ValueError("l1_lambda is only valid for l1_sparse")
            if self.l1_lambda < 0:
                raise ValueError("l1_lambda must be >= 0")


@dataclass
class SaliencyMask:
    bits: np.ndarray   # bool, aligned to the flat parameter vector
    ratio: float       # fraction actually masked

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=bool)


def salun_mask(state, data, forget_idx, ratio):
    """Top-|gradient| parameter mask wrt the forget set at current params.

    Ties break toward the lower parameter index.
    """
    if not 0.1 <= ratio <= 0.9:
        raise ValueError("ratio must be in [0.1, 0.9]")
    _, grad, _ = dataset_loss_and_grads(state, data, forget_idx)
    mag = np.abs(grad)
    if mag.max() == 0.0:
        raise ValueError("all-zero forget gradient: saliency mask undefined")
    k = round(ratio * mag.size)
    order = np.argsort(-mag, kind="stable")
    bits = np.zeros(mag.size, dtype=bool)
    bits[order[:k]] = True
    return SaliencyMask(bits, k / mag.size)


def _adv_ids(ids):
    # adversarial copies get distinct negative ids so unions stay unique
    return -(np.asarray(ids, dtype=np.int64) + 1)


def _concat(parts, num_classes):
    X = np.vstack([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    ids = np.concatenate([p[2] for p in parts])
    return LabeledDataset(X, y, ids, num_classes)


def _use_large_variant(split, cfg):
    if cfg.large_forget_variant is not None:
        return cfg.large_forget_variant
    return split.forget_fraction >= 0.5


def assemble_finetune_set(data, split, adv, cfg, expected_fingerprint=None):
    """Union dataset the adversarial methods fine-tune on.

    retain access: D_R + D_F + D_A (large variant: D_R + D_A)
    forget only:   D_F + D_A       (large variant: D_A)
    """
    if expected_fingerprint is not None and not cfg.allow_transfer:
        if adv.source_model_fingerprint != expected_fingerprint:
            raise ValueError(
                "adversarial set was built on a different model "
                f"({adv.source_model_fingerprint} != {expected_fingerprint}); "
                "pass allow_transfer=True to use it anyway")
    forget_ids = data.ids[split.forget_idx]
    by_id = adv.by_id()
    missing = [int(i) for i in forget_ids if int(i) not in by_id]
    if missing:
        raise ValueError(f"adversarial set lacks records for forget ids {missing}")
    recs = [by_id[int(i)] for i in forget_ids]
    adv_part = (np.stack([r.x_adv for r in recs]),
                np.array([r.y_adv for r in recs], dtype=np.int64),
                _adv_ids(forget_ids))
    parts = []
    if cfg.has_retain_access:
        Xr, yr = data.rows(split.retain_idx)
        parts.append((Xr, yr, data.ids[split.retain_idx]))
    if not _use_large_variant(split, cfg):
        Xf, yf = data.rows(split.forget_idx)
        parts.append((Xf, yf, forget_ids))
    parts.append(adv_part)
    return _concat(parts, data.num_classes)


def fine_tune(state, dataset, cfg, mask=None, direction=1.0, l1_lambda=0.0):
    """SGD from the current parameters; masked entries are the only ones
    updated when a mask is given. epochs=0 is the identity."""
    if dataset.n == 0:
        raise ValueError("fine-tuning dataset is empty")
    X, y = dataset.rows(np.arange(dataset.n))
    m = None if mask is None else mask.bits.astype(np.float64)
    params = run_sgd(state.params, state.spec.layer_widths, X, y,
                     epochs=cfg.epochs, learning_rate=cfg.learning_rate,
                     batch_size=cfg.batch_size, scheduler=cfg.scheduler,
                     seed=cfg.seed, mask=m, direction=direction,
                     l1_lambda=l1_lambda)
    return ModelState(state.spec, params, state.rng_seed)


def _random_wrong_labels(y, num_classes, rng):
    # uniform over the m-1 labels != y
    draw = rng.integers(0, num_classes - 1, size=y.size)
    return np.where(draw >= y, draw + 1, draw).astype(np.int64)


def _fgsm_labels(state, X, y, eps):
    _, _, gx = loss_and_grads(state, X, y, want_params=False, want_inputs=True)
    return predict(state, X + eps * np.sign(gx))


def _relabeled_split_set(data, split, cfg, labels):
    forget_ids = data.ids[split.forget_idx]
    Xf, _ = data.rows(split.forget_idx)
    parts = []
    if cfg.has_retain_access:
        Xr, yr = data.rows(split.retain_idx)
        parts.append((Xr, yr, data.ids[split.retain_idx]))
    parts.append((Xf, labels, forget_ids))
    return _concat(parts, data.num_classes)


def unlearn(state, data, split, adv, cfg, train_cfg=None):
    """Dispatch one unlearning method; returns the updated model."""
    method = cfg.method
    if method in ADV_METHODS and adv is None:
        raise ValueError(f"method {method} needs an adversarial set")
    if not cfg.has_retain_access and method in RETAIN_ONLY_METHODS:
        raise ValueError(f"method {method} needs retain access")

    if method == "retrain":
        if train_cfg is None:
            raise ValueError("retrain needs the original TrainConfig")
        return train(state.spec, data, split.retain_idx, train_cfg)

    if method in ADV_METHODS:
        ft_set = assemble_finetune_set(data, split, adv, cfg,
                                       expected_fingerprint=fingerprint(state))
        mask = None
        if method == "amun_salun":
            ratio = cfg.salun_ratio if cfg.salun_ratio is not None else 0.5
            mask = salun_mask(state, data, split.forget_idx, ratio)
        return fine_tune(state, ft_set, cfg, mask=mask)

    if method == "ft":
        return fine_tune(state, data.subset(split.retain_idx), cfg)

    if method == "l1_sparse":
        lam = cfg.l1_lambda if cfg.l1_lambda is not None else 1e-4
        return fine_tune(state, data.subset(split.retain_idx), cfg, l1_lambda=lam)

    if method == "ga":
        return fine_tune(state, data.subset(split.forget_idx), cfg, direction=-1.0)

    if method in ("rl", "salun"):
        rng = np.random.default_rng(cfg.seed)
        _, yf = data.rows(split.forget_idx)
        labels = _random_wrong_labels(yf, data.num_classes, rng)
        ft_set = _relabeled_split_set(data, split, cfg, labels)
        mask = None
        if method == "salun":
            ratio = cfg.salun_ratio if cfg.salun_ratio is not None else 0.5
            mask = salun_mask(state, data, split.forget_idx, ratio)
        return fine_tune(state, ft_set, cfg, mask=mask)

    if method == "bs":
        Xf, yf = data.rows(split.forget_idx)
        eps = cfg.bs_eps if cfg.bs_eps is not None else 0.01
        labels = _fgsm_labels(state, Xf, yf, eps)
        same = labels == yf
        if same.any():
            # step too small to cross the boundary: take the runner-up class
            lg = batch_logits(state, Xf[same])
            lg[np.arange(lg.shape[0]), yf[same]] = -np.inf
            labels = labels.copy()
            labels[np.flatnonzero(same)] = np.argmax(lg, axis=1)
        ft_set = _relabeled_split_set(data, split, cfg, labels)
        return fine_tune(state, ft_set, cfg)

    raise AssertionError(f"unhandled method {method}")


ABLATION_KINDS = ("AdvL", "RL", "A_RL", "A_RS")


def ablation_set(kind, data, forget_idx, adv, seed):
    """Substitute fine-tuning sets that perturb either samples or labels.

    AdvL: original samples, adversarial labels.
    RL:   original samples, random label excluding both y and y_adv.
    A_RL: adversarial samples, random label excluding both y and y_adv.
    A_RS: uniform point on the radius-delta sphere around x, label y_adv.
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}")
    forget_idx = np.asarray(forget_idx, dtype=np.int64)
    ids = data.ids[forget_idx]
    by_id = adv.by_id()
    missing = [int(i) for i in ids if int(i) not in by_id]
    if missing:
        raise ValueError(f"adversarial set lacks records for forget ids {missing}")
    recs = [by_id[int(i)] for i in ids]
    X, y = data.rows(forget_idx)
    m = data.num_classes
    rng = np.random.default_rng(seed)

    if kind == "AdvL":
        feats, labels = X, np.array([r.y_adv for r in recs], dtype=np.int64)
    elif kind in ("RL", "A_RL"):
        labels = np.empty(len(recs), dtype=np.int64)
        for i, r in enumerate(recs):
            options = [c for c in range(m) if c not in (r.y_true, r.y_adv)]
            if not options:
                raise ValueError(
                    f"no admissible wrong label for sample {r.orig_id}: "
                    f"m={m} leaves nothing outside {{y, y_adv}}")
            labels[i] = options[rng.integers(0, len(options))]
        feats = X if kind == "RL" else np.stack([r.x_adv for r in recs])
    else:  # A_RS
        dirs = rng.normal(size=X.shape)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        feats = X + dirs * np.array([r.delta for r in recs])[:, None]
        labels = np.array([r.y_adv for r in recs], dtype=np.int64)

    return LabeledDataset(feats, labels, ids, m)


def continuous_unlearn(state, train_data, test_data, request_schedule, cfg,
                       attack_cfg, mode, evaluator=None, train_cfg=None,
                       test_idx=None):
    """Apply a sequence of forget requests to one model.

    adaptive: the adversarial set is rebuilt on the current model before
    each step. precomputed: all sets are built on the initial model up
    front. After each step the retain pool shrinks by everything forgotten
    so far; ``evaluator(state, eval_split)`` is called per step when given
    (its reports are returned alongside the model states).
    """
    if mode not in ("adaptive", "precomputed"):
        raise ValueError(f"mode must be adaptive|precomputed, got {mode!r}")
    schedule = [np.asarray(r, dtype=np.int64) for r in request_schedule]
    flat = np.concatenate(schedule)
    if len(np.unique(flat)) != flat.size:
        raise ValueError("forget requests overlap")

    precomputed = None
    if mode == "precomputed" and cfg.method in ADV_METHODS:
        precomputed = [build_adversarial_set(state, attack_cfg, train_data, req)
                       for req in schedule]

    n = train_data.n
    all_idx = np.arange(n, dtype=np.int64)
    if test_idx is None:
        test_idx = np.arange(test_data.n, dtype=np.int64) if test_data is not None \
            else np.array([], dtype=np.int64)
    cur = state
    done = np.array([], dtype=np.int64)
    out = []
    for k, req in enumerate(schedule):
        cum = np.sort(np.concatenate([done, req]))
        retain = np.setdiff1d(all_idx, cum)
        step_cfg = cfg if mode == "adaptive" else replace(cfg, allow_transfer=True)
        step_split = SplitSpec(retain, req, test_idx,
                               req.size / (req.size + retain.size), cfg.seed)
        adv = None
        if cfg.method in ADV_METHODS:
            adv = (build_adversarial_set(cur, attack_cfg, train_data, req)
                   if mode == "adaptive" else precomputed[k])
        cur = unlearn(cur, train_data, step_split, adv, step_cfg, train_cfg)
        done = cum
        report = None
        if evaluator is not None:
            eval_split = SplitSpec(retain, done, test_idx, done.size / n, cfg.seed)
            report = evaluator(cur, eval_split)
        out.append((cur, report))
    return out
