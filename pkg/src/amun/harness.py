"""Experiment orchestration: datasets from config, the base x subset x run
protocol with retrain references, persistence, and resumability.

Every run of the lattice is keyed on disk, so an interrupted experiment
resumes from its per-run artifacts and a rerun with the same config emits
byte-identical CSVs.
"""

import os
from dataclasses import dataclass, replace

import numpy as np

from .attacks import AttackConfig, build_adversarial_set, load_advset, save_advset
from .data import (AuditedDataset, FormatError, LabeledDataset, gen_blobs,
                   gen_moons, load_idx, mia_pool, sample_splits)
from .mia import (EVAL_CSV_COLUMNS, MiaConfig, ShadowEnsemble, eval_csv_row,
                  evaluate, train_shadow_ensemble)
from .models import ModelSpec, ModelState, TrainConfig, TrainingDiverged, train
from .unlearn import ADV_METHODS, RETAIN_ONLY_METHODS, UnlearnConfig, unlearn

CKPT_MAGIC = "AMUN-CKPT v1"


def derive_seed(*parts):
    out = 17
    for p in parts:
        out = (out * 1000003 + int(p)) % (2 ** 31 - 1)
    return out


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state, path, provenance="-"):
    """Versioned header plus raw little-endian float64 parameters."""
    if "\n" in provenance:
        raise ValueError("provenance must be a single line")
    header = (f"{CKPT_MAGIC}\n"
              f"spec {state.spec.descriptor()}\n"
              f"seed {state.rng_seed}\n"
              f"provenance {provenance or '-'}\n"
              f"params {state.params.size}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(state.params, dtype="<f8").tobytes())


def load_checkpoint(path, expected_spec=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    lines = []
    pos = 0
    for _ in range(5):
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: truncated checkpoint header")
        lines.append(blob[pos:nl].decode("ascii", errors="replace"))
        pos = nl + 1
    if lines[0] != CKPT_MAGIC:
        raise FormatError(f"{path}: version mismatch, header {lines[0]!r}")
    spec = ModelSpec.from_descriptor(lines[1].removeprefix("spec "))
    seed = int(lines[2].removeprefix("seed "))
    provenance = lines[3].removeprefix("provenance ")
    count = int(lines[4].removeprefix("params "))
    payload = blob[pos:]
    if len(payload) != count * 8:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {count * 8}")
    if expected_spec is not None and expected_spec != spec:
        raise FormatError(
            f"{path}: checkpoint spec '{spec.descriptor()}' does not match "
            f"expected '{expected_spec.descriptor()}'")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    state = ModelState(spec, params, seed)
    return state, provenance


# ------------------------------------------------------------- config parsing

_DEFAULTS = {
    # desk instance: long SGD memorizes the train rows (acc ~1.0) while a
    # retrained model generalizes; the regime the confidence-gap evaluation
    # needs. Calibrated empirically; see tests/test_acceptance.py.
    "dataset": "blobs", "n": 2400, "dim": 8, "classes": 4, "spread": 0.22,
    "noise": 0.1, "data_seed": 0, "test_n": None,
    "idx_images": None, "idx_labels": None,
    "idx_test_images": None, "idx_test_labels": None,
    "model": "mlp", "widths": None,
    "lr": 0.3, "epochs": 600, "batch_size": 32, "scheduler": "step:400:0.1",
    "weight_decay": 0.0, "train_seed": 0,
    "fractions": "0.1", "num_subsets": 3, "num_runs": 3, "num_base_models": 3,
    "subset_seed": 1,
    "methods": "amun", "access": "retain",
    "unlearn_lr": 0.02, "unlearn_epochs": 10, "unlearn_batch": 64,
    "unlearn_scheduler": "none", "salun_ratio": 0.5, "l1_lambda": 0.0005,
    "unlearn_seed": 0, "large_forget_variant": "auto",
    "attack": "pgd", "attack_steps": 50, "step_fraction": 0.1,
    "eps_init": "auto", "max_doublings": 20, "attack_seed": 0,
    "shadow_k": 16, "shadow_seed": 0,
    "gamma": 2.0, "temperature": 2.0, "taylor_order": 2, "taylor_margin": 0.6,
    "requests": 5, "request_fraction": 0.02, "mode": "adaptive",
    "instances": 50, "theorem_n": 40, "theorem_d": 2, "residual_tol": 1e-3,
    "theorem_seed": 0,
    "seed": None,
}


def parse_config(path):
    """Plain key=value file; '#' starts a comment; unknown keys are errors."""
    out = dict(_DEFAULTS)
    overrides = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key.startswith("method_lr."):
                overrides[key.removeprefix("method_lr.")] = float(val)
                continue
            if key not in _DEFAULTS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = val
    out["method_lr"] = overrides
    return _coerce(out)


def _coerce(cfg):
    ints = ("n", "dim", "classes", "data_seed", "epochs", "batch_size",
            "train_seed", "num_subsets", "num_runs", "num_base_models",
            "subset_seed", "unlearn_epochs", "unlearn_batch", "unlearn_seed",
            "attack_steps", "max_doublings", "attack_seed", "shadow_k",
            "shadow_seed", "taylor_order", "requests", "instances",
            "theorem_n", "theorem_d", "theorem_seed")
    floats = ("spread", "noise", "lr", "weight_decay", "unlearn_lr",
              "salun_ratio", "l1_lambda", "step_fraction", "gamma",
              "temperature", "taylor_margin", "request_fraction",
              "residual_tol")
    for k in ints:
        cfg[k] = int(cfg[k])
    for k in floats:
        cfg[k] = float(cfg[k])
    if cfg["test_n"] is not None:
        cfg["test_n"] = int(cfg["test_n"])
    cfg["fractions"] = tuple(float(f) for f in str(cfg["fractions"]).split(","))
    cfg["methods"] = tuple(str(cfg["methods"]).split(","))
    if cfg["seed"] is not None:
        cfg["seed"] = int(cfg["seed"])
    return cfg


def parse_scheduler(text):
    if text in ("none", "", None):
        return None
    parts = str(text).split(":")
    if len(parts) != 3 or parts[0] != "step":
        raise ValueError(f"scheduler must be 'none' or 'step:PERIOD:FACTOR', got {text!r}")
    return ("step", int(parts[1]), float(parts[2]))


def dataset_from_config(cfg):
    seed = cfg["data_seed"] if cfg["seed"] is None else cfg["seed"]
    kind = cfg["dataset"]
    if kind == "blobs":
        train_d, test_d, _ = gen_blobs(cfg["n"], cfg["dim"], cfg["classes"],
                                       cfg["spread"], seed, cfg["test_n"])
    elif kind == "moons":
        train_d, test_d = gen_moons(cfg["n"], cfg["noise"], seed, cfg["test_n"])
    elif kind == "idx":
        for k in ("idx_images", "idx_labels", "idx_test_images", "idx_test_labels"):
            if not cfg[k]:
                raise ValueError(f"dataset=idx needs {k}")
        train_d = load_idx(cfg["idx_images"], cfg["idx_labels"])
        test_d = load_idx(cfg["idx_test_images"], cfg["idx_test_labels"])
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return train_d, test_d


def modelspec_from_config(cfg, data):
    if cfg["widths"]:
        widths = tuple(int(w) for w in str(cfg["widths"]).split(","))
    elif cfg["model"] == "logistic":
        widths = (data.dim, data.num_classes)
    else:
        # default desk architecture: wide enough to memorize the desk blobs
        widths = (data.dim, 64, 64, data.num_classes)
    return ModelSpec(cfg["model"], widths)


def trainconfig_from_config(cfg):
    seed = cfg["train_seed"] if cfg["seed"] is None else cfg["seed"]
    return TrainConfig(cfg["lr"], cfg["epochs"], cfg["batch_size"],
                       parse_scheduler(cfg["scheduler"]), cfg["weight_decay"], seed)


def attackconfig_from_config(cfg):
    eps = None if cfg["eps_init"] in ("auto", None) else float(cfg["eps_init"])
    return AttackConfig(cfg["attack"], cfg["attack_steps"], cfg["step_fraction"],
                        eps, cfg["max_doublings"], (0.0, 1.0), cfg["attack_seed"])


def miaconfig_from_config(cfg):
    return MiaConfig(cfg["gamma"], cfg["temperature"], cfg["taylor_order"],
                     cfg["taylor_margin"])


def unlearnconfig_from_config(cfg, method, has_retain_access, seed=None):
    lfv = cfg["large_forget_variant"]
    lfv = None if lfv in ("auto", None) else str(lfv).lower() == "true"
    lr = cfg["method_lr"].get(method, cfg["unlearn_lr"]) if "method_lr" in cfg \
        else cfg["unlearn_lr"]
    return UnlearnConfig(
        method=method, has_retain_access=has_retain_access,
        epochs=cfg["unlearn_epochs"], learning_rate=lr,
        scheduler=parse_scheduler(cfg["unlearn_scheduler"]),
        salun_ratio=cfg["salun_ratio"] if method in ("salun", "amun_salun") else None,
        l1_lambda=cfg["l1_lambda"] if method == "l1_sparse" else None,
        large_forget_variant=lfv,
        seed=cfg["unlearn_seed"] if seed is None else seed,
        batch_size=cfg["unlearn_batch"])


def eval_test_split(test_data, seed):
    """Half the held-out rows are evaluation targets, half the population."""
    rng = np.random.default_rng(derive_seed(seed, 90001))
    perm = rng.permutation(test_data.n)
    half = test_data.n // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def build_ensemble(spec, train_data, test_data, shadow_k, train_cfg, seed,
                   population_rows):
    pool, offset = mia_pool(train_data, test_data)
    return train_shadow_ensemble(spec, pool, shadow_k, train_cfg, seed,
                                 population_idx=offset + population_rows,
                                 train_offset=offset)


def save_ensemble(ens, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for k, m in enumerate(ens.models):
        save_checkpoint(m, os.path.join(out_dir, f"shadow_{k:03d}.ckpt"),
                        provenance=f"shadow k={k}")
    np.save(os.path.join(out_dir, "inclusion.npy"), ens.inclusion)
    np.save(os.path.join(out_dir, "population.npy"), ens.population_idx)


def load_ensemble(out_dir, pool, train_offset):
    inclusion = np.load(os.path.join(out_dir, "inclusion.npy"))
    population = np.load(os.path.join(out_dir, "population.npy"))
    models = []
    for k in range(inclusion.shape[0]):
        state, _ = load_checkpoint(os.path.join(out_dir, f"shadow_{k:03d}.ckpt"))
        models.append(state)
    return ShadowEnsemble(models, inclusion, population, pool, train_offset)


# ---------------------------------------------------------------- experiment

RESULT_COLUMNS = ("base", "subset", "run") + EVAL_CSV_COLUMNS + ("status",)

SUMMARY_METRICS = ("unlearn_acc", "retain_acc", "test_acc", "mis",
                   "ft_auc", "fr_auc", "avg_gap")


@dataclass
class ExperimentContext:
    cfg: dict
    train_data: LabeledDataset
    test_data: LabeledDataset
    spec: ModelSpec
    train_cfg: TrainConfig
    attack_cfg: AttackConfig
    mia_cfg: MiaConfig
    test_idx: np.ndarray
    ens: ShadowEnsemble


def _accesses(cfg):
    a = cfg["access"]
    if a == "both":
        return ("retain", "forget_only")
    if a in ("retain", "forget_only"):
        return (a,)
    raise ValueError(f"access must be retain|forget_only|both, got {a!r}")


def prepare_context(cfg, out_dir=None):
    train_data, test_data = dataset_from_config(cfg)
    spec = modelspec_from_config(cfg, train_data)
    train_cfg = trainconfig_from_config(cfg)
    attack_cfg = attackconfig_from_config(cfg)
    mia_cfg = miaconfig_from_config(cfg)
    test_idx, pop_rows = eval_test_split(test_data, cfg["shadow_seed"])
    shadows_dir = os.path.join(out_dir, "shadows") if out_dir else None
    if shadows_dir and os.path.exists(os.path.join(shadows_dir, "inclusion.npy")):
        pool, offset = mia_pool(train_data, test_data)
        ens = load_ensemble(shadows_dir, pool, offset)
    else:
        ens = build_ensemble(spec, train_data, test_data, cfg["shadow_k"],
                             train_cfg, cfg["shadow_seed"], pop_rows)
        if shadows_dir:
            save_ensemble(ens, shadows_dir)
    return ExperimentContext(cfg, train_data, test_data, spec, train_cfg,
                             attack_cfg, mia_cfg, test_idx, ens)


def _row(base, subset, run, method, seed, fraction, access, report, status="ok"):
    if report is None:
        body = f"{method},{seed},{fraction:g},{access}" + "," * 7
    else:
        body = eval_csv_row(report, method, seed, fraction, access)
    status = status.replace(",", ";")  # keep the CSV column count intact
    return f"{base},{subset},{run}," + body + f",{status}"


def run_experiment(cfg, out_dir):
    """Full protocol: bases x subsets x runs x methods x accesses.

    Writes results.csv (one row per lattice point plus one per retrain
    reference) and summary.csv (mean +- sd per method). Partial artifacts
    land under out_dir and are reused on resume.
    """
    os.makedirs(out_dir, exist_ok=True)
    runs_dir = os.path.join(out_dir, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    ctx = prepare_context(cfg, out_dir)
    train_data, test_data = ctx.train_data, ctx.test_data
    accesses = _accesses(cfg)
    methods = cfg["methods"]
    rows = []

    for fraction in cfg["fractions"]:
        splits = sample_splits(train_data, fraction, cfg["num_subsets"],
                               derive_seed(cfg["subset_seed"], int(fraction * 1000)),
                               ctx.test_idx)
        for s, split in enumerate(splits):
            refs = {}
            for r in range(cfg["num_runs"]):
                ref_seed = derive_seed(cfg["train_seed"], 7, s, r, int(fraction * 1000))
                ref_key = f"f{fraction:g}_s{s}_r{r}"
                ref_ckpt = os.path.join(out_dir, f"ref_{ref_key}.ckpt")
                if os.path.exists(ref_ckpt):
                    ref_model, _ = load_checkpoint(ref_ckpt, ctx.spec)
                else:
                    ref_model = train(ctx.spec, train_data, split.retain_idx,
                                      replace(ctx.train_cfg, seed=ref_seed))
                    save_checkpoint(ref_model, ref_ckpt,
                                    provenance=f"method=retrain {ref_key}")
                ref_report = evaluate(ref_model, train_data, test_data, split,
                                      ctx.ens, None, ctx.mia_cfg)
                ref_report.avg_gap = 0.0
                refs[r] = ref_report
                rows.append(_row("-", s, r, "retrain", ref_seed, fraction,
                                 "retain", ref_report))

            for b in range(cfg["num_base_models"]):
                base_seed = derive_seed(cfg["train_seed"], b)
                base_ckpt = os.path.join(out_dir, f"base_{b}.ckpt")
                if os.path.exists(base_ckpt):
                    base_model, _ = load_checkpoint(base_ckpt, ctx.spec)
                else:
                    base_model = train(ctx.spec, train_data,
                                       np.arange(train_data.n),
                                       replace(ctx.train_cfg, seed=base_seed))
                    save_checkpoint(base_model, base_ckpt, provenance=f"base {b}")

                adv = None
                if any(m in ADV_METHODS for m in methods):
                    adv_path = os.path.join(
                        out_dir, f"adv_b{b}_f{fraction:g}_s{s}.advset")
                    if os.path.exists(adv_path):
                        adv = load_advset(adv_path)
                    else:
                        adv = build_adversarial_set(base_model, ctx.attack_cfg,
                                                    train_data, split.forget_idx)
                        save_advset(adv, adv_path)

                for r in range(cfg["num_runs"]):
                    for method in methods:
                        for access in accesses:
                            if access == "forget_only" and method in RETAIN_ONLY_METHODS:
                                continue
                            key = f"b{b}_f{fraction:g}_s{s}_r{r}_{method}_{access}"
                            marker = os.path.join(runs_dir, key + ".csv")
                            if os.path.exists(marker):
                                with open(marker) as fh:
                                    rows.append(fh.read().strip())
                                continue
                            seed = derive_seed(base_seed, s, r,
                                               methods.index(method),
                                               accesses.index(access))
                            ucfg = unlearnconfig_from_config(
                                cfg, method, access == "retain", seed)
                            row = _run_one(ctx, base_model, split, adv, ucfg,
                                           refs[r], b, s, r, fraction, access, seed)
                            with open(marker, "w") as fh:
                                fh.write(row + "\n")
                            rows.append(row)

    results = os.path.join(out_dir, "results.csv")
    with open(results, "w") as fh:
        fh.write(",".join(RESULT_COLUMNS) + "\n")
        fh.write("\n".join(rows) + "\n")
    _write_summary(rows, os.path.join(out_dir, "summary.csv"))
    return results


def _run_one(ctx, base_model, split, adv, ucfg, ref_report, b, s, r,
             fraction, access, seed):
    audited = AuditedDataset(ctx.train_data)
    try:
        model = unlearn(base_model, audited, split, adv, ucfg, ctx.train_cfg)
    except TrainingDiverged as exc:
        return _row(b, s, r, ucfg.method, seed, fraction, access, None,
                    status=f"abort: {exc}")
    if access == "forget_only":
        leaked = audited.read_rows & set(int(i) for i in split.retain_idx)
        if leaked:
            return _row(b, s, r, ucfg.method, seed, fraction, access, None,
                        status=f"abort: read {len(leaked)} retain rows without access")
    report = evaluate(model, ctx.train_data, ctx.test_data, split, ctx.ens,
                      ref_report, ctx.mia_cfg)
    return _row(b, s, r, ucfg.method, seed, fraction, access, report)


def _write_summary(rows, path):
    import collections
    groups = collections.defaultdict(list)
    for row in rows:
        parts = row.split(",")
        rec = dict(zip(RESULT_COLUMNS, parts))
        if rec["status"] != "ok":
            continue
        key = (rec["fraction"], rec["access"], rec["method"])
        groups[key].append(rec)
    lines = ["fraction,access,method,count," + ",".join(
        f"{m}_mean,{m}_sd" for m in SUMMARY_METRICS)]
    for key in sorted(groups):
        recs = groups[key]
        vals = []
        for m in SUMMARY_METRICS:
            xs = np.array([float(r[m]) for r in recs if r[m] != ""])
            if xs.size:
                vals.append(f"{xs.mean():.6f},{xs.std(ddof=0):.6f}")
            else:
                vals.append(",")
        lines.append(",".join(key) + f",{len(recs)}," + ",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------------- tuning

LR_GRID = tuple(10.0 ** e for e in range(-6, 0))
SCHEDULER_GRID = (None, ("step", 1, 0.1), ("step", 5, 0.1))


@dataclass
class TuneResult:
    learning_rate: float
    scheduler: tuple
    avg_gap: float


def tune_learning_rate(ctx, base_model, split, adv, method, access,
                       ref_report, epochs=10, seed=0):
    """Grid search over log-spaced learning rates and step-decay options,
    selected by the gap against the tuning split's retrain reference."""
    best = None
    for lr in LR_GRID:
        for sched in SCHEDULER_GRID:
            ucfg = UnlearnConfig(
                method=method, has_retain_access=access == "retain",
                epochs=epochs, learning_rate=lr, scheduler=sched, seed=seed,
                salun_ratio=0.5 if method in ("salun", "amun_salun") else None)
            try:
                model = unlearn(base_model, ctx.train_data, split, adv, ucfg,
                                ctx.train_cfg)
            except TrainingDiverged:
                continue
            rep = evaluate(model, ctx.train_data, ctx.test_data, split,
                           ctx.ens, ref_report, ctx.mia_cfg)
            if best is None or rep.avg_gap < best.avg_gap:
                best = TuneResult(lr, sched, rep.avg_gap)
    if best is None:
        raise RuntimeError("every grid point diverged")
    return best
