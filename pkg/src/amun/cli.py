"""Command-line surface. Config is a key=value file; --seed overrides the
master seed. Errors exit nonzero with one JSON line on stderr."""

import argparse
import json
import sys

import numpy as np

from . import harness
from .attacks import build_adversarial_set, load_advset, save_advset
from .data import sample_splits
from .mia import (EVAL_CSV_COLUMNS, EvalReport, confidence_records,
                  eval_csv_row, evaluate, save_confidences)
from .models import train
from .theory import make_convex_instance, theorem_bound_check
from .unlearn import ablation_set, continuous_unlearn, fine_tune, unlearn
from .harness import (attackconfig_from_config, dataset_from_config,
                      derive_seed, eval_test_split, load_checkpoint,
                      miaconfig_from_config, modelspec_from_config,
                      parse_config, prepare_context, run_experiment,
                      save_checkpoint, trainconfig_from_config,
                      unlearnconfig_from_config)


def _load_config(args):
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _split_from_config(cfg, train_data, test_data, subset):
    test_idx, _ = eval_test_split(test_data, cfg["shadow_seed"])
    fraction = cfg["fractions"][0]
    splits = sample_splits(train_data, fraction, cfg["num_subsets"],
                           derive_seed(cfg["subset_seed"], int(fraction * 1000)),
                           test_idx)
    if not 0 <= subset < len(splits):
        raise ValueError(f"subset must be in [0,{len(splits)})")
    return splits[subset]


def cmd_train(args):
    cfg = _load_config(args)
    train_data, _ = dataset_from_config(cfg)
    spec = modelspec_from_config(cfg, train_data)
    tc = trainconfig_from_config(cfg)
    state = train(spec, train_data, np.arange(train_data.n), tc)
    save_checkpoint(state, args.out,
                    provenance=f"method=train lr={tc.learning_rate:g} "
                               f"epochs={tc.epochs} seed={tc.seed}")
    print(f"wrote {args.out} (train acc {state.last_train_acc:.4f})")
    return 0


def cmd_attack(args):
    cfg = _load_config(args)
    train_data, test_data = dataset_from_config(cfg)
    state, _ = load_checkpoint(args.model)
    split = _split_from_config(cfg, train_data, test_data, args.subset)
    adv = build_adversarial_set(state, attackconfig_from_config(cfg),
                                train_data, split.forget_idx)
    save_advset(adv, args.out)
    print(f"wrote {args.out} ({len(adv.records)} records)")
    return 0


def cmd_unlearn(args):
    cfg = _load_config(args)
    train_data, test_data = dataset_from_config(cfg)
    state, _ = load_checkpoint(args.model)
    split = _split_from_config(cfg, train_data, test_data, args.subset)
    method = args.method or cfg["methods"][0]
    access = args.access or cfg["access"]
    if access == "both":
        raise ValueError("pick one access setting for a single unlearn run")
    ucfg = unlearnconfig_from_config(cfg, method, access == "retain")
    adv = load_advset(args.advset) if args.advset else None
    out = unlearn(state, train_data, split, adv, ucfg,
                  trainconfig_from_config(cfg))
    save_checkpoint(out, args.out,
                    provenance=f"method={method} access={access} "
                               f"lr={ucfg.learning_rate:g} epochs={ucfg.epochs} "
                               f"seed={ucfg.seed}")
    print(f"wrote {args.out}")
    return 0


def cmd_shadows(args):
    cfg = _load_config(args)
    ctx = prepare_context(cfg, None)
    harness.save_ensemble(ctx.ens, args.out)
    print(f"wrote {args.out} ({len(ctx.ens.models)} shadows)")
    return 0


def _parse_ref_report(path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    rec = dict(zip(lines[0].split(","), lines[-1].split(",")))
    def num(k):
        return float(rec[k]) if rec.get(k) else None
    return EvalReport(num("unlearn_acc"), num("retain_acc"), num("test_acc"),
                      num("mis"), num("ft_auc"), num("fr_auc"))


def cmd_eval(args):
    cfg = _load_config(args)
    train_data, test_data = dataset_from_config(cfg)
    state, provenance = load_checkpoint(args.model)
    split = _split_from_config(cfg, train_data, test_data, args.subset)
    ens = None
    if args.shadows:
        from .data import mia_pool
        pool, offset = mia_pool(train_data, test_data)
        ens = harness.load_ensemble(args.shadows, pool, offset)
    ref = _parse_ref_report(args.ref) if args.ref else None
    rep = evaluate(state, train_data, test_data, split, ens, ref,
                   miaconfig_from_config(cfg))
    method = args.method or provenance.split(" ")[0].removeprefix("method=") or "model"
    with open(args.out, "w") as fh:
        fh.write(",".join(EVAL_CSV_COLUMNS) + "\n")
        fh.write(eval_csv_row(rep, method, cfg["unlearn_seed"],
                              cfg["fractions"][0], cfg["access"]) + "\n")
    if args.confidences:
        save_confidences(confidence_records(state, train_data, test_data, split),
                         args.confidences)
    print(f"wrote {args.out}")
    return 0


def cmd_experiment(args):
    cfg = _load_config(args)
    results = run_experiment(cfg, args.out)
    print(f"wrote {results}")
    return 0


def cmd_continuous(args):
    cfg = _load_config(args)
    ctx = prepare_context(cfg, None)
    state, _ = load_checkpoint(args.model)
    method = args.method or cfg["methods"][0]
    mode = args.mode or cfg["mode"]
    access = args.access or cfg["access"]
    n = ctx.train_data.n
    per = round(cfg["request_fraction"] * n)
    count = cfg["requests"]
    if per * count > n:
        raise ValueError("request schedule exceeds the dataset")
    rng = np.random.default_rng(derive_seed(cfg["subset_seed"], 777))
    perm = rng.permutation(n)[:per * count]
    schedule = [np.sort(perm[i * per:(i + 1) * per]) for i in range(count)]
    ucfg = unlearnconfig_from_config(cfg, method, access == "retain")

    def evaluator(model, eval_split):
        return evaluate(model, ctx.train_data, ctx.test_data, eval_split,
                        ctx.ens, None, ctx.mia_cfg)

    steps = continuous_unlearn(state, ctx.train_data, ctx.test_data, schedule,
                               ucfg, ctx.attack_cfg, mode, evaluator=evaluator,
                               train_cfg=ctx.train_cfg, test_idx=ctx.test_idx)
    with open(args.out, "w") as fh:
        fh.write("step,method,mode,access,unlearn_acc,retain_acc,test_acc,"
                 "mis,ft_auc,fr_auc,auc_gap\n")
        for k, (_, rep) in enumerate(steps):
            fh.write(f"{k},{method},{mode},{access},"
                     f"{rep.unlearn_acc:.6f},{rep.retain_acc:.6f},"
                     f"{rep.test_acc:.6f},{rep.mis:.6f},{rep.ft_auc:.6f},"
                     f"{rep.fr_auc:.6f},{rep.auc_gap:.6f}\n")
    print(f"wrote {args.out}")
    return 0


def cmd_theorem_check(args):
    cfg = _load_config(args)
    base = cfg["theorem_seed"] if cfg["seed"] is None else cfg["seed"]
    lines = ["seed,lhs,rhs,L,beta,delta,C,holds,residual_o,residual_u"]
    for i in range(cfg["instances"]):
        seed = derive_seed(base, i)
        inst = make_convex_instance(seed, n=cfg["theorem_n"], d=cfg["theorem_d"],
                                    tol=cfg["residual_tol"])
        rep = theorem_bound_check(inst)
        lines.append(
            f"{seed},{rep.lhs:.12g},{rep.rhs:.12g},{rep.lipschitz:.12g},"
            f"{rep.beta:.12g},{rep.delta:.12g},{rep.c_term:.12g},{int(rep.holds)},"
            f"{rep.precondition_residuals[0]:.6g},{rep.precondition_residuals[1]:.6g}")
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    holds = sum(int(ln.split(",")[7]) for ln in lines[1:])
    print(f"wrote {args.out} (bound held on {holds}/{cfg['instances']})")
    return 0


ABLATION_CLI_KINDS = ("adv", "AdvL", "RL", "A_RL", "A_RS")


def cmd_ablation(args):
    cfg = _load_config(args)
    train_data, test_data = dataset_from_config(cfg)
    state, _ = load_checkpoint(args.model)
    adv = load_advset(args.advset)
    split = _split_from_config(cfg, train_data, test_data, args.subset)
    kinds = args.kinds.split(",") if args.kinds else list(ABLATION_CLI_KINDS)
    from .data import LabeledDataset
    from .models import accuracy
    test_rows = np.asarray(split.test_idx)
    acc_before = accuracy(state, test_data, test_rows)
    lines = ["kind,test_acc_before,test_acc_after,forget_acc_after"]
    for kind in kinds:
        if kind == "adv":
            ids = train_data.ids[split.forget_idx]
            recs = [adv.by_id()[int(i)] for i in ids]
            ds = LabeledDataset(np.stack([r.x_adv for r in recs]),
                                np.array([r.y_adv for r in recs], dtype=np.int64),
                                ids, train_data.num_classes)
        else:
            ds = ablation_set(kind, train_data, split.forget_idx, adv,
                              derive_seed(cfg["unlearn_seed"], 55))
        ucfg = unlearnconfig_from_config(cfg, "amun", False)
        tuned = fine_tune(state, ds, ucfg)
        lines.append(f"{kind},{acc_before:.6f},"
                     f"{accuracy(tuned, test_data, test_rows):.6f},"
                     f"{accuracy(tuned, train_data, split.forget_idx):.6f}")
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return 0


def _add_common(p, model=False, advset=False, subset=True):
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", required=True)
    if model:
        p.add_argument("--model", required=True, help="checkpoint path")
    if advset:
        p.add_argument("--advset", help="adversarial set file")
    if subset:
        p.add_argument("--subset", type=int, default=0,
                       help="which sampled forget subset to use")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="amun",
        description="adversarial-example-driven unlearning toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a base model")
    _add_common(p, subset=False)

    p = sub.add_parser("attack", help="build the adversarial set for a forget subset")
    _add_common(p, model=True)

    p = sub.add_parser("unlearn", help="apply one unlearning method")
    _add_common(p, model=True, advset=True)
    p.add_argument("--method")
    p.add_argument("--access", choices=["retain", "forget_only"])

    p = sub.add_parser("eval", help="evaluate a model on a split")
    _add_common(p, model=True)
    p.add_argument("--shadows", help="shadow ensemble directory")
    p.add_argument("--ref", help="reference eval CSV for the gap")
    p.add_argument("--confidences", help="also dump per-sample confidences")
    p.add_argument("--method", help="label for the CSV row")

    p = sub.add_parser("shadows", help="train and save the shadow ensemble")
    _add_common(p, subset=False)

    p = sub.add_parser("experiment", help="run the full protocol")
    _add_common(p, subset=False)

    p = sub.add_parser("continuous", help="sequential unlearning requests")
    _add_common(p, model=True)
    p.add_argument("--method")
    p.add_argument("--mode", choices=["adaptive", "precomputed"])
    p.add_argument("--access", choices=["retain", "forget_only"])

    p = sub.add_parser("theorem-check", help="verify the bound on convex instances")
    _add_common(p, subset=False)

    p = sub.add_parser("ablation", help="fine-tune on substitute sets")
    _add_common(p, model=True)
    p.add_argument("--advset", required=True)
    p.add_argument("--kinds", help="comma list from adv,AdvL,RL,A_RL,A_RS")

    return ap


_COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "unlearn": cmd_unlearn,
    "shadows": cmd_shadows,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "continuous": cmd_continuous,
    "theorem-check": cmd_theorem_check,
    "ablation": cmd_ablation,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
