"""Command-line front end: gen-data, train, eval, mdp-solve, report."""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import _accel
from .datagen import (DatasetError, file_sha256, generate_training_set, normalize_features,
                      read_dataset, split_train_validation, write_dataset)
from .envsim import ConfigError, SystemConfig
from .mdp import MdpError, build_mdp, read_policy, relative_value_iteration, sidecar_path, write_policy
from .neuralnet import (CheckpointError, TrainConfig, TrainingDiverged, build_architecture,
                        load_checkpoint, save_checkpoint, train)
from .offline import SolverError
from .policyeval import (DnnPolicy, GreedyPolicy, MdpLookupPolicy, ZeroPolicy, evaluate_policy,
                         generate_report, read_report)
from .seeding import substream

OVERRIDES = [
    ("--k", int), ("--b-max", float), ("--p-max", float), ("--harvest-mean", float),
    ("--harvest-var", float), ("--b-init", float), ("--seed", int),
]


def _add_config_args(p):
    p.add_argument("config", help="flat key = value system configuration file")
    for flag, typ in OVERRIDES:
        p.add_argument(flag, type=typ, default=None, help="override the config-file key")


def _resolve_config(args) -> SystemConfig:
    cfg = SystemConfig.from_file(args.config)
    return cfg.replace(**{flag[2:].replace("-", "_"): getattr(args, flag[2:].replace("-", "_"))
                          for flag, _ in OVERRIDES})


def _write_manifest(out: Path, subcommand, args, config=None, seeds=None, inputs=(), outputs=(),
                    started=None):
    manifest = {
        "subcommand": subcommand,
        "argv": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "config_path": getattr(args, "config", None),
        "config": None if config is None else config.to_dict(),
        "seeds": seeds or {},
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {str(p): file_sha256(p) for p in outputs if Path(p).exists()},
        "backend": _accel.backend_name(),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "wall_seconds": round(time.time() - started, 3),
    }
    path = out.with_name(out.stem + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(args):
    t0 = time.time()
    cfg = _resolve_config(args)
    out = Path(args.out)
    ds = generate_training_set(cfg, args.episodes, args.horizon, seed=cfg.seed, jobs=args.jobs)
    write_dataset(ds, out)
    meta = out.with_name(out.stem + ".meta.json")
    _write_manifest(out, "gen-data", args, cfg, {"seed": cfg.seed, "stream": "dataset"},
                    [args.config], [out, meta], t0)
    print(f"wrote {len(ds)} points ({args.episodes} episodes x N={args.horizon}) to {out}")
    return 0


def cmd_train(args):
    t0 = time.time()
    out = Path(args.out)
    data = read_dataset(args.data)
    n_val = args.val if args.val is not None else max(1, len(data) // 5)
    train_set, val_set = split_train_validation(data, n_val, substream(args.seed, "split"))
    stats = None
    if not args.no_normalize:
        train_set, val_set, stats = normalize_features(train_set, val_set)
    arch = build_architecture(data.k, args.hidden_layers, args.leaky_slope)
    tcfg = TrainConfig(args.lr, args.batch_size, args.epochs, args.optimizer, args.patience,
                       args.clip_norm, args.seed)
    curves = out.with_name(out.stem + ".curves.csv")
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    provenance = {"dataset": str(args.data), "dataset_sha256": file_sha256(args.data),
                  "train_points": len(train_set), "validation_points": len(val_set)}
    try:
        res = train(train_set, val_set, arch, tcfg, log=log)
    except TrainingDiverged as exc:
        if exc.result is not None:
            curves.write_text(exc.result.curves_csv())
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    curves.write_text(res.curves_csv())
    provenance["best_epoch"] = res.best_epoch
    save_checkpoint(res.params, stats, out, asdict(tcfg), provenance)
    _write_manifest(out, "train", args, None, {"seed": args.seed, "streams": ["split", "train"]},
                    [args.data], [out, curves], t0)
    print(f"best validation loss {min(res.val_loss):.6g} at epoch {res.best_epoch}; wrote {out}")
    return 0


def cmd_eval(args):
    t0 = time.time()
    cfg = _resolve_config(args)
    out = Path(args.out)
    inputs = [args.config]
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint, expect_k=cfg.k)
        policy = DnnPolicy(ck, cfg.p_max)
        inputs.append(args.checkpoint)
    elif args.mdp_policy:
        if cfg.k != 1:
            raise MdpError("MDP policies are point-to-point only (k = 1)")
        policy = MdpLookupPolicy(read_policy(args.mdp_policy))
        inputs += [args.mdp_policy, sidecar_path(args.mdp_policy)]
    elif args.baseline == "greedy":
        policy = GreedyPolicy(cfg.p_max)
    else:
        policy = ZeroPolicy()
    rep = evaluate_policy(policy, cfg, args.slots, seed=cfg.seed, block_len=args.block_len,
                          strict=args.strict, jobs=args.jobs)
    out.write_text(rep.to_json())
    row = out.with_suffix(".csv")
    with open(row, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "m", "v", "slots", "offline_rps", "policy_rps", "percentage"])
        w.writerow([rep.policy, repr(cfg.harvest_mean), repr(cfg.harvest_var), rep.slots,
                    repr(rep.offline_rps), repr(rep.policy_rps), repr(rep.ratio)])
    _write_manifest(out, "eval", args, cfg, {"seed": cfg.seed, "stream": "eval"}, inputs, [out, row], t0)
    print(f"{rep.policy}: RPS {rep.policy_rps:.4f} vs offline {rep.offline_rps:.4f} ({rep.ratio:.2f}%)")
    return 0


def cmd_mdp_solve(args):
    t0 = time.time()
    cfg = _resolve_config(args)
    out = Path(args.out)
    mdp = build_mdp(cfg, args.battery_step, args.power_step, args.harvest_levels, args.channel_levels)
    pol = relative_value_iteration(mdp, tol=args.tol)
    write_policy(pol, out)
    _write_manifest(out, "mdp-solve", args, cfg, {}, [args.config], [out, sidecar_path(out)], t0)
    print(f"gain {pol.gain:.6f} nats/slot after {pol.sweeps} sweeps; wrote {out}")
    return 0


def cmd_report(args):
    t0 = time.time()
    out = Path(args.out)
    reports = [read_report(p) for p in args.inputs]
    generate_report(reports, out, args.sweep)
    _write_manifest(out, "report", args, None, {}, args.inputs, [out], t0)
    print(f"wrote {len(reports)} rows to {out}")
    return 0


# -- parser -----------------------------------------------------------------


def _hidden_layers(text):
    h = int(text)
    if not 1 <= h <= 30:
        raise argparse.ArgumentTypeError("hidden layers must be in [1, 30]")
    return h


def _positive(typ):
    def conv(text):
        val = typ(text)
        if val <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return val
    return conv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehpower", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="solve offline programs into a training CSV")
    _add_config_args(p)
    p.add_argument("--episodes", type=_positive(int), default=10_000)
    p.add_argument("--horizon", type=_positive(int), default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=_positive(int), default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit the policy network to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--val", type=_positive(int), default=None, help="validation points (default 20%%)")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=_positive(float), default=1e-3)
    p.add_argument("--batch-size", type=_positive(int), default=256)
    p.add_argument("--epochs", type=_positive(int), default=200)
    p.add_argument("--patience", type=_positive(int), default=20)
    p.add_argument("--clip-norm", type=_positive(float), default=5.0)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--hidden-layers", type=_hidden_layers, default=30)
    p.add_argument("--leaky-slope", type=_positive(float), default=0.01)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll a policy out and compare with the offline benchmark")
    _add_config_args(p)
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint")
    who.add_argument("--mdp-policy")
    who.add_argument("--baseline", choices=["greedy", "zero"])
    p.add_argument("--slots", type=_positive(int), default=1_000_000)
    p.add_argument("--block-len", type=_positive(int), default=20)
    p.add_argument("--strict", action="store_true", help="fail on raw infeasible policy outputs")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=_positive(int), default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mdp-solve", help="solve the discretized point-to-point MDP")
    _add_config_args(p)
    p.add_argument("--battery-step", type=_positive(float), default=1.0)
    p.add_argument("--power-step", type=_positive(float), default=1.0)
    p.add_argument("--harvest-levels", type=_positive(int), default=8)
    p.add_argument("--channel-levels", type=_positive(int), default=8)
    p.add_argument("--tol", type=_positive(float), default=1e-8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mdp_solve)

    p = sub.add_parser("report", help="merge eval reports into a sweep table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--sweep", choices=["m", "v"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, MdpError, SolverError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
