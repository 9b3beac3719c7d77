"""Command line: train, bench, replay, inspect-checkpoint.

Exit codes: 0 ok, 2 configuration / input error, 3 numeric failure,
4 determinism failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .bench import (CLASSES, NondeterminismError, ReplayError, check_accounting, format_table, paired_ratio,
                    replay, run_bench)
from .env import NavEnv
from .nn.checkpoint import CheckpointError, load_checkpoint, read_header
from .nn.policy import PolicyNet
from .plotting import plot_bench, plot_metrics
from .ppo import NumericError, Trainer
from .shield import EnvShield

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NONDET = 0, 2, 3, 4


def _flags(args):
    run, shield = {}, {}
    for k in ("seed", "workers", "max_updates", "max_steps", "max_seconds"):
        v = getattr(args, k, None)
        if v is not None:
            run[k] = v
    if getattr(args, "out", None) is not None:
        run["out_dir"] = str(args.out)
    if getattr(args, "deterministic", False):
        run["deterministic"] = True
    if getattr(args, "shield", None) in ("on", "off"):
        shield["enabled"] = args.shield == "on"
    out = {}
    if run:
        out["run"] = run
    if shield:
        out["shield"] = shield
    return out


def _load_cfg(args, base=None):
    """Config layers; ``base`` (e.g. from a checkpoint) sits below the file."""
    flags = _flags(args)
    if base is not None and args.config is None:
        data = cfgmod._merge(base, cfgmod.env_overrides())
        return cfgmod.build(cfgmod._merge(data, flags))
    return cfgmod.load(args.config, flags=flags)


def cmd_train(args):
    cfg = _load_cfg(args)
    run = cfg.run
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    workers = 1 if run.deterministic else run.workers
    env = NavEnv(cfg.env_config(), cfg.ppo.n_envs, seed=run.seed, workers=workers)
    net = PolicyNet(cfg.policy_config(), seed=run.seed)
    shield = EnvShield(cfg.shield.shield_config()) if cfg.shield.enabled else None
    # --deterministic pins a single worker; rollouts still sample from the
    # seeded generator (mean actions would leave PPO nothing to explore)
    trainer = Trainer(env, net, cfg.ppo, seed=run.seed, action_filter=shield)
    if args.resume:
        _, header = load_checkpoint(args.resume, net, trainer.opt)
        trainer.restore(header)
        print(f"resumed from {args.resume} at update {trainer.update_idx}")

    def show(row):
        print(f"update {row['update']:4d} steps {row['steps']:9d} return {row['mean_return']:8.2f} "
              f"success {row['success_rate']:.3f} collision {row['collision_rate']:.3f} level {row['level']}",
              flush=True)

    try:
        trainer.run(out, max_updates=run.max_updates, max_steps=run.max_steps, max_seconds=run.max_seconds,
                    checkpoint_every=run.checkpoint_every, on_row=None if args.quiet else show,
                    meta={"config": cfg.to_dict()})
    except NumericError as e:
        (out / "diagnostics.json").write_text(json.dumps(e.diagnostics, indent=2, default=str))
        print(f"numeric failure: {e}; diagnostics in {out}", file=sys.stderr)
        return EXIT_NUMERIC
    plot_metrics(out / "metrics.csv", out / "metrics.png")
    return EXIT_OK


def _net_from_checkpoint(path, cfg=None):
    header, _ = read_header(path)
    if cfg is not None:
        net = PolicyNet(cfg.policy_config())
        load_checkpoint(path, net)
    else:
        net, header = load_checkpoint(path)
    return net, header


def cmd_bench(args):
    header, _ = read_header(args.checkpoint)
    base = header.get("meta", {}).get("config")
    cfg = _load_cfg(args, base=base)
    net, _ = _net_from_checkpoint(args.checkpoint, cfg)
    run = cfg.run
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_runs = args.runs or run.bench_runs
    classes = tuple(args.classes.split(",")) if args.classes else CLASSES
    modes = {"on": [True], "off": [False], "both": [True, False]}[args.shield or ("on" if cfg.shield.enabled
                                                                                    else "off")]
    workers = 1 if run.deterministic else run.workers
    reports = {}
    for on in modes:
        rep = run_bench(cfg, net, n_runs, on, run.seed, log_dir=out / "replay", classes=classes, workers=workers)
        rep["checkpoint"] = str(args.checkpoint)
        rep["arch_hash"] = header["arch_hash"]
        check_accounting(rep)
        label = "shield_on" if on else "shield_off"
        reports[label] = rep
        print(f"[{label}]")
        print(format_table(rep))
    result = reports[next(iter(reports))] if len(reports) == 1 else {"paired": reports}
    if len(reports) == 2:
        result["collision_ratio"] = {c: paired_ratio(reports["shield_on"], reports["shield_off"], c)
                                     for c in classes}
        print("collision ratio on/off:", {k: round(v, 3) for k, v in result["collision_ratio"].items()})
    (out / "bench.json").write_text(json.dumps(result, indent=2))
    plot_bench(reports, out / "bench.png")
    return EXIT_OK


def cmd_replay(args):
    path = Path(args.log)
    logs = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    if not logs:
        print(f"no replay logs under {path}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for log in logs:
        csv_out = out / (log.stem + ".csv") if out else None
        try:
            r = replay(log, csv_out)
        except ReplayError as e:
            print(f"{log}: schema error, {e}", file=sys.stderr)
            return EXIT_CONFIG
        except NondeterminismError as e:
            print(f"{log}: {e}", file=sys.stderr)
            return EXIT_NONDET
        print(f"{log.name}: ok {r['hash'][:16]} steps={r['steps']} collisions={r['collisions']} {r['outcome']}")
    return EXIT_OK


def cmd_inspect(args):
    header, body = read_header(args.checkpoint)
    summary = {k: header[k] for k in ("arch_hash", "n_params", "adam_t", "has_moments", "ret_norm")}
    summary["arch"] = {k: v for k, v in header["arch"].items() if k != "shapes"}
    summary["shapes"] = header["arch"]["shapes"]
    summary["meta"] = {k: v for k, v in header.get("meta", {}).items() if k != "config"}
    summary["payload_bytes"] = len(body)
    flat = np.frombuffer(body, "<f8")[:header["n_params"]]
    summary["param_stats"] = {"min": float(flat.min()), "max": float(flat.max()), "finite": bool(np.all(np.isfinite(flat)))}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _common(p, shield_choices=("on", "off")):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--shield", choices=shield_choices)
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", action="store_true", help="single worker, bit-reproducible runs")


def build_parser():
    ap = argparse.ArgumentParser(prog="desknav", description="Desk-scale navigation lab")
    sub = ap.add_subparsers(dest="cmd", required=True)
    t = sub.add_parser("train", help="run PPO training")
    _common(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-updates", type=int, dest="max_updates")
    t.add_argument("--max-steps", type=int, dest="max_steps")
    t.add_argument("--max-seconds", type=float, dest="max_seconds")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)
    b = sub.add_parser("bench", help="evaluate a checkpoint per scenario class")
    _common(b, ("on", "off", "both"))
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--runs", type=int)
    b.add_argument("--classes", help="comma separated subset of static,dynamic,hybrid,empty")
    b.set_defaults(func=cmd_bench)
    r = sub.add_parser("replay", help="re-simulate a bench log (or a directory of logs) and verify its hash")
    r.add_argument("log")
    r.add_argument("--out", help="directory for trajectory CSVs")
    r.set_defaults(func=cmd_replay)
    i = sub.add_parser("inspect-checkpoint", help="print a checkpoint header")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
