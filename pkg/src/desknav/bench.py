"""Benchmark episodes, replay logs and replay verification."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build
from .env import OUTCOME_NAMES, RUNNING, NavEnv, world_seed
from .nn.beta import scale_action
from .ppo import act
from .shield import EnvShield

SCHEMA = 1
CLASSES = ("static", "dynamic", "hybrid")


class ReplayError(ValueError):
    """Malformed replay log (schema problem); carries the line number."""

    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line else msg)
        self.line = line


class NondeterminismError(RuntimeError):
    pass


def class_world(cfg: ExperimentConfig, cls: str):
    w = cfg.world
    if cls == "static":
        return dataclasses.replace(w, n_dynamic=0), 0
    if cls == "dynamic":
        return dataclasses.replace(w, n_static=0), w.n_dynamic
    if cls == "hybrid":
        return w, w.n_dynamic
    if cls == "empty":
        return dataclasses.replace(w, n_static=0, n_dynamic=0), 0
    raise ValueError(f"unknown scenario class {cls!r}")


def bench_seeds(seed, cls, n_runs):
    k = ("empty",) + CLASSES
    return [world_seed(seed, 10_000 + k.index(cls), r) for r in range(n_runs)]


class TrajectoryHash:
    """Digest of everything the simulation produces for one env."""

    def __init__(self):
        self.h = hashlib.sha256()

    def add(self, pos, vel, dyn_pos, terms, outcome, contacts):
        for a in (pos, vel, dyn_pos, terms):
            self.h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        self.h.update(np.array([outcome, contacts], dtype="<i8").tobytes())

    def hexdigest(self):
        return self.h.hexdigest()


def _f(a):
    return [float(x) for x in np.ravel(a)]


def run_class(cfg: ExperimentConfig, net, cls, n_runs, seed, shield_on, log_dir=None, workers=1):
    """Run ``n_runs`` episodes of one scenario class side by side."""
    world, n_dyn = class_world(cfg, cls)
    env_cfg = cfg.env_config(terminate_on_collision=False, world=world)
    env = NavEnv(env_cfg, n_runs, seed=seed, workers=workers)
    seeds = bench_seeds(seed, cls, n_runs)
    obs = env.reset_worlds(seeds, n_dyn)
    shield = EnvShield(cfg.shield.shield_config()) if shield_on else None
    hashes = [TrajectoryHash() for _ in range(n_runs)]
    logs = [[] for _ in range(n_runs)]
    decisions = np.zeros(n_runs, np.int64)
    interventions = np.zeros(n_runs, np.int64)
    header = {"type": "header", "schema": SCHEMA, "class": cls, "n_dynamic": n_dyn, "shield": bool(shield_on),
              "base_seed": int(seed), "config": cfg.to_dict()}
    rng = np.random.default_rng(seed)
    v_lim = env_cfg.robot.v_lim
    while np.any(env.outcome == RUNNING):
        active = env.outcome == RUNNING
        x, _, _ = act(net, obs, rng, deterministic=True)
        v_pol = scale_action(x, v_lim)
        v_cmd = v_pol
        if shield is not None:
            v_cmd, hit = shield(env, v_pol)
            decisions += active
            interventions += hit & active
        world_cmd = (v_cmd[:, None, :] @ env.R)[:, 0]
        obs, rew, info = env.step(world_cmd)
        for i in np.nonzero(active)[0]:
            m = env.dyn_mask[i]
            dyn = np.concatenate([env.dyn_pos[i, m], env.dyn_vel[i, m]], axis=1)
            hashes[i].add(env.pos[i], env.vel[i], env.dyn_pos[i, m], info.terms[i], env.outcome[i], env.contacts[i])
            rec = {"type": "tick", "tick": int(env.steps[i]), "pos": _f(env.pos[i]), "vel": _f(env.vel[i]),
                   "action": _f(world_cmd[i]), "obstacles": [_f(r) for r in dyn], "terms": _f(info.terms[i]),
                   "reward": float(rew[i]), "status": OUTCOME_NAMES[int(env.outcome[i])],
                   "contacts": int(env.contacts[i])}
            if shield is not None:
                rep = shield.last_reports.get(int(i))
                rec["shield"] = {"input": _f(v_pol[i]), "output": _f(v_cmd[i]),
                                 "active": [] if rep is None else list(rep.active),
                                 "status": "pass" if rep is None else rep.status}
            logs[i].append(rec)
    runs = []
    for i in range(n_runs):
        foot = {"type": "footer", "steps": int(env.steps[i]), "outcome": OUTCOME_NAMES[int(env.outcome[i])],
                "collisions": int(env.contacts[i]), "hash": hashes[i].hexdigest()}
        path = None
        if log_dir is not None:
            path = Path(log_dir) / f"{cls}_{'on' if shield_on else 'off'}_{i:03d}.jsonl"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w") as f:
                f.write(json.dumps({**header, "run": i, "world_seed": int(seeds[i])}) + "\n")
                for rec in logs[i]:
                    f.write(json.dumps(rec) + "\n")
                f.write(json.dumps(foot) + "\n")
        runs.append({"run": i, "world_seed": int(seeds[i]), "outcome": foot["outcome"], "steps": foot["steps"],
                     "collisions": foot["collisions"], "hash": foot["hash"],
                     "shield_decisions": int(decisions[i]), "shield_interventions": int(interventions[i]),
                     "log": str(path) if path else None})
    return summarize_class(runs)


def summarize_class(runs):
    n = len(runs)
    out = [r["outcome"] for r in runs]
    dec = sum(r["shield_decisions"] for r in runs)
    return {
        "episodes": n,
        "successes": out.count("success"),
        "collisions_episodes": out.count("collision"),
        "timeouts": out.count("timeout"),
        "total_collisions": int(sum(r["collisions"] for r in runs)),
        "mean_collisions": float(np.mean([r["collisions"] for r in runs])) if n else 0.0,
        "success_rate": out.count("success") / n if n else 0.0,
        "mean_length": float(np.mean([r["steps"] for r in runs])) if n else 0.0,
        "shield_intervention_rate": sum(r["shield_interventions"] for r in runs) / dec if dec else 0.0,
        "runs": runs,
    }


def run_bench(cfg, net, n_runs, shield_on, seed, log_dir=None, classes=CLASSES, workers=1):
    return {"shield": bool(shield_on), "seed": int(seed), "n_runs": int(n_runs),
            "classes": {c: run_class(cfg, net, c, n_runs, seed, shield_on, log_dir, workers) for c in classes}}


def check_accounting(report):
    for cls, r in report["classes"].items():
        if r["successes"] + r["collisions_episodes"] + r["timeouts"] != r["episodes"]:
            raise AssertionError(f"episode accounting broken for {cls}")


def paired_ratio(on, off, cls="hybrid"):
    a = on["classes"][cls]["total_collisions"]
    b = off["classes"][cls]["total_collisions"]
    return a / b if b else (0.0 if a == 0 else float("inf"))


def format_table(report):
    head = f"{'class':<9}{'eps':>5}{'succ':>7}{'coll/run':>10}{'len':>8}{'shield%':>9}"
    rows = [head]
    for cls, r in report["classes"].items():
        rows.append(f"{cls:<9}{r['episodes']:>5}{r['success_rate']:>7.2f}{r['mean_collisions']:>10.2f}"
                    f"{r['mean_length']:>8.1f}{100 * r['shield_intervention_rate']:>9.1f}")
    return "\n".join(rows)


# ------------------------------------------------------------------ replay

_TICK_KEYS = {"tick": int, "pos": list, "vel": list, "action": list, "obstacles": list, "terms": list,
              "reward": float, "status": str, "contacts": int}


def read_log(path):
    header, ticks, footer = None, [], None
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ReplayError(f"invalid JSON ({e.msg})", ln) from None
            if not isinstance(rec, dict) or "type" not in rec:
                raise ReplayError("record without a type", ln)
            kind = rec["type"]
            if kind == "header":
                if header is not None or ln != 1:
                    raise ReplayError("header must be the first record", ln)
                if rec.get("schema") != SCHEMA:
                    raise ReplayError(f"unsupported schema {rec.get('schema')!r}", ln)
                for k in ("config", "world_seed", "class", "n_dynamic", "base_seed"):
                    if k not in rec:
                        raise ReplayError(f"header missing {k!r}", ln)
                header = rec
            elif kind == "tick":
                if header is None or footer is not None:
                    raise ReplayError("tick outside header/footer", ln)
                for k, t in _TICK_KEYS.items():
                    v = rec.get(k)
                    if t is float and isinstance(v, int):
                        v = float(v)
                    if not isinstance(v, t):
                        raise ReplayError(f"field {k!r} missing or not {t.__name__}", ln)
                if len(rec["action"]) != 3 or not all(isinstance(a, (int, float)) for a in rec["action"]):
                    raise ReplayError("action must be three numbers", ln)
                if rec["tick"] != len(ticks) + 1:
                    raise ReplayError(f"tick {rec['tick']} out of sequence", ln)
                ticks.append(rec)
            elif kind == "footer":
                if footer is not None:
                    raise ReplayError("second footer", ln)
                for k in ("hash", "collisions", "outcome", "steps"):
                    if k not in rec:
                        raise ReplayError(f"footer missing {k!r}", ln)
                footer = rec
            else:
                raise ReplayError(f"unknown record type {kind!r}", ln)
    if header is None:
        raise ReplayError("empty log", 1)
    if footer is None:
        raise ReplayError("missing footer")
    return header, ticks, footer


def replay(path, csv_out=None):
    """Re-simulate a logged episode from its seed and commands; verify the hash."""
    header, ticks, footer = read_log(path)
    cfg = build(header["config"])
    world, _ = class_world(cfg, header["class"])
    env = NavEnv(cfg.env_config(terminate_on_collision=False, world=world), 1, seed=header["base_seed"])
    env.reset_worlds([header["world_seed"]], header["n_dynamic"])
    h = TrajectoryHash()
    traj = []
    for rec in ticks:
        if env.outcome[0] != RUNNING:
            raise NondeterminismError(f"episode ended early at tick {rec['tick']}")
        _, _, info = env.step(np.array([rec["action"]], float))
        m = env.dyn_mask[0]
        h.add(env.pos[0], env.vel[0], env.dyn_pos[0, m], info.terms[0], env.outcome[0], env.contacts[0])
        traj.append([int(env.steps[0]), *env.pos[0], *env.vel[0], OUTCOME_NAMES[int(env.outcome[0])],
                     int(env.contacts[0])])
    digest = h.hexdigest()
    if csv_out is not None:
        with open(csv_out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["tick", "x", "y", "z", "vx", "vy", "vz", "status", "contacts"])
            w.writerows(traj)
    ok = (digest == footer["hash"] and int(env.contacts[0]) == footer["collisions"]
          and OUTCOME_NAMES[int(env.outcome[0])] == footer["outcome"])
    if not ok:
        raise NondeterminismError(f"nondeterminism detected: hash {digest[:12]} vs logged {footer['hash'][:12]}")
    return {"hash": digest, "steps": len(ticks), "collisions": int(env.contacts[0]),
            "outcome": OUTCOME_NAMES[int(env.outcome[0])]}


__all__ = ["CLASSES", "NondeterminismError", "ReplayError", "bench_seeds", "check_accounting", "class_world",
           "format_table", "paired_ratio", "read_log", "replay", "run_bench", "run_class", "summarize_class"]
