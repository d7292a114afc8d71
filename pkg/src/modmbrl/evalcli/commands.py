"""Evaluation, baseline, ablation, training and gradient-check commands."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..design import DesignError, builtin_design, builtin_sets, load_design
from ..diffcore import checkpoint
from ..diffcore.gradsuite import TOLERANCE as OP_TOLERANCE, run_op_suite
from ..gnn import Networks
from ..simworld import RobotSim, TerrainKind, make_terrain
from ..simworld.terrain import terrain_window
from ..simworld.trajio import StepRecord, export_csv, write_trajectories
from ..trainer import ConfigError, ExperimentConfig, load_config, run
from ..trainer.checks import rollout_gradcheck
from ..trainer.episodes import EpisodeBatch, baseline_episodes, policy_episodes
from .report import EvalReport, ReportRow

EPISODES = 10
SEED_STRIDE = 1000
E2E_TOLERANCE = 1e-4
TRAIN_ENVS = (TerrainKind.STAIRS, TerrainKind.CURBS)


class InvariantFailure(RuntimeError):
    """Exit code 1."""


class CheckpointMismatch(ConfigError):
    """Checkpoint tensors do not match the networks the config describes."""


# -- argument resolution ------------------------------------------------------

def parse_levels(arg: str) -> list[int]:
    try:
        out = []
        for part in str(arg).split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                out += list(range(lo, hi + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"bad level list {arg!r}; use e.g. 5, 1-5 or 1,3") from None
    if not out or min(out) < 0:
        raise ConfigError(f"bad level list {arg!r}")
    return sorted(set(out))


def resolve_designs(arg: str, train_names=None, test_names=None):
    """``train``, ``test``, ``all`` or a comma list of builtin names / design files."""
    if train_names is None:
        sets = builtin_sets()
        train = list(sets.train)
        test = list(sets.test)
    else:
        train = [builtin_or_file(n) for n in train_names]
        test = [builtin_or_file(n) for n in test_names]
    names = {d.name for d in train}
    pick = {"train": train, "test": test, "all": train + test}.get(arg)
    if pick is None:
        pick = [builtin_or_file(x.strip()) for x in arg.split(",") if x.strip()]
    if not pick:
        raise ConfigError("no designs selected")
    return [(d, "train" if d.name in names else "test") for d in pick]


def builtin_or_file(ref):
    if not isinstance(ref, str):
        return ref
    try:
        if ref.startswith("builtin:"):
            return builtin_design(ref.split(":", 1)[1])
        if Path(ref).suffix or "/" in ref:
            return load_design(ref)
        return builtin_design(ref)
    except DesignError as e:
        raise ConfigError(str(e)) from None


def resolve_envs(arg: str, train_envs=TRAIN_ENVS):
    try:
        kinds = [TerrainKind.parse(x.strip()) for x in arg.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if not kinds:
        raise ConfigError("no environments selected")
    return [(k, "train" if k in train_envs else "test") for k in kinds]


def episode_seeds(seed: int, n: int = EPISODES) -> list[int]:
    return [seed * SEED_STRIDE + i for i in range(n)]


# -- checkpoints ----------------------------------------------------------------

def shape_diff(expected: dict, found: dict) -> list[str]:
    lines = []
    for k in sorted(set(expected) | set(found)):
        if k not in found:
            lines.append(f"  {k}: expected {tuple(expected[k].shape)}, missing in checkpoint")
        elif k not in expected:
            lines.append(f"  {k}: unexpected tensor {tuple(found[k].shape)} in checkpoint")
        elif expected[k].shape != found[k].shape:
            lines.append(f"  {k}: expected {tuple(expected[k].shape)}, found {tuple(found[k].shape)}")
    return lines


def load_run(ckpt, config=None) -> tuple[ExperimentConfig, Networks, str]:
    ckpt = Path(ckpt)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    cfg_path = Path(config) if config else ckpt.parent / "config.resolved"
    cfg = load_config(cfg_path)
    try:
        found = checkpoint.load(ckpt)
    except checkpoint.CheckpointError as e:
        raise ConfigError(f"{ckpt}: {e}") from None
    nets = Networks(cfg.net, cfg.seed)
    diff = shape_diff(nets.store.state(), found)
    if diff:
        raise CheckpointMismatch(f"{ckpt} does not match {cfg_path}:\n" + "\n".join(diff))
    nets.store.load_state(found)
    return cfg, nets, checkpoint.file_checksum(ckpt)[:16]


# -- trajectory dumps -----------------------------------------------------------

def episode_records(d, env, level, seeds, batch: EpisodeBatch, heights) -> list[StepRecord]:
    sim = RobotSim(d)
    out = []
    for e, seed in enumerate(seeds):
        S, A = batch.states[e], batch.actions[e]
        n = int(batch.n_steps[e])
        for t in range(n):
            s, s1 = S[t], S[t + 1]
            failed = bool(batch.failed[e] and t == n - 1)
            r = float(sim.reward(s, s1, failed=np.array([failed]))[0])
            win = terrain_window(heights[e], s[0], s[1])
            out.append(StepRecord(d.name, env.value, level, seed, t, s, A[t], r, win))
    return out


def _dump(records, dump, dump_csv):
    if dump:
        write_trajectories(dump, records)
    if dump_csv:
        export_csv(records, dump_csv)


def _heights(env, level, seeds):
    return np.stack([make_terrain(env, level, s).heights for s in seeds])


# -- commands -------------------------------------------------------------------

def _cells(designs, envs, levels):
    for d, dsplit in designs:
        for env, esplit in envs:
            for lvl in ([0] if env is TerrainKind.FLAT else levels):
                yield d, dsplit, env, esplit, lvl


def cmd_eval(ckpt, designs="all", envs="stairs,curbs", levels="1-5", episodes=EPISODES,
             seed=0, config=None, dump=None, dump_csv=None) -> EvalReport:
    cfg, nets, cid = load_run(ckpt, config)
    ds = resolve_designs(designs, [d for d in cfg.train], [d for d in cfg.test])
    es = resolve_envs(envs, cfg.envs)
    seeds = episode_seeds(seed, episodes)
    rows, records = [], []
    for d, dsplit, env, esplit, lvl in _cells(ds, es, parse_levels(levels)):
        b = policy_episodes(nets, d, env, lvl, seeds)
        rows.append(ReportRow("policy", d.name, dsplit, env.value, esplit, lvl, "sighted",
                              list(b.distance)))
        if dump or dump_csv:
            records += episode_records(d, env, lvl, seeds, b, _heights(env, lvl, seeds))
    _dump(records, dump, dump_csv)
    return EvalReport(rows, {"command": "eval", "config": cfg.digest(), "seed": seed,
                             "checkpoint": cid})


def cmd_baseline(designs="all", envs="stairs,curbs", levels="1-5", episodes=EPISODES, seed=0,
                 dump=None, dump_csv=None) -> EvalReport:
    ds = resolve_designs(designs)
    es = resolve_envs(envs)
    seeds = episode_seeds(seed, episodes)
    rows, records = [], []
    for d, dsplit, env, esplit, lvl in _cells(ds, es, parse_levels(levels)):
        b = baseline_episodes(d, env, lvl, seeds)
        rows.append(ReportRow("baseline", d.name, dsplit, env.value, esplit, lvl, "sighted",
                              list(b.distance)))
        if dump or dump_csv:
            records += episode_records(d, env, lvl, seeds, b, _heights(env, lvl, seeds))
    _dump(records, dump, dump_csv)
    return EvalReport(rows, {"command": "baseline", "config": "-", "seed": seed,
                             "checkpoint": "-"})


def cmd_ablate_blind(ckpt, designs="train", env="stairs", level=5, episodes=EPISODES, seed=0,
                     config=None) -> EvalReport:
    """Sighted and blindfolded rows on identical seeds; ``meta['wins']`` counts paired wins."""
    cfg, nets, cid = load_run(ckpt, config)
    ds = resolve_designs(designs, list(cfg.train), list(cfg.test))
    es = resolve_envs(env, cfg.envs)
    seeds = episode_seeds(seed, episodes)
    rows, wins, pairs = [], 0, 0
    for d, dsplit, kind, esplit, lvl in _cells(ds, es, parse_levels(level)):
        seen = policy_episodes(nets, d, kind, lvl, seeds).distance
        blind = policy_episodes(nets, d, kind, lvl, seeds, blind=True).distance
        rows.append(ReportRow("policy", d.name, dsplit, kind.value, esplit, lvl, "sighted", list(seen)))
        rows.append(ReportRow("policy", d.name, dsplit, kind.value, esplit, lvl, "blind", list(blind)))
        wins += int(np.sum(seen > blind))
        pairs += len(seeds)
    return EvalReport(rows, {"command": "ablate-blind", "config": cfg.digest(), "seed": seed,
                             "checkpoint": cid, "wins": f"{wins}/{pairs}"})


def cmd_gradcheck(points: int = 10, rollout_T: int = 16, seed: int = 0) -> tuple[list[dict], bool]:
    rows = [{"check": f"op:{k}", "max_rel_err": v, "threshold": OP_TOLERANCE}
            for k, v in run_op_suite(points).items()]
    err = rollout_gradcheck(T=rollout_T, seed=seed)
    rows.append({"check": f"rollout:T={rollout_T}", "max_rel_err": err, "threshold": E2E_TOLERANCE})
    for r in rows:
        r["status"] = "pass" if r["max_rel_err"] < r["threshold"] else "FAIL"
    return rows, all(r["status"] == "pass" for r in rows)


def render_gradcheck(rows, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=1) + "\n"
    lines = ["check,max_rel_err,threshold,status"]
    lines += [f"{r['check']},{r['max_rel_err']:.3e},{r['threshold']:.0e},{r['status']}" for r in rows]
    return "\n".join(lines) + "\n"


def cmd_train(config, out=None, dry_run=False, seed=None, echo=None):
    cfg = load_config(config)
    if seed is not None:
        cfg.seed = seed
    if dry_run:
        return cfg, None
    out = Path(out) if out else Path("runs") / cfg.digest()
    return cfg, run(cfg, out, echo=echo)
