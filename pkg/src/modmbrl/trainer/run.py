"""The outer training loop: model fit, policy phase, curriculum, data aggregation."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore import checkpoint
from ..gnn import Networks
from .collect import collect_onpolicy
from .config import ExperimentConfig, write_design_files
from .curriculum import CurriculumState
from .dataset import TrajectoryDataset, collect_random
from .episodes import policy_episodes
from .model_fit import train_model, train_torque_estimator
from .policy_opt import LRState, TerrainCache, ValidationSet, make_buffer, optimize_policy, sample_entries

CURVE_FIELDS = ("iteration", "design", "env", "level", "distance", "model_mse", "val_reward")
EVAL_SEED_BASE = 10_000


class RunAborted(RuntimeError):
    pass


@dataclass
class RunResult:
    run_dir: Path
    checkpoints: list[Path] = field(default_factory=list)
    checksums: list[str] = field(default_factory=list)
    levels: list[dict] = field(default_factory=list)
    dataset_sizes: list[int] = field(default_factory=list)

    @property
    def final_checkpoint(self) -> Path:
        return self.checkpoints[-1]


class KVLog:
    """One ``key=value`` line per phase, mirrored to an optional callback."""

    def __init__(self, path: Path, echo=None):
        self.fh = open(path, "w")
        self.echo = echo

    def __call__(self, line: str):
        self.fh.write(line + "\n")
        self.fh.flush()
        if self.echo:
            self.echo(line)

    def close(self):
        self.fh.close()


def save_checkpoint(nets: Networks, path: Path, meta: dict) -> str:
    tensors = nets.store.state()
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return checkpoint.save(path, tensors)


def load_networks(path, cfg) -> Networks:
    """Rebuild networks for ``cfg`` and load weights, diffing shapes on mismatch."""
    nets = Networks(cfg.net, cfg.seed)
    nets.store.load_state(checkpoint.load(path))
    return nets


def evaluate_curriculum(nets, cfg: ExperimentConfig, cs: CurriculumState, iteration: int):
    """Mean deterministic-policy distance per design over envs at current levels."""
    per_design, cells = {}, []
    seeds = [EVAL_SEED_BASE + 100 * iteration + i for i in range(cfg.hp.eval_episodes)]
    for d in cfg.train:
        ds = []
        for env in cfg.envs:
            dist = float(policy_episodes(nets, d, env, cs.levels[d.name], seeds).distance.mean())
            ds.append(dist)
            cells.append((d.name, env.value, cs.levels[d.name], dist))
        per_design[d.name] = float(np.mean(ds))
    return per_design, cells


def run(cfg: ExperimentConfig, out_dir, echo=None) -> RunResult:
    """Run ``cfg.hp.N`` iterations; fully determined by (config, seed)."""
    hp = cfg.hp
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_design_files(cfg, out)
    (out / "config.resolved").write_text(cfg.resolved())
    log = KVLog(out / "train.log", echo)
    result = RunResult(out)
    rng = np.random.default_rng([cfg.seed, 1])
    nets = Networks(cfg.net, cfg.seed)
    data = TrajectoryDataset()
    for i, d in enumerate(cfg.train):
        data.extend(d, collect_random(d, None, hp.random_traj, seed=cfg.seed * 1000 + i,
                                      steps=hp.random_steps))
    log(f"phase=bootstrap transitions={len(data)} designs={len(cfg.train)}")
    cs = CurriculumState.start([d.name for d in cfg.train], cfg.start_level, cfg.max_level,
                               hp.threshold, hp.per_design_curriculum)
    cache = TerrainCache()
    curves = open(out / "curves.csv", "w", newline="")
    writer = csv.writer(curves)
    writer.writerow(CURVE_FIELDS)
    try:
        for it in range(hp.N):
            t0 = time.perf_counter()
            mfit = train_model(nets, data, hp, rng)
            log(f"iter={it} phase=model val_mse={mfit.val_mse:.6f} initial={mfit.initial_val_mse:.6f} "
                f"diverged={int(mfit.diverged)} n_train={mfit.n_train}")
            tfit = train_torque_estimator(nets, data, hp, rng)
            log(f"iter={it} phase=torque val_mse={tfit.val_mse:.6f}")

            buf = make_buffer(cfg.train, cfg.envs, cs.levels, cfg.start_level, hp.n_batch,
                              cfg.net.hidden, rng, hp.x0_spread, cache)
            val = ValidationSet(sample_entries(cfg.train, cfg.envs, cs.levels, cfg.start_level,
                                               hp.val_factor * hp.n_batch, cfg.net.hidden, rng,
                                               hp.x0_spread, cache))
            pres = optimize_policy(nets, buf, val, hp, rng, LRState(hp.policy_lr),
                                   log=lambda m: log(f"iter={it} {m}"))
            if pres.aborted:
                raise RunAborted(f"iteration {it}: policy phase aborted: {pres.aborted}")
            log(f"iter={it} phase=policy val_start={pres.val_rewards[0]:.5f} "
                f"val_end={pres.val_rewards[-1]:.5f} reverts={pres.reverts} lr={pres.lr:.3g}")

            dists, cells = evaluate_curriculum(nets, cfg, cs, it)
            for name, env, lvl, dist in cells:
                writer.writerow([it, name, env, lvl, f"{dist:.4f}", f"{mfit.val_mse:.6f}",
                                 f"{pres.val_rewards[-1]:.6f}"])
            curves.flush()
            advanced = cs.update(dists)
            log(f"iter={it} phase=curriculum " + " ".join(f"{k}={v:.3f}" for k, v in dists.items())
                + f" advanced={int(advanced)} levels=" + ",".join(f"{k}:{v}" for k, v in cs.levels.items()))

            new = collect_onpolicy(nets, cfg.train, cfg.envs, cs, cfg.start_level, hp,
                                   seed=cfg.seed * 1000 + it)
            before = len(data)
            for d in cfg.train:
                data.extend(d, new[d.name])
            log(f"iter={it} phase=collect added={len(data) - before} total={len(data)}")

            path = out / f"iter_{it:02d}.ckpt"
            meta = {"iteration": it, "levels": cs.levels, "config_digest": cfg.digest(),
                    "seed": cfg.seed}
            result.checksums.append(save_checkpoint(nets, path, meta))
            result.checkpoints.append(path)
            result.levels.append(dict(cs.levels))
            result.dataset_sizes.append(len(data))
            log(f"iter={it} phase=checkpoint path={path.name} sha256={result.checksums[-1][:16]} "
                f"seconds={time.perf_counter() - t0:.1f}")
        final = out / "final.ckpt"
        last = result.checkpoints[-1]
        final.write_bytes(last.read_bytes())
        final.with_suffix(".json").write_text(last.with_suffix(".json").read_text())
        result.checkpoints.append(final)
        (out / "DONE").write_text(cfg.digest() + "\n")
    finally:
        curves.close()
        log.close()
    return result
