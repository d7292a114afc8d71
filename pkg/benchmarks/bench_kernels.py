"""Throughput of the simulator step kernels: numba loop vs vectorised numpy.

    python benchmarks/bench_kernels.py --batch 1 16 256 --steps 200

Both kernels advance identical batches of random states; the script checks
that they agree and reports control steps per second. Set MODMBRL_NO_JIT=1
to confirm the numpy path is what the library uses without numba.
"""

import argparse
import time

import numpy as np

from modmbrl import _env
from modmbrl.design import builtin_design
from modmbrl.simworld import RobotSim, make_terrain
from modmbrl.simworld.constants import VMAX


def bench(design: str, batch: int, steps: int, use_jit: bool, seed: int = 0):
    d = builtin_design(design)
    sim = RobotSim(d)
    hfs = [make_terrain("stairs", 3, s) for s in range(batch)]
    heights = np.stack([h.heights for h in hfs])
    env_idx = np.arange(batch)
    rng = np.random.default_rng(seed)
    s = np.stack([sim.reset(h, i) for i, h in enumerate(hfs)])
    acts = rng.uniform(-VMAX, VMAX, (steps, batch, d.n_joints))
    sim.step(s, acts[0], heights, env_idx, use_jit=use_jit)  # compile / warm up
    t0 = time.perf_counter()
    for a in acts:
        s, _, _ = sim.step(s, a, heights, env_idx, use_jit=use_jit)
    return time.perf_counter() - t0, s


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--design", default="legs-three")
    ap.add_argument("--batch", type=int, nargs="+", default=[1, 16, 256])
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args(argv)

    kernels = [False] + ([True] if _env.HAVE_NUMBA else [])
    print(f"design={args.design} steps={args.steps} numba={'yes' if _env.HAVE_NUMBA else 'no'}")
    print(f"{'batch':>6} {'kernel':>7} {'seconds':>9} {'steps/s':>12} {'max |diff|':>11}")
    for b in args.batch:
        ref = None
        for jit in kernels:
            dt, s = bench(args.design, b, args.steps, jit)
            diff = "" if ref is None else f"{np.abs(s - ref).max():11.2e}"
            ref = s if ref is None else ref
            name = "numba" if jit else "numpy"
            print(f"{b:>6} {name:>7} {dt:9.3f} {b * args.steps / dt:12.0f} {diff:>11}")


if __name__ == "__main__":
    main()
