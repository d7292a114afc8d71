"""``modmbrl`` command line. Exit codes: 0 success, 1 invariant failure, 2 config error."""

from __future__ import annotations

import argparse
import sys
from contextlib import nullcontext
from pathlib import Path

from ..trainer import ConfigError, RunAborted
from . import commands as C

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2


def _globals(p: argparse.ArgumentParser, top: bool):
    d = {} if top else {"default": argparse.SUPPRESS}
    p.add_argument("--seed", type=int, **({"default": None} if top else d),
                   help="base seed for episodes (default 0); overrides the config seed for train")
    p.add_argument("--threads", type=int, **({"default": None} if top else d),
                   help="cap BLAS/OpenMP threads")
    p.add_argument("--format", choices=("csv", "json"), **({"default": "csv"} if top else d))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modmbrl", description=__doc__)
    _globals(p, top=True)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop from a config file")
    t.add_argument("config")
    t.add_argument("--out", help="run directory (default runs/<config digest>)")
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    t.add_argument("--quiet", action="store_true")

    def cells(q, levels="1-5", designs="all"):
        q.add_argument("--designs", default=designs, help="train, test, all or comma list")
        q.add_argument("--envs", default="stairs,curbs")
        q.add_argument("--levels", default=levels, help="e.g. 5, 1-5, 1,3")
        q.add_argument("--episodes", type=int, default=C.EPISODES)
        q.add_argument("--out", help="write the report here instead of stdout")

    def dumps(q):
        q.add_argument("--dump", help="write per-step trajectories (binary container)")
        q.add_argument("--dump-csv", help="export the same trajectories as CSV")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="config (default: config.resolved next to the checkpoint)")
    cells(e)
    dumps(e)

    b = sub.add_parser("baseline", help="evaluate the tripod baseline")
    cells(b)
    dumps(b)

    a = sub.add_parser("ablate-blind", help="paired sighted vs blindfolded evaluation")
    a.add_argument("checkpoint")
    a.add_argument("--config")
    cells(a, levels="5", designs="train")
    a.set_defaults(envs="stairs")

    g = sub.add_parser("gradcheck", help="central-difference gradient suite")
    g.add_argument("--points", type=int, default=10)
    g.add_argument("--horizon", type=int, default=16)

    for q in (t, e, b, a, g):
        _globals(q, top=False)
    return p


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dispatch(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.command == "train":
        echo = None if args.quiet else (lambda m: print(m, file=sys.stderr))
        cfg, res = C.cmd_train(args.config, args.out, args.dry_run, args.seed, echo)
        if res is None:
            sys.stdout.write(cfg.resolved())
        else:
            print(f"run_dir={res.run_dir} checkpoint={res.final_checkpoint} "
                  f"sha256={res.checksums[-1]}")
        return EXIT_OK
    if args.command == "eval":
        rep = C.cmd_eval(args.checkpoint, args.designs, args.envs, args.levels, args.episodes,
                         seed, args.config, args.dump, args.dump_csv)
    elif args.command == "baseline":
        rep = C.cmd_baseline(args.designs, args.envs, args.levels, args.episodes, seed,
                             args.dump, args.dump_csv)
    elif args.command == "ablate-blind":
        rep = C.cmd_ablate_blind(args.checkpoint, args.designs, args.envs, args.levels,
                                 args.episodes, seed, args.config)
        print(f"paired wins (sighted > blind): {rep.meta['wins']}", file=sys.stderr)
    else:
        rows, ok = C.cmd_gradcheck(args.points, args.horizon, seed)
        sys.stdout.write(C.render_gradcheck(rows, args.format))
        return EXIT_OK if ok else EXIT_INVARIANT
    _emit(rep.render(args.format), args.out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads:
        from threadpoolctl import threadpool_limits
        ctx = threadpool_limits(limits=args.threads)
    else:
        ctx = nullcontext()
    try:
        with ctx:
            return _dispatch(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunAborted, C.InvariantFailure) as e:
        print(f"invariant failure: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
