"""Command line entry point: ``pdcfrs run|sweep|synth``."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from . import synthetic
from .config import ConfigError, load_config
from .experiment import SWEEPABLE, run, sweep

log = logging.getLogger("pdcfrs")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--no-aug", dest="augmentation", action="store_false", default=None)
    p.add_argument("--no-item-cl", dest="item_cl", action="store_false", default=None)
    p.add_argument("--no-user-cl", dest="user_cl", action="store_false", default=None)
    p.add_argument("--timing", dest="record_timing", action="store_true", default=None,
                   help="fill the wall_ms column (breaks byte-identical reruns)")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")


_OVERRIDES = ("seed", "epsilon", "alpha", "beta", "lam", "tau", "rounds", "augmentation", "item_cl", "user_cl",
              "record_timing", "out")


def _parse_value(param: str, raw: str):
    return int(raw) if param == "alpha" else float(raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdcfrs", description="Federated NCF with privacy-preserving data contribution")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_common(p_run)
    p_run.add_argument("--contributions", help="reuse a perturbed-contribution dump instead of perturbing")

    p_sweep = sub.add_parser("sweep", help="run one experiment per parameter value")
    _add_common(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=SWEEPABLE)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--same-seed", action="store_true", help="do not offset the seed per value")

    p_syn = sub.add_parser("synth", help="write a synthetic dataset (ratings.dat, movies.dat, vectors.txt)")
    p_syn.add_argument("--out", required=True)
    p_syn.add_argument("--users", type=int, default=1000)
    p_syn.add_argument("--items", type=int, default=400)
    p_syn.add_argument("--clusters", type=int, default=20)
    p_syn.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "synth":
            paths = synthetic.write(synthetic.generate(args.users, args.items, args.clusters, seed=args.seed), args.out)
            for name, p in paths.items():
                print(f"{name}: {p}")
            return 0

        cfg = load_config(args.config, {k: getattr(args, k) for k in _OVERRIDES})
        if args.command == "run":
            res = run(cfg, contributions_path=args.contributions)
            f = res.final
            print(f"{res.variant}\tround={f.round}\trecall@{f.k}={f.recall_at_k:.5f}\tndcg@{f.k}={f.ndcg_at_k:.5f}"
                  f"\tout={res.out_dir}")
            return 0

        values = [_parse_value(args.param, v) for v in args.values.split(",") if v.strip()]
        rows = sweep(cfg, args.param, values, seed_offset=not args.same_seed)
        print(f"{args.param}\tseed\trecall@{cfg.k}\tndcg@{cfg.k}")
        for r in rows:
            print(f"{r[args.param]}\t{r['seed']}\t{r['recall']:.5f}\t{r['ndcg']:.5f}" + (f"\terror: {r['error']}" if r["error"] else ""))
        return 1 if any(r["error"] for r in rows) else 0
    except (ConfigError, FileNotFoundError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
