"""Command-line entry point: ``pfqn <experiment> --config net.json --out dir``."""

from __future__ import annotations

import argparse
import sys

from . import experiments
from .errors import ConfigError, PfqnError


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfqn", description="Product-form multi-class PS network experiments.")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in experiments.KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", required=True, help="network description (JSON)")
        p.add_argument("--out", help="output directory for CSV files and meta.json")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=["csv"], default="csv")
        p.add_argument("--n", type=_floats, help="documents per route, e.g. 1,1,1")
        p.add_argument("--h", type=_ints, help="scaling factors, strictly increasing")
        p.add_argument("--c", type=_ints, help="packet speed-ups, strictly increasing")
        p.add_argument("--epsilon", type=float, default=0.1)
        p.add_argument("--horizon", type=float, default=60_000.0)
        p.add_argument("--replicas", type=int, default=1)
        p.add_argument("--max-events", type=int)
        p.add_argument("--samples", type=int, default=20_000)
        p.add_argument("--box", type=int, default=50)
        p.add_argument("--allocation", choices=["spinning", "pf"], default="spinning")
    return parser


def spec_from_args(args: argparse.Namespace) -> experiments.ExperimentSpec:
    network = experiments.load_network(args.config)
    if not 0 <= args.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    kw = dict(
        kind=args.kind,
        network=network,
        n=args.n,
        epsilon=args.epsilon,
        seed=args.seed,
        horizon=args.horizon,
        replicas=args.replicas,
        max_events=args.max_events,
        samples=args.samples,
        box=args.box,
        allocation=args.allocation,
        config_path=args.config,
        out_dir=args.out,
    )
    if args.h is not None:
        kw["h"] = args.h
    if args.c is not None:
        kw["c"] = args.c
    return experiments.ExperimentSpec(**kw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = spec_from_args(args)
        tables = experiments.run(spec)
        if args.out:
            for path in experiments.write_result(tables[0], spec, args.out, tables[1:]):
                print(path)
        else:
            sys.stdout.write(tables[0].to_csv())
    except PfqnError as exc:
        print(f"pfqn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
