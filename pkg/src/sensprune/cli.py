"""Command-line front end.

Every subcommand prints a JSON summary on stdout. Failures exit with status 1
and a single JSON line ``{"error": ..., "type": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import harness, io


def _shape(text: str):
    return tuple(int(v) for v in text.replace("x", ",").split(",") if v)


def _common(p: argparse.ArgumentParser, budget=True):
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--data", required=True, help="tensor file for the sensitivity split")
    p.add_argument("--test-data", help="tensor file for the empirical evaluation")
    p.add_argument("--strategy", default="det", choices=harness.RUN_STRATEGIES)
    if budget:
        g = p.add_mutually_exclusive_group(required=True)
        g.add_argument("--budget", type=int, help="number of weights to keep")
        g.add_argument("--ratio", type=float, help="fraction of weights to remove")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--c-const", type=float, default=2.0)
    p.add_argument("--k-const", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-size", type=int, help="override the size of the sample set")
    p.add_argument("--floor", type=int, default=1, help="weights every group keeps (det/rand/hybrid)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sensprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a random model bundle")
    p.add_argument("--input-shape", required=True, type=_shape, help="e.g. 16 or 1,8,8")
    p.add_argument("--layers", required=True, help="e.g. dense:16:relu,dense:8:identity")
    p.add_argument("--init", default="uniform_nonneg", choices=harness.INITS)
    p.add_argument("--bias", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="write a random tensor batch file")
    p.add_argument("--shape", required=True, type=_shape, help="per-sample shape")
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--distribution", default="uniform_nonneg", choices=harness.INITS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("prune", help="prune a model and certify the result")
    _common(p)

    p = sub.add_parser("bound", help="certificate only, no pruned model")
    _common(p)

    p = sub.add_parser("sweep", help="prune at several ratios and write sweep.csv")
    _common(p, budget=False)
    p.add_argument("--ratios", required=True, help="comma separated prune ratios")
    p.add_argument("--strategies", help="comma separated; defaults to --strategy")

    p = sub.add_parser("eval", help="empirical error of a pruned model against a reference")
    p.add_argument("--model", required=True, help="pruned model bundle")
    p.add_argument("--reference", required=True, help="reference model bundle")
    p.add_argument("--test-data", required=True)
    p.add_argument("--eps", type=float, help="certificate to measure coverage against")
    return parser


def _config(args) -> harness.RunConfig:
    return harness.RunConfig(
        model=args.model, data=args.data, test_data=args.test_data, strategy=args.strategy,
        budget=getattr(args, "budget", None), ratio=getattr(args, "ratio", None),
        delta=args.delta, C=args.c_const, K=args.k_const, seed=args.seed, out=args.out,
        sample_size=args.sample_size, floor=args.floor)


def run(args) -> dict:
    if args.command == "gen-model":
        net = harness.gen_model(args.out, args.input_shape, args.layers, args.init, args.seed, args.bias)
        return {"out": args.out, "layers": net.L, "weights": net.prunable_count()}
    if args.command == "gen-data":
        data = harness.gen_data(args.out, args.shape, args.distribution, args.count, args.seed)
        return {"out": args.out, "shape": list(data.shape)}
    if args.command == "prune":
        report, _ = harness.prune_run(_config(args))
        return report.to_dict()
    if args.command == "bound":
        cert = harness.certify(_config(args))
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            cert.write_json(Path(args.out) / "certificate.json")
        return cert.to_dict()
    if args.command == "sweep":
        ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
        strategies = args.strategies.split(",") if args.strategies else None
        rows = harness.sweep(_config(args), ratios, strategies)
        return {"rows": rows}
    if args.command == "eval":
        return harness.evaluate(args.model, args.reference, args.test_data, args.eps)
    raise ValueError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (ValueError, IndexError, OSError, io.FormatError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1
    print(json.dumps(_finite(result), indent=2, default=_jsonable, allow_nan=False))
    return 0


def _finite(obj):
    """Replace NaN and infinities by null so stdout stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _jsonable(obj):
    try:
        return _finite(float(obj))
    except (TypeError, ValueError):
        return str(obj)


if __name__ == "__main__":
    sys.exit(main())
