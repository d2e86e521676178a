"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  Errors
are printed to stdout as one JSON object and, when an output directory is
known, written to ``error.json`` there.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cf
from . import harness
from .errors import ConfigError, NumericalFailure, ProjFilterError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# flag name -> config key for ``run`` and ``table``
_OVERRIDES = {
    "example": "example",
    "n_o": "n_o",
    "quad_level": "quad_level",
    "alpha": "alpha",
    "gradient": "gradient",
    "solver": "solver",
    "delta": "delta",
    "dt": "dt",
    "steps": "n_steps",
    "metric_stride": "metric_stride",
    "resolution": "resolution",
    "seed": "seed",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="projfilter", description="Renyi-divergence Bayesian update experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)

    for name in ("run", "table"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--example", choices=cf.EXAMPLES)
        p.add_argument("--n-o", dest="n_o", type=int)
        p.add_argument("--quad-level", dest="quad_level", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--gradient", choices=("riemannian", "euclidean"))
        p.add_argument("--solver", choices=("euler", "adaptive_rk"))
        p.add_argument("--delta", type=float)
        p.add_argument("--dt", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--metric-stride", dest="metric_stride", type=int)
        p.add_argument("--resolution", type=int)

    p = sub.add_parser("propagate")
    common(p)
    p.add_argument("--delta-t", dest="delta_t", type=float)
    p.add_argument("--substeps", type=int)

    p = sub.add_parser("grids")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--level", type=int, default=6)
    p.add_argument("--raw", action="store_true", help="keep nodes on (-1, 1)^d")
    p.add_argument("--out", default="grid.csv", help="CSV file to write")

    sub.add_parser("schema", help="print the JSON schemas of all configuration files")
    return parser


def _experiment(args, data: dict) -> cf.ExperimentConfig:
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    if args.out:
        data["output_dir"] = args.out
    return cf.validate(cf.ExperimentConfig, data)


def _emit_error(exc, code, out_dir):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, NumericalFailure):
        payload["iteration"] = exc.iteration
    text = json.dumps(payload)
    print(text)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "error.json").write_text(text + "\n")
    return code


def main(argv=None) -> int:
    out_dir = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out_dir = getattr(args, "out", None)
        data = cf.load_json(args.config) if getattr(args, "config", None) else {}

        if args.command == "run":
            cfg = _experiment(args, data)
            out_dir = cfg.output_dir or "."
            summary = harness.run_update_experiment(cfg, out_dir)
            print(json.dumps({k: summary[k] for k in ("final_hellinger", "final_kl", "iterations")}))
        elif args.command == "table":
            exp = _experiment(args, dict(data.get("experiment", {})) if "experiment" in data or "rows" in data else data)
            rows = data.get("rows") if "rows" in data else None
            table = cf.validate(cf.TableConfig, {"experiment": exp.model_dump(), "rows": rows})
            out_dir = exp.output_dir or "."
            for r in harness.run_table(table, out_dir):
                print(f"{r['method']:<28s} {r['iterations']:>5d} {r['hellinger']:.4e} {r['status']}")
        elif args.command == "propagate":
            if args.delta_t is not None:
                data["delta_t"] = args.delta_t
            if args.substeps is not None:
                data["n_substeps"] = args.substeps
            if args.out:
                data["output_dir"] = args.out
            pcfg = cf.validate(cf.PropagateConfig, data)
            out_dir = pcfg.output_dir or "."
            print(json.dumps(harness.run_propagate(pcfg, out_dir)))
        elif args.command == "grids":
            grid = harness.dump_grid(args.dim, args.level, args.out, transformed=not args.raw)
            print(json.dumps({"nodes": grid.size, "path": args.out}))
        else:
            print(json.dumps(cf.json_schemas(), indent=2))
        return EXIT_OK
    except ConfigError as exc:
        return _emit_error(exc, EXIT_CONFIG, out_dir)
    except ProjFilterError as exc:
        return _emit_error(exc, EXIT_NUMERICAL, out_dir)


if __name__ == "__main__":
    sys.exit(main())
