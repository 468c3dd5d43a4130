"""Command-line entry point: ``txres <stage> [options]`` or ``txres run``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .pipeline import ConfigError, PipelineConfig, run_stages

logger = logging.getLogger("txresilience")

LOG_FORMAT = "%(asctime)s level=%(levelname)s logger=%(name)s %(message)s"


def read_event_file(path: str) -> list[str]:
    """One ISO date per line; blank lines and ``#`` comments are ignored."""
    out = []
    for line in Path(path).read_text("utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="flat INI file with a [pipeline] section")
    g.add_argument("--output-dir", dest="output_dir", help="output directory (overrides TXRES_OUTPUT_DIR)")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-jobs", dest="n_jobs", type=int, help="parallel workers; never changes results")
    g.add_argument("--format", dest="output_format", choices=["csv", "jsonl"], help="format of result tables")
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _source(p):
    p.add_argument("--input", help="transactions CSV")
    p.add_argument("--scenario", help="synthetic scenario file or preset name")
    p.add_argument("--mapping", help="MCC to COICOP mapping CSV")
    p.add_argument("--start", help="first day kept (ISO date)")
    p.add_argument("--end", help="last day kept (ISO date)")


def _add_weight(p):
    p.add_argument("--weight", choices=["amount", "count"], help="share vectors by amount or by transaction count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="txres", description="Consumption-resilience analysis of card-transaction streams.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("run", help="run every stage in dependency order")
    _source(p)
    _add_weight(p)
    p.add_argument("--w", type=int)
    p.add_argument("--intervention-date", dest="intervention_date")
    p.add_argument("--control", help="control district id(s), comma separated")
    p.add_argument("--events", help="file of event dates for core z-scores")
    p.add_argument("--stages", help="comma-separated subset of stages")
    _common(p)

    p = sub.add_parser("synth", help="generate synthetic transactions")
    p.add_argument("--scenario", required=True, help="scenario file or preset name (small, default, shock, causal, core)")
    _common(p)

    p = sub.add_parser("ingest", help="validate a transactions file")
    _source(p)
    _common(p)

    p = sub.add_parser("demographics", help="average monthly purchase, classes and Gini")
    p.add_argument("--min-monthly", dest="min_monthly", type=float)
    _common(p)

    p = sub.add_parser("divergence", help="D1/D2 divergence series and share vectors")
    p.add_argument("--kind", choices=["d1", "d2", "both"], default=None)
    p.add_argument("--w", type=int, help="window length in days")
    p.add_argument("--share-window", dest="d2_share_window", type=int, help="days per share vector compared by D2")
    _add_weight(p)
    _common(p)

    p = sub.add_parser("causal", help="counterfactual district classification")
    p.add_argument("--intervention-date", dest="intervention_date")
    p.add_argument("--control", help="control district id(s), comma separated; default the largest-spend district")
    p.add_argument("--confidence", type=float)
    p.add_argument("--n-bootstrap", dest="n_bootstrap", type=int)
    _add_weight(p)
    _common(p)

    p = sub.add_parser("behavior", help="per-user nDCG and district weekly means")
    p.add_argument("--emit-users", dest="behavior_users", action="store_true", default=None, help="also write per-user rows with hashed ids")
    _common(p)

    p = sub.add_parser("graph", help="daily merchant transaction graphs")
    p.add_argument("--half-width", dest="half_width", type=int, help="days on each side of the snapshot date")
    _common(p)

    p = sub.add_parser("rank", help="PageRank and normalized rank per snapshot")
    p.add_argument("--alpha", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--rank-mode", dest="rank_mode", choices=["ordinal", "score"])
    _common(p)

    p = sub.add_parser("cluster", help="1d-SAX trajectory clustering of ranks")
    p.add_argument("--L", dest="sax_L", type=int, help="segment length")
    p.add_argument("--N", dest="sax_N", type=int, help="alphabet size")
    p.add_argument("--mean-levels", dest="sax_mean_levels", type=int)
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--min-presence", dest="min_presence", type=float)
    _common(p)

    p = sub.add_parser("core", help="rich-core sizes, event z-scores and k-shell dynamics")
    p.add_argument("--events", help="file with one ISO date per line")
    _common(p)
    return parser


_NOT_CONFIG = {"command", "config", "log_level", "kind", "events"}


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    base = PipelineConfig.from_file(args.config) if args.config else PipelineConfig().with_env()
    values = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG and v is not None}
    if getattr(args, "kind", None):
        values["divergence_kinds"] = ["d1", "d2"] if args.kind == "both" else [args.kind]
    if getattr(args, "events", None):
        values["events"] = read_event_file(args.events)
    if args.command == "synth":
        values["input"] = None
    over = PipelineConfig.from_mapping(values)
    # only fields given on the command line replace the base values
    return replace(base, **{f: getattr(over, f) for f in values})


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    try:
        cfg = config_from_args(args)
        if args.command == "run":
            cfg.validate()
            stages = cfg.stages
        else:
            cfg.validate(require_source=args.command in ("synth", "ingest"))
            stages = (args.command,)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"txres: error: {exc}", file=sys.stderr)
        return 2
    report = run_stages(cfg, stages)
    json.dump(report.to_dict(), sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")
    return 0 if report.ok else 1
