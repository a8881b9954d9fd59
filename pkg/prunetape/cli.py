"""
Command-line entry point: `prunetape <subcommand> [flags]`.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from prunetape.catalog import RunCatalog
from prunetape.config import apply_overrides, load_experiment_spec
from prunetape.constants import EXTRACTED_NAME, TABLE_CSV_NAME
from prunetape.exceptions import ConfigError, PruneTapeError
from prunetape.experiments import run_experiment, run_single
from prunetape.extraction import extract_compressed, save_extracted
from prunetape.latency import build_table, save_table
from prunetape.schemas import CostModel, ExperimentSpec, SurrogateKind
from prunetape.trainer import load_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir", dest="out_dir")
    parser.add_argument("--lambda", dest="lam", type=float, help="lambda_max of the cost term")
    parser.add_argument("--surrogate", choices=[s.value for s in SurrogateKind])
    parser.add_argument("--cost", choices=[c.value for c in CostModel])
    parser.add_argument("--table", help="latency table CSV")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunetape", description="Compression-aware training with FLOPs/latency costs")
    subparsers = parser.add_subparsers(dest="command", required=True)

    _common(subparsers.add_parser("train", help="train, extract and score one model"))
    _common(subparsers.add_parser("profile-table", help="measure a matvec latency table"))
    _common(subparsers.add_parser("experiment", help="run the study named in the config"))

    extract = subparsers.add_parser("extract", help="extract the compressed model of a checkpoint")
    extract.add_argument("checkpoint")
    _common(extract)

    report = subparsers.add_parser("report", help="export and summarize the run catalog of a directory")
    report.add_argument("directory")
    report.add_argument("-v", "--verbose", action="store_true")
    return parser


def _spec(args: argparse.Namespace) -> ExperimentSpec:
    spec = load_experiment_spec(args.config) if args.config else ExperimentSpec()
    return apply_overrides(
        spec,
        seed=args.seed,
        lam=args.lam,
        surrogate=args.surrogate,
        cost=args.cost,
        table=args.table,
        out_dir=args.out_dir,
    )


def cmd_train(args: argparse.Namespace) -> None:
    result = run_single(_spec(args))
    print(f"score={result.summary['score']:.6g} macs={result.summary['exact_macs']} -> {result.out_dir}")


def cmd_profile_table(args: argparse.Namespace) -> None:
    spec = _spec(args)
    table = build_table(spec.profile)
    path = save_table(table, Path(spec.out_dir) / TABLE_CSV_NAME)
    print(f"{table.shape[0]}x{table.shape[1]} table ({table.measured_fraction:.0%} measured) -> {path}")


def cmd_experiment(args: argparse.Namespace) -> None:
    result = run_experiment(_spec(args))
    for path in result.files:
        logger.debug(f"wrote {path}")
    print(f"{result.experiment.value}: {len(result.files)} file(s) -> {result.out_dir}")


def cmd_extract(args: argparse.Namespace) -> None:
    spec = _spec(args)
    network = load_checkpoint(args.checkpoint)
    model = extract_compressed(network, metadata={"checkpoint": str(args.checkpoint)})
    path = save_extracted(model, Path(spec.out_dir) / EXTRACTED_NAME)
    widths = "-".join(str(w) for w in model.widths)
    print(f"widths {widths}, {model.exact_macs} MACs, {model.parameter_bits} parameter bits -> {path}")


def cmd_report(args: argparse.Namespace) -> None:
    with RunCatalog.from_directory(args.directory) as catalog:
        catalog.export_csv(args.directory)
        for name in catalog.run_names():
            summary = catalog.summary(name)
            fields = " ".join(f"{k}={v}" for k, v in summary.items() if k != "run")
            print(f"{name}: {fields}")


COMMANDS = {
    "train": cmd_train,
    "profile-table": cmd_profile_table,
    "experiment": cmd_experiment,
    "extract": cmd_extract,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"prunetape: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (PruneTapeError, OSError) as e:
        print(f"prunetape: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
