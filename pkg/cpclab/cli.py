"""Command line: ``cpclab run|sweep|report|schema``.

Exit codes are 0 on success, 1 when a run or a report fails and 2 for usage
and spec errors. Every failure prints one JSON error object on stderr.
"""
import argparse
import copy
import itertools
import json
import logging
import os
import re
import sys
import warnings
from multiprocessing import Pool
from typing import Dict, List, Optional, Sequence

import pandas as pd
import yaml

from . import __version__
from .config import apply_overrides, dump_spec, load_spec, read_spec_data, spec_schema, validate_spec
from .exceptions import CorruptMetricsError, CpcLabError, SpecError
from .trainer import run
from .utils import dumps_line, to_cell_name

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"
SPEC_FILE = "spec.yaml"
CSV_LINE_TERMINATOR = "\r\n"

_re_seed_dir = re.compile(r"^seed(-?\d+)$")


class UsageError(CpcLabError, ValueError):
    """Bad command line arguments."""


class CorruptRecordWarning(UserWarning):
    """A metrics line could not be parsed and was skipped."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def seed_dir(output_dir, seed):
    return os.path.join(output_dir, "seed{}".format(seed))


def _run_seeds(spec, output_dir):
    os.makedirs(output_dir, exist_ok=True)
    with open(os.path.join(output_dir, SPEC_FILE), "w", encoding="utf-8") as handle:
        handle.write(dump_spec(spec))
    for seed in spec.seeds:
        logger.info("%s: seed %d", spec.name, seed)
        run(spec.run_config(seed), seed_dir(output_dir, seed))


def cmd_run(spec_path, overrides: Sequence[str] = (), output_dir: Optional[str] = None) -> int:
    """Train every seed of the spec; each seed writes its metrics under ``<output>/seed<N>``."""
    spec = load_spec(spec_path, overrides)
    output_dir = spec.output_path(output_dir)
    _run_seeds(spec, output_dir)
    logger.info("results written to %s", output_dir)
    return 0


def parse_grid(entries: Sequence[str]) -> Dict[str, list]:
    """``["trainer.tau=0.5,0.6"]`` -> ``{"trainer.tau": [0.5, 0.6]}``; values are YAML-parsed."""
    grid = {}
    for entry in entries:
        path, sep, raw = entry.partition("=")
        path = path.strip()
        if not sep or not path or not raw.strip():
            raise UsageError("expected --grid key.path=v1,v2,..., got {!r}".format(entry))
        if path in grid:
            raise UsageError("grid key {!r} given twice".format(path))
        try:
            grid[path] = [yaml.safe_load(value) for value in raw.split(",")]
        except yaml.YAMLError:
            raise SpecError("cannot parse the values of {!r}".format(entry), field=path)
    return grid


def grid_cells(grid: Dict[str, list]) -> List[Dict[str, object]]:
    """Cartesian product of the grid; an empty grid is one cell without assignments."""
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[key] for key in keys))]


def _cell_done(cell_dir, spec):
    return all(os.path.exists(os.path.join(seed_dir(cell_dir, seed), SUMMARY_FILE)) for seed in spec.seeds)


def _run_cell(task):
    cell_dir, data = task
    try:
        _run_seeds(validate_spec(data), cell_dir)
    except Exception as error:
        logger.error("cell %s failed: %s: %s", cell_dir, type(error).__name__, error)
        return cell_dir, "{}: {}".format(type(error).__name__, error)
    return cell_dir, None


def cmd_sweep(
    spec_path,
    grid: Dict[str, list],
    overrides: Sequence[str] = (),
    output_dir: Optional[str] = None,
    jobs: int = 1,
) -> int:
    """Run every grid cell in its own directory; cells whose seeds all have a summary are skipped.

    Every cell is validated before the first one starts. A failing cell does
    not stop the others; the exit code is 1 if any failed.
    """
    base = apply_overrides(read_spec_data(spec_path), overrides)
    root = validate_spec(base).output_path(output_dir)
    tasks = []
    for assignments in grid_cells(grid):
        data = copy.deepcopy(base)
        spec = validate_spec(apply_overrides(data, ["{}={}".format(k, json.dumps(v)) for k, v in assignments.items()]))
        cell_dir = os.path.join(root, to_cell_name(assignments))
        if _cell_done(cell_dir, spec):
            logger.info("skipping finished cell %s", cell_dir)
            continue
        tasks.append((cell_dir, spec.model_dump(mode="json")))
    logger.info("sweep: %d cells to run in %s", len(tasks), root)

    if jobs > 1 and len(tasks) > 1:
        with Pool(min(jobs, len(tasks))) as pool:
            outcomes = pool.map(_run_cell, tasks)
    else:
        outcomes = [_run_cell(task) for task in tasks]
    failures = [(cell, error) for cell, error in outcomes if error is not None]
    for cell, error in failures:
        logger.error("%s: %s", cell, error)
    return 1 if failures else 0


def read_metrics(path) -> List[dict]:
    """Parse a metrics stream, skipping (with a warning) lines that are not records."""
    records = []
    with open(path, "rb") as handle:
        for number, raw in enumerate(handle, 1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw.decode("utf-8"))
            except ValueError:
                record = None
            if not isinstance(record, dict) or not {"epoch", "network", "test_accuracy"} <= set(record):
                warnings.warn("{}:{}: skipping corrupt record".format(path, number), CorruptRecordWarning)
                continue
            records.append(record)
    return records


def _read_summary(path):
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except (OSError, ValueError):
        return None


def _seed_of(run_dir, summary):
    if summary and summary.get("seed") is not None:
        return summary["seed"]
    match = _re_seed_dir.match(os.path.basename(run_dir))
    return int(match.group(1)) if match else None


def _noise_setting(summary):
    noise = ((summary or {}).get("config") or {}).get("noise")
    if not noise:
        return "unknown"
    return "{}_{:g}".format(noise["kind"], noise["rate"])


def collect_runs(directories: Sequence[str]) -> List[dict]:
    """Find every run (a directory holding ``metrics.jsonl``) below ``directories``."""
    runs = []
    for directory in directories:
        if not os.path.isdir(directory):
            raise UsageError("not a directory: {}".format(directory))
        for current, _, files in sorted(os.walk(directory)):
            if METRICS_FILE not in files:
                continue
            records = read_metrics(os.path.join(current, METRICS_FILE))
            summary = _read_summary(os.path.join(current, SUMMARY_FILE))
            parent = os.path.dirname(os.path.abspath(current))
            runs.append({
                "experiment": os.path.basename(parent),
                "seed": _seed_of(current, summary),
                "records": records,
                "summary": summary,
            })
    return runs


def _arm(run_info):
    summary = run_info["summary"] or {}
    return {
        "experiment": run_info["experiment"],
        "cleaner_mode": summary.get("cleaner_mode", "unknown"),
        "prototype_supervision": summary.get("prototype_supervision", "unknown"),
    }


def report_tables(runs: Sequence[dict]) -> Dict[str, pd.DataFrame]:
    arms = ["experiment", "cleaner_mode", "prototype_supervision"]
    accuracy_rows, auc_rows, heterogeneity_rows = [], [], []
    for run_info in runs:
        records, summary = run_info["records"], run_info["summary"]
        arm = _arm(run_info)
        final = (summary or {}).get("final_test_accuracy")
        if final is None and records:
            final = records[-1]["test_accuracy"]
        if final is not None:
            accuracy_rows.append(dict(arm, seed=run_info["seed"], noise=_noise_setting(summary), accuracy=final))
        for record in records:
            for cleaner, value in (record.get("auc") or {}).items():
                if value is not None:
                    auc_rows.append(dict(
                        arm, seed=run_info["seed"], network=record["network"], epoch=record["epoch"],
                        cleaner=cleaner, auc=value,
                    ))
        for network, entry in enumerate((summary or {}).get("heterogeneity") or []):
            heterogeneity_rows.append(dict(
                arm, seed=run_info["seed"], network=network,
                fraction_significant_clean=entry["fraction_significant_clean"],
                fraction_significant_noise=entry["fraction_significant_noise"],
            ))

    accuracy = pd.DataFrame(accuracy_rows, columns=arms + ["seed", "noise", "accuracy"])
    accuracy_table = (
        accuracy.groupby(arms, sort=True)["accuracy"]
        .agg(n_seeds="count", accuracy_mean="mean", accuracy_std="std")
        .reset_index()
    )
    ablation = accuracy.pivot_table(
        index=["cleaner_mode", "prototype_supervision"], columns="noise", values="accuracy", aggfunc="mean"
    ).reset_index() if len(accuracy) else pd.DataFrame(columns=["cleaner_mode", "prototype_supervision"])
    ablation.columns.name = None
    return {
        "accuracy": accuracy_table,
        "auc": pd.DataFrame(auc_rows, columns=arms + ["seed", "network", "epoch", "cleaner", "auc"]),
        "ablation": ablation,
        "heterogeneity": pd.DataFrame(
            heterogeneity_rows,
            columns=arms + ["seed", "network", "fraction_significant_clean", "fraction_significant_noise"],
        ),
    }


def to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, lineterminator=CSV_LINE_TERMINATOR)


def cmd_report(directories: Sequence[str], out: Optional[str] = None, stream=None) -> int:
    """Summarize metrics directories into ``accuracy``, ``auc``, ``ablation`` and ``heterogeneity`` CSV tables."""
    if not directories:
        raise UsageError("report needs at least one metrics directory")
    runs = collect_runs(directories)
    if not runs:
        raise UsageError("no {} found under {}".format(METRICS_FILE, ", ".join(directories)))
    if not any(run_info["records"] for run_info in runs):
        raise CorruptMetricsError("every metrics record under {} is corrupt".format(", ".join(directories)))
    tables = report_tables(runs)
    if out:
        os.makedirs(out, exist_ok=True)
        for name, frame in tables.items():
            with open(os.path.join(out, "{}.csv".format(name)), "w", encoding="utf-8", newline="") as handle:
                handle.write(to_csv(frame))
        logger.info("report written to %s", out)
    else:
        stream = stream or sys.stdout
        for name, frame in tables.items():
            stream.write("# {}.csv{}".format(name, CSV_LINE_TERMINATOR))
            stream.write(to_csv(frame))
            stream.write(CSV_LINE_TERMINATOR)
    return 0


def cmd_schema(stream=None) -> int:
    stream = stream or sys.stdout
    stream.write(json.dumps(spec_schema(), indent=2, sort_keys=True) + "\n")
    return 0


def build_parser():
    parser = _ArgumentParser(prog="cpclab", description="Noisy-label cleaner lab: run, sweep and report experiments")
    parser.add_argument("--version", action="version", version="%(prog)s {}".format(__version__))
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging (-vv for debug)")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only log errors")
    subparsers = parser.add_subparsers(dest="command", metavar="command", parser_class=_ArgumentParser)

    def add_spec_arguments(subparser):
        subparser.add_argument("spec", help="YAML experiment spec")
        subparser.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="Override a spec field, e.g. trainer.tau=0.6 (repeatable)",
        )
        subparser.add_argument("--output-dir", default=None, help="Output directory (overrides the spec)")

    add_spec_arguments(subparsers.add_parser("run", help="Train every seed of a spec"))

    sweep = subparsers.add_parser("sweep", help="Run the Cartesian product of a parameter grid")
    add_spec_arguments(sweep)
    sweep.add_argument(
        "--grid", action="append", default=[], metavar="KEY=V1,V2",
        help="Grid axis, e.g. trainer.tau=0.5,0.6,0.7 (repeatable)",
    )
    sweep.add_argument("--jobs", type=int, default=1, help="Cells trained in parallel")

    report = subparsers.add_parser("report", help="Summarize metrics directories into CSV tables")
    report.add_argument("directories", nargs="*", help="Directories searched for metrics files")
    report.add_argument("--out", default=None, help="Write the CSV files here instead of stdout")

    subparsers.add_parser("schema", help="Print the JSON schema of spec files")
    return parser


def configure_logging(verbose=0, quiet=False):
    if quiet:
        level = logging.ERROR
    elif verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def error_document(error) -> dict:
    return {"error": {"type": type(error).__name__, "message": str(error), "field": getattr(error, "field", None)}}


def exit_code(error) -> int:
    return 2 if isinstance(error, (SpecError, UsageError)) else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.verbose, args.quiet)
        if args.command == "run":
            return cmd_run(args.spec, args.overrides, args.output_dir)
        if args.command == "sweep":
            if args.jobs < 1:
                raise UsageError("--jobs must be at least 1, got {}".format(args.jobs))
            return cmd_sweep(args.spec, parse_grid(args.grid), args.overrides, args.output_dir, args.jobs)
        if args.command == "report":
            return cmd_report(args.directories, args.out)
        if args.command == "schema":
            return cmd_schema()
        raise UsageError("expected a command: run, sweep, report or schema")
    except CpcLabError as error:
        sys.stderr.write(dumps_line(error_document(error)) + "\n")
        return exit_code(error)
    except Exception as error:
        logger.exception("unexpected failure")
        sys.stderr.write(dumps_line(error_document(error)) + "\n")
        return 1
