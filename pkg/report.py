"""
Standalone report script for stored active learning runs.
Turns per-seed JSONL records into summary tables and plot-ready CSVs without recomputing anything.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

import config
from data_io import read_jsonl, write_records_csv, write_text
from errors import MissingInputError
from models import CycleRecord

# Scalar CycleRecord fields averaged across seeds
AGGREGATE_FIELDS = (
    "labeled_frac",
    "test_acc",
    "mean_train_loss",
    "mean_cod",
    "mean_true_loss",
    "mean_grad_sq",
    "spearman_cod_loss",
)
AGGREGATE_COLUMNS = ("cycle", "stat", "n_seeds", *AGGREGATE_FIELDS)

REPORT_FILES = (
    "accuracy_vs_budget.csv",
    "cod_deciles.csv",
    "recall_at_p.csv",
    "per_class_accuracy.csv",
    "aggregate.csv",
    "summary.txt",
)


def _mean_std(values: list[float | None]) -> tuple[float | None, float | None]:
    present = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not present:
        return None, None
    arr = np.array(present, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate_records(records: list[CycleRecord]) -> list[dict]:
    """Two rows per cycle (stat = mean, std) over seeds; std is the population std."""
    by_cycle: dict[int, list[CycleRecord]] = {}
    for record in records:
        by_cycle.setdefault(record.cycle, []).append(record)
    rows = []
    for cycle in sorted(by_cycle):
        group = sorted(by_cycle[cycle], key=lambda r: r.seed)
        stats = {f: _mean_std([getattr(r, f) for r in group]) for f in AGGREGATE_FIELDS}
        for i, stat in enumerate(("mean", "std")):
            row = {"cycle": cycle, "stat": stat, "n_seeds": len(group)}
            row.update({f: stats[f][i] for f in AGGREGATE_FIELDS})
            rows.append(row)
    return rows


def load_run_records(input_dir: str | Path) -> list[CycleRecord]:
    """All records from `seed_<s>.jsonl` files, sorted by (seed, cycle)."""
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise MissingInputError([f"{input_dir}: directory not found"])
    files = sorted(input_dir.glob("seed_*.jsonl"))
    if not files:
        raise MissingInputError([f"{input_dir / 'seed_<seed>.jsonl'}: expected at least one per-seed record file"])

    problems = []
    records = []
    for path in files:
        try:
            rows = read_jsonl(path)
            if not rows:
                problems.append(f"{path}: no records")
                continue
            records.extend(CycleRecord.model_validate(row) for row in rows)
        except (OSError, json.JSONDecodeError, ValidationError) as e:
            problems.append(f"{path}: {type(e).__name__}: {str(e).splitlines()[0]}")
    if problems:
        raise MissingInputError(problems)
    return sorted(records, key=lambda r: (r.seed, r.cycle))


def accuracy_vs_budget_rows(records: list[CycleRecord]) -> list[dict]:
    return [{"seed": r.seed, "cycle": r.cycle, "sampler": r.sampler, "labeled_frac": r.labeled_frac,
             "n_labeled": r.n_labeled, "test_acc": r.test_acc} for r in records]


def cod_decile_rows(records: list[CycleRecord]) -> list[dict]:
    """Mean true loss of each COD decile, highest-COD decile first; 10 rows per (seed, cycle)."""
    rows = []
    for r in records:
        if r.decile_mean_losses is None:
            continue
        for decile, loss in enumerate(r.decile_mean_losses, start=1):
            rows.append({"seed": r.seed, "cycle": r.cycle, "decile": decile, "mean_true_loss": loss})
    return rows


def recall_rows(records: list[CycleRecord]) -> list[dict]:
    rows = []
    for r in records:
        if r.recall_at_p is None:
            continue
        for p in sorted(r.recall_at_p):
            rows.append({"seed": r.seed, "cycle": r.cycle, "p": p, "recall": r.recall_at_p[p]})
    return rows


def per_class_rows(records: list[CycleRecord]) -> list[dict]:
    return [{"seed": r.seed, "cycle": r.cycle, "class": k, "accuracy": acc}
            for r in records for k, acc in enumerate(r.per_class_acc)]


def _fmt(value: float | None, spec: str = ".4f") -> str:
    return "n/a" if value is None else format(value, spec)


def summary_text(records: list[CycleRecord], aggregate: list[dict]) -> str:
    seeds = sorted({r.seed for r in records})
    samplers = sorted({r.sampler for r in records})
    lines = [
        f"Sampler: {', '.join(samplers)}",
        f"Seeds: {', '.join(str(s) for s in seeds)}",
        "",
        f"{'cycle':>5}  {'labeled':>8}  {'test acc (mean ± std)':>22}  {'mean COD':>9}  {'spearman':>9}",
    ]
    for mean_row, std_row in zip(aggregate[::2], aggregate[1::2]):
        acc = f"{_fmt(mean_row['test_acc'])} ± {_fmt(std_row['test_acc'])}"
        lines.append(
            f"{mean_row['cycle']:>5}  {_fmt(mean_row['labeled_frac'], '.1%'):>8}  {acc:>22}  "
            f"{_fmt(mean_row['mean_cod']):>9}  {_fmt(mean_row['spearman_cod_loss'], '.3f'):>9}"
        )
    return "\n".join(lines) + "\n"


def build_report(input_dir: str | Path, output_dir: str | Path | None = None) -> list[Path]:
    """
    Write the report files for one run directory.

    Args:
        input_dir: Directory holding `seed_<s>.jsonl` files from `al run`
        output_dir: Destination (default: `<input_dir>/report`)

    Returns:
        Paths of the written files
    """
    records = load_run_records(input_dir)
    output_dir = Path(output_dir) if output_dir else Path(input_dir) / "report"
    aggregate = aggregate_records(records)

    written = [
        write_records_csv(output_dir / "accuracy_vs_budget.csv", accuracy_vs_budget_rows(records),
                          ("seed", "cycle", "sampler", "labeled_frac", "n_labeled", "test_acc")),
        write_records_csv(output_dir / "cod_deciles.csv", cod_decile_rows(records),
                          ("seed", "cycle", "decile", "mean_true_loss")),
        write_records_csv(output_dir / "recall_at_p.csv", recall_rows(records), ("seed", "cycle", "p", "recall")),
        write_records_csv(output_dir / "per_class_accuracy.csv", per_class_rows(records),
                          ("seed", "cycle", "class", "accuracy")),
        write_records_csv(output_dir / "aggregate.csv", aggregate, AGGREGATE_COLUMNS),
    ]
    text = summary_text(records, aggregate)
    written.append(write_text(output_dir / "summary.txt", text))
    print(text)
    logging.info(f"Report for {len(records)} records written to {output_dir}")
    return written


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="Summarise stored active learning runs into tables and plot-ready CSVs",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python report.py --input results/run
  python report.py --input results/compare/cod --output reports/cod
        """
    )
    parser.add_argument("--input", required=True, help="Run directory with seed_<s>.jsonl files")
    parser.add_argument("--output", default=None, help="Output directory (default: <input>/report)")
    args = parser.parse_args(argv)

    try:
        written = build_report(args.input, args.output)
    except MissingInputError as e:
        print(f"Error: {e}")
        logging.error(str(e))
        return config.EXIT_USAGE
    print(f"✓ Report complete! {len(written)} files saved to: {Path(written[0]).parent}")
    return config.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
