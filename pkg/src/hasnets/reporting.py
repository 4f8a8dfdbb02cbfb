"""CSV emission for runs: report, ledger snapshots, scan results, timing.

The report schema is versioned through its leading header cell, literally
``hnr1``; that column carries the row kind (iter/summary).  Timing lives in
a separate file so report bytes are reproducible under a fixed seed.
"""
from __future__ import annotations

import csv

import numpy as np

from .errors import ConfigurationError
from .training import STATUS_NAMES

REPORT_SCHEMA = "hnr1"
REPORT_COLUMNS = (REPORT_SCHEMA, "iteration", "clean_accuracy", "asr",
                  "selected_count", "retained_count", "removed_count",
                  "mean_neg_gamma_poisoned", "mean_neg_gamma_clean", "rad")
LEDGER_COLUMNS = ("iteration", "id", "neg_gamma", "l1", "l2", "status", "poison_flag")
SCAN_COLUMNS = ("id", "score", "flagged", "poison_flag")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        if np.isnan(value):
            return ""
        return f"{float(value):.12g}"
    return str(value)


def _check_unit_interval(row, keys):
    for key in keys:
        v = row.get(key)
        if v is not None and not (isinstance(v, float) and np.isnan(v)):
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"report {key}={v} outside [0, 1]")


def write_report(path, rows):
    """Rows are dicts with a ``kind`` entry plus any REPORT_COLUMNS values."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            _check_unit_interval(row, ("clean_accuracy", "asr"))
            writer.writerow([_fmt(row.get("kind", "iter"))] +
                            [_fmt(row.get(col)) for col in REPORT_COLUMNS[1:]])


def write_timing(path, entries):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("iteration", "seconds"))
        for iteration, seconds in entries:
            writer.writerow((iteration, f"{seconds:.3f}"))


def write_ledger(path, snapshots, poison_flag_by_id):
    """All per-iteration ledger snapshots in one CSV.

    The poison flag column joins evaluation ground truth onto rows for later
    analysis; the defense itself never saw it.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LEDGER_COLUMNS)
        for snap in snapshots:
            for i, sample_id in enumerate(snap.ids):
                writer.writerow((
                    snap.iteration, sample_id,
                    _fmt(float(snap.neg_gamma[i])),
                    _fmt(float(snap.l1[i])),
                    _fmt(float(snap.l2[i])),
                    STATUS_NAMES[int(snap.status[i])],
                    _fmt(bool(poison_flag_by_id.get(int(sample_id), False)))))


def write_scan(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCAN_COLUMNS)
        for i in range(len(report.ids)):
            writer.writerow((report.ids[i], _fmt(float(report.scores[i])),
                             _fmt(bool(report.flagged[i])),
                             _fmt(bool(report.poison_flags[i]))))


def merge_reports(paths):
    """Concatenate report CSVs into one table with a leading source column.

    Row order follows the input order; the column order is fixed by the
    report schema.  Mismatched headers are an error.
    """
    out_rows = [("source",) + REPORT_COLUMNS]
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != REPORT_COLUMNS:
                raise ConfigurationError(f"{path} is not a {REPORT_SCHEMA} report")
            stem = str(path).rsplit("/", 1)[-1]
            stem = stem[:-4] if stem.endswith(".csv") else stem
            for row in reader:
                out_rows.append((stem,) + tuple(row))
    return out_rows


def write_merged(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
