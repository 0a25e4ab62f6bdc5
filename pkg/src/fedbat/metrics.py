"""Per-round metrics CSV."""

from __future__ import annotations

import csv
import io
import math

from .config import METRICS_SCHEMA_VERSION

COLUMNS = ("round", "algorithm", "train_loss", "test_acc", "uplink_bytes", "cum_uplink_bytes", "seconds")


def _num(x: float) -> str:
    return "" if x is None or math.isnan(x) else repr(float(x))


def metrics_csv(records, *, wall_time: bool = False) -> str:
    """Header, one row per round, then a ``summary`` row.

    Wall-clock seconds are left blank unless ``wall_time`` is set, so that a
    fixed config always produces the same bytes.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    total_seconds = 0.0
    for r in records:
        total_seconds += r.wall_seconds
        w.writerow([r.round, r.algorithm, _num(r.train_loss), _num(r.test_accuracy), r.uplink_bytes,
                    r.cum_uplink_bytes, f"{r.wall_seconds:.6f}" if wall_time else ""])
    if records:
        last = records[-1]
        evaluated = [r.test_accuracy for r in records if not math.isnan(r.test_accuracy)]
        w.writerow(["summary", last.algorithm, _num(last.train_loss), _num(evaluated[-1] if evaluated else None),
                    sum(r.uplink_bytes for r in records), last.cum_uplink_bytes,
                    f"{total_seconds:.6f}" if wall_time else ""])
    else:
        w.writerow(["summary", "", "", "", 0, 0, ""])
    return buf.getvalue()


def read_metrics(text: str) -> tuple[list[dict], dict | None]:
    """Parse a metrics CSV into (round rows, summary row)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    data = [r for r in rows if r["round"] != "summary"]
    summary = next((r for r in rows if r["round"] == "summary"), None)
    return data, summary


SCHEMA_VERSION = METRICS_SCHEMA_VERSION
