"""Result records and their CSV/JSON serialization.

The CSV carries exactly the columns that matter for analysis and is stable
across identical runs; the JSON sidecar additionally records a wall-clock
timestamp per record for provenance.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from typing import Optional, Sequence

from .errors import InputError

CSV_HEADER = ("experiment", "phase", "metric", "seed", "budget", "value")


@dataclass(frozen=True)
class ResultRecord:
    experiment: str
    phase: str
    metric: str
    seed: int
    budget: int
    value: float
    timestamp: str = ""  # ISO-8601 UTC; JSON only, never in the CSV

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise InputError(
                f"result {self.phase}/{self.metric}: non-finite value {self.value}")

    def key(self):
        return (self.experiment, self.phase, self.metric, self.seed, self.budget)


def make_record(experiment: str, phase: str, metric: str, value: float,
                seed: int = 0, budget: int = 0) -> ResultRecord:
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return ResultRecord(experiment=experiment, phase=phase, metric=metric,
                        seed=seed, budget=budget, value=float(value),
                        timestamp=stamp)


def write_results(records: Sequence[ResultRecord], csv_path: str,
                  json_path: Optional[str] = None) -> None:
    """Write the CSV (and JSON array when asked); empty input → header only."""
    seen = set()
    for r in records:
        if r.key() in seen:
            raise InputError(f"duplicate result record: {r.key()}")
        seen.add(r.key())
    parent = os.path.dirname(csv_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.experiment, r.phase, r.metric, r.seed,
                             r.budget, repr(r.value)])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump([asdict(r) for r in records], fh, indent=2)
            fh.write("\n")


def write_sweep_summary(rows, path: str) -> None:
    """One aggregate line per budget: mean and spread of the sweep metrics."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["budget", "n_seeds",
                         "mean_target_accuracy", "std_target_accuracy",
                         "mean_target_auc", "std_target_auc",
                         "mean_avg_acc", "mean_avg_ra"])
        for row in rows:
            writer.writerow([row.budget, row.n_seeds,
                             repr(row.mean_target_accuracy),
                             repr(row.std_target_accuracy),
                             repr(row.mean_target_auc),
                             repr(row.std_target_auc),
                             repr(row.mean_avg_acc),
                             repr(row.mean_avg_ra)])
