"""Evaluation metrics over per-round accuracy records."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from firma.errors import UndefinedMetricError

METHODS = ("fedavg", "fedrep", "rdfl", "fibfl", "fibfl+", "fibfl++")


@dataclass
class RoundRecord:
    round: int
    accuracies: np.ndarray
    mean: float
    gini: float
    params_tx: int = 0
    head_tx_count: int = 0
    gamma_r: float | None = None
    wall_time: float = 0.0
    train_accuracies: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_accuracies(cls, round_idx: int, accuracies, **kw) -> "RoundRecord":
        acc = np.asarray(accuracies, dtype=np.float64)
        return cls(round_idx, acc, float(acc.mean()), gini(acc), **kw)


def gini(values: Sequence[float]) -> float:
    """Relative mean absolute difference, sum|a_i - a_j| / (2 n^2 mean).

    Evaluated with the sorted closed form. All-zero input gives 0.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    if x.size == 0:
        raise UndefinedMetricError("gini of an empty vector")
    if np.any(x < 0):
        raise ValueError("gini needs non-negative values")
    total = x.sum()
    if total == 0:
        return 0.0
    n = x.size
    ranks = np.arange(1, n + 1)
    g = float(np.sum((2 * ranks - n - 1) * x) / (n * total))
    return min(max(g, 0.0), 1.0)


def rounds_to_threshold(records: Sequence[RoundRecord], threshold: float = 0.5) -> int | None:
    for rec in records:
        if rec.mean >= threshold:
            return rec.round
    return None


def plateau_sigma(records: Sequence[RoundRecord]) -> float:
    """Population std of mean accuracy over rounds ceil(R/2)+1 .. R."""
    if len(records) < 2:
        raise UndefinedMetricError("plateau sigma needs at least 2 rounds")
    R = len(records)
    window = [r.mean for r in records[math.ceil(R / 2):]]
    return float(np.std(window))


def comm_cost(method: str, n: int, p: int, p_e: int, k_g: int = 1, warmup: bool = False) -> int:
    """Parameters transmitted in one round."""
    method = method.lower()
    if method in ("fedavg", "rdfl"):
        return 2 * n * p
    if method in ("fedrep", "fibfl", "fibfl+"):
        return 2 * n * p_e
    if method == "fibfl++":
        return 2 * n * p if warmup else 2 * k_g * n * p_e
    raise ValueError(f"unknown method {method!r}")


def total_comm_cost(method: str, n: int, p: int, p_e: int, rounds: int, k_g: int = 1,
                    warmup_rounds: int = 0) -> int:
    return sum(
        comm_cost(method, n, p, p_e, k_g, warmup=(method.lower() == "fibfl++" and r <= warmup_rounds))
        for r in range(1, rounds + 1)
    )


CSV_COLUMNS = ("round", "method", "scenario", "mean_acc", "gini", "gamma_r", "params_tx",
               "head_tx_count")


def write_rounds_csv(path, records: Sequence[RoundRecord], method: str, scenario: str) -> None:
    """One row per round; per-client accuracies follow the fixed columns as acc_0..acc_{N-1}."""
    n = len(records[0].accuracies) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_COLUMNS) + [f"acc_{i}" for i in range(n)])
        for r in records:
            w.writerow([r.round, method, scenario, repr(r.mean), repr(r.gini),
                        "" if r.gamma_r is None else repr(float(r.gamma_r)), r.params_tx,
                        r.head_tx_count] + [repr(float(a)) for a in r.accuracies])


def read_rounds_csv(path) -> list[RoundRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            accs = [float(v) for k, v in row.items() if k.startswith("acc_")]
            out.append(RoundRecord(
                int(row["round"]), np.array(accs), float(row["mean_acc"]), float(row["gini"]),
                int(row["params_tx"]), int(row["head_tx_count"]),
                float(row["gamma_r"]) if row["gamma_r"] else None,
            ))
    return out


def summarize(records: Sequence[RoundRecord]) -> dict:
    """Final-round accuracy and Gini, R50 and plateau sigma for one run."""
    if not records:
        return {"accuracy": None, "gini": None, "r50": None, "plateau_sigma": None}
    return {
        "accuracy": records[-1].mean,
        "gini": records[-1].gini,
        "r50": rounds_to_threshold(records),
        "plateau_sigma": plateau_sigma(records) if len(records) >= 2 else None,
    }
