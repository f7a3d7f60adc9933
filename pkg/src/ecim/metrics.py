"""Evaluation metrics and ablation aggregates.

Per-episode stability and effort metrics (pitch/acceleration/torque RMS,
angular-velocity energy, joint acceleration), learning speed (steps to a
return threshold), and the cross-terrain aggregates used for ablations:
attribution gain (mean full-minus-ablated difference) and the population
standard deviation across terrains.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError

VARIANTS = ("ppo", "ecim", "ecim_minus_aecpom", "ecim_minus_mcrf", "ecim_minus_imdeem")
TERRAINS = ("flat", "slope", "rough", "stairs_up", "stairs_down", "stepping_stones")
METRICS = ("reward", "steps_to_r", "pitch_rms", "acc_rms", "torque_rms")
ABLATED_MODULE = {
    "ecim_minus_aecpom": "aecpom",
    "ecim_minus_mcrf": "mcrf",
    "ecim_minus_imdeem": "imdeem",
}


@dataclass
class EpisodeTrace:
    theta: np.ndarray  # (T,)
    omega: np.ndarray  # (T, 3)
    joint_vel: np.ndarray  # (T, J)
    torque: np.ndarray  # (T, J)
    a_body: np.ndarray  # (T, 2)
    rewards: np.ndarray  # (T,)
    dt: float
    actions: np.ndarray | None = None  # (T, J) commanded actions, optional

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        lengths = {len(self.theta), len(self.omega), len(self.joint_vel), len(self.torque),
                   len(self.a_body), len(self.rewards)}
        if len(lengths) != 1:
            raise ConfigError(f"trace arrays have unequal lengths {sorted(lengths)}")


def episode_return(rewards) -> float:
    return float(np.sum(np.asarray(rewards, dtype=np.float64)))


def ang_vel_energy(trace: EpisodeTrace) -> float:
    w = np.asarray(trace.omega, dtype=np.float64).reshape(-1, 3)
    return float(np.sum(w[:, 0] ** 2 + w[:, 1] ** 2))


def joint_accel(trace: EpisodeTrace) -> np.ndarray:
    """Finite-difference joint accelerations, shape (T-1, J)."""
    qd = np.asarray(trace.joint_vel, dtype=np.float64)
    if qd.shape[0] < 2:
        warnings.warn("joint acceleration needs at least two steps", RuntimeWarning, stacklevel=2)
        return np.zeros((0,) + qd.shape[1:])
    return np.diff(qd, axis=0) / trace.dt


def _rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("RMS of an empty sequence")
    return math.sqrt(float(np.mean(x * x)))


def pitch_rms(trace: EpisodeTrace) -> float:
    return _rms(trace.theta)


def acc_rms(trace: EpisodeTrace) -> float:
    a = np.asarray(trace.a_body, dtype=np.float64)
    a = a.reshape(len(a), -1)
    if len(a) == 0:
        raise ConfigError("RMS of an empty sequence")
    return math.sqrt(float(np.mean(np.sum(a * a, axis=1))))


def torque_rms(trace: EpisodeTrace) -> float:
    return _rms(trace.torque)


def joint_accel_rms(trace: EpisodeTrace) -> float:
    acc = joint_accel(trace)
    return _rms(acc) if acc.size else 0.0


def action_diff_rms(trace: EpisodeTrace) -> float:
    """RMS of consecutive action differences (per joint)."""
    if trace.actions is None or len(trace.actions) < 2:
        return 0.0
    return _rms(np.diff(np.asarray(trace.actions, dtype=np.float64), axis=0))


def steps_to_threshold(episode_returns: Sequence[float], k: int, r_star: float) -> int | None:
    """Smallest 1-based episode index N >= k whose trailing k-mean reaches ``r_star``."""
    if k < 1:
        raise ConfigError("window k must be >= 1")
    r = np.asarray(episode_returns, dtype=np.float64)
    if r.size < k:
        return None
    csum = np.concatenate([[0.0], np.cumsum(r)])
    means = (csum[k:] - csum[:-k]) / k
    hits = np.flatnonzero(means >= r_star)
    return int(hits[0]) + k if hits.size else None


def trace_metrics(trace: EpisodeTrace) -> dict[str, float]:
    return {
        "reward": episode_return(trace.rewards),
        "pitch_rms": pitch_rms(trace),
        "acc_rms": acc_rms(trace),
        "torque_rms": torque_rms(trace),
        "joint_acc_rms": joint_accel_rms(trace),
        "action_diff_rms": action_diff_rms(trace),
        "ang_vel_energy": ang_vel_energy(trace),
    }


# ---------------------------------------------------------------------------
# Cross-terrain aggregates
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    """Per-terrain metric values for one variant: ``values[terrain][metric]``."""

    variant: str
    values: dict[str, dict[str, float]] = field(default_factory=dict)

    def metric_row(self, metric: str, terrains: Sequence[str]) -> list[float]:
        row = []
        for t in terrains:
            if metric not in self.values.get(t, {}):
                raise ConfigError(f"{self.variant}: no {metric!r} value for terrain {t!r}")
            row.append(float(self.values[t][metric]))
        return row

    def has_metric(self, metric: str) -> bool:
        return bool(self.values) and all(
            metric in v and v[metric] is not None and math.isfinite(v[metric])
            for v in self.values.values())


def attribution_gain(full: RunRecord, ablated: RunRecord, metric: str) -> float:
    if set(full.values) != set(ablated.values):
        raise ConfigError(
            f"terrain sets differ: {sorted(full.values)} vs {sorted(ablated.values)}")
    terrains = sorted(full.values)
    a = np.array(full.metric_row(metric, terrains))
    b = np.array(ablated.metric_row(metric, terrains))
    return float(np.mean(a - b))


def cross_env_std(values: Iterable[float]) -> float:
    """Population standard deviation (divisor E)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size < 2:
        raise ConfigError("need at least two environments")
    return float(np.std(v))


def attribution_table(records: Mapping[str, RunRecord],
                      metrics: Sequence[str] = METRICS) -> dict[str, dict[str, float | None]]:
    """``{module: {metric: AG}}`` for each ablated variant present.

    A cell is None when either record lacks the metric somewhere or the two
    records cover different terrains.
    """
    full = records["ecim"]
    table: dict[str, dict[str, float | None]] = {}
    for variant, module in ABLATED_MODULE.items():
        if variant not in records:
            continue
        row: dict[str, float | None] = {}
        for m in metrics:
            ok = (full.has_metric(m) and records[variant].has_metric(m)
                  and set(full.values) == set(records[variant].values))
            row[m] = attribution_gain(full, records[variant], m) if ok else None
        table[module] = row
    return table


def std_table(records: Mapping[str, RunRecord],
              metrics: Sequence[str] = METRICS) -> dict[str, dict[str, float | None]]:
    table: dict[str, dict[str, float | None]] = {}
    for variant, rec in records.items():
        terrains = sorted(rec.values)
        table[variant] = {
            m: cross_env_std(rec.metric_row(m, terrains))
            if rec.has_metric(m) and len(terrains) > 1 else None
            for m in metrics
        }
    return table


# ---------------------------------------------------------------------------
# Reference ablation tables
# ---------------------------------------------------------------------------


def load_reference_tables() -> tuple[dict[str, RunRecord], dict, dict]:
    """Bundled reference results: per-terrain records, expected AG and Std tables.

    The CSV rows are ``table,row,column,value`` with ``table`` one of
    ``records`` (row = variant, column = ``terrain:metric``), ``ag``
    (row = module, column = metric) or ``std`` (row = variant, column = metric).
    """
    text = resources.files("ecim.data").joinpath("reference_tables.csv").read_text()
    records: dict[str, RunRecord] = {}
    ag: dict[str, dict[str, float]] = {}
    std: dict[str, dict[str, float]] = {}
    for row in csv.DictReader(text.splitlines()):
        value = float(row["value"])
        if row["table"] == "records":
            terrain, metric = row["column"].split(":")
            rec = records.setdefault(row["row"], RunRecord(row["row"]))
            rec.values.setdefault(terrain, {})[metric] = value
        elif row["table"] == "ag":
            ag.setdefault(row["row"], {})[row["column"]] = value
        elif row["table"] == "std":
            std.setdefault(row["row"], {})[row["column"]] = value
        else:
            raise ConfigError(f"unknown table {row['table']!r} in reference data")
    return records, ag, std


def check_reference_tables(tol: float = 1e-4) -> list[tuple[str, str, str, float | None, float, bool]]:
    """Recompute every derivable AG/Std cell; rows ``(table, row, metric, got, want, ok)``.

    Cells whose inputs are absent from the per-terrain records (the reward
    column) come back with ``got=None`` and ``ok=False``.
    """
    records, ag_want, std_want = load_reference_tables()
    ag_got = attribution_table(records)
    std_got = std_table(records)
    out = []
    for table, want, got in (("ag", ag_want, ag_got), ("std", std_want, std_got)):
        for row, cells in want.items():
            for metric, value in cells.items():
                g = got.get(row, {}).get(metric)
                out.append((table, row, metric, g, value, g is not None and abs(g - value) <= tol))
    return out
