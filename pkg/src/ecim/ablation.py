"""Variant x terrain x seed sweeps and the attribution / cross-terrain Std report."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import VARIANTS, TrainConfig, apply_variant
from .errors import ConfigError
from .metrics import METRICS, RunRecord, attribution_table, std_table, steps_to_threshold

log = logging.getLogger(__name__)

# Report label -> terrain kind. The single "slope" column uses the uphill slope.
ABLATION_TERRAINS = {
    "flat": "flat",
    "slope": "slope_up",
    "rough": "rough",
    "stairs_up": "stairs_up",
    "stairs_down": "stairs_down",
    "stepping_stones": "stepping_stones",
}
RUN_METRICS = ("reward", "pitch_rms", "acc_rms", "torque_rms", "joint_acc_rms",
               "action_diff_rms", "best_reward", "first_reward")
THRESHOLD_FRACTION = 0.1


@dataclass
class RunSummary:
    """What the suite keeps from one finished run."""

    variant: str
    terrain: str
    seed: int
    final: dict
    episode_returns: list
    episode_iterations: list
    iterations: int
    run_dir: str | None = None
    steps_per_iteration: int = 0


@dataclass
class AblationResult:
    records: dict[str, RunRecord]
    ag: dict
    std: dict
    runs: list[RunSummary] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    r_star: dict[str, float] = field(default_factory=dict)


def _summarize(art, variant: str, terrain: str, seed: int) -> RunSummary:
    its = []
    for it, row in enumerate(art.train_log, start=1):
        its.extend([it] * int(row["episodes"]))
    return RunSummary(variant, terrain, seed,
                      {k: float(art.final_metrics[k]) for k in RUN_METRICS},
                      [float(r) for r in art.episode_returns], its, len(art.train_log),
                      str(art.run_dir) if art.run_dir is not None else None,
                      art.config.n_envs * art.config.rollout_steps)


def _run_one(job) -> RunSummary:
    from .experiment import run_experiment

    cfg, variant, label, seed, out_dir = job
    art = run_experiment(cfg, seed, out_dir)
    return _summarize(art, variant, label, seed)


def best_window_return(returns: Sequence[float], k: int) -> float | None:
    r = np.asarray(returns, dtype=np.float64)
    if r.size < k:
        return None
    csum = np.concatenate([[0.0], np.cumsum(r)])
    return float(np.max((csum[k:] - csum[:-k]) / k))


def threshold_for(runs: Sequence[RunSummary], k: int) -> float | None:
    """R*: median over seeds of the best k-episode mean, lowered by 10% of its magnitude."""
    best = [b for b in (best_window_return(r.episode_returns, k) for r in runs) if b is not None]
    if not best:
        return None
    m = float(np.median(best))
    return m - THRESHOLD_FRACTION * abs(m)


def steps_to_r(run: RunSummary, k: int, r_star: float) -> float:
    """Iteration at which the trailing k-episode mean first reaches ``r_star``.

    Runs that never get there are censored at ``iterations + 1``.
    """
    n = steps_to_threshold(run.episode_returns, k, r_star)
    if n is None:
        return float(run.iterations + 1)
    return float(run.episode_iterations[n - 1])


def steps_to_r_episode(run: RunSummary, k: int, r_star: float) -> float:
    """Same threshold as a 1-based episode index, censored at ``episodes + 1``."""
    n = steps_to_threshold(run.episode_returns, k, r_star)
    return float(len(run.episode_returns) + 1 if n is None else n)


def aggregate(runs: Sequence[RunSummary], k: int,
              reference_variant: str = "ppo") -> tuple[dict[str, RunRecord], dict[str, float]]:
    """Per-terrain means over seeds, plus steps-to-R* against a per-terrain R*.

    Steps-to-R* is stored three ways: as the training iteration
    (``steps_to_r``), as environment steps and as the episode index.
    """
    by_terrain: dict[str, list[RunSummary]] = {}
    for r in runs:
        by_terrain.setdefault(r.terrain, []).append(r)
    r_star: dict[str, float] = {}
    for terrain, rs in by_terrain.items():
        ref = [r for r in rs if r.variant == reference_variant] or \
              [r for r in rs if r.variant == "ecim"] or rs
        rs_star = threshold_for(ref, k)
        if rs_star is not None:
            r_star[terrain] = rs_star

    records: dict[str, RunRecord] = {}
    groups: dict[tuple[str, str], list[RunSummary]] = {}
    for r in runs:
        groups.setdefault((r.variant, r.terrain), []).append(r)
    for (variant, terrain), rs in sorted(groups.items()):
        rec = records.setdefault(variant, RunRecord(variant))
        cell = {m: float(np.mean([r.final[m] for r in rs])) for m in RUN_METRICS}
        if terrain in r_star:
            its = [steps_to_r(r, k, r_star[terrain]) for r in rs]
            cell["steps_to_r"] = float(np.mean(its))
            cell["steps_to_r_env_steps"] = float(
                np.mean([i * r.steps_per_iteration for i, r in zip(its, rs)]))
            cell["steps_to_r_episode"] = float(
                np.mean([steps_to_r_episode(r, k, r_star[terrain]) for r in rs]))
        rec.values[terrain] = cell
    return records, r_star


# Check name -> (variant, reference variant, metric, direction). "ge" means the
# variant's seed median must be >= the reference's.
TREND_CHECKS = {
    "return": ("ecim", "ppo", "reward", "ge"),
    "pitch": ("ecim", "ppo", "pitch_rms", "le"),
    "joint_acc": ("ecim", "ppo", "joint_acc_rms", "le"),
    "action_diff": ("ecim_minus_mcrf", "ecim", "action_diff_rms", "ge"),
    "torque": ("ecim_minus_imdeem", "ecim", "torque_rms", "ge"),
}


def trend_checks(runs: Sequence[RunSummary]) -> dict[str, dict[str, dict]]:
    """Directional comparisons of seed medians, per terrain and check.

    Each cell holds ``value``, ``reference`` and ``ok``; ``ok`` is None when
    either side has no finished runs.
    """
    med: dict[tuple[str, str, str], float] = {}
    groups: dict[tuple[str, str], list[RunSummary]] = {}
    for r in runs:
        groups.setdefault((r.variant, r.terrain), []).append(r)
    for (variant, terrain), rs in groups.items():
        for m in RUN_METRICS:
            med[variant, terrain, m] = float(np.median([r.final[m] for r in rs]))
    out: dict[str, dict[str, dict]] = {}
    for terrain in sorted({r.terrain for r in runs}):
        row = {}
        for name, (variant, ref, metric, direction) in TREND_CHECKS.items():
            a, b = med.get((variant, terrain, metric)), med.get((ref, terrain, metric))
            ok = None
            if a is not None and b is not None:
                ok = a >= b if direction == "ge" else a <= b
            row[name] = {"value": a, "reference": b, "ok": ok}
        out[terrain] = row
    return out


def ablation_report(records: Mapping[str, RunRecord], out_dir: str | Path | None = None,
                    metrics: Sequence[str] = METRICS) -> tuple[dict, dict]:
    """AG and Std tables from per-terrain records; undefined cells are None.

    AG needs the full ``ecim`` record, so without it the AG table is empty.
    With ``out_dir`` the tables go to ``ablation_ag.csv``, ``ablation_std.csv``
    and ``ablation_records.csv`` (missing cells written as ``NA``).
    """
    ag = attribution_table(records, metrics) if "ecim" in records else {}
    std = std_table(records, metrics)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_table(out / "ablation_ag.csv", "module", ag, metrics)
        _write_table(out / "ablation_std.csv", "variant", std, metrics)
        with open(out / "ablation_records.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "terrain", "metric", "value"])
            for variant, rec in records.items():
                for terrain, cells in rec.values.items():
                    for m, v in sorted(cells.items()):
                        w.writerow([variant, terrain, m, repr(float(v))])
    return ag, std


def _write_table(path: Path, key: str, table: dict, metrics: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key, *metrics])
        for row, cells in table.items():
            w.writerow([row, *("NA" if cells.get(m) is None else repr(float(cells[m]))
                               for m in metrics)])


def run_ablation_suite(base: TrainConfig, seeds: Sequence[int] | None = None,
                       variants: Sequence[str] = VARIANTS,
                       terrains: Mapping[str, str] | Sequence[str] = ABLATION_TERRAINS,
                       out_dir: str | Path | None = None, workers: int = 1,
                       run_fn: Callable | None = None) -> AblationResult:
    """Train every (variant, terrain, seed) and build the AG / Std report.

    ``terrains`` maps report labels to terrain kinds (a plain sequence means
    label == kind). ``run_fn(job) -> RunSummary`` replaces the training call,
    which keeps tests cheap. Failed runs are logged in ``failures`` and their
    cells are left out of the aggregates.
    """
    seeds = tuple(base.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("at least one seed is required")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    if not isinstance(terrains, Mapping):
        terrains = {t: t for t in terrains}
    for label, kind in terrains.items():
        replace(base, terrain=kind).validate()
    root = Path(out_dir) if out_dir is not None else None

    jobs = []
    for variant in variants:
        for label, kind in terrains.items():
            cfg = apply_variant(replace(base, terrain=kind), variant)
            for seed in seeds:
                d = root / variant / label / f"seed_{seed}" if root is not None else None
                jobs.append((cfg, variant, label, int(seed), d))

    fn = run_fn or _run_one
    runs: list[RunSummary] = []
    failures: list[dict] = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, job) for job in jobs]
            results = []
            for job, fut in zip(jobs, futures):
                try:
                    results.append((job, fut.result(), None))
                except Exception as exc:  # recorded, the report marks the cell missing
                    results.append((job, None, exc))
    else:
        results = []
        for job in jobs:
            try:
                results.append((job, fn(job), None))
            except Exception as exc:
                results.append((job, None, exc))
    for job, summary, exc in results:
        if exc is None:
            runs.append(summary)
        else:
            log.warning("run %s/%s/seed %s failed: %s", job[1], job[2], job[3], exc)
            failures.append({"variant": job[1], "terrain": job[2], "seed": job[3],
                             "error": f"{type(exc).__name__}: {exc}"})

    records, r_star = aggregate(runs, base.steps_window)
    ag, std = ablation_report(records, root)
    result = AblationResult(records, ag, std, runs, failures, r_star)
    if root is not None:
        (root / "ablation_summary.json").write_text(json.dumps({
            "seeds": list(seeds), "variants": list(variants), "terrains": dict(terrains),
            "r_star": r_star, "failures": failures,
            "ag": ag, "std": std,
        }, indent=2, sort_keys=True, default=_json_default) + "\n")
    return result


def _json_default(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    raise TypeError(type(v).__name__)
