"""Static plots and summary CSVs from finished run directories."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EcimError

# Plot name -> (eval_log column, y-axis label)
CURVES = {
    "reward": ("reward", "evaluated return"),
    "pitch": ("pitch_rms", "pitch RMS [rad]"),
    "joint_acc": ("joint_acc_rms", "joint acceleration RMS [rad/s^2]"),
    "torque": ("torque_rms", "torque RMS [N m]"),
}
SUMMARY_COLUMNS = ["run", "variant", "terrain", "seed", "iteration", "reward", "pitch_rms",
                   "joint_acc_rms", "torque_rms"]


class ReportError(EcimError):
    """Run directory content does not support the requested report."""


def _read_run(run_dir: Path) -> tuple[dict, dict[str, np.ndarray]]:
    cfg_path = run_dir / "config.json"
    log_path = run_dir / "eval_log.csv"
    for p in (cfg_path, log_path):
        if not p.is_file():
            raise ReportError(f"{run_dir}: missing {p.name}")
    cfg = json.loads(cfg_path.read_text())
    with open(log_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    header = rows[0].keys() if rows else _header(log_path)
    needed = ["iteration"] + [col for col, _ in CURVES.values()]
    for col in needed:
        if col not in header:
            raise ReportError(f"{log_path}: missing column {col!r}")
    data = {col: np.array([float(r[col]) for r in rows]) for col in needed}
    return cfg, data


def _header(path: Path) -> list[str]:
    with open(path, newline="") as fh:
        return next(csv.reader(fh), [])


def emit_report(run_dirs: Sequence[str | Path], out_dir: str | Path | None = None) -> dict:
    """Write one SVG per (terrain, curve) with a line per variant, plus CSVs.

    Seeds of the same variant and terrain are averaged over the iterations
    they share. Returns ``{"plots": [...], "csv": [...], "runs": n}``; an empty
    ``run_dirs`` writes nothing.
    """
    summary = {"plots": [], "csv": [], "runs": len(run_dirs)}
    if not run_dirs:
        return summary
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = []
    for d in run_dirs:
        d = Path(d)
        cfg, data = _read_run(d)
        seed = json.loads((d / "metrics.json").read_text()).get("seed", "") \
            if (d / "metrics.json").is_file() else ""
        runs.append((d, cfg.get("variant", "?"), cfg.get("terrain", "?"), seed, data))

    out = Path(out_dir) if out_dir is not None else Path(run_dirs[0]).parent / "report"
    out.mkdir(parents=True, exist_ok=True)

    rows_path = out / "summary.csv"
    with open(rows_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for d, variant, terrain, seed, data in runs:
            for i in range(len(data["iteration"])):
                w.writerow([d.name, variant, terrain, seed, int(data["iteration"][i]),
                            *(repr(float(data[c][i])) for c in SUMMARY_COLUMNS[5:])])
    summary["csv"].append(str(rows_path))

    by_terrain: dict[str, dict[str, list]] = {}
    for _, variant, terrain, _, data in runs:
        by_terrain.setdefault(terrain, {}).setdefault(variant, []).append(data)

    for terrain, variants in sorted(by_terrain.items()):
        curves = {}
        for variant, datas in variants.items():
            n = min(len(d["iteration"]) for d in datas)
            curves[variant] = {c: np.mean([d[c][:n] for d in datas], axis=0)
                               for c in ["iteration"] + [col for col, _ in CURVES.values()]}
        curve_path = out / f"curves_{terrain}.csv"
        with open(curve_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "iteration", *(col for col, _ in CURVES.values())])
            for variant, c in curves.items():
                for i in range(len(c["iteration"])):
                    w.writerow([variant, int(c["iteration"][i]),
                                *(repr(float(c[col][i])) for col, _ in CURVES.values())])
        summary["csv"].append(str(curve_path))
        for name, (col, ylabel) in CURVES.items():
            fig, ax = plt.subplots(figsize=(6, 4))
            for variant, c in curves.items():
                ax.plot(c["iteration"], c[col], label=variant)
            ax.set_xlabel("iteration")
            ax.set_ylabel(ylabel)
            ax.set_title(f"{terrain}: {name}")
            ax.legend()
            fig.tight_layout()
            path = out / f"{name}_{terrain}.svg"
            fig.savefig(path, format="svg")
            plt.close(fig)
            summary["plots"].append(str(path))
    return summary
