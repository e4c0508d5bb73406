"""Multi-mode experiment drivers: the comparison table and the ablation table.

Both drivers fan out over (variant, seed) cells on one shared world.  Cells
are independent and may run in parallel worker processes (capped by the
HYDRODCM_THREADS environment variable, default 1); each cell writes only
its own run directory and the driver merges results in a fixed order, so
parallel and serial execution produce identical files.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .train import (ExperimentConfig, RunReport, load_records, run_single,
                    summarize_runs, write_summary, TrainingDiverged)

log = logging.getLogger(__name__)

COMPARE_MODES = ["base", "fewshot", "oracle", "dann", "hydrodcm"]
ABLATION_VARIANTS = [("full", "none"),
                     ("no_contrastive", "no_contrastive"),
                     ("no_adversarial", "no_adversarial"),
                     ("no_film", "no_film"),
                     ("spatial_shuffle", "spatial_shuffle")]


def thread_cap() -> int:
    raw = os.environ.get("HYDRODCM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer HYDRODCM_THREADS=%r", raw)
        return 1


def _cell(args) -> RunReport:
    cfg, run_seed, run_dir = args
    os.makedirs(run_dir, exist_ok=True)
    records = load_records(cfg)
    try:
        return run_single(cfg, records, run_seed, run_dir)
    except (TrainingDiverged, OSError) as exc:
        log.error("cell %s seed %d failed: %s", run_dir, run_seed, exc)
        return RunReport(run_seed, [], None, -1, float("inf"), 0.0,
                         failed=True, error=str(exc))


def _run_cells(variants: list[tuple[str, ExperimentConfig]], out_dir,
               workers: int) -> dict:
    """Run every (variant, seed) cell; returns variant -> list[RunReport]."""
    jobs = []
    for name, cfg in variants:
        for k in range(cfg.num_runs):
            run_seed = cfg.seed + k
            run_dir = os.path.join(out_dir, name, f"run_{run_seed}")
            jobs.append((name, (cfg, run_seed, run_dir)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell, [j[1] for j in jobs]))
    else:
        results = [_cell(j[1]) for j in jobs]
    by_variant: dict[str, list[RunReport]] = {name: [] for name, _ in variants}
    for (name, _), report in zip(jobs, results):
        by_variant[name].append(report)
    for name, cfg in variants:
        write_summary(os.path.join(out_dir, name), cfg, by_variant[name])
    return by_variant


def _write_table(path, label: str, rows: list[tuple[str, dict | None, int]],
                 horizon: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [label, "n_runs", "n_ok", "status", "overall_mean", "overall_std"]
        for k in range(horizon):
            header += [f"day_{k + 1}_mean", f"day_{k + 1}_std"]
        writer.writerow(header)
        for name, stats, n_runs in rows:
            if stats is None or stats["n_ok"] < n_runs:
                status = "incomplete"
            else:
                status = "ok"
            if stats is None:
                writer.writerow([name, n_runs, 0, status] + ["nan"] * (2 + 2 * horizon))
                continue
            row = [name, n_runs, stats["n_ok"], status,
                   repr(stats["overall_mean"]), repr(stats["overall_std"])]
            for k in range(horizon):
                row += [repr(float(stats["day_mean"][k])),
                        repr(float(stats["day_std"][k]))]
            writer.writerow(row)


def _write_plotdata(out_dir, by_variant: dict) -> None:
    """Per-reservoir, per-day bars: one CSV per test reservoir."""
    plot_dir = os.path.join(out_dir, "plotdata")
    os.makedirs(plot_dir, exist_ok=True)
    reservoirs: set[str] = set()
    for reports in by_variant.values():
        for r in reports:
            if not r.failed:
                reservoirs.update(r.nse.per_reservoir_days)
    for rid in sorted(reservoirs):
        with open(os.path.join(plot_dir, f"{rid}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "day", "mean_nse", "std_nse"])
            for name in by_variant:
                ok = [r for r in by_variant[name]
                      if not r.failed and rid in r.nse.per_reservoir_days]
                if not ok:
                    continue
                days = np.stack([100 * r.nse.per_reservoir_days[rid] for r in ok])
                for k in range(days.shape[1]):
                    col = days[:, k]
                    std = float(np.std(col, ddof=1)) if len(col) > 1 else 0.0
                    writer.writerow([name, k + 1, repr(float(col.mean())),
                                     repr(std)])


def _all_ok(by_variant: dict, expected: int) -> bool:
    return all(sum(not r.failed for r in reports) == expected
               for reports in by_variant.values())


def run_compare(cfg: ExperimentConfig, out_dir) -> bool:
    """Train every method mode on the shared world; write comparison.csv.

    Returns True when every (mode, seed) cell completed.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    variants = [(mode, replace(cfg, mode=mode, ablation="none"))
                for mode in COMPARE_MODES]
    by_variant = _run_cells(variants, out_dir, thread_cap())
    rows = [(name, summarize_runs(by_variant[name]), cfg.num_runs)
            for name, _ in variants]
    horizon = 7
    for stats in (s for _, s, _ in rows if s is not None):
        horizon = len(stats["day_mean"])
        break
    _write_table(os.path.join(out_dir, "comparison.csv"), "mode", rows, horizon)
    _write_plotdata(out_dir, by_variant)
    return _all_ok(by_variant, cfg.num_runs)


def run_ablate(cfg: ExperimentConfig, out_dir) -> bool:
    """Full model against its four ablations; writes ablation.csv."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    variants = [(name, replace(cfg, mode="hydrodcm", ablation=ablation))
                for name, ablation in ABLATION_VARIANTS]
    by_variant = _run_cells(variants, out_dir, thread_cap())
    rows = [(name, summarize_runs(by_variant[name]), cfg.num_runs)
            for name, _ in variants]
    horizon = 7
    for stats in (s for _, s, _ in rows if s is not None):
        horizon = len(stats["day_mean"])
        break
    _write_table(os.path.join(out_dir, "ablation.csv"), "variant", rows, horizon)
    _write_plotdata(out_dir, by_variant)
    return _all_ok(by_variant, cfg.num_runs)
