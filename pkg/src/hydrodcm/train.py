"""Two-stage training loop, method modes, ablations, and run orchestration.

A run is a pure function of (config, run seed): the world is generated from
the world seed, every stochastic choice during training draws from named
substreams of the run seed, and all outputs (epoch log, skill report,
checkpoint) are written with full-precision floats so reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .checkpoint import save_checkpoint
from .data import (HORIZON, N_FEATURES, N_META, T_WINDOW, Split,
                   SyntheticWorldConfig, WindowSet, build_split,
                   corrupt_metadata, generate_world, ingest_csv)
from .losses import ADVERSARIAL, WARMUP, LossWeights
from .model import ModelArch, ModelBundle, build_bundle
from .optim import Adam, PlateauScheduler, clip_global_norm
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("hydrodcm", "base", "oracle", "fewshot", "dann")
ABLATIONS = ("none", "no_contrastive", "no_adversarial", "no_film",
             "spatial_shuffle")
MODE_SPLIT = {"hydrodcm": "dg", "base": "dg", "dann": "dg",
              "oracle": "oracle", "fewshot": "fewshot"}
SPATIAL_NOISE_STD = 0.5


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, components: dict):
        self.epoch = epoch
        self.batch = batch
        self.components = components
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}: {components}")


@dataclass
class ExperimentConfig:
    mode: str = "hydrodcm"
    ablation: str = "none"
    epochs: int = 100
    batch_size: int = 32
    warmup_epochs: int = 10
    learning_rate: float = 1e-3
    scheduler_factor: float = 0.5
    scheduler_patience: int = 10
    scheduler_metric: str = "loss"       # "loss" | "nse"
    clip_norm: float = 1.0
    dropout: float = 0.1
    grl_lambda: float = 1.0
    seed: int = 0
    num_runs: int = 5
    loss: LossWeights = field(default_factory=LossWeights)
    world: SyntheticWorldConfig = field(default_factory=SyntheticWorldConfig)
    series_csv: str | None = None
    metadata_csv: str | None = None
    nse_aggregate: str = "per_day_mean"

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(
                f"train.ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.ablation != "none" and self.mode != "hydrodcm":
            raise ValueError("ablations apply only to mode 'hydrodcm'")
        if self.epochs < 1:
            raise ValueError(f"train.epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(
                f"train.warmup_epochs = {self.warmup_epochs} must lie in "
                f"[0, epochs = {self.epochs}]")
        if self.batch_size < 2:
            raise ValueError(f"train.batch_size must be >= 2, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError("train.learning_rate must be positive")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("train.scheduler_factor must be in (0, 1)")
        if self.scheduler_patience < 0:
            raise ValueError("train.scheduler_patience must be >= 0")
        if self.scheduler_metric not in ("loss", "nse"):
            raise ValueError("train.scheduler_metric must be 'loss' or 'nse'")
        if self.clip_norm <= 0:
            raise ValueError("train.clip_norm must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("train.dropout must be in [0, 1)")
        if self.grl_lambda < 0:
            raise ValueError("train.grl_lambda must be >= 0")
        if self.num_runs < 1:
            raise ValueError("train.num_runs must be >= 1")
        if self.nse_aggregate not in ("per_day_mean", "pooled"):
            raise ValueError("eval.nse_aggregate must be per_day_mean or pooled")
        if (self.series_csv is None) != (self.metadata_csv is None):
            raise ValueError("data.series_csv and data.metadata_csv go together")
        self.loss.validate()
        self.world.validate()


@dataclass
class RunReport:
    seed: int
    epoch_rows: list               # dicts, one per epoch
    nse: "L.NseReport"
    best_epoch: int
    best_val: float
    wall_clock: float
    failed: bool = False
    error: str = ""


def load_records(cfg: ExperimentConfig):
    if cfg.series_csv is not None:
        return ingest_csv(cfg.series_csv, cfg.metadata_csv)
    return generate_world(cfg.world)


def _arch_from_config(cfg: ExperimentConfig) -> ModelArch:
    return ModelArch(n_features=N_FEATURES, n_meta=N_META, t_window=T_WINDOW,
                     horizon=HORIZON, dropout=cfg.dropout)


def _phase(cfg: ExperimentConfig, epoch: int) -> str:
    return WARMUP if epoch < cfg.warmup_epochs else ADVERSARIAL


def _loss_plan(cfg: ExperimentConfig, phase: str) -> dict:
    """Which loss components this mode/ablation/phase combination computes."""
    hydro = cfg.mode == "hydrodcm"
    contrastive = (hydro and cfg.ablation != "no_contrastive"
                   and cfg.loss.lambda_con > 0)
    adversarial = (phase == ADVERSARIAL and cfg.loss.lambda_adv > 0
                   and (hydro and cfg.ablation != "no_adversarial"))
    dann = (phase == ADVERSARIAL and cfg.loss.lambda_adv > 0
            and cfg.mode == "dann")
    film = hydro and cfg.ablation != "no_film"
    return {"contrastive": contrastive, "adversarial": adversarial,
            "dann": dann, "film": film,
            "projector": contrastive or adversarial}


def _forward_losses(bundle: ModelBundle, xs, ys, ss, ids, cfg, plan,
                    training: bool, streams, dann_classes=None):
    drop = streams["dropout"] if training else None
    con_rng = streams["contrastive"] if training else streams["val"]
    x_t, y_t, s_t = Tensor(xs), Tensor(ys), Tensor(ss)

    h = bundle.encode(x_t, training=training, rng=drop)
    l_con = Tensor(0.0)
    l_adv = Tensor(0.0)
    if plan["projector"]:
        v = bundle.project_pseudo_domain(s_t, x_t)
        if plan["contrastive"]:
            l_con = L.contrastive_loss(v, ids, cfg.loss.tau, cfg.loss.m_neg,
                                       con_rng)
        if plan["adversarial"]:
            d_out = bundle.discriminate(h, cfg.grl_lambda, training=training,
                                        rng=drop)
            l_adv = L.adversarial_loss(d_out, v.detach())
    if plan["dann"]:
        logits = bundle.domain_head(h, cfg.grl_lambda)
        l_adv = T.softmax_cross_entropy(logits, dann_classes[ids])
    z = bundle.modulate(h, s_t) if plan["film"] else h
    y_hat = bundle.predict(z, training=training, rng=drop)
    l_sup = L.supervised_loss(y_hat, y_t)
    return l_con, l_adv, l_sup, y_hat


def train_epoch(bundle: ModelBundle, train_set: WindowSet, cfg: ExperimentConfig,
                epoch: int, adam: Adam, streams: dict,
                dann_classes=None) -> dict:
    """One pass over shuffled batches; returns mean component losses."""
    phase = _phase(cfg, epoch)
    plan = _loss_plan(cfg, phase)
    order = streams["shuffle"].permutation(train_set.n)
    params = bundle.param_tensors()
    sums = {"con": 0.0, "adv": 0.0, "sup": 0.0, "total": 0.0}
    count = 0
    for start in range(0, train_set.n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        l_con, l_adv, l_sup, _ = _forward_losses(
            bundle, train_set.x[idx], train_set.y[idx], train_set.s[idx],
            train_set.ids[idx], cfg, plan, True, streams, dann_classes)
        total = L.total_loss(l_con, l_adv, l_sup, cfg.loss, phase)
        values = {"con": l_con.item(), "adv": l_adv.item(),
                  "sup": l_sup.item(), "total": total.item()}
        if not math.isfinite(values["total"]):
            raise TrainingDiverged(epoch, start // cfg.batch_size, values)
        T.backward(total)
        clip_global_norm(params, cfg.clip_norm)
        adam.step()
        adam.zero_grad()
        w = len(idx)
        for key in sums:
            sums[key] += values[key] * w
        count += w
    return {key: sums[key] / count for key in sums}


def _evaluate_set(bundle, ws: WindowSet, cfg, epoch, streams,
                  dann_classes=None, collect=False):
    """Loss components (and optionally predictions) over a window set."""
    phase = _phase(cfg, epoch)
    plan = _loss_plan(cfg, phase)
    sums = {"con": 0.0, "adv": 0.0, "sup": 0.0, "total": 0.0}
    count = 0
    preds = np.empty((ws.n, ws.y.shape[1])) if collect else None
    with T.no_grad():
        for start in range(0, ws.n, cfg.batch_size):
            stop = min(start + cfg.batch_size, ws.n)
            sl = np.s_[start:stop]
            l_con, l_adv, l_sup, y_hat = _forward_losses(
                bundle, ws.x[sl], ws.y[sl], ws.s[sl], ws.ids[sl], cfg, plan,
                False, streams, dann_classes)
            total = L.total_loss(l_con, l_adv, l_sup, cfg.loss, phase)
            w = stop - start
            for key, val in (("con", l_con), ("adv", l_adv), ("sup", l_sup),
                             ("total", total)):
                sums[key] += val.item() * w
            count += w
            if collect:
                preds[sl] = y_hat.data
    means = {key: sums[key] / count for key in sums}
    return means, preds


def predict_set(bundle: ModelBundle, ws: WindowSet, batch_size: int = 256):
    """Inference-path predictions (encoder, adapter if present, head)."""
    preds = np.empty((ws.n, bundle.arch.horizon))
    with T.no_grad():
        for start in range(0, ws.n, batch_size):
            stop = min(start + batch_size, ws.n)
            s = Tensor(ws.s[start:stop]) if bundle.adapter is not None else None
            out = bundle.infer(Tensor(ws.x[start:stop]), s)
            preds[start:stop] = out.data
    return preds


def test_nse_report(bundle: ModelBundle, test_set: WindowSet,
                    aggregate: str = "per_day_mean") -> L.NseReport:
    """De-normalized skill of the inference path on the test windows."""
    preds = predict_set(bundle, test_set)
    stats = bundle.norm_stats
    per_res = {}
    for code in sorted(set(test_set.ids.tolist())):
        rid = test_set.id_names[code]
        rows = test_set.ids == code
        per_res[rid] = (stats.denormalize_inflow(rid, preds[rows]),
                        stats.denormalize_inflow(rid, test_set.y[rows]))
    return L.nse_report(per_res, test_set.y.shape[1], aggregate)


def _val_nse(preds: np.ndarray, ws: WindowSet, stats) -> float:
    per_res = {}
    for code in sorted(set(ws.ids.tolist())):
        rid = ws.id_names[code]
        rows = ws.ids == code
        per_res[rid] = (stats.denormalize_inflow(rid, preds[rows]),
                        stats.denormalize_inflow(rid, ws.y[rows]))
    return L.nse_report(per_res, ws.y.shape[1]).overall


def build_run_split(cfg: ExperimentConfig, records, run_seed: int) -> Split:
    split = build_split(records, MODE_SPLIT[cfg.mode])
    if cfg.ablation == "spatial_shuffle":
        corrupt_metadata(split, Rng(run_seed).spawn("spatial"),
                         SPATIAL_NOISE_STD)
    return split


def run_single(cfg: ExperimentConfig, records, run_seed: int,
               out_dir=None) -> RunReport:
    """Train one seed to completion and evaluate the best checkpoint."""
    t0 = time.perf_counter()
    split = build_run_split(cfg, records, run_seed)
    root = Rng(run_seed)
    streams = {name: root.spawn(name)
               for name in ("init", "dropout", "shuffle", "contrastive", "val")}

    dann_classes = None
    n_domains = None
    if cfg.mode == "dann":
        train_codes = sorted(set(split.train.ids.tolist()))
        n_domains = len(train_codes)
        dann_classes = np.full(len(split.train.id_names), -1, dtype=np.int64)
        for cls, code in enumerate(train_codes):
            dann_classes[code] = cls

    bundle = build_bundle(_arch_from_config(cfg), streams["init"],
                          with_dg_components=cfg.mode == "hydrodcm",
                          n_domains=n_domains, norm_stats=split.stats)
    adam = Adam(bundle.param_tensors(), lr=cfg.learning_rate)
    sched = PlateauScheduler(cfg.learning_rate, cfg.scheduler_factor,
                             cfg.scheduler_patience)

    best_val = math.inf
    best_epoch = -1
    best_snap = bundle.snapshot()
    epoch_rows = []
    for epoch in range(cfg.epochs):
        lr_in_effect = adam.lr
        train_means = train_epoch(bundle, split.train, cfg, epoch, adam,
                                  streams, dann_classes)
        collect = cfg.scheduler_metric == "nse"
        val_means, val_preds = _evaluate_set(bundle, split.val, cfg, epoch,
                                             streams, dann_classes,
                                             collect=collect)
        if collect:
            metric = -_val_nse(val_preds, split.val, split.stats)
        else:
            metric = val_means["total"]
        if metric < best_val:
            best_val = metric
            best_epoch = epoch
            best_snap = bundle.snapshot()
        new_lr = sched.step(metric)
        if new_lr is not None:
            adam.lr = new_lr
        epoch_rows.append({
            "epoch": epoch, "lr": lr_in_effect,
            "train_con": train_means["con"], "train_adv": train_means["adv"],
            "train_sup": train_means["sup"], "train_total": train_means["total"],
            "val_con": val_means["con"], "val_adv": val_means["adv"],
            "val_sup": val_means["sup"], "val_total": val_means["total"],
            "val_metric": metric,
        })

    bundle.restore(best_snap)
    report = test_nse_report(bundle, split.test, cfg.nse_aggregate)
    wall = time.perf_counter() - t0
    run = RunReport(run_seed, epoch_rows, report, best_epoch, best_val, wall)
    if out_dir is not None:
        write_run_outputs(out_dir, run, bundle)
    return run


def run_experiment(cfg: ExperimentConfig, out_dir) -> list[RunReport]:
    """All seeds of one experiment; failures are recorded, not fatal."""
    import os

    cfg.validate()
    records = load_records(cfg)
    reports = []
    for k in range(cfg.num_runs):
        run_seed = cfg.seed + k
        run_dir = os.path.join(out_dir, f"run_{run_seed}")
        os.makedirs(run_dir, exist_ok=True)
        try:
            reports.append(run_single(cfg, records, run_seed, run_dir))
        except (TrainingDiverged, OSError) as exc:
            log.error("run %d failed: %s", run_seed, exc)
            reports.append(RunReport(run_seed, [], None, -1, math.inf, 0.0,
                                     failed=True, error=str(exc)))
    write_summary(out_dir, cfg, reports)
    return reports


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return repr(float(value))


EPOCH_COLUMNS = ["epoch", "lr", "train_con", "train_adv", "train_sup",
                 "train_total", "val_con", "val_adv", "val_sup", "val_total",
                 "val_metric"]


def write_run_outputs(run_dir, run: RunReport, bundle: ModelBundle) -> None:
    import os

    with open(os.path.join(run_dir, "epochs.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_COLUMNS)
        for row in run.epoch_rows:
            writer.writerow([row["epoch"]] + [_fmt(row[c]) for c in EPOCH_COLUMNS[1:]])
    write_nse_csv(os.path.join(run_dir, "nse.csv"), run.nse)
    save_checkpoint(os.path.join(run_dir, "checkpoint.hdcm"), bundle)


def write_nse_csv(path, report: L.NseReport) -> None:
    """Per-reservoir and macro skill, in NSE percent (Table-style units)."""
    horizon = len(report.macro_days)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["reservoir_id"] + [f"day_{k + 1}" for k in range(horizon)]
                        + ["overall"])
        for rid in sorted(report.per_reservoir_days):
            days = report.per_reservoir_days[rid]
            writer.writerow([rid] + [_fmt(100 * d) for d in days]
                            + [_fmt(100 * report.per_reservoir_overall[rid])])
        writer.writerow(["macro"] + [_fmt(100 * d) for d in report.macro_days]
                        + [_fmt(100 * report.overall)])


def summarize_runs(reports: list[RunReport]):
    """Mean/stddev (in NSE percent) of overall and per-day macro skill."""
    ok = [r for r in reports if not r.failed]
    if not ok:
        return None
    horizon = len(ok[0].nse.macro_days)
    overall = np.array([100 * r.nse.overall for r in ok])
    days = np.stack([100 * r.nse.macro_days for r in ok])
    std = (lambda a: float(np.std(a, ddof=1)) if len(a) > 1 else 0.0)
    return {
        "n_ok": len(ok),
        "overall_mean": float(overall.mean()),
        "overall_std": std(overall),
        "day_mean": days.mean(axis=0),
        "day_std": np.array([std(days[:, k]) for k in range(horizon)]),
    }


def write_summary(out_dir, cfg: ExperimentConfig, reports: list[RunReport]) -> None:
    import os

    stats = summarize_runs(reports)
    horizon = HORIZON if stats is None else len(stats["day_mean"])
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["mode", "ablation", "n_runs", "n_ok", "overall_mean",
                  "overall_std"]
        for k in range(horizon):
            header += [f"day_{k + 1}_mean", f"day_{k + 1}_std"]
        writer.writerow(header)
        if stats is None:
            writer.writerow([cfg.mode, cfg.ablation, len(reports), 0]
                            + ["nan"] * (2 + 2 * horizon))
            return
        row = [cfg.mode, cfg.ablation, len(reports), stats["n_ok"],
               _fmt(stats["overall_mean"]), _fmt(stats["overall_std"])]
        for k in range(horizon):
            row += [_fmt(stats["day_mean"][k]), _fmt(stats["day_std"][k])]
        writer.writerow(row)
