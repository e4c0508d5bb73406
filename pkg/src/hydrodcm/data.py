"""Reservoir data: synthetic world generation, CSV ingestion, per-reservoir
normalization, rolling-window sample construction, and split protocols.

The synthetic world stands in for real basin records.  Each reservoir gets
a metadata vector (latitude deg, longitude deg, elevation m) sampled in a
bounded box, and daily weather/inflow series whose generative parameters
are smooth functions of that metadata, scaled by `shift_strength`:

    temperature  seasonal sinusoid, metadata-shifted baseline/amplitude/phase
    precipitation  seasonally modulated exponential bursts
    inflow       y[t+1] = a*y[t] + b*max(0, temp[t]-thresh)
                          + c*sum_k w[k]*precip[t-k] + noise, clamped at 0

At shift_strength 0 every reservoir shares one parameter set (no domain
shift); at 1 the parameters spread smoothly over the metadata box, so
reservoirs with similar metadata behave similarly.  Target reservoirs are
the ones with the most extreme metadata (largest distance from the box
centroid), which widens the source/target gap the way isolated basins do.
"""

from __future__ import annotations

import csv
import datetime
import logging
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

log = logging.getLogger(__name__)

T_WINDOW = 30
HORIZON = 7
N_FEATURES = 3   # precip, temp, inflow
N_META = 3       # lat, lon, elev
INFLOW = 2       # column index of inflow in the series array

BASE_DATE = datetime.date(1999, 1, 1)
MAX_GAP_DAYS = 9
STD_FLOOR = 1e-6

SERIES_HEADER = ["reservoir_id", "date", "precip_mm", "temp_c", "inflow_cms"]
META_HEADER = ["reservoir_id", "lat", "lon", "elev_m", "role"]

# metadata box (lat deg, lon deg, elevation m)
META_LOW = np.array([37.0, -112.0, 1500.0])
META_HIGH = np.array([43.0, -105.0, 3000.0])

_BURN_IN = 90
_RUNOFF_FAST = np.array([0.70, 0.20, 0.10, 0.00, 0.00])
_RUNOFF_SLOW = np.array([0.15, 0.20, 0.25, 0.25, 0.15])


class IngestError(ValueError):
    """A data file violates the documented schema or gap rule."""


@dataclass
class ReservoirRecord:
    """One reservoir's daily series plus spatial metadata.

    `series` rows are (precip_mm, temp_c, inflow_cms); `start_index` is the
    day offset of the first row from the world's base date, so short target
    histories align with the end of the observation window.
    """

    id: str
    metadata: np.ndarray          # (3,) lat, lon, elev
    series: np.ndarray            # (days, 3)
    role: str                     # "source" | "target"
    start_index: int = 0

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"role must be source|target, got {self.role!r}")
        if np.any(self.series[:, INFLOW] < 0):
            raise ValueError(f"reservoir {self.id}: negative inflow")

    @property
    def n_days(self) -> int:
        return self.series.shape[0]


@dataclass
class SyntheticWorldConfig:
    num_reservoirs: int = 30
    num_target: int = 3
    days: int = 4745              # ~13 years of daily records
    target_years: int = 3         # target reservoirs keep only this much
    shift_strength: float = 1.0
    seed: int = 0

    def validate(self):
        if not 0 < self.num_target < self.num_reservoirs:
            raise ValueError("need 0 < num_target < num_reservoirs")
        if self.shift_strength < 0:
            raise ValueError("shift_strength must be >= 0")
        target_days = self.target_years * 365
        if target_days > self.days:
            raise ValueError(
                f"target_years*365 = {target_days} exceeds days = {self.days}"
            )
        if self.days < T_WINDOW + HORIZON + 1:
            raise ValueError(f"days = {self.days} too short for one window")


def _smooth_fields(u: np.ndarray, shift: float) -> dict:
    """Generative parameters as smooth functions of box-normalized metadata.

    Every field collapses to its base value when shift == 0.  Persistence
    stays in (0, 1) and the melt/precip coefficients stay positive for any
    u in [0, 1]^3, which keeps the impulse response of inflow nonnegative.
    """
    s1, s2, s3 = u[0], u[1], u[2]
    w1 = np.sin(np.pi * (s1 - 0.5))
    w2 = np.sin(np.pi * (s2 - 0.5))
    w3 = np.sin(np.pi * (s3 - 0.5))
    mix = shift
    kernel_blend = float(np.clip(0.5 + 0.5 * mix * (0.6 * w1 - 0.4 * w3), 0.0, 1.0))
    # clips only bind for shift_strength well above 1; they keep persistence
    # in (0, 1) and the melt/precip responses nonnegative for any shift
    return {
        "persist": float(np.clip(0.62 + 0.22 * mix * (0.7 * w3 + 0.3 * w1),
                                 0.05, 0.95)),
        "melt_coef": 0.9 * float(np.clip(1.0 + 0.7 * mix * (0.6 * w1 + 0.4 * w2),
                                         0.05, None)),
        "precip_coef": 1.1 * float(np.clip(1.0 + 0.7 * mix * (0.5 * w2 - 0.5 * w3),
                                           0.05, None)),
        "melt_thresh": 1.5 + 5.0 * mix * w3,
        "temp_base": 11.0 - 6.0 * mix * w3,
        "temp_amp": 9.0 * float(np.clip(1.0 + 0.3 * mix * w1, 0.1, None)),
        "phase_days": 15.0 * mix * w2,
        "wet_prob": 0.30 * float(np.clip(1.0 + 0.3 * mix * w2, 0.1, None)),
        "precip_scale": 5.0 * float(np.clip(1.0 + 0.4 * mix * w1, 0.1, None)),
        "runoff_kernel": (kernel_blend * _RUNOFF_FAST
                          + (1.0 - kernel_blend) * _RUNOFF_SLOW),
    }


def _simulate_reservoir(params: dict, days: int, rng: Rng) -> np.ndarray:
    n = days + _BURN_IN
    t = np.arange(n, dtype=np.float64)
    season = 2.0 * np.pi * (t - 80.0 - params["phase_days"]) / 365.0
    temp = (params["temp_base"] + params["temp_amp"] * np.sin(season)
            + rng.normal((n,), std=2.0))

    wet_season = 1.0 + 0.5 * np.sin(2.0 * np.pi * (t - 120.0) / 365.0)
    wet_prob = np.clip(params["wet_prob"] * wet_season, 0.02, 0.95)
    wet = rng.uniform((n,)) < wet_prob
    amounts = -params["precip_scale"] * np.log(1.0 - rng.uniform((n,)))
    precip = np.where(wet, amounts, 0.0)

    melt = np.maximum(temp - params["melt_thresh"], 0.0)
    response = np.convolve(precip, params["runoff_kernel"])[:n]
    noise = rng.normal((n,), std=1.2)

    a, b, c = params["persist"], params["melt_coef"], params["precip_coef"]
    inflow = np.empty(n)
    y = 5.0
    for k in range(n):
        y = max(a * y + b * melt[k] + c * response[k] + noise[k], 0.0)
        inflow[k] = y
    return np.column_stack([precip, temp, inflow])[_BURN_IN:]


def generate_world(cfg: SyntheticWorldConfig) -> list[ReservoirRecord]:
    """Build a deterministic multi-reservoir world from the config seed."""
    cfg.validate()
    root = Rng(cfg.seed).spawn("world")
    meta_rng = root.spawn("metadata")
    u = meta_rng.uniform((cfg.num_reservoirs, N_META))
    metadata = META_LOW + u * (META_HIGH - META_LOW)

    # targets: most extreme metadata, mirroring isolated basins
    dist = np.sqrt(((u - u.mean(axis=0)) ** 2).sum(axis=1))
    target_idx = set(np.argsort(-dist, kind="stable")[:cfg.num_target].tolist())

    target_days = cfg.target_years * 365
    records = []
    for i in range(cfg.num_reservoirs):
        params = _smooth_fields(u[i], cfg.shift_strength)
        series = _simulate_reservoir(params, cfg.days, root.spawn(f"reservoir{i:03d}"))
        rid = f"R{i:02d}"
        if i in target_idx:
            records.append(ReservoirRecord(
                rid, metadata[i], series[cfg.days - target_days:], "target",
                start_index=cfg.days - target_days))
        else:
            records.append(ReservoirRecord(rid, metadata[i], series, "source"))
    return records


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def dump_world_csv(records: list[ReservoirRecord], series_path, metadata_path):
    with open(series_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SERIES_HEADER)
        for rec in records:
            for k in range(rec.n_days):
                date = BASE_DATE + datetime.timedelta(days=rec.start_index + k)
                writer.writerow([rec.id, date.isoformat(),
                                 repr(float(rec.series[k, 0])),
                                 repr(float(rec.series[k, 1])),
                                 repr(float(rec.series[k, 2]))])
    with open(metadata_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(META_HEADER)
        for rec in records:
            writer.writerow([rec.id, repr(float(rec.metadata[0])),
                             repr(float(rec.metadata[1])),
                             repr(float(rec.metadata[2])), rec.role])


def _parse_float(value: str, path, line_no: int, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise IngestError(
            f"{path}:{line_no}: column {column!r} is not a number: {value!r}"
        ) from None


def ingest_csv(series_path, metadata_path) -> list[ReservoirRecord]:
    """Load reservoir records from the two-file CSV schema.

    Gaps of up to 9 days are filled by per-feature linear interpolation;
    longer gaps reject the reservoir.  Negative inflow is clamped to 0 with
    a warning count.
    """
    meta = {}
    with open(metadata_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != META_HEADER:
            raise IngestError(
                f"{metadata_path}:1: expected header {','.join(META_HEADER)}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(META_HEADER):
                raise IngestError(f"{metadata_path}:{line_no}: expected "
                                  f"{len(META_HEADER)} columns, got {len(row)}")
            rid, lat, lon, elev, role = row
            if "/" in rid or "," in rid:
                raise IngestError(
                    f"{metadata_path}:{line_no}: reservoir id {rid!r} may not "
                    "contain '/' or ','")
            if role not in ("source", "target"):
                raise IngestError(
                    f"{metadata_path}:{line_no}: role must be source|target, "
                    f"got {role!r}")
            meta[rid] = (np.array([
                _parse_float(lat, metadata_path, line_no, "lat"),
                _parse_float(lon, metadata_path, line_no, "lon"),
                _parse_float(elev, metadata_path, line_no, "elev_m"),
            ]), role)

    rows: dict[str, list] = {}
    with open(series_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SERIES_HEADER:
            raise IngestError(
                f"{series_path}:1: expected header {','.join(SERIES_HEADER)}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SERIES_HEADER):
                raise IngestError(f"{series_path}:{line_no}: expected "
                                  f"{len(SERIES_HEADER)} columns, got {len(row)}")
            rid, date_s, precip, temp, inflow = row
            if rid not in meta:
                raise IngestError(
                    f"{series_path}:{line_no}: reservoir {rid!r} missing from "
                    f"{metadata_path}")
            try:
                date = datetime.date.fromisoformat(date_s)
            except ValueError:
                raise IngestError(
                    f"{series_path}:{line_no}: unparseable ISO date {date_s!r}"
                ) from None
            rows.setdefault(rid, []).append((
                (date - BASE_DATE).days, line_no,
                _parse_float(precip, series_path, line_no, "precip_mm"),
                _parse_float(temp, series_path, line_no, "temp_c"),
                _parse_float(inflow, series_path, line_no, "inflow_cms"),
            ))

    records = []
    for rid in sorted(rows):
        entries = sorted(rows[rid])
        days = [e[0] for e in entries]
        if len(set(days)) != len(days):
            dup = days[[i for i in range(1, len(days)) if days[i] == days[i - 1]][0]]
            raise IngestError(
                f"{series_path}: reservoir {rid}: duplicate date at day offset {dup}")
        values = np.array([(e[2], e[3], e[4]) for e in entries])
        filled = [values[0]]
        for k in range(1, len(entries)):
            gap = days[k] - days[k - 1] - 1
            if gap > MAX_GAP_DAYS:
                raise IngestError(
                    f"{series_path}:{entries[k][1]}: reservoir {rid} has a "
                    f"{gap}-day gap; gaps longer than {MAX_GAP_DAYS} days are "
                    "rejected")
            for j in range(1, gap + 1):
                frac = j / (gap + 1)
                filled.append(values[k - 1] + frac * (values[k] - values[k - 1]))
            filled.append(values[k])
        series = np.array(filled)
        clamped = int((series[:, INFLOW] < 0).sum())
        if clamped:
            log.warning("reservoir %s: clamped %d negative inflow values to 0",
                        rid, clamped)
            series[:, INFLOW] = np.maximum(series[:, INFLOW], 0.0)
        metadata, role = meta[rid]
        records.append(ReservoirRecord(rid, metadata, series, role,
                                       start_index=days[0]))
    return records


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    """Per-reservoir feature z-score stats plus global metadata min-max."""

    feature_mean: dict = field(default_factory=dict)   # id -> (3,)
    feature_std: dict = field(default_factory=dict)    # id -> (3,), floored
    meta_min: np.ndarray = None
    meta_max: np.ndarray = None

    def normalize_series(self, rec: ReservoirRecord) -> np.ndarray:
        return (rec.series - self.feature_mean[rec.id]) / self.feature_std[rec.id]

    def normalize_meta(self, rec: ReservoirRecord) -> np.ndarray:
        span = np.maximum(self.meta_max - self.meta_min, 1e-12)
        return (rec.metadata - self.meta_min) / span

    def denormalize_inflow(self, rid: str, values: np.ndarray) -> np.ndarray:
        return values * self.feature_std[rid][INFLOW] + self.feature_mean[rid][INFLOW]


def fit_norm_stats(records: list[ReservoirRecord],
                   fit_spans: dict[str, tuple[int, int]]) -> NormStats:
    """Fit z-score stats on each reservoir's declared span (no leakage).

    Metadata bounds come from source reservoirs only, so target metadata is
    expressed relative to the known training box.
    """
    stats = NormStats()
    for rec in records:
        start, stop = fit_spans[rec.id]
        if stop <= start:
            raise ValueError(f"reservoir {rec.id}: empty normalization span")
        window = rec.series[start:stop]
        stats.feature_mean[rec.id] = window.mean(axis=0)
        stats.feature_std[rec.id] = np.maximum(window.std(axis=0), STD_FLOOR)
    source_meta = np.array([r.metadata for r in records if r.role == "source"])
    if len(source_meta) == 0:
        source_meta = np.array([r.metadata for r in records])
    stats.meta_min = source_meta.min(axis=0)
    stats.meta_max = source_meta.max(axis=0)
    return stats


# ---------------------------------------------------------------------------
# windows and splits
# ---------------------------------------------------------------------------

@dataclass
class WindowSample:
    """One training example: history window, target vector, metadata."""

    x: np.ndarray          # (T, F) normalized
    y: np.ndarray          # (H,) normalized inflow
    s: np.ndarray          # (M,) normalized metadata
    reservoir_id: str
    anchor: int            # world day index of the last history day


def make_windows(record: ReservoirRecord, span: tuple[int, int],
                 stats: NormStats, t_window: int = T_WINDOW,
                 horizon: int = HORIZON) -> list[WindowSample]:
    """All rolling windows whose history and future lie inside `span`.

    The count is span_len - t_window - horizon + 1 (or zero when the span
    is shorter than one full window plus horizon).
    """
    start, stop = span
    span_len = stop - start
    if span_len < t_window + horizon:
        log.warning("reservoir %s: span of %d days is too short for windows",
                    record.id, span_len)
        return []
    series = stats.normalize_series(record)
    meta = stats.normalize_meta(record)
    samples = []
    for a in range(start + t_window - 1, stop - horizon):
        samples.append(WindowSample(
            x=series[a - t_window + 1:a + 1],
            y=series[a + 1:a + 1 + horizon, INFLOW],
            s=meta,
            reservoir_id=record.id,
            anchor=record.start_index + a,
        ))
    return samples


@dataclass
class WindowSet:
    """Stacked window samples ready for batched training."""

    x: np.ndarray          # (N, T, F)
    y: np.ndarray          # (N, H)
    s: np.ndarray          # (N, M)
    ids: np.ndarray        # (N,) codes into id_names
    anchors: np.ndarray    # (N,)
    id_names: list[str]

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def reservoir_ids(self) -> list[str]:
        return sorted({self.id_names[c] for c in self.ids})


def stack_windows(samples: list[WindowSample], id_names: list[str],
                  t_window: int = T_WINDOW, horizon: int = HORIZON,
                  n_meta: int = N_META) -> WindowSet:
    code = {rid: k for k, rid in enumerate(id_names)}
    n = len(samples)
    xs = np.empty((n, t_window, N_FEATURES))
    ys = np.empty((n, horizon))
    ss = np.empty((n, n_meta))
    ids = np.empty(n, dtype=np.int64)
    anchors = np.empty(n, dtype=np.int64)
    for k, w in enumerate(samples):
        xs[k] = w.x
        ys[k] = w.y
        ss[k] = w.s
        ids[k] = code[w.reservoir_id]
        anchors[k] = w.anchor
    return WindowSet(xs, ys, ss, ids, anchors, id_names)


@dataclass
class Split:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    stats: NormStats
    spans: dict            # id -> {"train"/"val"/"test": (start, stop)}
    mode: str


SPLIT_MODES = ("dg", "oracle", "fewshot")


def compute_split_spans(records: list[ReservoirRecord], mode: str) -> dict:
    """Chronological spans per reservoir for the requested protocol.

    dg: sources split 80/20 into train/val; targets are test-only.
    oracle: targets only; first 2/3 train, the rest half val, half test.
    fewshot: targets only; first 2/3 split 80/20 train/val, final 1/3 test.
    Normalization fit spans are the train spans, except dg targets, which
    are normalized on their own full available history.
    """
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")
    spans = {}
    for rec in records:
        n = rec.n_days
        if mode == "dg":
            if rec.role == "source":
                cut = int(n * 0.8)
                spans[rec.id] = {"train": (0, cut), "val": (cut, n), "fit": (0, cut)}
            else:
                spans[rec.id] = {"test": (0, n), "fit": (0, n)}
        elif rec.role == "target":
            two_thirds = (2 * n) // 3
            if mode == "oracle":
                mid = two_thirds + (n - two_thirds) // 2
                spans[rec.id] = {"train": (0, two_thirds), "val": (two_thirds, mid),
                                 "test": (mid, n), "fit": (0, two_thirds)}
            else:  # fewshot
                cut = int(two_thirds * 0.8)
                spans[rec.id] = {"train": (0, cut), "val": (cut, two_thirds),
                                 "test": (two_thirds, n), "fit": (0, cut)}
        else:
            # oracle/fewshot never touch source reservoirs, but their stats
            # are still fitted (on the conventional 80% span) so checkpoints
            # always carry a complete stats table
            cut = int(n * 0.8)
            spans[rec.id] = {"fit": (0, cut)}
    return spans


def build_split(records: list[ReservoirRecord], mode: str,
                t_window: int = T_WINDOW, horizon: int = HORIZON,
                stats: NormStats | None = None) -> Split:
    """Windows for all parts of the protocol.

    `stats` defaults to statistics fitted on this split's own fit spans;
    checkpoint evaluation passes the stats stored at training time instead,
    so its windows match the training run's exactly.
    """
    spans = compute_split_spans(records, mode)
    if stats is None:
        stats = fit_norm_stats(records, {rid: s["fit"] for rid, s in spans.items()})
    id_names = sorted(r.id for r in records)
    parts = {"train": [], "val": [], "test": []}
    for rec in sorted(records, key=lambda r: r.id):
        for part in parts:
            span = spans[rec.id].get(part)
            if span is not None:
                parts[part].extend(make_windows(rec, span, stats, t_window, horizon))
    return Split(
        train=stack_windows(parts["train"], id_names, t_window, horizon),
        val=stack_windows(parts["val"], id_names, t_window, horizon),
        test=stack_windows(parts["test"], id_names, t_window, horizon),
        stats=stats,
        spans=spans,
        mode=mode,
    )


def corrupt_metadata(split: Split, rng: Rng, noise_std: float = 0.5) -> None:
    """Spatial-shuffle ablation: add Gaussian noise to each reservoir's
    normalized metadata, then permute the vectors across reservoirs.

    Series data is untouched; only the `s` columns of the window sets
    change, in place.
    """
    id_names = split.train.id_names
    present = sorted(set(split.train.ids) | set(split.val.ids) | set(split.test.ids))
    noisy = {}
    for code in present:
        rid = id_names[code]
        base = None
        for ws in (split.train, split.val, split.test):
            rows = np.nonzero(ws.ids == code)[0]
            if rows.size:
                base = ws.s[rows[0]].copy()
                break
        noisy[code] = base + rng.normal((base.shape[0],), std=noise_std)
    perm = rng.permutation(len(present))
    reassigned = {code: noisy[present[perm[k]]] for k, code in enumerate(present)}
    for ws in (split.train, split.val, split.test):
        for code in present:
            ws.s[ws.ids == code] = reassigned[code]


def audit_split(split: Split) -> None:
    """Assert the leakage rules; raises AssertionError with the violation.

    Checks domain disjointness in dg mode, chronological non-overlap of
    window day ranges across parts within each reservoir, and span
    containment of every window.
    """
    id_names = split.train.id_names
    if split.mode == "dg":
        test_ids = {id_names[c] for c in split.test.ids}
        train_ids = {id_names[c] for c in split.train.ids}
        val_ids = {id_names[c] for c in split.val.ids}
        overlap = test_ids & (train_ids | val_ids)
        assert not overlap, f"dg leakage: target reservoirs in training: {overlap}"

    t_window = split.train.x.shape[1] if split.train.n else T_WINDOW
    horizon = split.train.y.shape[1] if split.train.n else HORIZON
    ranges: dict[str, dict[str, list]] = {}
    for part, ws in (("train", split.train), ("val", split.val), ("test", split.test)):
        for k in range(ws.n):
            rid = id_names[ws.ids[k]]
            lo = ws.anchors[k] - t_window + 1
            hi = ws.anchors[k] + horizon
            ranges.setdefault(rid, {}).setdefault(part, []).append((lo, hi))
    order = ["train", "val", "test"]
    for rid, by_part in ranges.items():
        for earlier_i, earlier in enumerate(order):
            for later in order[earlier_i + 1:]:
                if earlier in by_part and later in by_part:
                    max_earlier = max(hi for _, hi in by_part[earlier])
                    min_later = min(lo for lo, _ in by_part[later])
                    assert max_earlier < min_later, (
                        f"{rid}: {earlier} window days reach {max_earlier} but "
                        f"{later} windows start at {min_later}")
