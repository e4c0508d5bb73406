"""Training objectives and the forecast skill metric.

Three differentiable losses (contrastive pseudo-domain separation,
adversarial embedding regression, supervised MSE) plus their phase-gated
weighted combination, and Nash-Sutcliffe efficiency for evaluation.

The adversarial term is a plain positive regression loss; the adversarial
sign is applied structurally by the gradient-reversal layer inside the
discriminator, so both the discriminator's and the encoder's optimization
problems stay well-posed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

WARMUP = "warmup"
ADVERSARIAL = "adversarial"


@dataclass
class LossWeights:
    lambda_con: float = 0.1
    lambda_adv: float = 0.1
    lambda_sup: float = 1.0
    tau: float = 0.1
    m_neg: int = 8

    def validate(self):
        if min(self.lambda_con, self.lambda_adv, self.lambda_sup) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.m_neg < 1:
            raise ValueError(f"m_neg must be >= 1, got {self.m_neg}")


def contrastive_loss(v: Tensor, reservoir_ids, tau: float, m_neg: int,
                     rng: Rng) -> Tensor:
    """Pseudo-domain InfoNCE over a batch of embeddings.

    Each sample with at least one same-reservoir partner in the batch
    becomes an anchor: its positive is one uniformly drawn partner, its
    negatives are up to `m_neg` uniformly drawn samples from other
    reservoirs.  Returns the mean anchor loss, or 0 for a degenerate batch
    with no positives.
    """
    ids = np.asarray(reservoir_ids)
    n = len(ids)
    groups: dict = {}
    for i, rid in enumerate(ids.tolist()):
        groups.setdefault(rid, []).append(i)

    anchors = [i for i in range(n) if len(groups[ids[i]]) > 1]
    if not anchors:
        log.warning("contrastive_loss: degenerate batch (no positive pairs)")
        return Tensor(0.0)

    # one block of uniforms covers every positive and negative draw
    n_anchor = len(anchors)
    draws = rng.uniform((n_anchor, m_neg + 1))
    others_of = {rid: np.nonzero(ids != rid)[0] for rid in groups}
    positives, neg_flat, neg_owner = [], [], []
    for a, i in enumerate(anchors):
        same = [j for j in groups[ids[i]] if j != i]
        positives.append(same[min(int(draws[a, 0] * len(same)), len(same) - 1)])
        pool = others_of[ids[i]].tolist()
        take = min(m_neg, len(pool))
        for k in range(take):  # partial Fisher-Yates draw without replacement
            j = k + min(int(draws[a, k + 1] * (len(pool) - k)), len(pool) - k - 1)
            pool[k], pool[j] = pool[j], pool[k]
        neg_flat.extend(pool[:take])
        neg_owner.extend([a] * take)

    n_anchor = len(anchors)
    va = T.take_rows(v, anchors)
    vp = T.take_rows(v, positives)
    pos_logit = T.mul(T.row_cosine(va, vp), 1.0 / tau)             # (A,)

    owner = np.zeros((n_anchor, len(neg_flat)))
    owner[neg_owner, np.arange(len(neg_flat))] = 1.0
    vn_anchor = T.take_rows(v, [anchors[a] for a in neg_owner])
    vn = T.take_rows(v, neg_flat)
    neg_logit = T.mul(T.row_cosine(vn_anchor, vn), 1.0 / tau)      # (K,)

    pos_col = T.reshape(pos_logit, (n_anchor, 1))
    neg_sum = T.matmul(Tensor(owner), T.reshape(T.exp(neg_logit), (-1, 1)))
    denom = T.add(T.exp(pos_col), neg_sum)
    per_anchor = T.sub(T.log(denom), pos_col)
    return T.mean(per_anchor)


def adversarial_loss(d_out: Tensor, v_target: Tensor) -> Tensor:
    """Mean squared Euclidean distance between discriminator output and the
    (detached) pseudo-domain embeddings."""
    if d_out.data.shape != v_target.data.shape:
        raise T.ShapeError(
            f"adversarial_loss: shapes {d_out.data.shape} and "
            f"{v_target.data.shape} differ"
        )
    sq = T.square(T.sub(d_out, v_target))
    return T.mean(T.sum(sq, axis=1))


def supervised_loss(y_hat: Tensor, y: Tensor) -> Tensor:
    """MSE over every (sample, lead time) entry."""
    if y_hat.data.shape != y.data.shape:
        raise T.ShapeError(
            f"supervised_loss: shapes {y_hat.data.shape} and {y.data.shape} differ"
        )
    return T.mean(T.square(T.sub(y_hat, y)))


def total_loss(l_con: Tensor, l_adv: Tensor | None, l_sup: Tensor,
               weights: LossWeights, phase: str) -> Tensor:
    """Phase-gated weighted objective.

    Warm-up combines the contrastive and supervised terms; the adversarial
    phase adds the weighted adversarial term.
    """
    if phase not in (WARMUP, ADVERSARIAL):
        raise ValueError(f"unknown phase {phase!r}")
    out = T.add(T.mul(l_con, weights.lambda_con), T.mul(l_sup, weights.lambda_sup))
    if phase == ADVERSARIAL:
        if l_adv is None:
            raise ValueError("adversarial phase requires an adversarial loss")
        out = T.add(out, T.mul(l_adv, weights.lambda_adv))
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def nse(pred: np.ndarray, obs: np.ndarray) -> float:
    """Nash-Sutcliffe efficiency; NaN marks the undefined constant-obs case."""
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise T.ShapeError(f"nse: shapes {pred.shape} and {obs.shape} differ")
    denom = float(((obs - obs.mean()) ** 2).sum())
    if obs.size < 2 or denom == 0.0:
        log.warning("nse: constant observations, value undefined")
        return float("nan")
    return 1.0 - float(((pred - obs) ** 2).sum()) / denom


@dataclass
class NseReport:
    per_reservoir_days: dict     # id -> np.ndarray (H,)
    per_reservoir_overall: dict  # id -> float
    macro_days: np.ndarray       # (H,)
    overall: float


def _nan_mean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[~np.isnan(arr)]
    if finite.size < arr.size:
        log.warning("nse aggregation: excluding %d undefined entries",
                    arr.size - finite.size)
    return float(finite.mean()) if finite.size else float("nan")


def nse_report(per_reservoir: dict, horizon: int,
               aggregate: str = "per_day_mean") -> NseReport:
    """Per-lead-time and overall skill on aligned multi-day forecasts.

    `per_reservoir` maps reservoir id to (pred, obs) arrays of shape
    (n_anchors, horizon) in physical units.  Overall skill per reservoir is
    the mean of the per-day scores ("per_day_mean") or a single score over
    all pooled samples ("pooled"); reservoirs are macro-averaged.
    """
    if aggregate not in ("per_day_mean", "pooled"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    days = {}
    overall = {}
    for rid in sorted(per_reservoir):
        pred, obs = per_reservoir[rid]
        per_day = np.array([nse(pred[:, k], obs[:, k]) for k in range(horizon)])
        days[rid] = per_day
        if aggregate == "per_day_mean":
            overall[rid] = _nan_mean(per_day)
        else:
            overall[rid] = nse(pred.ravel(), obs.ravel())
    macro_days = np.array([
        _nan_mean([days[rid][k] for rid in days]) for k in range(horizon)
    ])
    return NseReport(days, overall, macro_days, _nan_mean(list(overall.values())))
