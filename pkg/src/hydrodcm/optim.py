"""Adam optimizer, global gradient clipping, and plateau LR scheduling."""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors.

    Parameters whose grad is None at step time are left untouched (their
    moment buffers do not advance either), which is how phase-gated model
    components sit out the epochs where they receive no gradient.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"adam: grad shape {g.shape} does not match param {p.data.shape}"
                )
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.  Gradients are reassigned rather than
    mutated so clipping can never corrupt aliased buffers.
    """
    if max_norm <= 0.0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.vdot(p.grad, p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class PlateauScheduler:
    """Halve-on-plateau learning-rate schedule.

    An epoch improves when its metric beats the best seen by more than
    `threshold`.  After `patience` consecutive non-improving epochs the
    next one triggers a decay: lr <- max(lr * factor, min_lr).  The rate
    is therefore non-increasing over a run.
    """

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 10,
                 threshold: float = 1e-6, min_lr: float = 1e-6):
        if not 0.0 < factor < 1.0:
            raise ValueError(f"factor must be in (0, 1), got {factor}")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best_metric = math.inf
        self.epochs_since_improvement = 0

    def step(self, metric: float) -> float | None:
        """Record one epoch's validation metric; return the new lr on decay."""
        if metric < self.best_metric - self.threshold:
            self.best_metric = metric
            self.epochs_since_improvement = 0
            return None
        self.epochs_since_improvement += 1
        if self.epochs_since_improvement > self.patience and self.lr > self.min_lr:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.epochs_since_improvement = 0
            return self.lr
        return None
