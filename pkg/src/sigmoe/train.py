"""Least-squares fitting of an over-specified mixture by mini-batch SGD."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from .data import Dataset
from .model import Gating, MixingMeasure, batch_loss_grad, logit, sigmoid


class DivergedError(RuntimeError):
    """A non-finite loss showed up during SGD."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch} (loss={loss})")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


@dataclass
class TrainConfig:
    k: int = 9
    epochs: int = 10
    lr: float = 0.1
    batch_size: int = 32
    init_perturb: float = 0.01
    seed: int = 0
    # When set, the batch size grows with n so every epoch has this many
    # batches; ``min_batch_size`` keeps tiny datasets from using B=1.
    batches_per_epoch: Optional[int] = None
    min_batch_size: int = 1

    def __post_init__(self):
        if self.k < 1 or self.epochs < 1 or self.batch_size < 1 or self.min_batch_size < 1:
            raise ValueError("k, epochs and batch sizes must be at least 1")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be at least 1")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.init_perturb < 0:
            raise ValueError("init_perturb must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def effective_batch_size(self, n: int) -> int:
        if self.batches_per_epoch is None:
            return self.batch_size
        return max(self.min_batch_size, -(-n // self.batches_per_epoch))


@dataclass
class FitResult:
    fitted: MixingMeasure
    loss_trace: List[float]
    final_loss: float

    def trace_csv(self) -> str:
        rows = ["epoch,loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(self.loss_trace)]
        return "\n".join(rows) + "\n"


def init_near_truth(truth: MixingMeasure, k: int, init_perturb: float,
                    rng: np.random.Generator) -> MixingMeasure:
    """Start SGD next to G*.

    Atoms 1..k* copy the truth. The k-k* surplus atoms copy the last true
    atom, and all c copies of that atom get their gate bias rescaled so the
    copies together carry the original weight: ``logit(sigmoid(b0)/c)`` for
    sigmoid gating, ``b0 - log(c)`` for softmax. Gaussian noise of scale
    ``init_perturb`` is then added to every coordinate, atom by atom in the
    flat (beta0, beta1, a, b) order.
    """
    k_star = truth.k
    if k < k_star:
        raise ValueError(f"cannot fit k={k} atoms to a truth with {k_star} atoms")
    j0 = k_star - 1
    order = list(range(k_star)) + [j0] * (k - k_star)
    beta0 = truth.beta0[order].copy()
    if k > k_star:
        c = k - k_star + 1
        if truth.gating is Gating.SIGMOID:
            split = float(logit(sigmoid(truth.beta0[j0]) / c))
        else:
            split = float(truth.beta0[j0] - math.log(c))
        beta0[j0] = split
        beta0[k_star:] = split
    start = truth.replace(beta0=beta0, beta1=truth.beta1[order], a=truth.a[order], b=truth.b[order])
    if init_perturb == 0:
        return start
    theta = start.flatten() + init_perturb * rng.standard_normal(k * (2 * truth.d + 2))
    return MixingMeasure.from_flat(theta, truth.d, truth.gating, truth.activation)


def fit(data: Dataset, init: MixingMeasure, cfg: TrainConfig, rng: np.random.Generator) -> FitResult:
    """Plain SGD on the batch-mean squared error.

    Each epoch draws a fresh permutation from ``rng`` and walks it in
    batches of ``cfg.effective_batch_size(n)``; the last one may be short.
    The epoch loss recorded in ``loss_trace`` is the sample-weighted mean of
    the batch losses seen during that epoch.
    """
    if init.d != data.X.shape[1]:
        raise ValueError(f"init has d={init.d}, data has d={data.X.shape[1]}")
    X, Y = data.X, data.Y
    n = X.shape[0]
    beta0, beta1 = init.beta0.copy(), init.beta1.copy()
    a, b = init.a.copy(), init.b.copy()
    gating, act, lr, bs = init.gating, init.activation, cfg.lr, cfg.effective_batch_size(n)
    trace = []
    # overflow here means divergence, which is reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n)
            total = 0.0
            for bi, start in enumerate(range(0, n, bs)):
                idx = perm[start:start + bs]
                loss, g0, g1, ga, gb = batch_loss_grad(beta0, beta1, a, b, X[idx], Y[idx], gating, act)
                if not math.isfinite(loss):
                    raise DivergedError(epoch, bi, loss)
                total += loss * idx.size
                beta0 -= lr * g0
                beta1 -= lr * g1
                a -= lr * ga
                b -= lr * gb
            trace.append(total / n)
    try:
        fitted = MixingMeasure(beta0, beta1, a, b, gating, act)
    except ValueError:
        raise DivergedError(cfg.epochs - 1, -1, float("nan")) from None
    return FitResult(fitted, trace, trace[-1])
