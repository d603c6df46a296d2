"""Voronoi cell assignment and the parameter-space losses D1, D2,r and D3."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .data import make_rng, sample_inputs
from .model import MixingMeasure, regression_eval, sigmoid

LOSS_CSV_HEADER = "loss_name,r,total,weight_term,over_term,exact_term,k_bar"


@dataclass
class VoronoiAssignment:
    cells: List[List[int]]

    @property
    def cardinalities(self) -> List[int]:
        return [len(c) for c in self.cells]

    @property
    def labels(self) -> np.ndarray:
        """Reference index of each fitted atom."""
        n = sum(self.cardinalities)
        out = np.empty(n, dtype=int)
        for j, cell in enumerate(self.cells):
            out[cell] = j
        return out


@dataclass
class LossBreakdown:
    name: str
    total: float
    weight_term: float
    over_specified_term: float
    exact_specified_term: float
    k_bar: int
    r: Optional[float] = None

    def __post_init__(self):
        for name in ("total", "weight_term", "over_specified_term", "exact_specified_term"):
            setattr(self, name, float(getattr(self, name)))

    def csv_row(self) -> str:
        r = "" if self.r is None else repr(float(self.r))
        return ",".join([self.name, r, repr(self.total), repr(self.weight_term),
                         repr(self.over_specified_term), repr(self.exact_specified_term), str(self.k_bar)])


def _check_dims(G: MixingMeasure, ref: MixingMeasure):
    if G.d != ref.d:
        raise ValueError(f"dimension mismatch: fitted d={G.d}, reference d={ref.d}")


def assign_cells(fitted: MixingMeasure, reference: MixingMeasure) -> VoronoiAssignment:
    """Nearest reference atom for every fitted atom in (beta1, a, b) space.

    Ties go to the lowest reference index (``argmin`` returns the first hit).
    """
    _check_dims(fitted, reference)
    w, w_ref = fitted.omega, reference.omega
    dist = np.linalg.norm(w[:, None, :] - w_ref[None, :, :], axis=2)
    labels = np.argmin(dist, axis=1)
    cells: List[List[int]] = [[] for _ in range(reference.k)]
    for i, j in enumerate(labels):
        cells[j].append(i)
    return VoronoiAssignment(cells)


def loss_d1(fitted: MixingMeasure, truth: MixingMeasure) -> LossBreakdown:
    """D1: squared norms in over-specified cells, plain norms in the rest.

    A cell with two or more fitted atoms is treated as over-specified; the
    weight mismatch ``|sum sigmoid(beta0_i) - sigmoid(beta0*_j)|`` is summed
    over every true atom, empty cells included.
    """
    cells = assign_cells(fitted, truth).cells
    w_fit, w_true = sigmoid(fitted.beta0), sigmoid(truth.beta0)
    weight = over = exact = 0.0
    k_bar = 0
    for j, cell in enumerate(cells):
        weight += abs(float(np.sum(w_fit[cell])) - w_true[j])
        if not cell:
            continue
        d_beta1 = np.linalg.norm(fitted.beta1[cell] - truth.beta1[j], axis=1)
        d_eta = np.linalg.norm(np.hstack([fitted.a[cell] - truth.a[j], (fitted.b[cell] - truth.b[j])[:, None]]), axis=1)
        if len(cell) >= 2:
            k_bar += 1
            over += float(np.sum(d_beta1**2 + d_eta**2))
        else:
            exact += float(np.sum(d_beta1 + d_eta))
    return LossBreakdown("D1", weight + over + exact, weight, over, exact, k_bar)


def loss_d2(fitted: MixingMeasure, truth: MixingMeasure, r: float = 1.0) -> LossBreakdown:
    """D2,r: every parameter difference raised to ``r``.

    Over-specified cells contribute their weight mismatch plus the powered
    slope and expert differences; exact-specified cells contribute powered
    differences of all four parameter blocks, gate bias included.
    """
    if not r >= 1:
        raise ValueError(f"D2 exponent must satisfy r >= 1, got {r}")
    cells = assign_cells(fitted, truth).cells
    w_fit, w_true = sigmoid(fitted.beta0), sigmoid(truth.beta0)
    weight = over = exact = 0.0
    k_bar = 0
    for j, cell in enumerate(cells):
        if not cell:
            continue
        d_beta1 = np.linalg.norm(fitted.beta1[cell] - truth.beta1[j], axis=1) ** r
        d_a = np.linalg.norm(fitted.a[cell] - truth.a[j], axis=1) ** r
        d_b = np.abs(fitted.b[cell] - truth.b[j]) ** r
        if len(cell) >= 2:
            k_bar += 1
            weight += abs(float(np.sum(w_fit[cell])) - w_true[j])
            over += float(np.sum(d_beta1 + d_a + d_b))
        else:
            d_beta0 = np.abs(fitted.beta0[cell] - truth.beta0[j]) ** r
            exact += float(np.sum(d_beta0 + d_beta1 + d_a + d_b))
    return LossBreakdown("D2", weight + over + exact, weight, over, exact, k_bar, r)


def loss_d3(fitted: MixingMeasure, reference: MixingMeasure) -> LossBreakdown:
    """D3: first-order differences in every cell regardless of its size."""
    cells = assign_cells(fitted, reference).cells
    over = exact = 0.0
    k_bar = 0
    for j, cell in enumerate(cells):
        if not cell:
            continue
        k_bar += len(cell) >= 2
        d_beta0 = np.abs(fitted.beta0[cell] - reference.beta0[j])
        d_beta1 = np.linalg.norm(fitted.beta1[cell] - reference.beta1[j], axis=1)
        d_eta = np.linalg.norm(np.hstack([fitted.a[cell] - reference.a[j],
                                          (fitted.b[cell] - reference.b[j])[:, None]]), axis=1)
        part = float(np.sum(d_beta0 + d_beta1 + d_eta))
        if len(cell) >= 2:
            over += part
        else:
            exact += part
    return LossBreakdown("D3", over + exact, 0.0, over, exact, int(k_bar))


def l2_distance(G_a: MixingMeasure, G_b: MixingMeasure, mc_samples: int,
                rng: Optional[np.random.Generator] = None, seed: int = 0,
                chunk: int = 100_000) -> float:
    """Monte Carlo estimate of ``||f_a - f_b||`` in L2(Uniform([-1, 1]^d))."""
    _check_dims(G_a, G_b)
    if mc_samples < 1:
        raise ValueError("mc_samples must be positive")
    if rng is None:
        rng = make_rng(seed)
    acc = 0.0
    done = 0
    while done < mc_samples:
        m = min(chunk, mc_samples - done)
        X = sample_inputs(m, G_a.d, rng)
        diff = regression_eval(G_a, X) - regression_eval(G_b, X)
        acc += float(diff @ diff)
        done += m
    return float(np.sqrt(acc / mc_samples))
