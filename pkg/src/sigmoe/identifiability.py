"""Numerical identifiability diagnostics for F(x) = sigmoid(beta1.x + beta0) * phi(a.x + b).

The strong and weak classes are sets of derivative functions of ``F`` with
respect to its parameters. They are sampled on uniform inputs and tested
for linear independence through the singular values of the
column-normalized sample matrix. This module also builds the explicit
slow-convergence mixing-measure sequences and the exact PDE residuals that
explain why some experts fail the strong condition.

Per-atom parameter coordinates are ordered ``beta1[0..d), beta0, a[0..d), b``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import make_rng, sample_inputs
from .model import Activation, MixingMeasure, logit, sigmoid


class Mode(str, enum.Enum):
    STRONG = "strong"
    WEAK = "weak"


class Verdict(str, enum.Enum):
    INDEPENDENT = "independent"
    DEPENDENT = "dependent"


class DegenerateClassError(ValueError):
    """Every function in the class vanished on the sample."""


class SingularConstantError(ValueError):
    """The proportionality constant of the input-independent PDE is undefined."""


@dataclass(frozen=True)
class AtomParams:
    beta0: float
    beta1: np.ndarray
    a: np.ndarray
    b: float

    @property
    def d(self) -> int:
        return len(self.beta1)

    def key(self) -> tuple:
        return (self.beta0, *self.beta1, *self.a, self.b)


def _coord_name(c: int, d: int) -> str:
    if c < d:
        return f"beta1[{c}]"
    if c == d:
        return "beta0"
    if c < 2 * d + 1:
        return f"a[{c - d - 1}]"
    return "b"


@dataclass
class DerivativeEntry:
    """One function x -> d^|coords| F / d theta_coords at a fixed parameter point."""

    atom: int
    family: str  # "strong" (evaluated at beta1 = 0) or "weak"
    coords: Tuple[int, ...]
    point: AtomParams
    label: str

    @property
    def order(self) -> int:
        return len(self.coords)


@dataclass
class DerivativeClass:
    entries: List[DerivativeEntry]
    mode: Mode
    activation: Activation
    d: int

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> List[str]:
        return [e.label for e in self.entries]

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Sample matrix with one column per entry, shape (m, K)."""
        return np.column_stack([evaluate_entry(e, X, self.activation) for e in self.entries])


def _multiplier(c: int, d: int, X: np.ndarray) -> np.ndarray:
    if c < d:
        return X[:, c]
    if c == d or c == 2 * d + 1:
        return np.ones(X.shape[0])
    return X[:, c - d - 1]


def evaluate_entry(entry: DerivativeEntry, X: np.ndarray, activation: Activation) -> np.ndarray:
    """Analytic derivative of F at ``entry.point`` for every row of X."""
    p, d = entry.point, entry.point.d
    s = sigmoid(X @ p.beta1 + p.beta0)
    z = X @ p.a + p.b
    is_gate = [c <= d for c in entry.coords]
    mult = np.ones(X.shape[0])
    for c in entry.coords:
        mult = mult * _multiplier(c, d, X)
    n_gate = sum(is_gate)
    n_exp = entry.order - n_gate
    gate = {0: s, 1: s * (1 - s), 2: s * (1 - s) * (1 - 2 * s)}[n_gate]
    expert = {0: activation, 1: activation.deriv, 2: activation.deriv2}[n_exp](z)
    return gate * expert * mult


def _label(atom: int, family: str, coords: Sequence[int], d: int) -> str:
    if len(coords) == 1:
        body = f"dF/d{_coord_name(coords[0], d)}"
    else:
        body = "d2F/" + "".join(f"d{_coord_name(c, d)}" for c in coords)
    return f"atom{atom}:{family}:{body}"


def _as_params(p) -> AtomParams:
    if isinstance(p, AtomParams):
        return AtomParams(float(p.beta0), np.asarray(p.beta1, float), np.asarray(p.a, float), float(p.b))
    if hasattr(p, "beta0") and hasattr(p, "beta1"):
        return AtomParams(float(p.beta0), np.asarray(p.beta1, float), np.asarray(p.a, float), float(p.b))
    beta0, beta1, a, b = p
    return AtomParams(float(beta0), np.asarray(beta1, float).reshape(-1), np.asarray(a, float).reshape(-1), float(b))


def build_derivative_class(activation: Activation, params, mode=Mode.WEAK) -> DerivativeClass:
    """Enumerate the strong or weak derivative class for a list of atoms.

    ``params`` is a sequence of ``(beta0, beta1, a, b)`` tuples (or atoms).
    Per atom the weak class holds the 2d+2 first derivatives at the atom
    itself. The strong class adds, at ``beta1 = 0``, the 2d+1 first and the
    (2d+1)(2d+2)/2 second derivatives in ``(beta1, a, b)``, each unordered
    pair listed once.
    """
    mode = Mode(mode)
    pts = [_as_params(p) for p in params]
    if not pts:
        raise ValueError("need at least one atom")
    d = pts[0].d
    if any(p.d != d or len(p.a) != d for p in pts):
        raise ValueError("all atoms must share the input dimension")
    keys = [p.key() for p in pts]
    if len(set(keys)) != len(keys):
        raise ValueError("atom parameters must be pairwise distinct")
    slope_expert = [c for c in range(2 * d + 2) if c != d]
    entries: List[DerivativeEntry] = []
    for i, p in enumerate(pts):
        if mode is Mode.STRONG:
            at_zero = AtomParams(p.beta0, np.zeros(d), p.a, p.b)
            for c in slope_expert:
                entries.append(DerivativeEntry(i, "strong", (c,), at_zero, _label(i, "strong", (c,), d)))
            for pair in combinations_with_replacement(slope_expert, 2):
                entries.append(DerivativeEntry(i, "strong", pair, at_zero, _label(i, "strong", pair, d)))
        for c in range(2 * d + 2):
            entries.append(DerivativeEntry(i, "weak", (c,), p, _label(i, "weak", (c,), d)))
    return DerivativeClass(entries, mode, activation, d)


@dataclass
class IndependenceReport:
    num_functions: int
    num_samples: int
    singular_values: List[float]
    min_sv_ratio: float
    verdict: Verdict
    dependent_subsets: List[List[str]] = field(default_factory=list)
    dropped_zero_columns: List[str] = field(default_factory=list)
    tol: float = 1e-6

    def to_text(self) -> str:
        lines = [
            f"functions: {self.num_functions}",
            f"samples: {self.num_samples}",
            f"tolerance: {self.tol:g}",
            f"min_sv_ratio: {self.min_sv_ratio:.6e}",
            f"verdict: {self.verdict.value}",
            f"dropped_zero_columns: {len(self.dropped_zero_columns)}",
        ]
        lines += [f"  {lab}" for lab in self.dropped_zero_columns]
        lines.append(f"dependent_subsets: {len(self.dependent_subsets)}")
        for k, group in enumerate(self.dependent_subsets):
            lines.append(f"  [{k}] " + ", ".join(group))
        return "\n".join(lines) + "\n"

    def singular_values_csv(self) -> str:
        rows = ["index,singular_value,ratio"]
        top = self.singular_values[0] if self.singular_values else 1.0
        rows += [f"{i},{s!r},{s / top!r}" for i, s in enumerate(self.singular_values)]
        return "\n".join(rows) + "\n"


def independence_test(cls: DerivativeClass, m: Optional[int] = None, tol: float = 1e-6,
                      rng: Optional[np.random.Generator] = None, zero_rms: float = 1e-10,
                      component_threshold: float = 0.1) -> IndependenceReport:
    """Numerical rank test of a derivative class on ``m`` uniform samples.

    Columns with RMS below ``zero_rms`` are dropped and listed, the rest are
    scaled to unit RMS. Right singular vectors of singular values whose ratio
    to the largest is below ``tol`` name the interacting derivatives.
    """
    K = len(cls)
    if m is None:
        m = max(2000, 10 * K)
    if m < 3 * K:
        raise ValueError(f"need at least {3 * K} samples for {K} functions, got {m}")
    if rng is None:
        rng = make_rng(0)
    X = sample_inputs(m, cls.d, rng)
    M = cls.evaluate(X)
    rms = np.sqrt(np.mean(M * M, axis=0))
    keep = np.flatnonzero(rms >= zero_rms)
    dropped = [cls.entries[i].label for i in np.flatnonzero(rms < zero_rms)]
    if keep.size == 0:
        raise DegenerateClassError("all functions in the class are numerically zero")
    A = M[:, keep] / rms[keep]
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    ratio = float(s[-1] / s[0])
    subsets = []
    for idx in np.flatnonzero(s / s[0] < tol):
        comp = np.flatnonzero(np.abs(Vt[idx]) > component_threshold)
        subsets.append([cls.entries[keep[c]].label for c in comp])
    verdict = Verdict.DEPENDENT if ratio < tol else Verdict.INDEPENDENT
    return IndependenceReport(K, m, [float(v) for v in s], ratio, verdict, subsets, dropped, tol)


# -- exact PDE identities --------------------------------------------------


def _probes(probe_xs) -> np.ndarray:
    return np.atleast_2d(np.asarray(probe_xs, dtype=float))


def pde_residual_input_independent(activation: Activation, beta0: float, b: float, probe_xs) -> float:
    """Residual of dF/dbeta1 = C * dF/da at beta1 = 0, a = 0.

    ``C = (1 - sigmoid(beta0)) * phi(b) / phi'(b)``. Returns the largest
    ``|dF/dbeta1_u - C dF/da_u| / (1 + |dF/dbeta1_u|)`` over probes and
    coordinates u.
    """
    X = _probes(probe_xs)
    dphi = float(activation.deriv(b))
    if dphi == 0.0:
        raise SingularConstantError(f"phi'({b}) = 0; the proportionality constant is undefined")
    s = float(sigmoid(beta0))
    const = (1.0 - s) * float(activation(b)) / dphi
    d = X.shape[1]
    pt = AtomParams(float(beta0), np.zeros(d), np.zeros(d), float(b))
    worst = 0.0
    for u in range(d):
        d_beta1 = evaluate_entry(DerivativeEntry(0, "weak", (u,), pt, ""), X, activation)
        d_a = evaluate_entry(DerivativeEntry(0, "weak", (d + 1 + u,), pt, ""), X, activation)
        worst = max(worst, float(np.max(np.abs(d_beta1 - const * d_a) / (1.0 + np.abs(d_beta1)))))
    return worst


def pde_residual_polynomial(beta1, beta0: float, a, b: float, probe_xs) -> float:
    """Residual of d2F/dbeta1 db = d2F/da dbeta0 for linear experts."""
    X = _probes(probe_xs)
    beta1 = np.asarray(beta1, float)
    a = np.asarray(a, float)
    d = beta1.size
    pt = AtomParams(float(beta0), beta1, a, float(b))
    act = Activation.identity()
    b_idx, beta0_idx = 2 * d + 1, d
    worst = 0.0
    for u in range(d):
        lhs = evaluate_entry(DerivativeEntry(0, "weak", (u, b_idx), pt, ""), X, act)
        rhs = evaluate_entry(DerivativeEntry(0, "weak", (beta0_idx, d + 1 + u), pt, ""), X, act)
        worst = max(worst, float(np.max(np.abs(lhs - rhs) / (1.0 + np.abs(lhs)))))
    return worst


# -- slow-convergence sequences ------------------------------------------


def _check_slow_truth(truth: MixingMeasure):
    if np.any(truth.a[0] != 0) or np.any(truth.beta1[0] != 0):
        raise ValueError("the first true atom must have a = 0 and beta1 = 0")


def slow_sequence_linear(truth: MixingMeasure, n: int, r: float = 1.0) -> MixingMeasure:
    """k*+1 atom measure whose function differs from ``truth`` by b*_1 / n^(r+1).

    The first true atom is split in two with gate biases chosen so the pair
    weighs ``sigmoid(beta0*_1) + n^-(r+1)``, and expert biases ``b*_1 +- 1/n``.
    """
    _check_slow_truth(truth)
    if n < 1 or r < 1:
        raise ValueError("need n >= 1 and r >= 1")
    w = (float(sigmoid(truth.beta0[0])) + float(n) ** -(r + 1)) / 2.0
    beta0_pair = float(logit(w))
    b1 = truth.b[0]
    return MixingMeasure(
        np.concatenate([[beta0_pair, beta0_pair], truth.beta0[1:]]),
        np.vstack([truth.beta1[:1], truth.beta1[:1], truth.beta1[1:]]),
        np.vstack([truth.a[:1], truth.a[:1], truth.a[1:]]),
        np.concatenate([[b1 + 1.0 / n, b1 - 1.0 / n], truth.b[1:]]),
        truth.gating,
        truth.activation,
    )


def slow_sequence_activation(truth: MixingMeasure, n: int, c: float = 1.0) -> MixingMeasure:
    """k*+1 atom measure splitting an input-independent expert into two.

    Each copy has ``exp(-beta0) = 1 + 2 exp(-beta0*_1)``, so the pair keeps the
    original weight, and expert biases ``b*_1 + c/n`` and ``b*_1 + 2c/n``.
    """
    _check_slow_truth(truth)
    if n < 1:
        raise ValueError("need n >= 1")
    beta0_pair = -math.log1p(2.0 * math.exp(-float(truth.beta0[0])))
    b1 = truth.b[0]
    d = truth.d
    return MixingMeasure(
        np.concatenate([[beta0_pair, beta0_pair], truth.beta0[1:]]),
        np.vstack([np.zeros((2, d)), truth.beta1[1:]]),
        np.vstack([np.zeros((2, d)), truth.a[1:]]),
        np.concatenate([[b1 + c / n, b1 + 2.0 * c / n], truth.b[1:]]),
        truth.gating,
        truth.activation,
    )


def random_weak_atoms(rng: np.random.Generator, count: int, d: int) -> List[AtomParams]:
    """Generic atoms away from the degenerate boundaries of the weak class.

    ``beta1`` has a uniform random direction and norm in [1.5, 2.5] (as the
    slope shrinks the gate derivatives collapse onto the expert ones),
    ``a ~ N(0, I)``, ``beta0 ~ U(-1, 1)`` (no saturated gates) and
    ``b ~ U(-1/4, 1/4) * ||a||_1`` so the hyperplane ``a.x + b = 0`` crosses the
    middle of the cube. Near either boundary the smallest singular value
    ratio goes to zero continuously.
    """
    out = []
    for _ in range(count):
        direction = rng.standard_normal(d)
        beta1 = direction / np.linalg.norm(direction) * rng.uniform(1.5, 2.5)
        a = rng.standard_normal(d)
        beta0 = float(rng.uniform(-1.0, 1.0))
        b = float(rng.uniform(-0.25, 0.25) * np.abs(a).sum())
        out.append(AtomParams(beta0, beta1, a, b))
    return out


__all__ = [
    "Mode", "Verdict", "AtomParams", "DerivativeEntry", "DerivativeClass", "IndependenceReport",
    "DegenerateClassError", "SingularConstantError", "build_derivative_class", "evaluate_entry",
    "independence_test", "pde_residual_input_independent", "pde_residual_polynomial",
    "slow_sequence_linear", "slow_sequence_activation", "random_weak_atoms",
]
