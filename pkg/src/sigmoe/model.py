"""Gated mixture-of-experts regression functions with ridge experts.

A mixing measure holds ``k`` atoms ``(beta0, beta1, a, b)`` and defines

    f_G(x) = sum_i w_i(x) * phi(a_i . x + b_i)

where ``w_i`` is either an independent sigmoid gate or a softmax over the
atoms. Atoms are stored column-wise as numpy arrays so that evaluation and
gradients over a batch are a handful of matrix products.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Gating(str, enum.Enum):
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    GELU = "gelu"
    IDENTITY = "identity"
    POLYNOMIAL = "polynomial"


@dataclass(frozen=True)
class Activation:
    """Scalar activation ``phi`` of a ridge expert.

    ``Identity`` and ``Polynomial(1)`` share one code path, so they agree
    bit for bit.
    """

    kind: ActivationKind
    degree: int = 1

    def __post_init__(self):
        kind = ActivationKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ActivationKind.POLYNOMIAL:
            if int(self.degree) != self.degree or self.degree < 1:
                raise ValueError(f"polynomial degree must be a positive integer, got {self.degree}")
            object.__setattr__(self, "degree", int(self.degree))
        elif kind is ActivationKind.IDENTITY:
            object.__setattr__(self, "degree", 1)
        else:
            object.__setattr__(self, "degree", 0)

    @classmethod
    def relu(cls) -> "Activation":
        return cls(ActivationKind.RELU)

    @classmethod
    def gelu(cls) -> "Activation":
        return cls(ActivationKind.GELU)

    @classmethod
    def identity(cls) -> "Activation":
        return cls(ActivationKind.IDENTITY)

    @classmethod
    def polynomial(cls, degree: int) -> "Activation":
        return cls(ActivationKind.POLYNOMIAL, degree)

    @classmethod
    def parse(cls, text: str, degree: Optional[int] = None) -> "Activation":
        """Parse ``relu``, ``gelu``, ``identity``, ``polynomial`` or ``poly2``-style names."""
        t = text.strip().lower()
        m = re.fullmatch(r"poly(?:nomial)?(\d*)", t)
        if m:
            if m.group(1):
                return cls.polynomial(int(m.group(1)))
            return cls.polynomial(degree if degree is not None else 1)
        if t == "linear":
            t = "identity"
        return cls(ActivationKind(t))

    @property
    def name(self) -> str:
        if self.kind is ActivationKind.POLYNOMIAL:
            return f"polynomial{self.degree}"
        return self.kind.value

    @property
    def _power(self) -> int:
        # identity is evaluated as the degree-1 polynomial
        return self.degree if self.kind in (ActivationKind.IDENTITY, ActivationKind.POLYNOMIAL) else 0

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind is ActivationKind.RELU:
            return np.maximum(z, 0.0)
        if self.kind is ActivationKind.GELU:
            return z * ndtr(z)
        p = self._power
        return z if p == 1 else z**p

    def deriv(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind is ActivationKind.RELU:
            return (z > 0.0).astype(float)
        if self.kind is ActivationKind.GELU:
            return ndtr(z) + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI
        p = self._power
        if p == 1:
            return np.ones_like(z)
        return p * z ** (p - 1)

    def deriv2(self, z):
        """Second derivative; ReLU's is taken as 0 everywhere."""
        z = np.asarray(z, dtype=float)
        if self.kind is ActivationKind.RELU:
            return np.zeros_like(z)
        if self.kind is ActivationKind.GELU:
            return (2.0 - z * z) * np.exp(-0.5 * z * z) * _INV_SQRT_2PI
        p = self._power
        if p == 1:
            return np.zeros_like(z)
        if p == 2:
            return np.full_like(z, 2.0)
        return p * (p - 1) * z ** (p - 2)

    @property
    def smooth(self) -> bool:
        return self.kind is not ActivationKind.RELU


@dataclass(frozen=True)
class Atom:
    beta0: float
    beta1: np.ndarray
    a: np.ndarray
    b: float

    def __post_init__(self):
        beta1 = np.asarray(self.beta1, dtype=float).reshape(-1)
        a = np.asarray(self.a, dtype=float).reshape(-1)
        if beta1.shape != a.shape:
            raise ValueError(f"beta1 and a must have equal length, got {beta1.size} and {a.size}")
        object.__setattr__(self, "beta1", beta1)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "b", float(self.b))
        if not (np.isfinite(self.beta0) and np.isfinite(self.b)
                and np.all(np.isfinite(beta1)) and np.all(np.isfinite(a))):
            raise ValueError("atom parameters must be finite")

    @property
    def d(self) -> int:
        return self.beta1.size

    @property
    def eta(self) -> np.ndarray:
        """Expert parameter ``(a, b)`` as one vector of length d+1."""
        return np.append(self.a, self.b)


class MixingMeasure:
    """Ordered atoms plus gating and activation.

    Parameters live in four arrays: ``beta0`` (k,), ``beta1`` (k, d),
    ``a`` (k, d) and ``b`` (k,). Instances are treated as immutable; every
    transformation returns a new measure.
    """

    __slots__ = ("beta0", "beta1", "a", "b", "gating", "activation")

    def __init__(self, beta0, beta1, a, b, gating=Gating.SIGMOID, activation=None):
        beta0 = np.array(beta0, dtype=float).reshape(-1)
        b = np.array(b, dtype=float).reshape(-1)
        beta1 = np.array(beta1, dtype=float)
        a = np.array(a, dtype=float)
        k = beta0.size
        if k < 1:
            raise ValueError("a mixing measure needs at least one atom")
        if beta1.ndim == 1:
            beta1 = beta1.reshape(k, -1)
        if a.ndim == 1:
            a = a.reshape(k, -1)
        if beta1.shape != a.shape or beta1.shape[0] != k or b.size != k:
            raise ValueError(
                f"inconsistent atom shapes: beta0 {beta0.shape}, beta1 {beta1.shape}, a {a.shape}, b {b.shape}"
            )
        for arr in (beta0, beta1, a, b):
            if not np.all(np.isfinite(arr)):
                raise ValueError("mixing measure parameters must be finite")
            arr.setflags(write=False)
        self.beta0 = beta0
        self.beta1 = beta1
        self.a = a
        self.b = b
        self.gating = Gating(gating)
        self.activation = activation if activation is not None else Activation.identity()

    @classmethod
    def from_atoms(cls, atoms: Sequence[Atom], gating=Gating.SIGMOID, activation=None) -> "MixingMeasure":
        atoms = list(atoms)
        if not atoms:
            raise ValueError("a mixing measure needs at least one atom")
        d = atoms[0].d
        if any(at.d != d for at in atoms):
            raise ValueError("all atoms must share the input dimension")
        return cls(
            [at.beta0 for at in atoms],
            np.stack([at.beta1 for at in atoms]),
            np.stack([at.a for at in atoms]),
            [at.b for at in atoms],
            gating,
            activation,
        )

    @classmethod
    def from_flat(cls, theta, d: int, gating=Gating.SIGMOID, activation=None) -> "MixingMeasure":
        """Inverse of :meth:`flatten`."""
        rows = np.asarray(theta, dtype=float).reshape(-1, 2 * d + 2)
        return cls(rows[:, 0], rows[:, 1:1 + d], rows[:, 1 + d:1 + 2 * d], rows[:, -1], gating, activation)

    @property
    def k(self) -> int:
        return self.beta0.size

    @property
    def d(self) -> int:
        return self.beta1.shape[1]

    @property
    def atoms(self) -> List[Atom]:
        return [Atom(self.beta0[i], self.beta1[i], self.a[i], self.b[i]) for i in range(self.k)]

    @property
    def omega(self) -> np.ndarray:
        """Voronoi coordinates ``(beta1, a, b)`` per atom, shape (k, 2d+1)."""
        return np.hstack([self.beta1, self.a, self.b[:, None]])

    def flatten(self) -> np.ndarray:
        """Atom-major vector with field order (beta0, beta1, a, b)."""
        return np.hstack([self.beta0[:, None], self.beta1, self.a, self.b[:, None]]).reshape(-1)

    def replace(self, **changes) -> "MixingMeasure":
        kw = dict(beta0=self.beta0, beta1=self.beta1, a=self.a, b=self.b,
                  gating=self.gating, activation=self.activation)
        kw.update(changes)
        return MixingMeasure(**kw)

    def permuted(self, order: Sequence[int]) -> "MixingMeasure":
        order = np.asarray(order)
        return self.replace(beta0=self.beta0[order], beta1=self.beta1[order],
                            a=self.a[order], b=self.b[order])

    def __eq__(self, other):
        if not isinstance(other, MixingMeasure):
            return NotImplemented
        return (self.gating == other.gating and self.activation == other.activation
                and np.array_equal(self.flatten(), other.flatten())
                and self.beta1.shape == other.beta1.shape)

    def __repr__(self):
        return f"MixingMeasure(k={self.k}, d={self.d}, gating={self.gating.value}, activation={self.activation.name})"

    # -- serialization ---------------------------------------------------

    def to_record(self) -> str:
        """Plain-text record: a header followed by one line per atom."""
        lines = [
            f"d {self.d}",
            f"k {self.k}",
            f"gating {self.gating.value}",
            f"activation {self.activation.kind.value}",
            f"degree {self.activation.degree}",
        ]
        for i in range(self.k):
            vals = [self.beta0[i], *self.beta1[i], *self.a[i], self.b[i]]
            lines.append("atom " + " ".join(format(float(v), ".17g") for v in vals))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, text: str) -> "MixingMeasure":
        header = {}
        rows = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key == "atom":
                rows.append([float(v) for v in rest.split()])
            else:
                header[key] = rest.strip()
        try:
            d, k = int(header["d"]), int(header["k"])
            gating = Gating(header["gating"])
            kind = ActivationKind(header["activation"])
        except KeyError as exc:
            raise ValueError(f"measure record is missing header field {exc}") from None
        degree = int(header.get("degree", 1))
        activation = Activation(kind, degree if kind is ActivationKind.POLYNOMIAL else 1)
        if len(rows) != k or any(len(r) != 2 * d + 2 for r in rows):
            raise ValueError(f"expected {k} atom lines with {2 * d + 2} values each")
        return cls.from_flat(np.array(rows), d, gating, activation)


# -- evaluation ----------------------------------------------------------


def sigmoid(z):
    """Logistic function, evaluated on the branch that cannot overflow."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def _softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_x(G: MixingMeasure, X) -> Tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.ndim != 2 or X2.shape[1] != G.d:
        raise ValueError(f"input dimension mismatch: measure has d={G.d}, got shape {X.shape}")
    return X2, single


def gate_logits(G: MixingMeasure, X) -> np.ndarray:
    X2, single = _check_x(G, X)
    L = X2 @ G.beta1.T + G.beta0
    return L[0] if single else L


def gate_weights(G: MixingMeasure, x) -> np.ndarray:
    """Gating weights at ``x`` (a d-vector, or an (m, d) batch giving (m, k)).

    Sigmoid weights are computed per atom and need not sum to one.
    """
    L = gate_logits(G, x)
    if G.gating is Gating.SIGMOID:
        return sigmoid(L)
    return _softmax_rows(L)


def expert_eval(activation: Activation, a, b: float, x):
    """``phi(a . x + b)`` for one ridge expert; ``x`` may be a batch."""
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != a.size:
        raise ValueError(f"dimension mismatch: a has {a.size} entries, x has {x.shape[-1]}")
    return activation(x @ a + b)


def expert_outputs(G: MixingMeasure, X) -> np.ndarray:
    X2, single = _check_x(G, X)
    out = G.activation(X2 @ G.a.T + G.b)
    return out[0] if single else out


def regression_eval(G: MixingMeasure, x):
    """``f_G(x)``; returns a scalar for a d-vector, an (m,) array for a batch."""
    W = gate_weights(G, x)
    H = expert_outputs(G, x)
    return (W * H).sum(axis=-1)


# -- least squares loss and gradient -------------------------------------


@dataclass
class ParamGradient:
    """Gradient blocks, one row per atom.

    The flat layout is atom-major with field order (beta0, beta1, a, b),
    matching :meth:`MixingMeasure.flatten`.
    """

    d_beta0: np.ndarray
    d_beta1: np.ndarray
    d_a: np.ndarray
    d_b: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.hstack([self.d_beta0[:, None], self.d_beta1, self.d_a, self.d_b[:, None]]).reshape(-1)

    def blocks(self) -> List[dict]:
        return [dict(d_beta0=float(self.d_beta0[i]), d_beta1=self.d_beta1[i],
                     d_a=self.d_a[i], d_b=float(self.d_b[i])) for i in range(self.d_beta0.size)]


def batch_loss_grad(beta0, beta1, a, b, X, Y, gating: Gating, activation: Activation):
    """Mean squared residual and its gradient on raw parameter arrays.

    This is the allocation-light path the trainer calls once per step.
    """
    m = X.shape[0]
    L = X @ beta1.T + beta0
    Z = X @ a.T + b
    H = activation(Z)
    dH = activation.deriv(Z)
    if gating is Gating.SIGMOID:
        W = sigmoid(L)
        f = (W * H).sum(axis=1)
        resid = f - Y
        c = (2.0 / m) * resid[:, None]
        gL = c * (W * (1.0 - W) * H)
    else:
        W = _softmax_rows(L)
        f = (W * H).sum(axis=1)
        resid = f - Y
        c = (2.0 / m) * resid[:, None]
        gL = c * (W * (H - f[:, None]))
    gZ = c * (W * dH)
    loss = float(resid @ resid) / m
    return loss, gL.sum(axis=0), gL.T @ X, gZ.T @ X, gZ.sum(axis=0)


def loss_and_grad(G: MixingMeasure, X_batch, Y_batch) -> Tuple[float, ParamGradient]:
    """Mean squared error of ``f_G`` on a batch and its exact gradient."""
    X, _ = _check_x(G, np.atleast_2d(X_batch))
    Y = np.asarray(Y_batch, dtype=float).reshape(-1)
    if X.shape[0] == 0 or Y.size == 0:
        raise ValueError("empty batch")
    if Y.size != X.shape[0]:
        raise ValueError(f"batch size mismatch: {X.shape[0]} inputs, {Y.size} responses")
    loss, g0, g1, ga, gb = batch_loss_grad(G.beta0, G.beta1, G.a, G.b, X, Y, G.gating, G.activation)
    return loss, ParamGradient(g0, g1, ga, gb)


def mean_squared_error(G: MixingMeasure, X, Y) -> float:
    r = regression_eval(G, X) - np.asarray(Y, dtype=float)
    return float(np.mean(r * r))


def concat_measures(measures: Iterable[MixingMeasure]) -> MixingMeasure:
    measures = list(measures)
    first = measures[0]
    return MixingMeasure(
        np.concatenate([m.beta0 for m in measures]),
        np.vstack([m.beta1 for m in measures]),
        np.vstack([m.a for m in measures]),
        np.concatenate([m.b for m in measures]),
        first.gating,
        first.activation,
    )
