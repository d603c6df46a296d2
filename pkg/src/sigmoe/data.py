"""Ground-truth sampling and synthetic regression datasets.

All randomness goes through ``numpy.random.Generator`` on a PCG64 bit
generator; Gaussian draws use numpy's ziggurat ``standard_normal``. Draw
order is part of the contract:

* ground truth: atoms in index order, and within an atom beta0, the d
  entries of beta1 (only when they are random), the d entries of a, then b;
* dataset: the full (n, d) input block, then the n noise values.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import Activation, Gating, MixingMeasure, regression_eval

_U64 = (1 << 64) - 1


class Regime(str, enum.Enum):
    REGIME1 = "regime1"
    REGIME2 = "regime2"

    @classmethod
    def parse(cls, text) -> "Regime":
        if isinstance(text, Regime):
            return text
        t = str(text).strip().lower().replace("_", "").replace(" ", "")
        if t in ("1", "regime1", "r1"):
            return cls.REGIME1
        if t in ("2", "regime2", "r2"):
            return cls.REGIME2
        raise ValueError(f"unknown regime {text!r}")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & _U64))


def child_seed(seed: int, *keys) -> int:
    """``seed XOR hash(keys)`` with a platform-independent 64-bit hash."""
    digest = hashlib.blake2b(repr(tuple(keys)).encode(), digest_size=8).digest()
    return (int(seed) & _U64) ^ int.from_bytes(digest, "little")


@dataclass
class GroundTruthConfig:
    d: int = 32
    k_star: int = 8
    regime: Regime = Regime.REGIME1
    activation: Activation = field(default_factory=Activation.relu)
    nu: float = 0.01
    nu_g: Optional[float] = None
    nu_e: Optional[float] = None
    seed: int = 0
    gating: Gating = Gating.SIGMOID

    def __post_init__(self):
        self.regime = Regime.parse(self.regime)
        self.gating = Gating(self.gating)
        if isinstance(self.activation, str):
            self.activation = Activation.parse(self.activation)
        if self.d < 1 or self.k_star < 1:
            raise ValueError("d and k_star must be at least 1")
        if self.nu_g is None:
            self.nu_g = 0.01 / self.d
        if self.nu_e is None:
            self.nu_e = 1.0 / self.d
        if not (self.nu > 0 and self.nu_g > 0 and self.nu_e > 0):
            raise ValueError("variances nu, nu_g, nu_e must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["regime"] = self.regime.value
        out["gating"] = self.gating.value
        out["activation"] = self.activation.name
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "GroundTruthConfig":
        raw = dict(raw)
        if "activation" in raw and isinstance(raw["activation"], str):
            raw["activation"] = Activation.parse(raw["activation"])
        return cls(**raw)


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    truth: MixingMeasure
    config: Optional[GroundTruthConfig] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has shape {self.X.shape} but Y has {self.Y.shape[0]} entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def save(self, path: Union[str, Path]) -> tuple[Path, Path]:
        """Write ``<path>.json`` (header with the truth record) and ``<path>.csv``."""
        path = Path(path)
        header_path = path.with_suffix(".json")
        csv_path = path.with_suffix(".csv")
        header = {
            "n": self.n,
            "d": self.X.shape[1],
            "seed": self.seed,
            "config": self.config.to_dict() if self.config is not None else None,
            "truth": self.truth.to_record(),
        }
        header_path.write_text(json.dumps(header, indent=2))
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{j}" for j in range(self.X.shape[1])] + ["y"])
            for x, y in zip(self.X, self.Y):
                w.writerow([format(v, ".17g") for v in x] + [format(y, ".17g")])
        return header_path, csv_path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Dataset":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        table = np.loadtxt(path.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
        cfg = GroundTruthConfig.from_dict(header["config"]) if header.get("config") else None
        return cls(table[:, :-1].copy(), table[:, -1].copy(),
                   MixingMeasure.from_record(header["truth"]), cfg, header.get("seed"))


def sample_ground_truth(config: GroundTruthConfig, rng: Optional[np.random.Generator] = None) -> MixingMeasure:
    """Draw G* following the Regime 1 / Regime 2 recipes.

    Regime 1 fixes every gating slope at zero. Regime 2 draws the slopes of
    atoms 1..k*-1 from N(0, nu_g I) and keeps the last one at zero.
    ``rng`` defaults to a generator seeded with ``config.seed``.
    """
    if rng is None:
        rng = make_rng(config.seed)
    d, k = config.d, config.k_star
    sg, se = math.sqrt(config.nu_g), math.sqrt(config.nu_e)
    beta0 = np.empty(k)
    beta1 = np.zeros((k, d))
    a = np.empty((k, d))
    b = np.empty(k)
    for i in range(k):
        beta0[i] = sg * rng.standard_normal()
        if config.regime is Regime.REGIME2 and i < k - 1:
            beta1[i] = sg * rng.standard_normal(d)
        a[i] = se * rng.standard_normal(d)
        b[i] = se * rng.standard_normal()
    return MixingMeasure(beta0, beta1, a, b, config.gating, config.activation)


def sample_inputs(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, d))


def generate_dataset(truth: MixingMeasure, n: int, nu: float, rng: np.random.Generator,
                     config: Optional[GroundTruthConfig] = None, seed: Optional[int] = None) -> Dataset:
    """Sample X ~ Uniform([-1, 1]^d) and Y = f_truth(X) + N(0, nu) noise.

    ``nu`` is the noise variance; ``nu == 0`` gives noiseless responses.
    """
    if n < 1:
        raise ValueError(f"sample count must be positive, got {n}")
    if nu < 0:
        raise ValueError(f"noise variance must be non-negative, got {nu}")
    X = sample_inputs(n, truth.d, rng)
    noise = rng.standard_normal(n)
    Y = regression_eval(truth, X)
    if nu > 0:
        Y = Y + math.sqrt(nu) * noise
    return Dataset(X, Y, truth, config, seed)
