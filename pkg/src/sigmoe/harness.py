"""Sample-size sweeps, loss aggregation and log-log rate fits.

One sweep samples G* once, then for every (n, replicate) pair draws a fresh
dataset, initializes next to G*, fits by SGD and scores the fit with the
configured losses. Every (n, replicate) job owns a child seed, so results do
not depend on the worker count.

D3 is always measured against G*, not against the L2 projection of G* onto
measures with k atoms; reports carry a note saying so.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import GroundTruthConfig, Regime, child_seed, generate_dataset, make_rng, sample_ground_truth
from .model import Activation, Gating, MixingMeasure
from .train import DivergedError, TrainConfig, fit, init_near_truth
from .voronoi import l2_distance, loss_d1, loss_d2, loss_d3

RAW_HEADER = ["regime", "gating", "activation", "n", "replicate", "loss_name", "r", "value", "diverged", "seed"]
AGG_HEADER = ["n", "loss_name", "mean", "std", "two_sigma", "count"]
RATE_HEADER = ["loss_name", "slope", "intercept", "r_squared"]
D3_NOTE = "D3 is evaluated against G* (the true measure), not the L2 projection G-bar"
MAX_DIVERGED_FRACTION = 0.2


class SweepFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossSpec:
    name: str  # D1, D2, D3 or L2
    r: Optional[float] = None

    @classmethod
    def parse(cls, text: Union[str, "LossSpec"]) -> "LossSpec":
        if isinstance(text, LossSpec):
            return text
        t = text.strip().upper()
        m = re.fullmatch(r"D2(?:[(:,]\s*([0-9.eE+-]+)\s*\)?)?", t)
        if m:
            return cls("D2", float(m.group(1)) if m.group(1) else 1.0)
        if t in ("D1", "D3", "L2"):
            return cls(t)
        raise ValueError(f"unknown loss {text!r}; expected D1, D2(r), D3 or L2")

    @property
    def key(self) -> str:
        return f"D2({self.r:g})" if self.name == "D2" else self.name


def default_n_grid(points: int = 10, lo: float = 1e3, hi: float = 1e5) -> List[int]:
    return [int(v) for v in np.unique(np.round(np.geomspace(lo, hi, points)).astype(int))]


# Sweep-level training protocol. A fixed number of SGD steps per epoch makes the
# batch grow with n, so the SGD noise floor shrinks like 1/n instead of pinning
# the error at a constant. Setting batch_size in a config reverts to fixed batches.
SWEEP_TRAIN_DEFAULTS = dict(batches_per_epoch=2000, min_batch_size=4, init_perturb=0.1)


def sweep_train_config(k: int, **overrides) -> TrainConfig:
    opts = dict(SWEEP_TRAIN_DEFAULTS)
    if "batch_size" in overrides and "batches_per_epoch" not in overrides:
        opts["batches_per_epoch"] = None
    opts.update(overrides)
    return TrainConfig(k=k, **opts)


@dataclass
class SweepConfig:
    ground_truth: GroundTruthConfig = field(default_factory=GroundTruthConfig)
    train: TrainConfig = field(default_factory=lambda: sweep_train_config(9))
    n_grid: List[int] = field(default_factory=default_n_grid)
    replicates: int = 20
    losses: List[LossSpec] = field(default_factory=lambda: [LossSpec("D1")])
    mc_samples: int = 100_000
    base_seed: int = 0
    output_path: Optional[str] = None

    def __post_init__(self):
        self.losses = [LossSpec.parse(s) for s in self.losses]
        self.n_grid = [int(n) for n in self.n_grid]
        if not self.n_grid or any(n < 1 for n in self.n_grid):
            raise ValueError("n_grid must be non-empty with entries >= 1")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be strictly increasing")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.train.k < self.ground_truth.k_star:
            raise ValueError("train.k must be at least ground_truth.k_star")


@dataclass
class RawRow:
    regime: str
    gating: str
    activation: str
    n: int
    replicate: int
    loss_name: str
    r: Optional[float]
    value: float
    diverged: bool
    seed: int

    def as_list(self) -> list:
        return [self.regime, self.gating, self.activation, self.n, self.replicate, self.loss_name,
                "" if self.r is None else repr(float(self.r)), repr(float(self.value)),
                int(self.diverged), self.seed]


@dataclass
class AggregateRow:
    n: int
    loss_name: str
    mean: float
    std: float
    two_sigma: float
    count: int


@dataclass
class RateFitResult:
    slope: float
    intercept: float
    r_squared: float
    per_n: List[Tuple[int, float, float, float]]  # (n, mean, std, two_sigma)


@dataclass
class SweepResult:
    config: SweepConfig
    truth: MixingMeasure
    rows: List[RawRow]

    def aggregate(self) -> List[AggregateRow]:
        return aggregate(self.rows)

    def rates(self) -> Dict[str, RateFitResult]:
        return rates_from_aggregate(self.aggregate())


# -- sweep execution -------------------------------------------------------


def evaluate_losses(fitted: MixingMeasure, truth: MixingMeasure, losses: Sequence[LossSpec],
                    mc_samples: int, seed: int) -> List[float]:
    out = []
    for spec in losses:
        if spec.name == "D1":
            out.append(loss_d1(fitted, truth).total)
        elif spec.name == "D2":
            out.append(loss_d2(fitted, truth, spec.r).total)
        elif spec.name == "D3":
            out.append(loss_d3(fitted, truth).total)
        else:
            out.append(l2_distance(fitted, truth, mc_samples, seed=child_seed(seed, "l2")))
    return out


def _run_job(job) -> List[RawRow]:
    cfg, truth, n, rep = job
    gt = cfg.ground_truth
    seed = child_seed(cfg.base_seed, n, rep)
    rng = make_rng(seed)
    data = generate_dataset(truth, n, gt.nu, rng)
    init = init_near_truth(truth, cfg.train.k, cfg.train.init_perturb, rng)
    labels = (gt.regime.value, truth.gating.value, truth.activation.name)
    try:
        result = fit(data, init, cfg.train, rng)
        values = evaluate_losses(result.fitted, truth, cfg.losses, cfg.mc_samples, seed)
        diverged = not all(math.isfinite(v) for v in values)
    except DivergedError:
        values = [float("nan")] * len(cfg.losses)
        diverged = True
    return [RawRow(*labels, n, rep, spec.name, spec.r, v, diverged, seed) for spec, v in zip(cfg.losses, values)]


def run_sweep(cfg: SweepConfig, threads: int = 1, truth: Optional[MixingMeasure] = None) -> SweepResult:
    """Run every (n, replicate) job and return raw rows sorted by (n, replicate, loss)."""
    if truth is None:
        truth = sample_ground_truth(cfg.ground_truth)
    jobs = [(cfg, truth, n, rep) for n in cfg.n_grid for rep in range(cfg.replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_job, jobs))
    else:
        chunks = [_run_job(job) for job in jobs]
    order = {spec.key: i for i, spec in enumerate(cfg.losses)}
    rows = sorted((row for chunk in chunks for row in chunk),
                  key=lambda r: (r.n, r.replicate, order[_row_key(r)]))
    _check_divergence(rows, cfg.replicates, len(cfg.losses))
    return SweepResult(cfg, truth, rows)


def _row_key(row) -> str:
    return LossSpec(row.loss_name, row.r).key


def _check_divergence(rows: Sequence[RawRow], replicates: int, n_losses: int):
    bad: Dict[int, int] = {}
    for row in rows:
        if row.diverged:
            bad[row.n] = bad.get(row.n, 0) + 1
    failing = {n: c // n_losses for n, c in bad.items() if c // n_losses > MAX_DIVERGED_FRACTION * replicates}
    if failing:
        summary = ", ".join(f"n={n}: {c}/{replicates} diverged" for n, c in sorted(failing.items()))
        raise SweepFailedError(f"too many diverged fits ({summary})")


# -- aggregation and rate fitting ------------------------------------------


def aggregate(rows: Sequence[RawRow]) -> List[AggregateRow]:
    """Per (n, loss) mean and sample standard deviation over non-diverged rows."""
    groups: Dict[Tuple[int, str], List[float]] = {}
    for row in rows:
        if row.diverged:
            continue
        groups.setdefault((row.n, _row_key(row)), []).append(row.value)
    out = []
    for (n, key), vals in groups.items():
        v = np.asarray(vals)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        out.append(AggregateRow(n, key, float(v.mean()), std, 2.0 * std, int(v.size)))
    out.sort(key=lambda a: (a.loss_name, a.n))
    return out


def fit_rate(per_n) -> RateFitResult:
    """Ordinary least squares of log(mean loss) on log(n).

    ``per_n`` holds ``(n, mean)`` or ``(n, mean, std)`` tuples; the slope is
    the empirical rate exponent.
    """
    pts = [tuple(p) for p in per_n]
    if len(pts) < 3:
        raise ValueError("need at least 3 points to fit a rate")
    ns = np.array([p[0] for p in pts], dtype=float)
    means = np.array([p[1] for p in pts], dtype=float)
    if np.any(~(means > 0)) or np.any(ns <= 0):
        raise ValueError("rate fitting needs positive sample sizes and mean losses")
    stds = [float(p[2]) if len(p) > 2 else 0.0 for p in pts]
    x, y = np.log(ns), np.log(means)
    xc = x - x.mean()
    slope = float(xc @ (y - y.mean()) / (xc @ xc))
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(resid @ resid)
    if ss_tot == 0.0:
        r2 = 1.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    table = [(int(n), float(m), s, 2.0 * s) for n, m, s in zip(ns, means, stds)]
    return RateFitResult(slope, intercept, r2, table)


def rates_from_aggregate(agg: Sequence[AggregateRow]) -> Dict[str, RateFitResult]:
    by_loss: Dict[str, List[AggregateRow]] = {}
    for row in agg:
        by_loss.setdefault(row.loss_name, []).append(row)
    return {name: fit_rate([(r.n, r.mean, r.std) for r in sorted(rows, key=lambda r: r.n)])
            for name, rows in by_loss.items()}


@dataclass
class GateComparison:
    sigmoid: Dict[str, RateFitResult]
    softmax: Dict[str, RateFitResult]
    sweeps: Dict[str, SweepResult]

    def to_text(self) -> str:
        out = io.StringIO()
        for label, rates in (("sigmoid", self.sigmoid), ("softmax", self.softmax)):
            out.write(f"[{label}]\n")
            out.write(rate_report(rates))
            out.write("n,loss_name,mean,std,two_sigma\n")
            for name, res in rates.items():
                for n, mean, std, two in res.per_n:
                    out.write(f"{n},{name},{mean!r},{std!r},{two!r}\n")
        return out.getvalue()


def compare_gates(cfg: SweepConfig, threads: int = 1) -> GateComparison:
    """The same sweep under sigmoid and softmax gating, with identical seeds."""
    sweeps = {}
    for gating in (Gating.SIGMOID, Gating.SOFTMAX):
        sub = replace(cfg, ground_truth=replace(cfg.ground_truth, gating=gating))
        sweeps[gating.value] = run_sweep(sub, threads=threads)
    return GateComparison(sweeps["sigmoid"].rates(), sweeps["softmax"].rates(), sweeps)


# -- output files ----------------------------------------------------------


def raw_csv(rows: Sequence[RawRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RAW_HEADER)
    for row in rows:
        w.writerow(row.as_list())
    return buf.getvalue()


def aggregate_csv(agg: Sequence[AggregateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGG_HEADER)
    for a in agg:
        w.writerow([a.n, a.loss_name, repr(a.mean), repr(a.std), repr(a.two_sigma), a.count])
    return buf.getvalue()


def rate_report(rates: Dict[str, RateFitResult]) -> str:
    lines = [",".join(RATE_HEADER)]
    lines += [f"{name},{r.slope!r},{r.intercept!r},{r.r_squared!r}" for name, r in rates.items()]
    if any(name == "D3" for name in rates):
        lines.append(f"# note: {D3_NOTE}")
    return "\n".join(lines) + "\n"


def plot_data(agg: Sequence[AggregateRow]) -> str:
    """log10 n, log10 mean and the log10 of the mean +- two-sigma band."""
    lines = ["loss_name,log10_n,log10_mean,log10_lower,log10_upper"]
    for a in agg:
        lo = a.mean - a.two_sigma
        lower = repr(math.log10(lo)) if lo > 0 else "nan"
        lines.append(f"{a.loss_name},{math.log10(a.n)!r},{math.log10(a.mean)!r},{lower},"
                     f"{math.log10(a.mean + a.two_sigma)!r}")
    return "\n".join(lines) + "\n"


def write_outputs(result: SweepResult, out: Union[str, Path]) -> Dict[str, Path]:
    """Write raw, aggregate, rate and plot files next to the prefix ``out``."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    agg = result.aggregate()
    files = {
        "raw": out.with_name(out.name + "_raw.csv"),
        "aggregate": out.with_name(out.name + "_aggregate.csv"),
        "rates": out.with_name(out.name + "_rates.csv"),
        "plot": out.with_name(out.name + "_plot.csv"),
    }
    files["raw"].write_text(raw_csv(result.rows))
    files["aggregate"].write_text(aggregate_csv(agg))
    files["rates"].write_text(rate_report(rates_from_aggregate(agg)))
    files["plot"].write_text(plot_data(agg))
    return files


def read_aggregate_csv(path: Union[str, Path]) -> List[AggregateRow]:
    with open(path, newline="") as fh:
        return [AggregateRow(int(r["n"]), r["loss_name"], float(r["mean"]), float(r["std"]),
                             float(r["two_sigma"]), int(r["count"])) for r in csv.DictReader(fh)]


# -- config files ----------------------------------------------------------

_GT_KEYS = {"d": int, "k_star": int, "regime": str, "activation": str, "nu": float, "nu_g": float,
            "nu_e": float, "seed": int, "gating": str, "degree": int}
_TRAIN_KEYS = {"k": int, "epochs": int, "lr": float, "batch_size": int, "batches_per_epoch": int, "min_batch_size": int,
               "init_perturb": float, "seed": int}


def _parse_list(text: str) -> List[str]:
    return [t for t in re.split(r"[,\s]+", text.strip().strip("[]")) if t]


def _loss_list(text: str) -> List[str]:
    # keep "D2(1)" style tokens intact
    return [t for t in re.findall(r"D2\s*\(\s*[^)]*\)|[A-Za-z0-9:.]+", text)]


def sweep_config_from_mapping(sections: Dict[str, Dict[str, str]]) -> SweepConfig:
    """Build a config from ``{"ground_truth": {...}, "train": {...}, "sweep": {...}}`` strings."""
    gt_raw = {k: _GT_KEYS[k](v) if _GT_KEYS[k] is not str else v
              for k, v in sections.get("ground_truth", {}).items() if k in _GT_KEYS}
    unknown = set(sections.get("ground_truth", {})) - set(_GT_KEYS)
    unknown |= set(sections.get("train", {})) - set(_TRAIN_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    degree = gt_raw.pop("degree", None)
    if "activation" in gt_raw:
        gt_raw["activation"] = Activation.parse(gt_raw["activation"], degree)
    gt = GroundTruthConfig(**gt_raw)
    train_raw = {k: _TRAIN_KEYS[k](v) for k, v in sections.get("train", {}).items()}
    train = sweep_train_config(train_raw.pop("k", gt.k_star + 1), **train_raw)
    sw = dict(sections.get("sweep", {}))
    kwargs = {}
    if "n_grid" in sw:
        kwargs["n_grid"] = [int(float(v)) for v in _parse_list(sw.pop("n_grid"))]
    elif "n_points" in sw or "n_min" in sw or "n_max" in sw:
        kwargs["n_grid"] = default_n_grid(int(sw.pop("n_points", 10)), float(sw.pop("n_min", 1e3)),
                                          float(sw.pop("n_max", 1e5)))
    if "losses" in sw:
        kwargs["losses"] = _loss_list(sw.pop("losses"))
    for key, conv in (("replicates", int), ("mc_samples", int), ("base_seed", int)):
        if key in sw:
            kwargs[key] = conv(sw.pop(key))
    if "output_path" in sw:
        kwargs["output_path"] = sw.pop("output_path")
    if sw:
        raise ValueError(f"unknown [sweep] keys: {sorted(sw)}")
    return SweepConfig(ground_truth=gt, train=train, **kwargs)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Dict[str, str]]] = None) -> SweepConfig:
    """Read an INI file with [ground_truth], [train] and [sweep] sections."""
    sections: Dict[str, Dict[str, str]] = {"ground_truth": {}, "train": {}, "sweep": {}}
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        for name in parser.sections():
            if name not in sections:
                raise ValueError(f"unknown config section [{name}]")
            sections[name].update(parser[name])
    for name, values in (overrides or {}).items():
        sections.setdefault(name, {}).update({k: str(v) for k, v in values.items() if v is not None})
    return sweep_config_from_mapping(sections)
