"""Command-line entry point: ``sigmoe <subcommand> [options]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import harness
from .data import Dataset, child_seed, generate_dataset, make_rng, sample_ground_truth
from .identifiability import (Mode, build_derivative_class, independence_test, random_weak_atoms,
                              slow_sequence_activation, slow_sequence_linear)
from .model import Activation, MixingMeasure, regression_eval
from .train import fit, init_near_truth
from .voronoi import LOSS_CSV_HEADER, l2_distance, loss_d1, loss_d2, loss_d3


def _emit(text: str, out: Optional[str]):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_measure(path: str) -> MixingMeasure:
    return MixingMeasure.from_record(Path(path).read_text())


def _overrides(args) -> Dict[str, Dict[str, str]]:
    gt = {key: getattr(args, key, None) for key in ("d", "k_star", "regime", "activation", "nu", "gating", "degree")}
    train = {key: getattr(args, key, None) for key in
             ("k", "epochs", "lr", "batch_size", "batches_per_epoch", "min_batch_size", "init_perturb")}
    sweep = {key: getattr(args, key, None) for key in ("replicates", "mc_samples")}
    if getattr(args, "n_grid", None):
        sweep["n_grid"] = args.n_grid
    if getattr(args, "losses", None):
        sweep["losses"] = args.losses
    if args.seed is not None:
        gt["seed"] = args.seed
        sweep["base_seed"] = args.seed
    return {"ground_truth": gt, "train": train, "sweep": sweep}


def _config(args) -> harness.SweepConfig:
    return harness.load_config(args.config, _overrides(args))


# -- subcommands -----------------------------------------------------------


def cmd_gen_truth(args) -> int:
    cfg = _config(args).ground_truth
    _emit(sample_ground_truth(cfg).to_record(), args.out)
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    truth = _read_measure(args.truth) if args.truth else sample_ground_truth(cfg.ground_truth)
    seed = cfg.base_seed if args.seed is None else args.seed
    data_seed = child_seed(seed, "data", args.n)
    ds = generate_dataset(truth, args.n, cfg.ground_truth.nu, make_rng(data_seed), cfg.ground_truth, data_seed)
    if not args.out:
        raise SystemExit("gen-data needs --out PATH (writes PATH.json and PATH.csv)")
    for p in ds.save(args.out):
        print(p)
    return 0


def cmd_fit(args) -> int:
    ds = Dataset.load(args.data)
    truth = _read_measure(args.init_from) if args.init_from else ds.truth
    overrides = _overrides(args)
    overrides["ground_truth"].update(d=truth.d, k_star=truth.k)
    cfg = harness.load_config(args.config, overrides)
    rng = make_rng(cfg.train.seed if args.seed is None else args.seed)
    init = init_near_truth(truth, cfg.train.k, cfg.train.init_perturb, rng)
    result = fit(ds, init, cfg.train, rng)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.with_suffix(".measure").write_text(result.fitted.to_record())
        out.with_suffix(".trace.csv").write_text(result.trace_csv())
        print(out.with_suffix(".measure"))
        print(out.with_suffix(".trace.csv"))
    else:
        sys.stdout.write(result.fitted.to_record())
        sys.stdout.write(result.trace_csv())
    return 0


def cmd_eval_loss(args) -> int:
    fitted, ref = _read_measure(args.fitted), _read_measure(args.reference)
    rows = [LOSS_CSV_HEADER]
    for spec in (harness.LossSpec.parse(s) for s in args.losses):
        if spec.name == "D1":
            rows.append(loss_d1(fitted, ref).csv_row())
        elif spec.name == "D2":
            rows.append(loss_d2(fitted, ref, spec.r).csv_row())
        elif spec.name == "D3":
            rows.append(loss_d3(fitted, ref).csv_row())
        else:
            value = l2_distance(fitted, ref, args.mc_samples or 100_000, seed=args.seed or 0)
            rows.append(f"L2,,{value!r},,,,")
    _emit("\n".join(rows) + "\n", args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    result = harness.run_sweep(cfg, threads=args.threads)
    prefix = args.out or cfg.output_path or "sweep"
    for kind, path in harness.write_outputs(result, prefix).items():
        print(f"{kind}: {path}")
    return 0


def cmd_rate(args) -> int:
    agg = harness.read_aggregate_csv(args.aggregate)
    _emit(harness.rate_report(harness.rates_from_aggregate(agg)), args.out)
    return 0


def cmd_compare_gates(args) -> int:
    comparison = harness.compare_gates(_config(args), threads=args.threads)
    _emit(comparison.to_text(), args.out)
    return 0


def cmd_ident_check(args) -> int:
    activation = Activation.parse(args.activation, args.degree)
    if args.atoms:
        atoms = _read_measure(args.atoms).atoms
    else:
        rng = make_rng(args.seed or 0)
        atoms = random_weak_atoms(rng, args.num_atoms, args.d or 2)
    cls = build_derivative_class(activation, atoms, Mode(args.mode))
    report = independence_test(cls, m=args.samples, tol=args.tol, rng=make_rng(args.seed or 0))
    text = report.to_text()
    if args.out:
        _emit(text, args.out)
        Path(args.out).with_suffix(".sv.csv").write_text(report.singular_values_csv())
    else:
        sys.stdout.write(text + report.singular_values_csv())
    return 0


def cmd_slow_seq(args) -> int:
    truth = _read_measure(args.truth)
    rng = make_rng(args.seed or 0)
    X = rng.uniform(-1.0, 1.0, size=(args.probes, truth.d))
    rows = ["n,max_abs_residual,d2"]
    for n in args.n:
        if args.kind == "linear":
            G = slow_sequence_linear(truth, n, args.r)
        else:
            G = slow_sequence_activation(truth, n, args.c)
        resid = float(np.max(np.abs(regression_eval(G, X) - regression_eval(truth, X))))
        rows.append(f"{n},{resid!r},{float(loss_d2(G, truth, args.r).total)!r}")
        if args.out:
            Path(f"{args.out}_n{n}.measure").write_text(G.to_record())
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(f"{args.out}.csv").write_text(text)
    sys.stdout.write(text)
    return 0


# -- parser ----------------------------------------------------------------


def _add_model_opts(p):
    g = p.add_argument_group("ground truth")
    g.add_argument("--d", type=int)
    g.add_argument("--k-star", dest="k_star", type=int)
    g.add_argument("--regime", choices=["1", "2"])
    g.add_argument("--activation")
    g.add_argument("--degree", type=int)
    g.add_argument("--nu", type=float)
    g.add_argument("--gating", choices=["sigmoid", "softmax"])


def _add_train_opts(p):
    g = p.add_argument_group("training")
    g.add_argument("--k", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--batches-per-epoch", dest="batches_per_epoch", type=int)
    g.add_argument("--min-batch-size", dest="min_batch_size", type=int)
    g.add_argument("--init-perturb", dest="init_perturb", type=float)


def _add_sweep_opts(p):
    g = p.add_argument_group("sweep")
    g.add_argument("--n-grid", dest="n_grid", help="comma separated sample sizes")
    g.add_argument("--replicates", type=int)
    g.add_argument("--losses", help="e.g. 'D1,D2(1),D3,L2'")
    g.add_argument("--mc-samples", dest="mc_samples", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI file with [ground_truth], [train], [sweep]")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="sigmoe", description="Sigmoid-gated mixture of experts experiments")
    parser.add_argument("--config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-truth", parents=[common], help="sample a ground-truth measure")
    _add_model_opts(p)
    p.set_defaults(func=cmd_gen_truth)

    p = sub.add_parser("gen-data", parents=[common], help="sample a dataset from a ground truth")
    _add_model_opts(p)
    p.add_argument("--truth", help="measure record; sampled from the config when omitted")
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit", parents=[common], help="fit a measure by SGD from a near-truth start")
    _add_train_opts(p)
    p.add_argument("--data", required=True, help="dataset prefix written by gen-data")
    p.add_argument("--init-from", dest="init_from", help="measure to initialize around (default: the data's truth)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval-loss", parents=[common], help="Voronoi losses between two measure records")
    p.add_argument("--fitted", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--loss", dest="losses", action="append", default=None, help="D1, D2(r), D3 or L2; repeatable")
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.set_defaults(func=cmd_eval_loss)

    for name, func, text in (("sweep", cmd_sweep, "run a sample-size sweep"),
                             ("compare-gates", cmd_compare_gates, "sweep under sigmoid and softmax gating")):
        p = sub.add_parser(name, parents=[common], help=text)
        _add_model_opts(p)
        _add_train_opts(p)
        _add_sweep_opts(p)
        p.set_defaults(func=func)

    p = sub.add_parser("rate", parents=[common], help="fit log-log rates from an aggregate CSV")
    p.add_argument("--aggregate", required=True)
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("ident-check", parents=[common], help="numerical independence test of a derivative class")
    p.add_argument("--mode", choices=["strong", "weak"], default="weak")
    p.add_argument("--activation", default="relu")
    p.add_argument("--degree", type=int)
    p.add_argument("--atoms", help="measure record listing the atoms; random generic atoms when omitted")
    p.add_argument("--num-atoms", dest="num_atoms", type=int, default=2)
    p.add_argument("--d", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_ident_check)

    p = sub.add_parser("slow-seq", parents=[common], help="build the explicit slow sequences and check them")
    p.add_argument("--truth", required=True, help="measure record; its first atom must have a = 0 and beta1 = 0")
    p.add_argument("--kind", choices=["linear", "activation"], default="linear")
    p.add_argument("--n", type=int, nargs="+", default=[10, 100, 1000])
    p.add_argument("--r", type=float, default=1.0)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--probes", type=int, default=1000)
    p.set_defaults(func=cmd_slow_seq)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "eval-loss" and not args.losses:
        args.losses = ["D1"]
    try:
        return args.func(args)
    except (ValueError, harness.SweepFailedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
