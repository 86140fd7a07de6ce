"""Command-line front end.

Subcommands share one output directory::

    wvo fit --model normal-noninformative --out run/
    wvo reconstruct --model normal-noninformative --out run/
    wvo validate --model normal-noninformative --out run/

``fit`` writes samples.csv and ess.csv (plus group_loglik.csv for
multi-level models), ``reconstruct`` writes wvo.json and trace.csv,
``validate`` writes validation.csv.  ``loo`` and ``sweep-k`` run the
grouped cross-validation studies.  Exit codes: 0 success, 1 validation
failure, 2 usage or data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from wvo.crossval import FOLD_COLUMNS, SWEEP_COLUMNS, LooConfig, evenly_spaced_folds, fold_variation, sweep_k
from wvo.crossval import loo_cross_validation
from wvo.diagnostics import recondition, uniform_weights
from wvo.errors import DataError, UsageError, WvoError
from wvo.io import (
    WvoFile,
    config_hash,
    read_samples,
    read_table,
    read_wvo,
    write_rows,
    write_samples,
    write_table,
    write_wvo,
)
from wvo.models import FAMILIES, get_family, load_data
from wvo.optimize import OptimizerConfig
from wvo.pipeline import ReconstructionConfig, group_table, reconstruct, validate
from wvo.sampler import SamplerConfig, run_mh

log = logging.getLogger("wvo")

SAMPLES = "samples.csv"
ESS = "ess.csv"
TABLE = "group_loglik.csv"
WVO = "wvo.json"
TRACE = "trace.csv"
VALIDATION = "validation.csv"
VALIDATION_COLUMNS = ("weights", "coords", "param", "mean_diff", "std_ratio", "ks", "pass")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, choices=sorted(FAMILIES))
    common.add_argument("--data", help="data CSV (default: the bundled file for the model)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    s = common.add_argument_group("sampler")
    s.add_argument("--samples", type=int, default=5000)
    s.add_argument("--warmup", type=int, default=2000)
    s.add_argument("--thin", type=int, default=10)
    s.add_argument("--chains", type=int, default=1)
    v = common.add_argument_group("virtual set")
    v.add_argument("--n-virtual", type=int, help="N_hat (default N*)")
    v.add_argument("--k-virtual", type=int, help="K_hat (default K*)")
    v.add_argument("--m-virtual", type=int, default=10)
    v.add_argument("--forward-draws", type=int, default=100, help="T draws per group likelihood")
    o = common.add_argument_group("optimizer")
    o.add_argument("--restarts", type=int, default=5)
    o.add_argument("--max-iters", type=int, default=5000)
    o.add_argument("--step", type=float, default=0.05)
    o.add_argument("--tol", type=float, default=1e-6)

    parser = argparse.ArgumentParser(prog="wvo", description="Weighted virtual observations")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="sample the posterior")
    sub.add_parser("reconstruct", parents=[common], help="find weighted virtual observations")
    sub.add_parser("validate", parents=[common], help="compare the reconditioned posterior with the original")
    loo = sub.add_parser("loo", parents=[common], help="leave-one-group-out cross-validation")
    loo.add_argument("--folds", type=int, help="number of evenly spaced folds (default: all groups)")
    sweep = sub.add_parser("sweep-k", parents=[common], help="fold variation as a function of K_hat")
    sweep.add_argument("--k-list", default="5,10,20,40,71", help="comma-separated K_hat values")
    sweep.add_argument("--folds", type=int, help="number of evenly spaced folds (default: all groups)")
    return parser


def _configs(args):
    sampler = SamplerConfig(args.samples, args.warmup, args.thin, args.chains, seed=args.seed)
    optimizer = OptimizerConfig(args.max_iters, args.step, args.tol, restarts=args.restarts, seed=args.seed)
    recon = ReconstructionConfig(args.n_virtual, args.k_virtual, args.m_virtual, args.forward_draws, args.seed)
    return sampler, optimizer, recon


def _stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


def _meta(args, command: str) -> dict:
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "verbose", "command")}
    return {"command": command, "model": args.model, "seed": args.seed, "config_hash": config_hash(settings)}


def _require(out: Path, name: str, before: str) -> Path:
    path = out / name
    if not path.is_file():
        raise UsageError(f"{path} not found; run `wvo {before}` with the same --out first")
    return path


def cmd_fit(args) -> int:
    family = get_family(args.model)
    data = load_data(family, args.data)
    sampler, _, recon = _configs(args)
    samples = run_mh(family, data, sampler)
    table = group_table(family, data, samples, recon) if family.multi_level else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(args, "fit")
    write_samples(out / SAMPLES, samples, meta)
    nat = samples.natural(family)
    rows = [{"param": n, "mean": nat.values[:, j].mean(), "std": nat.values[:, j].std(ddof=1),
             "ess": samples.ess[j]} for j, n in enumerate(nat.names)]
    write_rows(out / ESS, ("param", "mean", "std", "ess"), rows, meta)
    if table is not None:
        write_table(out / TABLE, table, meta)
    for r in rows:
        print(f"{r['param']}: mean {r['mean']:.4g}  std {r['std']:.4g}  ess {r['ess']:.0f}")
    return 0


def cmd_reconstruct(args) -> int:
    family = get_family(args.model)
    data = load_data(family, args.data)
    out = Path(args.out)
    samples, _ = read_samples(_require(out, SAMPLES, "fit"))
    table = read_table(_require(out, TABLE, "fit"))[0] if family.multi_level else None
    if tuple(samples.names) != tuple(family.latent_names):
        raise DataError(f"{out / SAMPLES} does not hold {family.name} samples")
    _, optimizer, recon_config = _configs(args)
    recon = reconstruct(family, data, samples, recon_config, optimizer, table)
    meta = _meta(args, "reconstruct")
    prov = {"config_hash": meta["config_hash"], "context_hash": recon.context_hash,
            "objective": recon.result.objective, "converged": recon.result.converged}
    write_wvo(out / WVO, WvoFile(family.name, recon.vobs, recon.weights, recon.budget, prov))
    write_rows(out / TRACE, ("iteration", "objective"),
               [{"iteration": i, "objective": v} for i, v in enumerate(recon.result.trace)], meta)
    print(f"objective {recon.result.objective:.6g} after {recon.result.n_iter} iterations "
          f"(converged: {recon.result.converged})")
    return 0


def cmd_validate(args) -> int:
    family = get_family(args.model)
    out = Path(args.out)
    samples, _ = read_samples(_require(out, SAMPLES, "fit"))
    wvo = read_wvo(_require(out, WVO, "reconstruct"))
    if wvo.model != family.name:
        raise DataError(f"{out / WVO} was built for {wvo.model}, not {family.name}")
    sampler, _, _ = _configs(args)
    sampler = SamplerConfig(**{**sampler.__dict__, "seed": _stage_seed(args.seed, 1)})
    model = recondition(family, wvo.vobs, wvo.weights, wvo.budget)
    control = recondition(family, wvo.vobs, uniform_weights(wvo.vobs, wvo.budget), wvo.budget)
    result = validate(samples, model, sampler, control)
    rows = list(result.rows())
    write_rows(out / VALIDATION, VALIDATION_COLUMNS, rows, _meta(args, "validate"))
    for r in rows:
        print(f"{r['weights']:>9} {r['coords']:>8} {r['param']:>11}: mean diff {r['mean_diff']:.3f}  std ratio "
              f"{r['std_ratio']:.3f}  KS {r['ks']:.3f}  {'PASS' if r['pass'] else 'FAIL'}")
    return 0 if result.passed else 1


def _loo_config(args, data, check_reconstruction=True) -> LooConfig:
    sampler, optimizer, recon = _configs(args)
    folds = evenly_spaced_folds(len(data), args.folds) if args.folds else None
    return LooConfig(sampler, optimizer, recon, folds=folds, check_reconstruction=check_reconstruction,
                     seed=args.seed)


def _variation_rows(records, methods):
    rows = []
    for method in methods:
        for (k, p), (sd, n) in sorted(fold_variation(records, method).items(), key=str):
            rows.append({"method": method, "k_virtual": k, "param": p, "fold_sd": sd, "n_folds": n})
    return rows


def cmd_loo(args) -> int:
    family = get_family(args.model)
    data = load_data(family, args.data)
    if not family.multi_level or len(data) < 2:
        raise UsageError("loo needs a multi-level model with at least two groups")
    records = loo_cross_validation(family, data, _loo_config(args, data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(args, "loo")
    write_rows(out / "loo.csv", FOLD_COLUMNS, records, meta)
    summary = _variation_rows(records, ("wvo", "meb"))
    write_rows(out / "loo_summary.csv", ("method", "k_virtual", "param", "fold_sd", "n_folds"), summary, meta)
    for r in summary:
        print(f"{r['method']:>4} {r['param']:>6}: fold sd of posterior mean {r['fold_sd']:.4g}")
    failed = [r for r in records if r["method"] == "reconstruction" and not r["pass"]]
    return 1 if failed else 0


def cmd_sweep_k(args) -> int:
    family = get_family(args.model)
    data = load_data(family, args.data)
    if not family.multi_level or len(data) < 2:
        raise UsageError("sweep-k needs a multi-level model with at least two groups")
    try:
        k_list = [int(k) for k in args.k_list.split(",")]
    except ValueError:
        raise UsageError(f"--k-list must be comma-separated integers, got {args.k_list!r}") from None
    records, table = sweep_k(family, data, k_list, _loo_config(args, data, check_reconstruction=False))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(args, "sweep-k")
    write_rows(out / "sweep_folds.csv", FOLD_COLUMNS, records, meta)
    write_rows(out / "sweep.csv", SWEEP_COLUMNS, table, meta)
    for r in table:
        print(f"K_hat {r['k_virtual']:>4} {r['param']:>6}: fold sd {r['fold_sd']:.4g}")
    return 0


COMMANDS = {"fit": cmd_fit, "reconstruct": cmd_reconstruct, "validate": cmd_validate,
            "loo": cmd_loo, "sweep-k": cmd_sweep_k}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return COMMANDS[args.command](args)
    except WvoError as exc:
        print(f"wvo {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
