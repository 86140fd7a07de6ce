"""Leave-one-group-out studies of incremental updating through WVO.

Each fold infers the hyperparameter posterior without one group, replaces
the remaining groups by weighted virtual groups, then conditions the
reconstructed model on the held-out group.  For comparison the marginal
empirical Bayes (MEB) pipeline conditions a moment-fitted prior on the
same group.  Fold records are flat dicts with the columns in FOLD_COLUMNS.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from wvo.diagnostics import Thresholds, compare_posteriors, meb_fit, meb_log_prior
from wvo.errors import UsageError
from wvo.models import GroupedData, ModelFamily
from wvo.optimize import OptimizerConfig
from wvo.pipeline import ReconstructionConfig, group_table, reconstruct
from wvo.sampler import FamilyTarget, PosteriorSamples, SamplerConfig, run_mh

FOLD_COLUMNS = ("fold", "label", "method", "k_virtual", "coords", "param", "mean", "std",
                "mean_diff", "std_ratio", "ks", "pass")
SWEEP_COLUMNS = ("k_virtual", "param", "fold_sd", "n_folds")

# Hyperprior families for the MEB baseline, keyed by natural parameter name.
MEB_KINDS = {"eight-schools": {"mu": "normal", "tau": "gamma"}}


@dataclass(frozen=True)
class LooConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    k_list: tuple | None = None
    folds: tuple | None = None
    meb: bool | None = None
    check_reconstruction: bool = True
    thresholds: Thresholds = field(default_factory=Thresholds)
    seed: int = 0


def evenly_spaced_folds(n_groups: int, n_folds: int) -> tuple:
    """``n_folds`` distinct group indices spread evenly over ``range(n_groups)``."""
    if not 1 <= n_folds <= n_groups:
        raise UsageError(f"cannot pick {n_folds} folds from {n_groups} groups")
    return tuple(int(i) for i in np.unique(np.linspace(0, n_groups - 1, n_folds).round().astype(int)))


def _fold_seeds(seed: int, fold: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([seed, fold]).generate_state(4)]


def _summary_rows(base, samples: PosteriorSamples, family: ModelFamily, method: str, k_virtual):
    nat = samples.natural(family)
    for j, name in enumerate(nat.names):
        col = nat.values[:, j]
        yield dict(base, method=method, k_virtual=k_virtual, coords="natural", param=name,
                   mean=float(col.mean()), std=float(col.std(ddof=1)), mean_diff="", std_ratio="", ks="",
                   **{"pass": ""})


def _comparison_rows(base, family, thresholds, k_virtual, original: PosteriorSamples, other: PosteriorSamples):
    for coords, a, b in (("internal", original, other),
                         ("natural", original.natural(family), other.natural(family))):
        for j, row in enumerate(compare_posteriors(a, b).rows(thresholds)):
            col = b.values[:, j]
            yield dict(base, method="reconstruction", k_virtual=k_virtual, coords=coords, param=row["param"],
                       mean=float(col.mean()), std=float(col.std(ddof=1)), mean_diff=row["mean_diff"],
                       std_ratio=row["std_ratio"], ks=row["ks"], **{"pass": row["pass"]})


def run_fold(family: ModelFamily, data: GroupedData, fold: int, config: LooConfig) -> list[dict]:
    """All records of one held-out group.

    Methods: ``reconstruction`` compares the reconditioned posterior with
    the fold posterior, in internal and in natural coordinates; ``wvo``
    and ``meb`` summarize the updated hyperparameter posteriors in natural
    coordinates.
    """
    fit_seed, rec_seed, update_seed, opt_seed = _fold_seeds(config.seed, fold)
    rest, held = data.without(fold), data.select([fold])
    base = {"fold": fold, "label": data.labels[fold]}
    sampler = replace(config.sampler, seed=fit_seed)
    samples = run_mh(family, rest, sampler)
    rec_config = replace(config.reconstruction, seed=rec_seed)
    table = group_table(family, rest, samples, rec_config)
    optimizer = replace(config.optimizer, seed=opt_seed)
    update = replace(config.sampler, seed=update_seed)
    rows = []
    for k_hat in config.k_list or (config.reconstruction.k_virtual or len(rest),):
        recon = reconstruct(family, rest, samples, replace(rec_config, k_virtual=k_hat), optimizer, table)
        model = recon.reconditioned()
        if config.check_reconstruction:
            again = run_mh(model, None, update)
            rows += _comparison_rows(base, family, config.thresholds, k_hat, samples, again)
        rows += _summary_rows(base, run_mh(model, held, update), family, "wvo", k_hat)
    use_meb = config.meb if config.meb is not None else family.name in MEB_KINDS
    if use_meb:
        if family.name not in MEB_KINDS:
            raise UsageError(f"no MEB baseline defined for {family.name}")
        fits = meb_fit(samples.natural(family), MEB_KINDS[family.name])
        target = FamilyTarget(family, held, log_hyperprior=meb_log_prior(family, fits))
        rows += _summary_rows(base, run_mh(target, None, update), family, "meb", "")
    return rows


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("WVO_THREADS", "1")))
    except ValueError:
        raise UsageError("WVO_THREADS must be an integer") from None


def loo_cross_validation(family: ModelFamily, data: GroupedData, config: LooConfig | None = None) -> list[dict]:
    """Fold records for every requested held-out group (default: all).

    Folds own their random streams, so the records do not depend on the
    number of worker processes (``WVO_THREADS``).
    """
    config = config or LooConfig()
    if not family.multi_level:
        raise UsageError("cross-validation over groups needs a multi-level model")
    if len(data) < 2:
        raise UsageError("leave-one-out needs at least two groups")
    folds = config.folds if config.folds is not None else tuple(range(len(data)))
    if any(not 0 <= f < len(data) for f in folds):
        raise UsageError("fold index out of range")
    workers = min(_threads(), len(folds))
    if workers == 1:
        per_fold = [run_fold(family, data, f, config) for f in folds]
    else:
        with ProcessPoolExecutor(workers) as pool:
            per_fold = list(pool.map(run_fold, [family] * len(folds), [data] * len(folds), folds,
                                     [config] * len(folds)))
    return [row for rows in per_fold for row in rows]


def fold_variation(records, method: str = "wvo") -> dict:
    """Standard deviation across folds of the posterior means, keyed by (k_virtual, param)."""
    means: dict = {}
    for r in records:
        if r["method"] == method:
            means.setdefault((r["k_virtual"], r["param"]), []).append(r["mean"])
    return {key: (float(np.std(v, ddof=1)) if len(v) > 1 else float("nan"), len(v)) for key, v in means.items()}


def sweep_k(family: ModelFamily, data: GroupedData, k_list, config: LooConfig | None = None):
    """Fold-to-fold variation of the updated posterior means for each K_hat.

    Returns the fold records and rows with the columns in SWEEP_COLUMNS.
    """
    config = config or LooConfig(check_reconstruction=False)
    k_list = tuple(int(k) for k in k_list)
    if not k_list or min(k_list) < 1:
        raise UsageError("k_list needs positive group counts")
    records = loo_cross_validation(family, data, replace(config, k_list=k_list, meb=False))
    table = [{"k_virtual": k, "param": p, "fold_sd": sd, "n_folds": n}
             for (k, p), (sd, n) in fold_variation(records, "wvo").items()]
    return records, table
