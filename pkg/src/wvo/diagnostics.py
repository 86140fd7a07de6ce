"""Re-conditioning on weighted virtual observations and posterior comparison."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from wvo.errors import DegenerateFitError, UsageError
from wvo.models import ModelFamily
from wvo.objective import logsumexp
from wvo.optimize import WeightAssignment
from wvo.sampler import FamilyTarget, PosteriorSamples
from wvo.virtual import VirtualObservationSet

BUDGET_RTOL = 1e-9


@dataclass(frozen=True)
class Thresholds:
    """Reconstruction counts as matching when every dimension passes all three."""

    max_mean_diff: float = 0.25
    min_std_ratio: float = 0.8
    max_std_ratio: float = 1.25
    max_ks: float = 0.08


class ReconditionedModel:
    """The base family with its likelihood replaced by weighted virtual evidence.

    Single level adds ``sum_i w_i log p(yhat_i | x)``; multi level adds
    ``sum_k v_k log sum_i w_ki p(zhat_ki | x)``.
    """

    def __init__(self, family: ModelFamily, vobs: VirtualObservationSet, weights: WeightAssignment,
                 budget: float | None = None):
        if vobs.level != weights.level:
            raise UsageError("virtual set and weights belong to different levels")
        if weights.w.shape != vobs.shape:
            raise UsageError(f"weights of shape {weights.w.shape} do not fit virtual values {vobs.shape}")
        if vobs.level == "multi":
            if not family.multi_level:
                raise UsageError(f"{family.name} cannot take virtual groups")
            if weights.v.shape != (vobs.shape[0],):
                raise UsageError("one group weight per virtual group required")
            if not np.allclose(weights.w.sum(axis=1), 1.0, rtol=BUDGET_RTOL, atol=0):
                raise UsageError("within-group weights must sum to 1")
            total = weights.v.sum()
        else:
            if family.multi_level:
                raise UsageError(f"{family.name} needs virtual groups, not observations")
            total = weights.w.sum()
        if budget is not None and not np.isclose(total, budget, rtol=BUDGET_RTOL, atol=0):
            raise UsageError(f"weights sum to {total}, expected budget {budget}")
        self.family = family
        self.vobs = vobs
        self.weights = weights
        self.budget = float(total) if budget is None else float(budget)
        if vobs.level == "single":
            self._obs = vobs.observations()
        else:
            with np.errstate(divide="ignore"):
                self._log_w = np.log(weights.w)

    def evidence(self, x) -> np.ndarray:
        """Weighted virtual log-evidence at internal latent point(s) ``x``."""
        x = self.family.check_latent(x)
        if self.vobs.level == "single":
            ll = self.family.obs_loglik(self._obs, x)
            w = self.weights.w
            prod = np.where(w == 0, 0.0, ll * w)
            return prod.sum(axis=-1)
        lz = self.family.log_group_prior(self.vobs.values, x[..., None, None, :])
        m = logsumexp(self._log_w + lz, axis=-1)
        v = self.weights.v
        return np.where(v == 0, 0.0, m * v).sum(axis=-1)

    def log_joint(self, x) -> np.ndarray:
        return self.family.log_prior(x) + self.evidence(x)

    def target(self, data=None) -> FamilyTarget:
        """Sampling target; ``data`` adds real observations (e.g. a held-out group)."""
        return FamilyTarget(self.family, data, evidence=self.evidence)


def recondition(family, vobs, weights, budget=None) -> ReconditionedModel:
    return ReconditionedModel(family, vobs, weights, budget)


def uniform_weights(vobs: VirtualObservationSet, budget: float) -> WeightAssignment:
    """Equal weights meeting the budget: the unweighted-conditioning control."""
    if vobs.level == "single":
        n = vobs.shape[0]
        return WeightAssignment(np.full(n, budget / n))
    K, M = vobs.shape
    return WeightAssignment(np.full((K, M), 1.0 / M), np.full(K, budget / K))


def conjugate_beta_bernoulli_posterior(alpha: float, beta: float, values, weights=None) -> tuple[float, float]:
    """Closed-form Beta posterior after (weighted) Bernoulli observations."""
    y = np.asarray(values, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != y.shape:
        raise UsageError("one weight per observation required")
    if not np.all((y == 0) | (y == 1)):
        raise UsageError("Bernoulli observations must be 0 or 1")
    successes = float((w * y).sum())
    failures = float((w * (1 - y)).sum())
    if successes < 0 or failures < 0:
        raise UsageError("effective counts must be nonnegative")
    return alpha + successes, beta + failures


@dataclass
class PosteriorComparison:
    names: tuple
    mean_diff: np.ndarray
    std_ratio: np.ndarray
    ks: np.ndarray

    def passed(self, thresholds: Thresholds = Thresholds()) -> np.ndarray:
        t = thresholds
        return ((self.mean_diff < t.max_mean_diff)
                & (self.std_ratio >= t.min_std_ratio) & (self.std_ratio <= t.max_std_ratio)
                & (self.ks < t.max_ks))

    def all_passed(self, thresholds: Thresholds = Thresholds()) -> bool:
        return bool(np.all(self.passed(thresholds)))

    def rows(self, thresholds: Thresholds = Thresholds()):
        ok = self.passed(thresholds)
        for j, name in enumerate(self.names):
            yield {"param": name, "mean_diff": float(self.mean_diff[j]),
                   "std_ratio": float(self.std_ratio[j]), "ks": float(self.ks[j]), "pass": bool(ok[j])}


def ks_statistic(a, b) -> float:
    return float(stats.ks_2samp(a, b).statistic)


def compare_posteriors(a: PosteriorSamples, b: PosteriorSamples) -> PosteriorComparison:
    """Per-dimension mean shift in units of a's std, std ratio b/a, two-sample KS."""
    if tuple(a.names) != tuple(b.names):
        raise UsageError(f"parameter names differ: {a.names} vs {b.names}")
    sa = a.values.std(axis=0, ddof=1)
    sb = b.values.std(axis=0, ddof=1)
    if np.any(sa == 0):
        raise DegenerateFitError("reference posterior has a constant dimension")
    diff = np.abs(a.values.mean(axis=0) - b.values.mean(axis=0)) / sa
    ks = np.array([ks_statistic(a.values[:, j], b.values[:, j]) for j in range(a.dim)])
    return PosteriorComparison(a.names, diff, sb / sa, ks)


@dataclass(frozen=True)
class MebPrior:
    """Moment-matched parametric fit of one posterior marginal."""

    kind: str
    params: tuple

    def logpdf(self, value):
        if self.kind == "normal":
            mean, std = self.params
            return stats.norm.logpdf(value, mean, std)
        shape, rate = self.params
        return stats.gamma.logpdf(value, shape, scale=1.0 / rate)

    @property
    def mean(self) -> float:
        return self.params[0] if self.kind == "normal" else self.params[0] / self.params[1]

    @property
    def var(self) -> float:
        return self.params[1] ** 2 if self.kind == "normal" else self.params[0] / self.params[1] ** 2


def meb_fit(samples: PosteriorSamples, kinds: dict) -> dict:
    """Fit Normal (mean, std) or Gamma (shape, rate) by moments per named dimension.

    ``samples`` should be in the coordinates the fits live in, normally the
    natural ones (see ``PosteriorSamples.natural``).
    """
    fits = {}
    for name, kind in kinds.items():
        if name not in samples.names:
            raise UsageError(f"no dimension named {name!r}")
        col = samples.values[:, samples.names.index(name)]
        m = col.mean()
        var = col.var()
        if not var > 0:
            raise DegenerateFitError(f"{name}: zero sample variance, cannot fit a distribution")
        if kind == "normal":
            fits[name] = MebPrior("normal", (float(m), float(np.sqrt(var))))
        elif kind == "gamma":
            if np.any(col <= 0):
                raise UsageError(f"{name}: Gamma fit needs positive samples")
            fits[name] = MebPrior("gamma", (float(m * m / var), float(m / var)))
        else:
            raise UsageError(f"unknown fit kind {kind!r}")
    return fits


def meb_log_prior(family: ModelFamily, fits: dict):
    """Hyperprior built from MEB fits, as a log density in internal coordinates."""
    missing = set(family.natural_names) - set(fits)
    if missing:
        raise UsageError(f"MEB fits missing for {sorted(missing)}")
    order = [fits[name] for name in family.natural_names]

    def log_prior(x):
        theta = family.to_natural(x)
        total = family.log_jacobian(x)
        for j, fit in enumerate(order):
            total = total + fit.logpdf(theta[..., j])
        return total

    return log_prior
