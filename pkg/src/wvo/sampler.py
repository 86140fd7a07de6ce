"""Adaptive random-walk Metropolis and per-sample group marginal likelihoods.

For multi-level models the chain state holds the hyperparameters ``x`` and
one unconstrained coordinate per group.  Each iteration first updates all
group coordinates with independent one-dimensional Metropolis steps (they
are conditionally independent given ``x``), then updates ``x`` as a block
with a Gaussian random walk.  Proposal scales adapt during warmup only.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from wvo.errors import DivergenceError, InitializationError, UsageError
from wvo.models import GroupedData, ModelFamily, ObservationSet
from wvo.objective import logsumexp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int = 5000
    warmup: int = 2000
    thin: int = 10
    n_chains: int = 1
    target_accept: float | None = None
    initial_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 100:
            raise UsageError("n_samples must be at least 100")
        if self.warmup < 0 or self.thin < 1 or self.n_chains < 1:
            raise UsageError("warmup >= 0, thin >= 1 and n_chains >= 1 required")
        if self.n_samples % self.n_chains:
            raise UsageError("n_samples must be divisible by n_chains")
        if self.target_accept is not None and not 0 < self.target_accept < 1:
            raise UsageError("target acceptance rate must lie in (0, 1)")
        if self.initial_scale <= 0:
            raise UsageError("initial proposal scale must be positive")

    def target_rate(self, dim: int) -> float:
        if self.target_accept is not None:
            return self.target_accept
        return 0.44 if dim == 1 else 0.234


@dataclass
class PosteriorSamples:
    """S draws of the hyperparameter vector in internal coordinates."""

    values: np.ndarray
    names: tuple
    acceptance: dict = field(default_factory=dict)
    chain: np.ndarray | None = None
    scale_trace: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.names = tuple(self.names)
        if self.values.shape[1] != len(self.names):
            raise UsageError("one name per column required")
        if not np.all(np.isfinite(self.values)):
            raise UsageError("posterior samples must be finite")
        if self.chain is None:
            self.chain = np.zeros(len(self.values), dtype=int)

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def ess(self) -> np.ndarray:
        return ess(self)

    def natural(self, family: ModelFamily) -> "PosteriorSamples":
        """Same draws mapped to the family's natural parameterization."""
        return PosteriorSamples(family.to_natural(self.values), family.natural_names,
                                dict(self.acceptance), self.chain.copy())


@dataclass
class GroupLikTable:
    """Entry [s, k] estimates log p(y*_k | x*_s) from ``n_draws`` forward draws."""

    values: np.ndarray
    n_draws: int
    labels: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(np.isnan(self.values)) or np.any(self.values == np.inf):
            raise UsageError("group log-likelihoods must be finite or -inf")
        if self.n_draws < 1:
            raise UsageError("at least one forward draw required")

    @property
    def n_groups(self) -> int:
        return self.values.shape[1]


class Target:
    """Log density over (x, u) split into an x-only part and per-group terms."""

    names: tuple = ()
    n_groups: int = 0

    @property
    def d_x(self) -> int:
        return len(self.names)

    def log_density_x(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def group_terms(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.zeros(0)

    def initial_state(self):
        raise NotImplementedError


class FamilyTarget(Target):
    """Posterior of ``family`` given ``data``.

    ``log_hyperprior`` replaces the family prior on x (e.g. an empirical
    Bayes fit) and ``evidence`` adds an x-only log term (e.g. weighted
    virtual observations).  Both take internal coordinates.
    """

    def __init__(self, family: ModelFamily, data=None, log_hyperprior=None, evidence=None):
        self.family = family
        self.names = family.latent_names
        self.log_hyperprior = log_hyperprior or family.log_prior
        self.evidence = evidence
        self.data = data
        if data is None:
            self.n_groups = 0
            return
        if family.multi_level:
            if not isinstance(data, GroupedData):
                raise UsageError(f"{family.name} needs grouped data")
            for g in data.groups:
                family.check_observations(g)
            self.n_groups = len(data)
            self._flat = ObservationSet(
                np.concatenate([g.values for g in data.groups]),
                {f: np.concatenate([g.aux[f] for g in data.groups]) for f in family.aux_fields},
            )
            self._group_index = np.repeat(np.arange(len(data)), [len(g) for g in data.groups])
        else:
            if not isinstance(data, ObservationSet):
                raise UsageError(f"{family.name} needs a flat observation set")
            family.check_observations(data)
            self.n_groups = 0

    def log_density_x(self, x):
        lp = self.log_hyperprior(x)
        if self.evidence is not None:
            lp = lp + self.evidence(x)
        if self.data is not None and not self.family.multi_level:
            lp = lp + self.family._loglik(self.data.values, self.data.aux, x[None, :]).sum()
        return float(lp)

    def group_terms(self, x, u):
        if not self.n_groups:
            return np.zeros(0)
        fam = self.family
        z = fam.group_from_unconstrained(u, x)
        terms = fam.log_group_prior_unconstrained(u, x)
        if fam.per_observation:
            ll = fam._loglik(self._flat.values, self._flat.aux, z[self._group_index])
            terms = terms + np.bincount(self._group_index, weights=ll, minlength=self.n_groups)
        else:
            terms = terms + np.array([fam._group_loglik(g, zk) for g, zk in zip(self.data.groups, z)])
        return terms

    def initial_state(self):
        x0 = np.asarray(self.family.initial_point(self.data), dtype=float)
        if self.n_groups:
            u0 = np.array([self.family.initial_group_point(g, x0) for g in self.data.groups], dtype=float)
        else:
            u0 = np.zeros(0)
        return x0, u0


def as_target(model, data=None) -> Target:
    if isinstance(model, Target):
        if data is not None:
            raise UsageError("data cannot be combined with a prepared target")
        return model
    if hasattr(model, "target"):
        return model.target(data)
    return FamilyTarget(model, data)


def _run_chain(target: Target, config: SamplerConfig, n_keep: int, rng: np.random.Generator, jitter: float):
    d = target.d_x
    K = target.n_groups
    x, u = target.initial_state()
    if jitter:
        x = x + jitter * rng.standard_normal(d)
    gt = target.group_terms(x, u)
    lpx = target.log_density_x(x)
    if not (np.isfinite(lpx) and np.all(np.isfinite(gt))):
        raise InitializationError(f"log density is not finite at the initial point {x}")

    rate_x = config.target_rate(d)
    rate_u = 0.44
    log_lam = np.log(config.initial_scale)
    chol = np.eye(d)
    shaped = False
    log_su = np.full(K, np.log(config.initial_scale))

    n_iter = config.warmup + n_keep * config.thin
    out = np.empty((n_keep, d))
    scale_trace = np.empty((n_iter, d))
    acc_warm = acc_post = 0
    acc_u_post = np.zeros(K)
    warm_hist = np.empty((config.warmup, d))
    kept = 0

    for it in range(n_iter):
        warm = it < config.warmup
        if K:
            su = np.exp(log_su)
            u_prop = u + su * rng.standard_normal(K)
            gt_prop = target.group_terms(x, u_prop)
            with np.errstate(invalid="ignore"):
                accept_u = np.log(rng.random(K)) < gt_prop - gt
            u = np.where(accept_u, u_prop, u)
            gt = np.where(accept_u, gt_prop, gt)
            if warm:
                log_su += (it + 1) ** -0.6 * (accept_u.astype(float) - rate_u)
            else:
                acc_u_post += accept_u

        lam = np.exp(log_lam)
        step = lam * (chol @ rng.standard_normal(d))
        x_prop = x + step
        lpx_prop = target.log_density_x(x_prop)
        gt_xprop = target.group_terms(x_prop, u) if K else gt
        log_ratio = lpx_prop + gt_xprop.sum() - lpx - gt.sum()
        accepted = bool(np.log(rng.random()) < log_ratio) if np.isfinite(lpx_prop) else False
        if accepted and K and not np.all(np.isfinite(gt_xprop)):
            accepted = False
        if accepted:
            x, lpx, gt = x_prop, lpx_prop, gt_xprop

        scale_trace[it] = lam * np.sqrt(np.sum(chol * chol, axis=1))
        if warm:
            acc_warm += accepted
            warm_hist[it] = x
            log_lam += (it + 1) ** -0.6 * (float(accepted) - rate_x)
            # refresh the proposal shape from the second half of the history
            if it >= 199 and (it + 1) % 100 == 0:
                hist = warm_hist[(it + 1) // 2: it + 1]
                cov = np.atleast_2d(np.cov(hist, rowvar=False))
                if np.all(np.isfinite(cov)) and np.all(np.diag(cov) > 0):
                    try:
                        chol = np.linalg.cholesky(cov + 1e-10 * np.eye(d))
                        if not shaped:
                            log_lam = np.log(2.38 / np.sqrt(d))
                            shaped = True
                    except np.linalg.LinAlgError:
                        pass
        else:
            acc_post += accepted
            if (it - config.warmup + 1) % config.thin == 0:
                out[kept] = x
                kept += 1

    if config.warmup and acc_warm == 0:
        raise DivergenceError(
            f"no proposal accepted during {config.warmup} warmup iterations; "
            f"last state {x}, proposal scale {scale_trace[config.warmup - 1]}"
        )
    n_post = n_iter - config.warmup
    stats = {
        "x": acc_post / n_post,
        "groups": (acc_u_post / n_post).tolist() if K else [],
        "warmup_x": acc_warm / config.warmup if config.warmup else None,
    }
    return out, stats, scale_trace


def run_mh(model, data=None, config: SamplerConfig | None = None, rng=None) -> PosteriorSamples:
    """Draw posterior samples of the hyperparameters.

    ``model`` is a model family (paired with ``data``), a reconditioned
    model, or any :class:`Target`.  The random stream comes from
    ``config.seed`` unless ``rng`` is given; each chain gets its own child
    stream so results do not depend on execution order.
    """
    config = config or SamplerConfig()
    target = as_target(model, data)
    if rng is None:
        seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    else:
        seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(config.n_chains)
    per_chain = config.n_samples // config.n_chains
    draws, chains, traces, accept = [], [], [], []
    for c, ss in enumerate(seeds):
        chain_rng = np.random.default_rng(ss)
        out, stats, trace = _run_chain(target, config, per_chain, chain_rng, jitter=0.1 if c else 0.0)
        draws.append(out)
        chains.append(np.full(per_chain, c))
        traces.append(trace)
        accept.append(stats)
    samples = PosteriorSamples(
        np.concatenate(draws),
        target.names,
        {"x": [a["x"] for a in accept], "groups": [a["groups"] for a in accept],
         "warmup_x": [a["warmup_x"] for a in accept]},
        np.concatenate(chains),
        np.stack(traces),
    )
    low = samples.ess.min()
    if low < 0.1 * len(samples):
        warnings.warn(f"low effective sample size ({low:.0f} of {len(samples)}); consider more thinning",
                      stacklevel=2)
    return samples


def _autocorr(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    return acov / acov[0]


def _ess_1d(x: np.ndarray) -> float:
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return 1.0
    rho = _autocorr(x)
    # Geyer's initial positive and initial monotone sequence
    n_pairs = (n - 1) // 2
    pairs = rho[0: 2 * n_pairs: 2] + rho[1: 2 * n_pairs: 2]
    neg = np.nonzero(pairs <= 0)[0]
    if neg.size:
        pairs = pairs[: neg[0]]
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    return float(n / max(tau, 1.0 / np.log10(max(n, 10))))


def ess(samples) -> np.ndarray:
    """Per-dimension effective sample size, summed over chains."""
    if isinstance(samples, PosteriorSamples):
        values, chain = samples.values, samples.chain
    else:
        values = np.asarray(samples, dtype=float)
        values = values[:, None] if values.ndim == 1 else values
        chain = np.zeros(len(values), dtype=int)
    result = np.zeros(values.shape[1])
    for c in np.unique(chain):
        block = values[chain == c]
        result += [_ess_1d(block[:, j]) for j in range(values.shape[1])]
    return result


def estimate_group_logliks(family: ModelFamily, data: GroupedData, samples: PosteriorSamples,
                           n_draws: int = 100, rng=None) -> GroupLikTable:
    """Forward-sampling estimate of log p(y*_k | x*_s) for every sample and group.

    For each (s, k), draws z_t ~ p(z | x*_s), t = 1..T, and averages the group
    likelihoods in the log domain.  The result does not depend on any
    weights, so it is computed once per posterior sample set.
    """
    if not family.multi_level:
        raise UsageError("group marginal likelihoods only exist for multi-level families")
    if n_draws < 1:
        raise UsageError("need at least one forward draw")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = family.check_latent(samples.values)
    table = np.empty((len(x), len(data)))
    for k, obs in enumerate(data.groups):
        family.check_observations(obs)
        z = family._sample_group(x, rng, n_draws)
        ll = family._group_loglik(obs, z)
        table[:, k] = logsumexp(ll, axis=1) - np.log(n_draws)
    if np.any(np.isneginf(table)):
        bad = sorted({data.labels[k] for k in np.nonzero(np.isneginf(table).any(axis=0))[0]})
        warnings.warn(f"zero estimated likelihood for groups {bad}; raise the number of forward draws",
                      stacklevel=2)
    return GroupLikTable(table, n_draws, data.labels)
