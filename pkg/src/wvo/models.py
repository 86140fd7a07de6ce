"""Model families: log densities and forward samplers.

Every family works on *internal* latent coordinates, where positive
quantities are carried as logarithms and probabilities as logits, so that
the sampler can move on an unconstrained space.  ``log_prior`` includes the
Jacobian of that transform; ``log_prior_natural`` is the density in the
natural parameterization.

All density methods broadcast over leading batch dimensions: a latent batch
of shape ``(..., d_x)`` evaluated against ``N`` observations yields an array
of shape ``(..., N)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import ClassVar, Mapping

import numpy as np
from scipy import special

from wvo.errors import DataError, UsageError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ObservationSet:
    """Ordered observations with optional per-observation known constants."""

    values: np.ndarray
    aux: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if values.ndim != 1 or values.size == 0:
            raise DataError("an observation set needs at least one scalar value")
        if not np.all(np.isfinite(values)):
            raise DataError("observation values must be finite")
        aux = {}
        for key, col in self.aux.items():
            col = np.atleast_1d(np.asarray(col, dtype=float))
            if col.shape != values.shape:
                raise DataError(f"aux field {key!r} does not match the number of values")
            aux[key] = col
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "aux", aux)

    def __len__(self):
        return self.values.size

    def take(self, idx) -> "ObservationSet":
        idx = np.asarray(idx)
        return ObservationSet(self.values[idx], {k: v[idx] for k, v in self.aux.items()})


@dataclass(frozen=True)
class GroupedData:
    groups: tuple
    labels: tuple = ()

    def __post_init__(self):
        groups = tuple(self.groups)
        if not groups:
            raise DataError("grouped data needs at least one group")
        labels = tuple(self.labels) or tuple(f"g{k + 1}" for k in range(len(groups)))
        if len(labels) != len(groups):
            raise DataError("one label per group required")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.groups)

    def without(self, k: int) -> "GroupedData":
        keep = [i for i in range(len(self)) if i != k]
        return self.select(keep)

    def select(self, idx) -> "GroupedData":
        return GroupedData([self.groups[i] for i in idx], [self.labels[i] for i in idx])

    @property
    def n_observations(self) -> int:
        return sum(len(g) for g in self.groups)


def _log_expit(u):
    return -np.logaddexp(0.0, -u)


def _log1m_expit(u):
    return -np.logaddexp(0.0, u)


def _normal_logpdf(y, loc, scale):
    z = (y - loc) / scale
    return -0.5 * z * z - np.log(scale) - 0.5 * LOG_2PI


class ModelFamily:
    """Base class.  Subclasses set the class attributes and densities."""

    name: ClassVar[str]
    multi_level: ClassVar[bool] = False
    latent_names: ClassVar[tuple] = ()
    natural_names: ClassVar[tuple] = ()
    aux_fields: ClassVar[tuple] = ()
    d_z: ClassVar[int] = 0

    @property
    def d_x(self) -> int:
        return len(self.latent_names)

    @property
    def capabilities(self) -> dict:
        return {"single_level": not self.multi_level, "multi_level": self.multi_level}

    def __repr__(self):
        return f"{type(self).__name__}()"

    def check_latent(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.d_x:
            raise UsageError(f"{self.name}: latent points need trailing dimension {self.d_x}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise UsageError(f"{self.name}: latent point has non-finite components")
        return x

    def log_prior(self, x) -> np.ndarray:
        x = self.check_latent(x)
        return self._log_prior(x)

    def log_prior_natural(self, theta) -> np.ndarray:
        raise NotImplementedError

    def to_natural(self, x) -> np.ndarray:
        raise NotImplementedError

    def to_internal(self, theta) -> np.ndarray:
        raise NotImplementedError

    def log_jacobian(self, x) -> np.ndarray:
        """log |d natural / d internal| at ``x``."""
        raise NotImplementedError

    def check_observations(self, obs: ObservationSet) -> None:
        missing = [f for f in self.aux_fields if f not in obs.aux]
        if missing:
            raise DataError(f"{self.name}: observations lack aux fields {missing}")

    def obs_loglik(self, obs: ObservationSet, parent) -> np.ndarray:
        """Pointwise log p(y_i | parent), shape ``parent_batch + (N,)``."""
        self.check_observations(obs)
        parent = self._check_parent(parent)
        return self._loglik(obs.values, obs.aux, self._expand_parent(parent))

    def sample_obs(self, parent, rng: np.random.Generator, aux: Mapping | None = None) -> np.ndarray:
        parent = self._check_parent(parent)
        return self._sample_obs(parent, rng, aux or {})

    def _check_parent(self, parent):
        return self.check_latent(parent)

    def _expand_parent(self, parent):
        return parent[..., None, :]

    def _loglik(self, y, aux, parent):
        """Elementwise log p(y | parent) broadcasting ``y`` against the parent batch."""
        raise NotImplementedError

    def initial_point(self, data) -> np.ndarray:
        return np.zeros(self.d_x)


class SingleLevelFamily(ModelFamily):
    def total_obs_loglik(self, obs: ObservationSet, x) -> np.ndarray:
        return self.obs_loglik(obs, x).sum(axis=-1)


class MultiLevelFamily(ModelFamily):
    """p(x) p(z_k | x) p(y_k | z_k) with scalar group latents.

    The sampler moves each group latent in unconstrained coordinates ``u``
    that may depend on ``x``; ``group_from_unconstrained`` maps them back
    and ``log_group_prior_unconstrained`` is log p(z(u, x) | x) plus the
    log Jacobian |dz/du|.
    """

    multi_level = True
    d_z = 1
    #: False when the group likelihood does not factor over observations
    per_observation: ClassVar[bool] = True

    def total_obs_loglik(self, obs, x):
        raise UsageError(f"{self.name} is multi-level: use estimate_group_logliks for p(y_k | x)")

    def check_group(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise DataError(f"{self.name}: group latent outside support")
        return z

    def _check_parent(self, parent):
        return self.check_group(parent)

    def _expand_parent(self, parent):
        return np.asarray(parent)[..., None]

    def log_group_prior(self, z, x) -> np.ndarray:
        """log p(z | x); ``z`` broadcasts against ``x[..., 0]``."""
        x = self.check_latent(x)
        z = self.check_group(z)
        return self._log_group_prior(z, x)

    def group_loglik(self, obs: ObservationSet, z) -> np.ndarray:
        """log p(y_k | z) for a whole group; shape of ``z``."""
        return self.obs_loglik(obs, z).sum(axis=-1)

    def _group_loglik(self, obs, z):
        return self._loglik(obs.values, obs.aux, np.asarray(z)[..., None]).sum(axis=-1)

    def sample_group(self, x, rng: np.random.Generator, size=None) -> np.ndarray:
        """Exact draws z ~ p(z | x); ``size`` extra trailing draws per point."""
        x = self.check_latent(x)
        return self._sample_group(x, rng, size)

    def group_from_unconstrained(self, u, x):
        return u

    def log_group_prior_unconstrained(self, u, x):
        return self._log_group_prior(u, x)

    def initial_group_point(self, obs: ObservationSet, x) -> float:
        """Starting value of the sampler coordinate u for one group."""
        return 0.0


class BetaBernoulli(SingleLevelFamily):
    """theta ~ Beta(a, b), y ~ Bernoulli(theta); internal coordinate logit(theta)."""

    name = "beta-bernoulli"
    latent_names = ("logit_theta",)
    natural_names = ("theta",)

    def __init__(self, a: float = 1.0, b: float = 1.0):
        if a <= 0 or b <= 0:
            raise UsageError("Beta prior parameters must be positive")
        self.a = float(a)
        self.b = float(b)

    def __repr__(self):
        return f"BetaBernoulli(a={self.a}, b={self.b})"

    def _log_prior(self, x):
        u = x[..., 0]
        return self.a * _log_expit(u) + self.b * _log1m_expit(u) - special.betaln(self.a, self.b)

    def log_prior_natural(self, theta):
        t = np.asarray(theta, dtype=float)[..., 0]
        return (self.a - 1) * np.log(t) + (self.b - 1) * np.log1p(-t) - special.betaln(self.a, self.b)

    def to_natural(self, x):
        return special.expit(np.asarray(x, dtype=float))

    def to_internal(self, theta):
        return special.logit(np.asarray(theta, dtype=float))

    def log_jacobian(self, x):
        u = np.asarray(x, dtype=float)[..., 0]
        return _log_expit(u) + _log1m_expit(u)

    def check_observations(self, obs):
        if not np.all((obs.values == 0) | (obs.values == 1)):
            raise DataError("Bernoulli observations must be 0 or 1")

    def _loglik(self, y, aux, x):
        u = x[..., 0]
        return y * _log_expit(u) + (1.0 - y) * _log1m_expit(u)

    def _sample_obs(self, x, rng, aux):
        theta = special.expit(x[..., 0])
        return (rng.random(theta.shape) < theta).astype(float)

    def initial_point(self, data):
        y = data.values if data is not None else np.array([])
        p = (y.sum() + self.a) / (y.size + self.a + self.b)
        return np.array([special.logit(p)])


class NormalNoninformative(SingleLevelFamily):
    """p(mu, log sigma) propto 1, y ~ Normal(mu, sigma)."""

    name = "normal-noninformative"
    latent_names = ("mu", "log_sigma")
    natural_names = ("mu", "sigma")

    def _log_prior(self, x):
        return np.zeros(x.shape[:-1])

    def log_prior_natural(self, theta):
        theta = np.asarray(theta, dtype=float)
        return -np.log(theta[..., 1])

    def to_natural(self, x):
        x = np.array(x, dtype=float)
        x[..., 1] = np.exp(x[..., 1])
        return x

    def to_internal(self, theta):
        theta = np.array(theta, dtype=float)
        theta[..., 1] = np.log(theta[..., 1])
        return theta

    def log_jacobian(self, x):
        return np.asarray(x, dtype=float)[..., 1]

    def _loglik(self, y, aux, x):
        return _normal_logpdf(y, x[..., 0], np.exp(x[..., 1]))

    def _sample_obs(self, x, rng, aux):
        return x[..., 0] + np.exp(x[..., 1]) * rng.standard_normal(x.shape[:-1])

    def initial_point(self, data):
        if data is None or len(data) < 2:
            return np.zeros(2)
        return np.array([data.values.mean(), np.log(data.values.std() + 1e-3)])


class NormalHyperprior(MultiLevelFamily):
    """Normal model with a hyperprior on the mean.

    nu, log tau ~ Normal(0, 1) x Normal(0, 1); mu ~ Normal(nu, tau);
    log sigma flat; y ~ Normal(mu, sigma).

    The group latent is ``mu``.  The flat log sigma is integrated out of the
    group likelihood in closed form, so p(y_k | mu) is the collapsed
    (improper, up to a constant) marginal and needs at least two
    observations per group.  Per-observation likelihoods do not exist after
    collapsing, so ``obs_loglik`` and ``sample_obs`` are unavailable.
    """

    name = "normal-hyperprior"
    per_observation = False
    latent_names = ("nu", "log_tau")
    natural_names = ("nu", "tau")

    def _log_prior(self, x):
        return _normal_logpdf(x[..., 0], 0.0, 1.0) + _normal_logpdf(x[..., 1], 0.0, 1.0)

    def log_prior_natural(self, theta):
        theta = np.asarray(theta, dtype=float)
        log_tau = np.log(theta[..., 1])
        return _normal_logpdf(theta[..., 0], 0.0, 1.0) + _normal_logpdf(log_tau, 0.0, 1.0) - log_tau

    to_natural = NormalNoninformative.to_natural
    to_internal = NormalNoninformative.to_internal
    log_jacobian = NormalNoninformative.log_jacobian

    def check_observations(self, obs):
        if len(obs) < 2:
            raise DataError("normal-hyperprior groups need at least two observations")

    def obs_loglik(self, obs, parent):
        raise UsageError("normal-hyperprior only exposes the collapsed group likelihood")

    def sample_obs(self, parent, rng, aux=None):
        raise UsageError("normal-hyperprior cannot forward-sample y: sigma has an improper prior")

    def group_loglik(self, obs, z):
        self.check_observations(obs)
        return self._group_loglik(obs, self.check_group(z))

    def _group_loglik(self, obs, z):
        y = obs.values
        n = y.size
        z = np.asarray(z, dtype=float)
        # sum of squares about z, via mean and centred sum
        ss = ((y - y.mean()) ** 2).sum() + n * (z - y.mean()) ** 2
        return special.gammaln(n / 2) - np.log(2.0) - (n / 2) * np.log(np.pi) - (n / 2) * np.log(ss)

    def _log_group_prior(self, z, x):
        return _normal_logpdf(z, x[..., 0], np.exp(x[..., 1]))

    def _sample_group(self, x, rng, size):
        return EightSchools._sample_group(self, x, rng, size)

    def initial_group_point(self, obs, x):
        return float(obs.values.mean())

    def initial_point(self, data):
        return np.zeros(2)


class EightSchools(MultiLevelFamily):
    """mu ~ Normal(0, 5); tau ~ HalfCauchy(0, 5); nu_k ~ Normal(mu, tau);
    y_k ~ Normal(nu_k, sigma_k) with known sigma_k.

    The sampler uses the non-centred coordinate u = (nu - mu) / tau for the
    group latents.
    """

    name = "eight-schools"
    latent_names = ("mu", "log_tau")
    natural_names = ("mu", "tau")
    aux_fields = ("sigma",)

    prior_mu_scale = 5.0
    prior_tau_scale = 5.0

    def _log_prior(self, x):
        tau = np.exp(x[..., 1])
        s = self.prior_tau_scale
        half_cauchy = np.log(2.0 / (np.pi * s)) - np.log1p((tau / s) ** 2)
        return _normal_logpdf(x[..., 0], 0.0, self.prior_mu_scale) + half_cauchy + x[..., 1]

    def log_prior_natural(self, theta):
        theta = np.asarray(theta, dtype=float)
        s = self.prior_tau_scale
        half_cauchy = np.log(2.0 / (np.pi * s)) - np.log1p((theta[..., 1] / s) ** 2)
        return _normal_logpdf(theta[..., 0], 0.0, self.prior_mu_scale) + half_cauchy

    to_natural = NormalNoninformative.to_natural
    to_internal = NormalNoninformative.to_internal
    log_jacobian = NormalNoninformative.log_jacobian

    def check_observations(self, obs):
        super().check_observations(obs)
        if not np.all(obs.aux["sigma"] > 0):
            raise DataError("eight-schools: sigma must be positive")

    def _loglik(self, y, aux, z):
        return _normal_logpdf(y, z, aux["sigma"])

    def _sample_obs(self, z, rng, aux):
        sigma = aux.get("sigma")
        if sigma is None:
            raise UsageError("eight-schools: sampling y needs the sigma aux value")
        return z + sigma * rng.standard_normal(np.broadcast(z, sigma).shape)

    def _log_group_prior(self, z, x):
        return _normal_logpdf(z, x[..., 0], np.exp(x[..., 1]))

    def _sample_group(self, x, rng, size):
        batch = x.shape[:-1]
        shape = batch if size is None else batch + tuple(np.atleast_1d(size))
        pad = (1,) * (len(shape) - len(batch))
        mu = x[..., 0].reshape(batch + pad)
        tau = np.exp(x[..., 1]).reshape(batch + pad)
        return mu + tau * rng.standard_normal(shape)

    def group_from_unconstrained(self, u, x):
        return x[..., 0] + np.exp(x[..., 1]) * u

    def log_group_prior_unconstrained(self, u, x):
        # p(nu | x) |d nu / d u| = Normal(u; 0, 1)
        return _normal_logpdf(u, 0.0, 1.0) + np.zeros(np.shape(x)[:-1])

    def initial_point(self, data):
        y = np.concatenate([g.values for g in data.groups]) if data is not None else np.zeros(1)
        return np.array([y.mean(), np.log(self.prior_tau_scale)])

    def initial_group_point(self, obs, x):
        return float((obs.values.mean() - x[0]) / np.exp(x[1]))


class RatsBinomial(MultiLevelFamily):
    """p(alpha, beta) propto (alpha + beta)^(-5/2); eta_k ~ Beta(alpha, beta);
    y_k ~ Binomial(n_k, eta_k).  Internal coordinates (log alpha, log beta);
    the sampler moves logit(eta_k).
    """

    name = "rats-binomial"
    latent_names = ("log_alpha", "log_beta")
    natural_names = ("alpha", "beta")
    aux_fields = ("n",)

    def _log_prior(self, x):
        return -2.5 * np.logaddexp(x[..., 0], x[..., 1]) + x[..., 0] + x[..., 1]

    def log_prior_natural(self, theta):
        theta = np.asarray(theta, dtype=float)
        return -2.5 * np.log(theta[..., 0] + theta[..., 1])

    def to_natural(self, x):
        return np.exp(np.asarray(x, dtype=float))

    def to_internal(self, theta):
        return np.log(np.asarray(theta, dtype=float))

    def log_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., 0] + x[..., 1]

    def check_observations(self, obs):
        super().check_observations(obs)
        n = obs.aux["n"]
        y = obs.values
        if not (np.all(n >= 1) and np.all(n == np.round(n))):
            raise DataError("rats: n must be a positive integer")
        if not (np.all(y == np.round(y)) and np.all(y >= 0) and np.all(y <= n)):
            raise DataError("rats: y must be an integer in [0, n]")

    def check_group(self, z):
        z = np.asarray(z, dtype=float)
        if not np.all((z > 0) & (z < 1)):
            raise DataError("rats: eta must lie in (0, 1)")
        return z

    def _loglik(self, y, aux, z):
        n = aux["n"]
        log_choose = special.gammaln(n + 1) - special.gammaln(y + 1) - special.gammaln(n - y + 1)
        return log_choose + special.xlogy(y, z) + special.xlog1py(n - y, -z)

    def _sample_obs(self, z, rng, aux):
        n = aux.get("n")
        if n is None:
            raise UsageError("rats: sampling y needs the n aux value")
        return rng.binomial(np.asarray(n, dtype=np.int64), z).astype(float)

    def _log_group_prior(self, z, x):
        a = np.exp(x[..., 0])
        b = np.exp(x[..., 1])
        return (a - 1) * np.log(z) + (b - 1) * np.log1p(-z) - special.betaln(a, b)

    def _sample_group(self, x, rng, size):
        batch = x.shape[:-1]
        shape = batch if size is None else batch + tuple(np.atleast_1d(size))
        pad = (1,) * (len(shape) - len(batch))
        a = np.exp(x[..., 0]).reshape(batch + pad)
        b = np.exp(x[..., 1]).reshape(batch + pad)
        eta = rng.beta(np.broadcast_to(a, shape), np.broadcast_to(b, shape))
        tiny = np.finfo(float).tiny
        return np.clip(eta, tiny, 1.0 - np.finfo(float).epsneg)

    def group_from_unconstrained(self, u, x):
        return special.expit(u)

    def log_group_prior_unconstrained(self, u, x):
        a = np.exp(x[..., 0])
        b = np.exp(x[..., 1])
        return a * _log_expit(u) + b * _log1m_expit(u) - special.betaln(a, b)

    def initial_group_point(self, obs, x):
        p = (obs.values.sum() + 0.5) / (obs.aux["n"].sum() + 1.0)
        return float(special.logit(p))

    def initial_point(self, data):
        return np.array([np.log(2.0), np.log(12.0)])


FAMILIES = {
    cls.name: cls
    for cls in (BetaBernoulli, NormalNoninformative, NormalHyperprior, EightSchools, RatsBinomial)
}

BUNDLED_DATA = {
    "beta-bernoulli": "beta_bernoulli.csv",
    "normal-noninformative": "normal.csv",
    "normal-hyperprior": "normal_hyperprior.csv",
    "eight-schools": "eight_schools.csv",
    "rats-binomial": "rats.csv",
}


def get_family(name: str) -> ModelFamily:
    try:
        return FAMILIES[name]()
    except KeyError:
        raise UsageError(f"unknown model {name!r}; choose from {sorted(FAMILIES)}") from None


def bundled_data_path(name: str) -> Path:
    if name not in BUNDLED_DATA:
        raise UsageError(f"no bundled data for {name!r}")
    return Path(str(resources.files("wvo") / "data" / BUNDLED_DATA[name]))


def load_data(family: ModelFamily, path=None):
    """Read a CSV data file for ``family``.

    Flat files hold a ``y`` column plus aux columns; grouped files add a
    ``group`` column.  Group order follows first appearance.
    """
    path = Path(path) if path is not None else bundled_data_path(family.name)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh)]
    if not rows or "y" not in rows[0]:
        raise DataError(f"{path}: expected a header with a 'y' column")
    try:
        if not family.multi_level:
            obs = ObservationSet(
                [float(r["y"]) for r in rows],
                {f: [float(r[f]) for r in rows] for f in family.aux_fields},
            )
            family.check_observations(obs)
            return obs
        if "group" not in rows[0]:
            raise DataError(f"{path}: grouped data needs a 'group' column")
        order: dict = {}
        for r in rows:
            order.setdefault(r["group"], []).append(r)
        groups = []
        for label, grp in order.items():
            obs = ObservationSet(
                [float(r["y"]) for r in grp],
                {f: [float(r[f]) for r in grp] for f in family.aux_fields},
            )
            family.check_observations(obs)
            groups.append(obs)
        return GroupedData(groups, list(order))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed data ({exc})") from exc
