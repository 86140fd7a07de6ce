"""Draw candidate virtual observations from the posterior predictive."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from wvo.errors import UsageError
from wvo.models import ModelFamily, ObservationSet
from wvo.sampler import PosteriorSamples


@dataclass
class VirtualObservationSet:
    """Single level: ``values`` has shape (N_hat,).  Multi level: (K_hat, M_hat)
    group latents.  ``source`` holds the posterior-sample index behind
    every value, with the same shape."""

    level: str
    values: np.ndarray
    source: np.ndarray
    seed: int | None = None
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.source = np.asarray(self.source, dtype=np.int64)
        if self.level not in ("single", "multi"):
            raise UsageError("level must be 'single' or 'multi'")
        want = 1 if self.level == "single" else 2
        if self.values.ndim != want or self.source.shape != self.values.shape:
            raise UsageError("virtual values and provenance indices must match in shape")

    @property
    def shape(self):
        return self.values.shape

    def observations(self) -> ObservationSet:
        if self.level != "single":
            raise UsageError("only single-level virtual sets are observation sets")
        return ObservationSet(self.values, self.aux)

    @classmethod
    def from_observations(cls, obs: ObservationSet) -> "VirtualObservationSet":
        """Wrap real observations (the identity reconstruction)."""
        return cls("single", obs.values, np.full(len(obs), -1), None, dict(obs.aux))


def _rng(rng, seed):
    if rng is not None:
        return rng
    return np.random.default_rng(seed)


def draw_virtual_obs_single(family: ModelFamily, samples: PosteriorSamples, n_virtual: int,
                            rng=None, seed: int | None = None) -> VirtualObservationSet:
    """For each i pick a posterior draw uniformly and sample y_hat_i from p(y | x*_s)."""
    if family.multi_level:
        raise UsageError(f"{family.name} is multi-level; draw virtual groups instead")
    if n_virtual < 1:
        raise UsageError("need at least one virtual observation")
    gen = _rng(rng, seed)
    idx = gen.integers(0, len(samples), size=n_virtual)
    values = family.sample_obs(samples.values[idx], gen)
    return VirtualObservationSet("single", values, idx, seed)


def draw_virtual_groups(family: ModelFamily, samples: PosteriorSamples, n_groups: int, group_size: int,
                        rng=None, seed: int | None = None) -> VirtualObservationSet:
    """z_hat_ki ~ p(z | x*_s) with s uniform, independently for every slot."""
    if not family.multi_level:
        raise UsageError(f"{family.name} is single-level; draw virtual observations instead")
    if n_groups < 1 or group_size < 1:
        raise UsageError("need at least one virtual group of at least one value")
    gen = _rng(rng, seed)
    idx = gen.integers(0, len(samples), size=(n_groups, group_size))
    values = family.sample_group(samples.values[idx], gen)
    family.check_group(values)
    return VirtualObservationSet("multi", values, idx, seed)
