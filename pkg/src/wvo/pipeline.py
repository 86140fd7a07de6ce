"""End-to-end reconstruction: draw virtual observations, optimize weights, validate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wvo.diagnostics import (
    ReconditionedModel,
    Thresholds,
    compare_posteriors,
    recondition,
    uniform_weights,
)
from wvo.errors import UsageError
from wvo.models import GroupedData, ModelFamily
from wvo.objective import build_multi_context, build_single_context
from wvo.optimize import (
    OptimizationResult,
    OptimizerConfig,
    WeightAssignment,
    optimize_k1,
    optimize_multi,
    optimize_single,
)
from wvo.sampler import GroupLikTable, PosteriorSamples, SamplerConfig, estimate_group_logliks, run_mh
from wvo.virtual import VirtualObservationSet, draw_virtual_groups, draw_virtual_obs_single

ZERO_WEIGHT_RTOL = 1e-8


@dataclass(frozen=True)
class ReconstructionConfig:
    """Sizes of the virtual set.  ``None`` means "same as the original data"."""

    n_virtual: int | None = None
    k_virtual: int | None = None
    m_virtual: int = 10
    forward_draws: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("n_virtual", "k_virtual"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise UsageError(f"{name} must be positive")
        if self.m_virtual < 1 or self.forward_draws < 1:
            raise UsageError("m_virtual and forward_draws must be positive")


@dataclass
class Reconstruction:
    family: ModelFamily
    vobs: VirtualObservationSet
    weights: WeightAssignment
    budget: float
    result: OptimizationResult
    context_hash: str

    def reconditioned(self) -> ReconditionedModel:
        return recondition(self.family, self.vobs, self.weights, self.budget)

    def uniform_control(self) -> ReconditionedModel:
        return recondition(self.family, self.vobs, uniform_weights(self.vobs, self.budget), self.budget)


def round_small_weights(w, budget: float) -> np.ndarray:
    """Zero out weights below 1e-8 * budget and rescale the rest to the budget."""
    w = np.array(w, dtype=float)
    w[w < ZERO_WEIGHT_RTOL * budget] = 0.0
    return w * (budget / w.sum(axis=-1, keepdims=True))


def _streams(seed: int):
    virtual, table = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(virtual), np.random.default_rng(table)


def group_table(family: ModelFamily, data: GroupedData, samples: PosteriorSamples,
                config: ReconstructionConfig) -> GroupLikTable:
    """Group marginal likelihood table on the stream ``reconstruct`` would use."""
    return estimate_group_logliks(family, data, samples, config.forward_draws, _streams(config.seed)[1])


def reconstruct(family: ModelFamily, data, samples: PosteriorSamples,
                config: ReconstructionConfig | None = None,
                optimizer: OptimizerConfig | None = None,
                table: GroupLikTable | None = None) -> Reconstruction:
    """Find weighted virtual observations standing in for ``data``.

    Single-level families weight N_hat draws from the posterior predictive
    under a budget of N*.  Multi-level families weight K_hat x M_hat group
    latents; a precomputed ``table`` of group marginal likelihoods may be
    passed to skip the forward sampling.
    """
    config = config or ReconstructionConfig()
    optimizer = optimizer or OptimizerConfig()
    virtual_rng, table_rng = _streams(config.seed)
    if not family.multi_level:
        n_hat = config.n_virtual or len(data)
        vobs = draw_virtual_obs_single(family, samples, n_hat, rng=virtual_rng, seed=config.seed)
        ctx = build_single_context(family, samples, data, vobs)
        result = optimize_single(ctx, optimizer)
        weights = WeightAssignment(round_small_weights(result.weights.w, ctx.budget))
    else:
        if not isinstance(data, GroupedData):
            raise UsageError(f"{family.name} needs grouped data")
        if table is None:
            table = estimate_group_logliks(family, data, samples, config.forward_draws, table_rng)
        elif table.values.shape != (len(samples), len(data)):
            raise UsageError("group likelihood table does not match samples and data")
        k_hat = config.k_virtual or len(data)
        vobs = draw_virtual_groups(family, samples, k_hat, config.m_virtual, rng=virtual_rng, seed=config.seed)
        ctx = build_multi_context(family, samples, table, vobs)
        result = optimize_k1(ctx, optimizer) if k_hat == 1 else optimize_multi(ctx, optimizer)
        weights = WeightAssignment(round_small_weights(result.weights.w, 1.0),
                                   round_small_weights(result.weights.v, ctx.budget))
    return Reconstruction(family, vobs, weights, float(ctx.budget), result, ctx.digest())


@dataclass
class Validation:
    """Comparisons keyed by coordinate system ("internal", "natural")."""

    comparison: dict
    control: dict | None
    thresholds: Thresholds

    @property
    def passed(self) -> bool:
        return all(c.all_passed(self.thresholds) for c in self.comparison.values())

    def rows(self):
        runs = [("optimized", self.comparison)] + ([("uniform", self.control)] if self.control else [])
        for weights, by_coords in runs:
            for coords, comp in by_coords.items():
                for row in comp.rows(self.thresholds):
                    yield dict(row, weights=weights, coords=coords)


def _compare_both(family, original, other) -> dict:
    return {"internal": compare_posteriors(original, other),
            "natural": compare_posteriors(original.natural(family), other.natural(family))}


def validate(original: PosteriorSamples, model: ReconditionedModel, sampler: SamplerConfig | None = None,
             control: ReconditionedModel | None = None, thresholds: Thresholds = Thresholds()) -> Validation:
    """Re-sample ``model`` (and the optional control) and compare with ``original``.

    Passing requires every dimension to meet the thresholds in both the
    internal (unconstrained) and the natural coordinates.
    """
    sampler = sampler or SamplerConfig()
    family = model.family
    comparison = _compare_both(family, original, run_mh(model, None, sampler))
    ctrl = None if control is None else _compare_both(family, original, run_mh(control, None, sampler))
    return Validation(comparison, ctrl, thresholds)
