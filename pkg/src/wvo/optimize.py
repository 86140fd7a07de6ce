"""Maximize the objectives over scaled simplices.

Weights are parameterized as ``budget * softmax(theta)``, so every iterate
satisfies the budget exactly and the ascent runs unconstrained on theta
with Adam moments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from wvo.errors import DegenerateContextError, UsageError
from wvo.objective import (
    MultiLevelContext,
    SingleLevelContext,
    value_and_grad_multi,
    value_and_grad_single,
)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 5000
    step: float = 0.05
    tol: float = 1e-6
    window: int = 20
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.restarts < 1 or self.window < 1:
            raise UsageError("max_iters, restarts and window must be at least 1")
        if not self.tol > 0 or not self.step > 0:
            raise UsageError("tolerance and step size must be positive")


@dataclass
class WeightAssignment:
    """Single level: ``w`` of length N_hat.  Multi level: ``v`` of length
    K_hat and ``w`` of shape (K_hat, M_hat), one row per virtual group."""

    w: np.ndarray
    v: np.ndarray | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=float)
            if self.w.ndim == 1:
                self.w = self.w[None, :]
        if np.any(self.w < 0) or (self.v is not None and np.any(self.v < 0)):
            raise UsageError("weights must be nonnegative")

    @property
    def level(self) -> str:
        return "single" if self.v is None else "multi"


@dataclass
class OptimizationResult:
    weights: WeightAssignment
    objective: float
    trace: np.ndarray
    converged: bool
    best_restart: int
    n_iter: int
    restart_objectives: list = field(default_factory=list)


def reparam_scaled_softmax(theta, budget: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    e = np.exp(theta - theta.max(axis=-1, keepdims=True))
    return budget * e / e.sum(axis=-1, keepdims=True)


def _softmax_backprop(w, g, budget):
    # d f / d theta_j = w_j (g_j - sum_i w_i g_i / budget)
    return w * (g - (w * g).sum(axis=-1, keepdims=True) / budget)


class _Adam:
    def __init__(self, shape, step):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.step = step

    def ascend(self, theta, grad):
        self.t += 1
        self.m = BETA1 * self.m + (1 - BETA1) * grad
        self.v = BETA2 * self.v + (1 - BETA2) * grad * grad
        m_hat = self.m / (1 - BETA1**self.t)
        v_hat = self.v / (1 - BETA2**self.t)
        return theta + self.step * m_hat / (np.sqrt(v_hat) + EPS)


def _ascend(fun, theta0, config):
    """Adam ascent from theta0; returns best theta, best value, trace, flags."""
    adam = _Adam(theta0.shape, config.step)
    theta = theta0.copy()
    trace = []
    best_val, best_theta = -np.inf, theta.copy()
    converged = False
    for it in range(config.max_iters):
        val, grad = fun(theta)
        if not np.isfinite(val):
            if it == 0:
                raise DegenerateContextError("objective is not finite at the starting weights")
            break
        trace.append(val)
        if val > best_val:
            best_val, best_theta = val, theta.copy()
        if it >= config.window and abs(trace[-1] - trace[-1 - config.window]) < config.tol:
            converged = True
            break
        theta = adam.ascend(theta, grad)
    return best_theta, best_val, np.array(trace), converged


def _multistart(fun, n_params, config, frozen):
    if frozen:
        val, _ = fun(np.zeros(n_params))
        if not np.isfinite(val):
            raise DegenerateContextError("objective is not finite at the starting weights")
        return np.zeros(n_params), val, np.array([val]), True, 0, [val]
    rng = np.random.default_rng(config.seed)
    best = None
    finals = []
    for r in range(config.restarts):
        theta0 = np.zeros(n_params) if r == 0 else rng.standard_normal(n_params)
        try:
            theta, val, trace, conv = _ascend(fun, theta0, config)
        except DegenerateContextError:
            if r == 0:
                raise
            finals.append(-np.inf)
            continue
        finals.append(val)
        if best is None or val > best[1]:
            best = (theta, val, trace, conv, r)
    theta, val, trace, conv, r = best
    return theta, val, trace, conv, r, finals


def optimize_single(ctx: SingleLevelContext, config: OptimizerConfig | None = None) -> OptimizationResult:
    """Maximize the single-level objective subject to sum(w) = budget."""
    config = config or OptimizerConfig()
    budget = ctx.budget

    def fun(theta):
        w = reparam_scaled_softmax(theta, budget)
        val, g = value_and_grad_single(ctx, w)
        return val, _softmax_backprop(w, g, budget)

    theta, val, trace, conv, r, finals = _multistart(fun, ctx.n_virtual, config, ctx.n_virtual == 1)
    w = reparam_scaled_softmax(theta, budget)
    return OptimizationResult(WeightAssignment(w), float(val), trace, conv, r, len(trace), finals)


def optimize_multi(ctx: MultiLevelContext, config: OptimizerConfig | None = None) -> OptimizationResult:
    """Maximize the multi-level objective: sum(v) = budget, each row of w sums to 1."""
    config = config or OptimizerConfig()
    K, M = ctx.n_groups, ctx.group_size
    budget = ctx.budget

    def unpack(theta):
        return reparam_scaled_softmax(theta[:K], budget), reparam_scaled_softmax(theta[K:].reshape(K, M), 1.0)

    def fun(theta):
        v, W = unpack(theta)
        val, gv, gW = value_and_grad_multi(ctx, v, W)
        return val, np.concatenate([_softmax_backprop(v, gv, budget), _softmax_backprop(W, gW, 1.0).ravel()])

    theta, val, trace, conv, r, finals = _multistart(fun, K + K * M, config, K == 1 and M == 1)
    v, W = unpack(theta)
    return OptimizationResult(WeightAssignment(W, v), float(val), trace, conv, r, len(trace), finals)


def optimize_k1(ctx: MultiLevelContext, config: OptimizerConfig | None = None) -> OptimizationResult:
    """One virtual group: v is pinned to the budget, w lives on the unit simplex."""
    if ctx.n_groups != 1:
        raise UsageError("optimize_k1 needs a context with a single virtual group")
    config = config or OptimizerConfig()
    M = ctx.group_size
    v = np.array([ctx.budget])

    def fun(theta):
        W = reparam_scaled_softmax(theta, 1.0)[None, :]
        val, _, gW = value_and_grad_multi(ctx, v, W)
        return val, _softmax_backprop(W[0], gW[0], 1.0)

    theta, val, trace, conv, r, finals = _multistart(fun, M, config, M == 1)
    W = reparam_scaled_softmax(theta, 1.0)[None, :]
    return OptimizationResult(WeightAssignment(W, v), float(val), trace, conv, r, len(trace), finals)
