"""Monte Carlo objectives for weighted virtual observations.

Contexts hold every model evaluation the objectives need, so evaluating an
objective or its gradient never calls back into the model.

Single level, with ``a[s] = sum_i w_i L[s, i]``::

    f(w) = mean_s a[s] - logsumexp_s(a[s] - base[s])

Multi level, with ``m[s, k] = log sum_i w_ki exp(Lz[s, k, i])``::

    f(v, w) = mean_s sum_k v_k m[s, k] - logsumexp_s(sum_k v_k m[s, k] - base[s])

The one-group objective is the multi-level one with ``v = [1]``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wvo.errors import DegenerateContextError, UsageError


def logsumexp(xs, axis=None):
    """log(sum(exp(xs))) with a max shift; -inf iff every entry is -inf."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        raise UsageError("logsumexp of an empty array")
    if np.any(np.isnan(xs)):
        raise UsageError("logsumexp input contains NaN")
    if np.any(xs == np.inf):
        raise UsageError("logsumexp input contains +inf")
    m = np.max(xs, axis=axis, keepdims=True)
    safe = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(xs - safe), axis=axis, keepdims=True)) + safe
    out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return float(out) if out.ndim == 0 else out


def _softmax_from_logs(z):
    if np.all(np.isneginf(z)):
        raise DegenerateContextError("every posterior sample has zero weighted evidence")
    p = np.exp(z - np.max(z))
    return p / p.sum()


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_matrix(name, a):
    if np.any(np.isnan(a)) or np.any(a == np.inf):
        raise UsageError(f"{name} must be finite or -inf")


@dataclass(frozen=True, eq=False)
class SingleLevelContext:
    """L[s, i] = log p(yhat_i | x*_s); base[s] = sum_i log p(y*_i | x*_s)."""

    L: np.ndarray
    base: np.ndarray
    budget: float

    def __post_init__(self):
        L = _frozen(self.L)
        base = _frozen(self.base)
        if L.ndim != 2 or L.shape[1] < 1 or base.shape != (L.shape[0],):
            raise UsageError("L must be S x N_hat and base of length S")
        if not self.budget > 0:
            raise UsageError("budget must be positive")
        _check_matrix("L", L)
        _check_matrix("base", base)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "budget", float(self.budget))
        # reductions run over a canonical column order, so jointly permuting
        # virtual observations and weights gives bit-identical objectives
        order = _column_order(L)
        object.__setattr__(self, "_order", order)
        object.__setattr__(self, "_Lc", np.ascontiguousarray(L[:, order]))

    @property
    def n_samples(self) -> int:
        return self.L.shape[0]

    @property
    def n_virtual(self) -> int:
        return self.L.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.L, self.base, np.array([self.budget])):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "L.csv", self.L, delimiter=",", fmt="%.17g")
        np.savetxt(d / "base.csv", self.base, delimiter=",", fmt="%.17g")
        manifest = {"kind": "single", "budget": self.budget, "shape": list(self.L.shape),
                    "digest": self.digest()}
        (d / "context.json").write_text(json.dumps(manifest, indent=2) + "\n")


@dataclass(frozen=True, eq=False)
class MultiLevelContext:
    """Lz[s, k, i] = log p(zhat_ki | x*_s); base[s] = sum_k log p(y*_k | x*_s)."""

    Lz: np.ndarray
    base: np.ndarray
    budget: float

    def __post_init__(self):
        Lz = np.asarray(self.Lz, dtype=float)
        if isinstance(self.Lz, (list, tuple)):
            Lz = np.stack([np.asarray(m, dtype=float) for m in self.Lz], axis=1)
        Lz = _frozen(Lz)
        base = _frozen(self.base)
        if Lz.ndim != 3 or min(Lz.shape) < 1 or base.shape != (Lz.shape[0],):
            raise UsageError("Lz must be S x K_hat x M_hat and base of length S")
        if not self.budget > 0:
            raise UsageError("budget must be positive")
        _check_matrix("Lz", Lz)
        _check_matrix("base", base)
        object.__setattr__(self, "Lz", Lz)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "budget", float(self.budget))
        # canonical order: values within each group, then groups, sorted
        inner = np.stack([_column_order(Lz[:, k, :]) for k in range(Lz.shape[1])])
        within = np.take_along_axis(Lz, inner[None, :, :], axis=2)
        groups = _column_order(within.reshape(Lz.shape[0], Lz.shape[1], -1).transpose(0, 2, 1)
                               .reshape(-1, Lz.shape[1]))
        inner = inner[groups]
        Lc = within[:, groups, :]
        # exp(Lz - rowmax) is reused by every evaluation
        shift = Lc.max(axis=2)
        safe = np.where(np.isneginf(shift), 0.0, shift)
        P = np.ascontiguousarray(np.exp(Lc - safe[:, :, None]))
        P.setflags(write=False)
        object.__setattr__(self, "_groups", groups)
        object.__setattr__(self, "_inner", inner)
        object.__setattr__(self, "_shift", shift)
        object.__setattr__(self, "_P", P)

    @property
    def n_samples(self) -> int:
        return self.Lz.shape[0]

    @property
    def n_groups(self) -> int:
        return self.Lz.shape[1]

    @property
    def group_size(self) -> int:
        return self.Lz.shape[2]

    def group_matrix(self, k: int) -> np.ndarray:
        return self.Lz[:, k, :]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.Lz, self.base, np.array([self.budget])):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k in range(self.n_groups):
            np.savetxt(d / f"Lz_{k}.csv", self.group_matrix(k), delimiter=",", fmt="%.17g")
        np.savetxt(d / "base.csv", self.base, delimiter=",", fmt="%.17g")
        manifest = {"kind": "multi", "budget": self.budget, "shape": list(self.Lz.shape),
                    "digest": self.digest()}
        (d / "context.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_context(directory):
    d = Path(directory)
    manifest = json.loads((d / "context.json").read_text())
    base = np.atleast_1d(np.loadtxt(d / "base.csv", delimiter=","))
    S = manifest["shape"][0]
    if manifest["kind"] == "single":
        L = np.loadtxt(d / "L.csv", delimiter=",").reshape(S, -1)
        return SingleLevelContext(L, base, manifest["budget"])
    mats = [np.loadtxt(d / f"Lz_{k}.csv", delimiter=",").reshape(S, -1) for k in range(manifest["shape"][1])]
    return MultiLevelContext(mats, base, manifest["budget"])


# -- single level -----------------------------------------------------------

def _column_order(A):
    """Permutation sorting the columns of A lexicographically by row."""
    return np.lexsort(A[::-1]) if A.shape[1] > 1 else np.zeros(1, dtype=np.intp)


def _row_sums(A) -> np.ndarray:
    """Left-to-right column accumulation.

    Unlike ``A.sum(axis=1)`` the rounding does not depend on memory
    alignment, so equal matrices always give equal sums.
    """
    acc = A[:, 0].copy()
    for j in range(1, A.shape[1]):
        acc += A[:, j]
    return acc


def canonical_row_sums(L) -> np.ndarray:
    """Row sums of L over its canonical column order.

    Baselines built this way agree bit for bit with the weighted rows of a
    context holding the same matrix at unit weights.
    """
    L = np.asarray(L, dtype=float)
    return _row_sums(L[:, _column_order(L)])


def _weighted_rows(L, w):
    # 0 * -inf counts as 0: a zero-weighted impossible observation adds nothing
    with np.errstate(invalid="ignore"):
        prod = L * w
    if np.any(w == 0):
        prod = np.where(w == 0, 0.0, prod)
    return _row_sums(prod)


def _check_w(w, n):
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise UsageError(f"expected {n} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise UsageError("weights must be finite and nonnegative")
    return w


def objective_single_terms(ctx: SingleLevelContext, w) -> tuple[float, float]:
    """(first, second) with objective = first - second."""
    w = _check_w(w, ctx.n_virtual)
    a = _weighted_rows(ctx._Lc, w[ctx._order])
    return float(a.mean()), logsumexp(a - ctx.base)


def objective_single(ctx: SingleLevelContext, w) -> float:
    first, second = objective_single_terms(ctx, w)
    return first - second


def value_and_grad_single(ctx: SingleLevelContext, w):
    w = _check_w(w, ctx.n_virtual)
    a = _weighted_rows(ctx._Lc, w[ctx._order])
    z = a - ctx.base
    rho = _softmax_from_logs(z)
    value = a.mean() - logsumexp(z)
    grad = ctx.L.mean(axis=0) - rho @ ctx.L
    return float(value), grad


def grad_single(ctx: SingleLevelContext, w) -> np.ndarray:
    return value_and_grad_single(ctx, w)[1]


# -- multi level --------------------------------------------------------------

def _check_vw(ctx, v, W):
    v = np.asarray(v, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.ndim == 1 and ctx.n_groups == 1:
        W = W[None, :]
    if v.shape != (ctx.n_groups,) or W.shape != (ctx.n_groups, ctx.group_size):
        raise UsageError(f"expected v of length {ctx.n_groups} and w of shape "
                         f"{(ctx.n_groups, ctx.group_size)}")
    for name, a in (("v", v), ("w", W)):
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise UsageError(f"{name} must be finite and nonnegative")
    if np.any(W.sum(axis=1) == 0):
        raise UsageError("every group needs at least one positive weight")
    return v, W


def _canonical(ctx: MultiLevelContext, v, W):
    return v[ctx._groups], np.take_along_axis(W[ctx._groups], ctx._inner, axis=1)


def _mixture_logs(ctx: MultiLevelContext, W):
    """m[s, k] and the inner sums Q[s, k] = sum_i w_ki P[s, k, i], in canonical order."""
    Q = np.einsum("ski,ki->sk", ctx._P, W)
    with np.errstate(divide="ignore"):
        m = ctx._shift + np.log(Q)
    return m, Q


def _group_sum(v, m):
    with np.errstate(invalid="ignore"):
        prod = m * v
    if np.any(v == 0):
        prod = np.where(v == 0, 0.0, prod)
    return _row_sums(prod)


def objective_multi_terms(ctx: MultiLevelContext, v, W) -> tuple[float, float]:
    v, W = _canonical(ctx, *_check_vw(ctx, v, W))
    m, _ = _mixture_logs(ctx, W)
    a = _group_sum(v, m)
    return float(a.mean()), logsumexp(a - ctx.base)


def objective_multi(ctx: MultiLevelContext, v, W) -> float:
    first, second = objective_multi_terms(ctx, v, W)
    return first - second


def value_and_grad_multi(ctx: MultiLevelContext, v, W):
    v, W = _canonical(ctx, *_check_vw(ctx, v, W))
    m, Q = _mixture_logs(ctx, W)
    a = _group_sum(v, m)
    z = a - ctx.base
    rho = _softmax_from_logs(z)
    value = a.mean() - logsumexp(z)
    coef = 1.0 / ctx.n_samples - rho
    grad_v = coef @ m
    # d m[s,k] / d w_ki = P[s,k,i] / Q[s,k]
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(Q > 0, coef[:, None] / Q, 0.0)
    grad_Wc = v[:, None] * np.einsum("sk,ski->ki", scaled, ctx._P)
    # back to the caller's order
    grad_W = np.empty_like(grad_Wc)
    np.put_along_axis(grad_W, ctx._inner, grad_Wc, axis=1)
    grad_W[ctx._groups] = grad_W.copy()
    out_v = np.empty_like(grad_v)
    out_v[ctx._groups] = grad_v
    return float(value), out_v, grad_W


def grad_multi(ctx: MultiLevelContext, v, W):
    _, gv, gW = value_and_grad_multi(ctx, v, W)
    return gv, gW


def _k1(ctx):
    if ctx.n_groups != 1:
        raise UsageError("the one-group objective needs a context with a single virtual group")


def objective_k1(ctx: MultiLevelContext, w) -> float:
    _k1(ctx)
    return objective_multi(ctx, [1.0], np.asarray(w, dtype=float)[None, :])


def grad_k1(ctx: MultiLevelContext, w) -> np.ndarray:
    _k1(ctx)
    return grad_multi(ctx, [1.0], np.asarray(w, dtype=float)[None, :])[1][0]


# -- context builders ----------------------------------------------------------

def build_single_context(family, samples, observed, virtual) -> SingleLevelContext:
    """Evaluate every log p(y | x*_s) the single-level objective needs.

    ``observed`` is the original ObservationSet; ``virtual`` an
    ObservationSet or single-level VirtualObservationSet.
    """
    if family.multi_level:
        raise UsageError(f"{family.name} is multi-level; build a multi-level context")
    if hasattr(virtual, "observations"):
        virtual = virtual.observations()
    X = samples.values
    L = family.obs_loglik(virtual, X)
    base = canonical_row_sums(family.obs_loglik(observed, X))
    return SingleLevelContext(L, base, len(observed))


def build_multi_context(family, samples, table, virtual) -> MultiLevelContext:
    """Lz[s, k, i] = log p(z_hat_ki | x*_s); base from the group likelihood table."""
    if not family.multi_level:
        raise UsageError(f"{family.name} is single-level; build a single-level context")
    values = np.asarray(virtual.values if hasattr(virtual, "values") else virtual, dtype=float)
    if values.ndim != 2:
        raise UsageError("virtual groups must be a K_hat x M_hat array")
    if table.values.shape[0] != len(samples):
        raise UsageError("group likelihood table and samples disagree on S")
    X = samples.values
    Lz = family.log_group_prior(values[None, :, :], X[:, None, None, :])
    base = table.values.sum(axis=1)
    return MultiLevelContext(Lz, base, table.n_groups)
