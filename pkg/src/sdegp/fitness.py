"""Objective functions for the evolutionary search.

Gaussian transition negative log-likelihood for joint drift/diffusion
discovery, its multi-step variant for sparsely sampled data, and the
one-step MSE objective for drift-only discovery.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expr import eval_tree

# Invalid (non-finite) evaluations are mapped to this value plus the
# individual's complexity so that NSGA-II stays total and invalid
# candidates remain strictly ordered among themselves.
PENALTY = 1e12

# Variance floor applied before the log and the quotient; trees often
# evaluate to exactly 0, which must be extremely costly but finite.
VAR_FLOOR = 1e-12

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class FitnessContext:
    """Precomputed transition arrays for an optimization dataset.

    Per-variable mode uses (features, x_prev, x_next); whole-system
    multi-step mode uses (X_prev, X_next). L=1 reproduces the
    single-step formulas exactly.
    """

    tau: float
    features: np.ndarray = None  # (M, F) states at t_{k-1}
    x_prev: np.ndarray = None    # (M,)
    x_next: np.ndarray = None    # (M,)
    X_prev: np.ndarray = None    # (M, N) whole-system mode
    X_next: np.ndarray = None
    L: int = 1
    var_floor: float = VAR_FLOOR

    @staticmethod
    def for_variable(dataset, var_index, L=1):
        feats, xp, xn = dataset.transitions(var_index)
        return FitnessContext(
            tau=dataset.tau, features=feats, x_prev=xp, x_next=xn, L=L
        )

    @staticmethod
    def for_system(dataset, L=1):
        Xp, Xn = dataset.system_transitions()
        return FitnessContext(tau=dataset.tau, X_prev=Xp, X_next=Xn, L=L)


def _finite_or_penalty(value):
    v = float(value)
    return v if np.isfinite(v) else PENALTY


def penalized(value, complexity):
    """Map a raw fitness to its final value; invalid evaluations get
    PENALTY + complexity so they stay strictly worse than any finite one."""
    v = float(value)
    if np.isfinite(v) and v < PENALTY:
        return v
    return PENALTY + complexity


def _gaussian_nll(x_next, mu, sig2, var_floor):
    sig2 = np.maximum(sig2, var_floor)
    terms = 0.5 * (LOG_2PI + np.log(sig2)) + (x_next - mu) ** 2 / (2.0 * sig2)
    return float(np.sum(terms))


def nll_sde(drift_tree, diffusion_tree, ctx):
    """Sum of Gaussian transition NLLs with mu = x + tau*f(x) and
    sigma = sqrt(tau)*g(x); non-finite totals map to PENALTY."""
    f = eval_tree(drift_tree, ctx.features)
    g = eval_tree(diffusion_tree, ctx.features)
    mu = ctx.x_prev + ctx.tau * f
    sig2 = ctx.tau * g * g
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sig2))):
        return PENALTY
    return _finite_or_penalty(_gaussian_nll(ctx.x_next, mu, sig2, ctx.var_floor))


def mse_ode(drift_tree, ctx):
    """Sum of squared one-step prediction errors of the drift."""
    f = eval_tree(drift_tree, ctx.features)
    mu = ctx.x_prev + ctx.tau * f
    if not np.all(np.isfinite(mu)):
        return PENALTY
    return _finite_or_penalty(float(np.sum((ctx.x_next - mu) ** 2)))


def _substep(drift_trees, ctx):
    """Deterministic drift sub-stepping; returns (Y_final, [Y at each l]).

    Y(l) = Y(l-1) + (tau/L) f(Y(l-1)) for l = 1..L from Y(0) = X_prev.
    The returned list holds Y(0)..Y(L-1), the states at which the
    diffusion is averaged.
    """
    L = ctx.L
    h = ctx.tau / L
    Y = ctx.X_prev
    stages = []
    for _ in range(L):
        stages.append(Y)
        F = np.stack([eval_tree(t, Y) for t in drift_trees], axis=-1)
        Y = Y + h * F
        if not np.all(np.isfinite(Y)):
            return None, None
    return Y, stages


def nll_sde_multistep(drift_trees, diffusion_trees, ctx):
    """Whole-system NLL with L deterministic drift sub-steps per
    observed transition; diffusion averaged along the sub-step path."""
    mu, stages = _substep(drift_trees, ctx)
    if mu is None:
        return PENALTY
    total = 0.0
    for i, g_tree in enumerate(diffusion_trees):
        sig = np.zeros(ctx.X_prev.shape[0])
        for Y in stages:
            sig = sig + eval_tree(g_tree, Y)
        sig = (np.sqrt(ctx.tau) / ctx.L) * sig
        sig2 = sig * sig
        if not np.all(np.isfinite(sig2)):
            return PENALTY
        total += _gaussian_nll(ctx.X_next[:, i], mu[:, i], sig2, ctx.var_floor)
    return _finite_or_penalty(total)


def mse_ode_multistep(drift_trees, ctx):
    """Whole-system multi-step MSE objective."""
    mu, _ = _substep(drift_trees, ctx)
    if mu is None:
        return PENALTY
    return _finite_or_penalty(float(np.sum((ctx.X_next - mu) ** 2)))


def make_fitness(method, ctx):
    """Fitness callable Individual -> float for a run mode.

    method: 'gp-sde' (trees = [drift, diffusion]), 'gp-ode' ([drift]),
    'gp-sde-ms' (N drift trees then N diffusion trees) or 'gp-ode-ms'
    (N drift trees). Always returns a finite penalized value.
    """
    if method == "gp-sde":

        def fn(ind):
            return penalized(nll_sde(ind.trees[0], ind.trees[1], ctx), ind.complexity)

    elif method == "gp-ode":

        def fn(ind):
            return penalized(mse_ode(ind.trees[0], ctx), ind.complexity)

    elif method == "gp-sde-ms":

        def fn(ind):
            n = len(ind.trees) // 2
            return penalized(
                nll_sde_multistep(ind.trees[:n], ind.trees[n:], ctx), ind.complexity
            )

    elif method == "gp-ode-ms":

        def fn(ind):
            return penalized(mse_ode_multistep(ind.trees, ctx), ind.complexity)

    else:
        raise ValueError(f"unknown method {method!r}")

    return fn
