"""Model selection, quantitative comparison against ground truth,
structure-match verdicts and generative sampling of discovered systems.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import expr
from .expr import ExprTree, eval_tree, canonical_polynomial, PolynomialTooLarge

METHODS = ("gp-sde", "gp-sde-ms", "gp-ode", "gp-ode-ms", "km-sr")

# Relative coefficient tolerance below which a monomial does not count
# toward the structure verdict.
STRUCTURE_TOL = 0.05

CSV_COLUMNS = ("environment", "method", "seed", "drift_mse", "diffusion_mse", "structure_ok", "runtime_s")


@dataclass
class EvalReport:
    environment: str
    method: str
    seed: int
    drift_mse: float
    diffusion_mse: float  # NaN for drift-only methods
    structure_ok: bool
    per_equation: dict    # e.g. {"drift_0": True, "diffusion_0": False}
    model_text: dict      # role -> expression text
    runtime_s: float

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def csv_row(self):
        diff = "" if np.isnan(self.diffusion_mse) else repr(self.diffusion_mse)
        return (
            f"{self.environment},{self.method},{self.seed},"
            f"{self.drift_mse!r},{diff},{int(self.structure_ok)},{self.runtime_s!r}"
        )

    @staticmethod
    def from_json(text):
        obj = json.loads(text)
        return EvalReport(**obj)


def component_mse(model_fn, truth_fn, dataset, absolute=False):
    """Mean squared pointwise error between a discovered function and
    the ground truth over every observed state of a dataset. Diffusion
    comparisons pass absolute=True (the sign is unidentifiable)."""
    X = dataset.feature_matrix()
    truth = np.asarray(truth_fn(X), dtype=float)
    pred = np.asarray(model_fn(X), dtype=float)
    if absolute:
        truth, pred = np.abs(truth), np.abs(pred)
    return float(np.mean((truth - pred) ** 2))


def tree_fn(tree):
    return lambda X: eval_tree(tree, X)


def individual_validation_mse(individual, val_dataset, env, var_index=None):
    """Eq-8-style validation score of a GP individual: drift MSE plus
    diffusion MSE when the individual carries diffusion trees.

    Per-variable individuals pass var_index; whole-system (multi-step)
    individuals score every target variable of the environment.
    """
    roles = individual.roles
    total = 0.0
    if roles == ("drift",) or roles == ("drift", "diffusion"):
        total += component_mse(
            tree_fn(individual.trees[0]), env.truth_drift_fn(var_index), val_dataset
        )
        if "diffusion" in roles:
            total += component_mse(
                tree_fn(individual.trees[1]),
                env.truth_diffusion_fn(var_index),
                val_dataset,
                absolute=True,
            )
        return total
    # whole-system layout
    n = len([r for r in roles if r.startswith("drift")])
    for i in env.targets:
        total += component_mse(
            tree_fn(individual.trees[i]), env.truth_drift_fn(i), val_dataset
        )
        if len(roles) == 2 * n:
            total += component_mse(
                tree_fn(individual.trees[n + i]),
                env.truth_diffusion_fn(i),
                val_dataset,
                absolute=True,
            )
    return total


def select_model(front, val_dataset, env, var_index=None):
    """Front member with the lowest validation MSE; ties break toward
    lower complexity."""
    if not front:
        raise ValueError("empty Pareto front")
    best = None
    best_key = None
    for ind in front:
        mse = individual_validation_mse(ind, val_dataset, env, var_index)
        key = (mse, ind.complexity)
        if best_key is None or key < best_key:
            best_key = key
            best = ind
    return best


def structure_match(model, truth, names=None, rel_tol=STRUCTURE_TOL):
    """True iff the monomial support sets agree after dropping terms
    whose |coefficient| is below rel_tol times the largest truth
    coefficient. Coefficient values are not compared. Expansion
    overflow counts as a mismatch.
    """
    if isinstance(truth, str):
        truth = expr.parse(truth, names=names)
    if isinstance(model, str):
        model = expr.parse(model, names=names)
    truth_poly = canonical_polynomial(truth)
    if not truth_poly:
        cutoff = rel_tol
    else:
        cutoff = rel_tol * max(abs(c) for c in truth_poly.values())
    try:
        model_poly = canonical_polynomial(model)
    except PolynomialTooLarge:
        return False
    t_support = {k for k, c in truth_poly.items() if abs(c) >= cutoff}
    m_support = {k for k, c in model_poly.items() if abs(c) >= cutoff}
    return t_support == m_support


def generative_sample(drift_fns, diffusion_fns, env, x0, n_paths, rng):
    """Integrate the discovered system n_paths times from a fixed
    initial condition with independent Wiener processes; returns
    (mean path, std path, blowup_flag) on the tau grid.

    Deterministic models (diffusion_fns None) force n_paths to 1 and a
    zero std path. Paths that blow up are dropped; if more than half
    blow up the flag is set and statistics cover the survivors.
    """
    deterministic = diffusion_fns is None
    if deterministic:
        n_paths = 1
    K = env.n_steps
    n_sub = env.substeps
    dt = env.dt
    sd = np.sqrt(dt)
    N = len(drift_fns)
    x0 = np.asarray(x0, dtype=float)
    paths = []
    for _ in range(n_paths):
        x = x0.copy()
        out = np.empty((K + 1, N))
        out[0] = x
        ok = True
        for k in range(K):
            for _ in range(n_sub):
                f = np.array([fn(x[None, :])[0] for fn in drift_fns])
                if deterministic:
                    x = x + f * dt
                else:
                    g = np.array([fn(x[None, :])[0] for fn in diffusion_fns])
                    x = x + f * dt + g * rng.normal(0.0, sd, size=N)
            if not np.all(np.isfinite(x)):
                ok = False
                break
            out[k + 1] = x
        if ok:
            paths.append(out)
    if not paths:
        raise RuntimeError("every generative sample path blew up")
    stacked = np.stack(paths)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0) if not deterministic else np.zeros_like(mean)
    blowup_flagged = len(paths) * 2 < n_paths
    return mean, std, blowup_flagged
