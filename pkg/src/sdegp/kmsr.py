"""Kramers-Moyal binned coefficient estimation followed by iterated
L1-regularized sparse regression with hard thresholding, plus the
hyperparameter grid search used for the baseline comparisons.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .expr import ExprTree


class BinningError(RuntimeError):
    """No bin survived the count filter."""


@dataclass(frozen=True)
class KMConfig:
    bins_per_dim: int = 25       # b
    min_count: int = 10          # beta
    l1_strength: float = 0.01    # alpha
    hard_threshold: float = 0.1  # lambda
    degree: int = 3              # d

    def __post_init__(self):
        if self.bins_per_dim < 1 or self.min_count < 1 or self.degree < 1:
            raise ValueError("b, beta and d must be >= 1")
        if self.l1_strength < 0 or self.hard_threshold < 0:
            raise ValueError("alpha and lambda must be >= 0")


@dataclass
class BinnedCoefficients:
    centers: np.ndarray  # (R, N) bin-center vectors
    drift: np.ndarray    # (R,) averaged D1
    diffusion: np.ndarray  # (R,) averaged D2 (sqrt of mean squared rate)
    counts: np.ndarray   # (R,)


@dataclass
class SparseModel:
    """Surviving monomials (exponent tuples over N variables) with their
    coefficients; an empty basis is the zero function."""

    exponents: list
    coefficients: np.ndarray
    n_vars: int

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[0])
        for exps, c in zip(self.exponents, self.coefficients):
            term = np.full(X.shape[0], c)
            for i, e in enumerate(exps):
                if e:
                    term = term * X[:, i] ** e
            out += term
        return out

    def to_tree(self):
        """Equivalent ExprTree (sum of coefficient * monomial products)."""
        tree = None
        for exps, c in zip(self.exponents, self.coefficients):
            term = ExprTree.constant(c)
            for i, e in enumerate(exps):
                for _ in range(e):
                    term = ExprTree.mul(term, ExprTree.variable(i))
            tree = term if tree is None else ExprTree.add(tree, term)
        return tree if tree is not None else ExprTree.constant(0.0)

    def support(self):
        """Monomial keys in the canonical-polynomial convention."""
        keys = set()
        for exps in self.exponents:
            keys.add(tuple((i, e) for i, e in enumerate(exps) if e))
        return frozenset(keys)


def _transition_rates(dataset, var_index):
    """Raw per-transition estimates d1 = dx/tau and d2' = dx^2/tau, with
    the conditioning states x(t_{k-1})."""
    tau = dataset.tau
    Xp, d1, d2 = [], [], []
    for traj in dataset.trajectories:
        s = traj.states
        dx = s[1:, var_index] - s[:-1, var_index]
        Xp.append(s[:-1])
        d1.append(dx / tau)
        d2.append(dx * dx / tau)
    return np.concatenate(Xp), np.concatenate(d1), np.concatenate(d2)


def km_estimate(dataset, var_index, bins_per_dim, min_count):
    """Binned drift/diffusion coefficient estimates.

    The grid spans the observed min/max per dimension with b half-open
    bins each (top edge inclusive); retained bins need count > beta.
    Occupied bins are tracked sparsely, so high-dimensional grids cost
    memory only for bins that actually hold data.
    """
    X, d1, d2 = _transition_rates(dataset, var_index)
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    width = np.where(hi > lo, (hi - lo) / bins_per_dim, 1.0)
    idx = np.floor((X - lo) / width).astype(np.int64)
    np.clip(idx, 0, bins_per_dim - 1, out=idx)

    uniq, inverse, counts = np.unique(
        idx, axis=0, return_inverse=True, return_counts=True
    )
    keep = counts > min_count
    if not np.any(keep):
        raise BinningError(
            f"no data survived binning with b={bins_per_dim}, beta={min_count}"
        )
    sum_d1 = np.bincount(inverse, weights=d1, minlength=len(uniq))
    sum_d2 = np.bincount(inverse, weights=d2, minlength=len(uniq))
    centers = lo + (uniq[keep] + 0.5) * width
    n = counts[keep].astype(float)
    D1 = sum_d1[keep] / n
    D2 = np.sqrt(np.maximum(sum_d2[keep] / n, 0.0))
    return BinnedCoefficients(centers, D1, D2, counts[keep])


def monomial_exponents(n_vars, degree):
    """All exponent tuples with total degree <= degree, graded-lex order
    (ascending total degree, then lexicographic)."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), total):
            exps = [0] * n_vars
            for i in combo:
                exps[i] += 1
            out.append(tuple(exps))
    # combinations_with_replacement already yields lexicographic variable
    # picks; normalize ordering on the exponent tuples themselves
    out = sorted(set(out), key=lambda e: (sum(e), tuple(-x for x in e)))
    return out


def polynomial_library(points, n_vars, degree):
    """Design matrix of all monomials up to the given total degree.

    Returns (Theta, exponents); Theta[:, j] evaluates exponents[j] on
    the points. Column order is graded-lexicographic.
    """
    points = np.asarray(points, dtype=float)
    exponents = monomial_exponents(n_vars, degree)
    cols = []
    for exps in exponents:
        col = np.ones(points.shape[0])
        for i, e in enumerate(exps):
            if e:
                col = col * points[:, i] ** e
        cols.append(col)
    return np.stack(cols, axis=1), exponents


def _coordinate_descent(theta, y, alpha, weights, tol=1e-8, max_sweeps=10_000):
    """Cyclic coordinate descent for
    min_c 0.5 * sum_m w_m (y_m - theta_m c)^2 + alpha * ||c||_1."""
    n, p = theta.shape
    w = weights
    wtheta = theta * w[:, None]
    col_sq = np.einsum("ij,ij->j", wtheta, theta)  # sum w theta_j^2
    c = np.zeros(p)
    r = y.copy()  # residual y - theta c
    for _ in range(max_sweeps):
        max_change = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            rho = wtheta[:, j] @ r + col_sq[j] * c[j]
            new = np.sign(rho) * max(abs(rho) - alpha, 0.0) / col_sq[j]
            delta = new - c[j]
            if delta != 0.0:
                r -= delta * theta[:, j]
                c[j] = new
                max_change = max(max_change, abs(delta))
        if max_change < tol:
            break
    return c


def sparse_fit(theta, y, alpha, hard_threshold, exponents=None, weights=None):
    """L1-regularized fit with iterated hard-threshold pruning.

    Columns are standardized to unit weighted RMS inside the solve so a
    single alpha is comparable across columns; the hard threshold
    applies to the unscaled output coefficients. Pruning and refitting
    iterate to a fixpoint.
    """
    theta = np.asarray(theta, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = theta.shape
    if len(y) != n or n < 1:
        raise ValueError("rows(theta) must equal len(y) >= 1")
    if exponents is None:
        exponents = [(j,) for j in range(p)]
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        w = w * (n / w.sum())

    active = list(range(p))
    while True:
        sub = theta[:, active]
        scale = np.sqrt(np.einsum("ij,ij->j", sub * w[:, None], sub) / n)
        scale[scale == 0.0] = 1.0
        c_scaled = _coordinate_descent(sub / scale[None, :], y, alpha, w)
        c = c_scaled / scale
        keep = np.abs(c) >= hard_threshold if hard_threshold > 0 else np.abs(c) > 0
        if np.all(keep):
            break
        active = [a for a, k in zip(active, keep) if k]
        if not active:
            n_vars = len(exponents[0])
            return SparseModel([], np.zeros(0), n_vars)
        c = c[keep]
    n_vars = len(exponents[0])
    return SparseModel([exponents[a] for a in active], c, n_vars)


# ---------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class KMGrids:
    bins: tuple
    min_counts: tuple
    alphas: tuple
    thresholds: tuple
    degree: int


# hyperparameter grids per environment family
GRIDS = {
    "double_well": KMGrids((5, 10, 25, 50, 100), (1, 10, 20), (0.001, 0.01, 0.1), (0.05, 0.1, 0.2), 3),
    "van_der_pol": KMGrids((5, 10, 25, 50, 100), (1, 10, 20), (0.001, 0.01, 0.1), (0.05, 0.1, 0.2), 3),
    "rossler": KMGrids((5, 10, 25), (1, 10, 20), (0.001, 0.01, 0.1), (0.05, 0.1, 0.2), 2),
    "lorenz96_5": KMGrids((5, 10, 15), (1, 10, 20), (0.001, 0.01, 0.1), (0.05, 0.1, 0.2), 2),
    "lorenz96_10": KMGrids((4,), (1, 10, 20), (0.001, 0.01, 0.1), (0.05, 0.1, 0.2), 2),
    "lorenz96_20": KMGrids((2,), (1, 10, 20), (0.001, 0.01, 0.1), (0.05, 0.1, 0.2), 2),
    "lotka_volterra": KMGrids((5, 10, 25, 50, 100), (1, 10, 20), (0.001, 0.01, 0.1), (0.05, 0.1, 0.2), 3),
}


def grids_for(env_name):
    for key, grids in GRIDS.items():
        if env_name.startswith(key):
            return grids
    raise KeyError(f"no hyperparameter grids for environment {env_name!r}")


@dataclass
class GridRecord:
    component: str
    b: int
    beta: int
    alpha: float
    threshold: float
    validation_mse: float
    model: SparseModel


@dataclass
class KMSRResult:
    drift_model: SparseModel
    diffusion_model: SparseModel
    drift_params: dict
    diffusion_params: dict
    records: list


def _validation_mse(model, target_fn, X, absolute=False):
    truth = target_fn(X)
    pred = model.predict(X)
    if absolute:
        truth, pred = np.abs(truth), np.abs(pred)
    return float(np.mean((truth - pred) ** 2))


def kmsr_discover(opt_dataset, val_dataset, var_index, grids, env=None):
    """Full grid search: KM binning per (b, beta), sparse regression per
    (alpha, lambda), each candidate scored by ground-truth MSE on the
    validation split; the argmin per component wins, ties broken by
    lexicographic hyperparameter order."""
    env = env if env is not None else opt_dataset.env
    truth_f = env.truth_drift_fn(var_index)
    truth_g = env.truth_diffusion_fn(var_index)
    X_val = val_dataset.feature_matrix()
    n_vars = env.feature_count

    records = []
    best = {"drift": None, "diffusion": None}
    any_binned = False
    for b in grids.bins:
        for beta in grids.min_counts:
            try:
                binned = km_estimate(opt_dataset, var_index, b, beta)
            except BinningError:
                continue
            any_binned = True
            theta, exponents = polynomial_library(binned.centers, n_vars, grids.degree)
            w = binned.counts.astype(float)
            for alpha in grids.alphas:
                for lam in grids.thresholds:
                    for component, target, truth_fn, absolute in (
                        ("drift", binned.drift, truth_f, False),
                        ("diffusion", binned.diffusion, truth_g, True),
                    ):
                        model = sparse_fit(
                            theta, target, alpha, lam, exponents=exponents, weights=w
                        )
                        mse = _validation_mse(model, truth_fn, X_val, absolute)
                        rec = GridRecord(component, b, beta, alpha, lam, mse, model)
                        records.append(rec)
                        cur = best[component]
                        if cur is None or mse < cur.validation_mse:
                            best[component] = rec
    if not any_binned:
        raise BinningError(
            "every (b, beta) candidate failed binning for "
            f"environment {env.name}, variable {var_index}"
        )

    def params(rec):
        return {"b": rec.b, "beta": rec.beta, "alpha": rec.alpha, "lambda": rec.threshold}

    return KMSRResult(
        drift_model=best["drift"].model,
        diffusion_model=best["diffusion"].model,
        drift_params=params(best["drift"]),
        diffusion_params=params(best["diffusion"]),
        records=records,
    )
