import itertools

import numpy as np
import pytest

from sdegp import expr
from sdegp.kmsr import (
    BinningError,
    KMGrids,
    SparseModel,
    grids_for,
    km_estimate,
    kmsr_discover,
    monomial_exponents,
    polynomial_library,
    sparse_fit,
)
from sdegp.simulate import generate_splits, make_environment


class TestLibrary:
    def test_monomial_count(self):
        # C(N+d, d) monomials up to total degree d
        import math

        for n, d in [(1, 3), (2, 3), (3, 2), (10, 2)]:
            assert len(monomial_exponents(n, d)) == math.comb(n + d, d)
        assert len(monomial_exponents(10, 2)) == 66

    def test_graded_order_starts_with_constant(self):
        exps = monomial_exponents(2, 2)
        assert exps[0] == (0, 0)
        degrees = [sum(e) for e in exps]
        assert degrees == sorted(degrees)

    def test_library_evaluates_monomials(self):
        X = np.array([[2.0, 3.0], [-1.0, 0.5]])
        theta, exps = polynomial_library(X, 2, 2)
        for j, e in enumerate(exps):
            expected = X[:, 0] ** e[0] * X[:, 1] ** e[1]
            np.testing.assert_allclose(theta[:, j], expected)


class TestBinning:
    def test_brute_force_bin_oracle(self):
        env = make_environment("double_well_additive", T=2.0)
        opt, _, _ = generate_splits(env, 3)
        b = 10
        binned = km_estimate(opt, 0, b, 1)

        # independent recomputation with a plain dict-of-lists
        tau = opt.tau
        lo = min(t.states[:-1, 0].min() for t in opt.trajectories)
        hi = max(t.states[:-1, 0].max() for t in opt.trajectories)
        width = (hi - lo) / b
        cells = {}
        for traj in opt.trajectories:
            s = traj.states[:, 0]
            for k in range(len(s) - 1):
                i = min(int((s[k] - lo) / width), b - 1)
                cells.setdefault(i, []).append(s[k + 1] - s[k])
        expected = {
            lo + (i + 0.5) * width: (
                np.mean([d / tau for d in dxs]),
                np.sqrt(np.mean([d * d / tau for d in dxs])),
            )
            for i, dxs in cells.items()
            if len(dxs) > 1
        }
        assert len(binned.centers) == len(expected)
        for center, d1, d2 in zip(binned.centers[:, 0], binned.drift, binned.diffusion):
            ed1, ed2 = expected[min(expected, key=lambda c: abs(c - center))]
            assert d1 == pytest.approx(ed1, rel=1e-10)
            assert d2 == pytest.approx(ed2, rel=1e-10)

    def test_ou_recovers_drift_slope_and_diffusion(self):
        # dx = -x dt + 0.5 dW: D1(x) ~ -x, D2(x) ~ 0.5
        from test_simulate import linear_env
        from sdegp.simulate import Dataset, integrate_sde
        from dataclasses import replace

        env = linear_env(a=-1.0, b=0.5, T=100.0, tau=0.01)
        env = replace(env, init_sampler=lambda rng: rng.normal(size=1))
        trajs = [
            integrate_sde(env, np.random.default_rng(i)) for i in range(4)
        ]
        ds = Dataset(trajs, "optimization", env)
        binned = km_estimate(ds, 0, 10, 50)
        x = binned.centers[:, 0]
        # count-weighted slope: tail bins hold few, noisy samples
        slope = np.polyfit(x, binned.drift, 1, w=np.sqrt(binned.counts))[0]
        assert slope == pytest.approx(-1.0, abs=0.1)
        assert np.median(binned.diffusion) == pytest.approx(0.5, rel=0.1)

    def test_count_filter_raises_when_nothing_survives(self):
        env = make_environment("double_well_additive", T=0.1)
        opt, _, _ = generate_splits(env, 1)
        with pytest.raises(BinningError):
            km_estimate(opt, 0, 1000, 10_000)

    def test_degenerate_constant_dimension(self):
        # a variable pinned to one value must not divide by zero
        from test_simulate import linear_env
        from sdegp.simulate import Dataset, Trajectory

        env = linear_env()
        states = np.zeros((101, 1))
        traj = Trajectory(np.arange(101) * 0.01, states, (0,))
        ds = Dataset([traj], "optimization", env)
        binned = km_estimate(ds, 0, 10, 5)
        assert len(binned.centers) == 1
        assert binned.drift[0] == 0.0


class TestSparseFit:
    def test_unregularized_matches_least_squares(self):
        rng = np.random.default_rng(0)
        theta = rng.normal(size=(60, 4))
        c_true = np.array([1.5, -2.0, 0.0, 0.7])
        y = theta @ c_true
        model = sparse_fit(theta, y, alpha=0.0, hard_threshold=0.0)
        c_ls, *_ = np.linalg.lstsq(theta, y, rcond=None)
        got = np.zeros(4)
        for exps, c in zip(model.exponents, model.coefficients):
            got[exps[0]] = c
        np.testing.assert_allclose(got, c_ls, atol=1e-8)

    def test_satisfies_lasso_optimality_conditions(self):
        # the lasso is convex, so the subgradient conditions at the
        # returned point certify the global optimum exactly:
        # active j: theta_j'(y - theta c) = alpha * sign(c_j)
        # zero j:  |theta_j'(y - theta c)| <= alpha
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(20, 80))
            p = int(rng.integers(2, 7))
            theta = rng.normal(size=(n, p))
            y = theta @ rng.normal(size=p) + rng.normal(size=n) * 0.05
            alpha = float(rng.uniform(0.05, 2.0))
            model = sparse_fit(theta, y, alpha=alpha, hard_threshold=0.0)
            # undo the internal unit-RMS column standardization
            scale = np.sqrt(np.einsum("ij,ij->j", theta, theta) / n)
            c = np.zeros(p)
            for exps, coef in zip(model.exponents, model.coefficients):
                c[exps[0]] = coef * scale[exps[0]]
            ts = theta / scale
            g = ts.T @ (y - ts @ c)
            for j in range(p):
                if c[j] != 0.0:
                    assert g[j] == pytest.approx(alpha * np.sign(c[j]), abs=1e-5)
                else:
                    assert abs(g[j]) <= alpha + 1e-5

    def test_exact_sparse_recovery(self):
        # y = 2x - 0.5x^3 from a degree-3 1-D library
        x = np.linspace(-2, 2, 200)[:, None]
        theta, exps = polynomial_library(x, 1, 3)
        y = 2.0 * x[:, 0] - 0.5 * x[:, 0] ** 3
        model = sparse_fit(theta, y, alpha=0.01, hard_threshold=0.1, exponents=exps)
        assert model.support() == frozenset({((0, 1),), ((0, 3),)})
        by = {e: c for e, c in zip(model.exponents, model.coefficients)}
        assert by[(1,)] == pytest.approx(2.0, abs=0.02)
        assert by[(3,)] == pytest.approx(-0.5, abs=0.02)

    def test_over_regularization_gives_zero_model(self):
        x = np.linspace(-1, 1, 50)[:, None]
        theta, exps = polynomial_library(x, 1, 3)
        y = 0.01 * x[:, 0]
        model = sparse_fit(theta, y, alpha=1e4, hard_threshold=10.0, exponents=exps)
        assert model.exponents == []
        np.testing.assert_array_equal(model.predict(x), np.zeros(50))

    def test_pruning_reaches_fixpoint(self):
        # surviving coefficients all clear the threshold, on 100 problems
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(20, 60))
            p = int(rng.integers(2, 8))
            theta = rng.normal(size=(n, p))
            y = theta @ rng.normal(size=p) + rng.normal(size=n) * 0.1
            lam = float(rng.uniform(0.01, 0.5))
            model = sparse_fit(theta, y, alpha=0.05, hard_threshold=lam)
            assert np.all(np.abs(model.coefficients) >= lam)

    def test_weights_shift_the_fit(self):
        theta = np.array([[1.0], [1.0]])
        y = np.array([0.0, 10.0])
        w_lo = sparse_fit(theta, y, 0.0, 0.0, weights=np.array([9.0, 1.0]))
        w_hi = sparse_fit(theta, y, 0.0, 0.0, weights=np.array([1.0, 9.0]))
        assert w_lo.coefficients[0] == pytest.approx(1.0)
        assert w_hi.coefficients[0] == pytest.approx(9.0)

    def test_model_to_tree_agrees_with_predict(self):
        x = np.linspace(-2, 2, 7)[:, None]
        theta, exps = polynomial_library(x, 1, 3)
        y = 1.0 + 2.0 * x[:, 0] ** 2
        model = sparse_fit(theta, y, 0.01, 0.05, exponents=exps)
        tree = model.to_tree()
        np.testing.assert_allclose(
            expr.eval_tree(tree, x), model.predict(x), rtol=1e-12
        )


class TestDiscovery:
    def test_double_well_grid_search_recovers_structure(self):
        env = make_environment("double_well_additive", T=20.0)
        opt, val, _ = generate_splits(env, 0)
        result = kmsr_discover(opt, val, 0, grids_for(env.name))
        support = result.drift_model.support()
        assert ((0, 1),) in support and ((0, 3),) in support
        # diffusion is the constant 0.5
        assert result.diffusion_model.support() <= frozenset({()})
        if result.diffusion_model.exponents:
            assert abs(result.diffusion_model.coefficients[0]) == pytest.approx(
                0.5, rel=0.2
            )
        assert set(result.drift_params) == {"b", "beta", "alpha", "lambda"}
        assert len(result.records) > 0

    def test_grids_for_known_and_unknown(self):
        assert grids_for("double_well_nonlinear").degree == 3
        assert grids_for("lorenz96_10").bins == (4,)
        with pytest.raises(KeyError):
            grids_for("fisher_kpp")
