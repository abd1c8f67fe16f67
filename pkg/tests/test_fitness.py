import math

import numpy as np
import pytest

from sdegp.evolution import Individual
from sdegp.expr import parse
from sdegp.fitness import (
    PENALTY,
    FitnessContext,
    make_fitness,
    mse_ode,
    mse_ode_multistep,
    nll_sde,
    nll_sde_multistep,
    penalized,
)


def ctx_from_arrays(tau, feats, xp, xn, L=1):
    return FitnessContext(
        tau=tau,
        features=np.asarray(feats, float),
        x_prev=np.asarray(xp, float),
        x_next=np.asarray(xn, float),
        L=L,
    )


def hand_nll(x_next, mu, sig2):
    return sum(
        0.5 * math.log(2 * math.pi * s) + (x - m) ** 2 / (2 * s)
        for x, m, s in zip(x_next, mu, sig2)
    )


class TestSingleStep:
    def test_nll_matches_hand_computation(self):
        # f(x) = 2x, g(x) = 0.5, tau = 0.1, two transitions
        tau = 0.1
        xp = [1.0, -0.5]
        xn = [1.3, -0.6]
        ctx = ctx_from_arrays(tau, [[1.0], [-0.5]], xp, xn)
        drift = parse("2*x")
        diff = parse("0.5")
        mu = [x + tau * 2 * x for x in xp]
        sig2 = [tau * 0.25] * 2
        expected = hand_nll(xn, mu, sig2)
        assert nll_sde(drift, diff, ctx) == pytest.approx(expected, abs=1e-12)

    def test_mse_matches_hand_computation(self):
        tau = 0.1
        ctx = ctx_from_arrays(tau, [[1.0], [-0.5]], [1.0, -0.5], [1.3, -0.6])
        drift = parse("2*x")
        expected = (1.3 - 1.2) ** 2 + (-0.6 - (-0.6)) ** 2
        assert mse_ode(drift, ctx) == pytest.approx(expected, abs=1e-12)

    def test_diffusion_sign_is_irrelevant(self):
        ctx = ctx_from_arrays(0.1, [[1.0], [2.0]], [1.0, 2.0], [1.1, 2.2])
        drift = parse("x")
        assert nll_sde(drift, parse("0.5"), ctx) == nll_sde(
            drift, parse("-0.5"), ctx
        )

    def test_zero_diffusion_hits_variance_floor(self):
        ctx = ctx_from_arrays(0.1, [[1.0]], [1.0], [1.2])
        v = nll_sde(parse("x"), parse("0"), ctx)
        # floor of 1e-12: finite but astronomically large residual term
        assert np.isfinite(v)
        assert v > 1e9

    def test_perfect_fit_beats_everything_nearby(self):
        # data generated exactly as mu = x + tau*f(x): residuals vanish
        tau = 0.01
        xp = np.linspace(-1, 1, 20)
        xn = xp + tau * (xp - xp ** 3)
        ctx = ctx_from_arrays(tau, xp[:, None], xp, xn)
        exact = mse_ode(parse("x + -1*x*x*x"), ctx)
        assert exact == pytest.approx(0.0, abs=1e-24)
        assert mse_ode(parse("x"), ctx) > exact

    def test_nll_additivity_over_transitions(self):
        rng = np.random.default_rng(0)
        xp = rng.normal(size=10)
        xn = xp + rng.normal(size=10) * 0.1
        drift, diff = parse("x"), parse("0.3")
        full = nll_sde(drift, diff, ctx_from_arrays(0.1, xp[:, None], xp, xn))
        parts = sum(
            nll_sde(
                drift, diff, ctx_from_arrays(0.1, xp[i : i + 1, None], xp[i : i + 1], xn[i : i + 1])
            )
            for i in range(10)
        )
        assert full == pytest.approx(parts, rel=1e-12)


class TestMultiStep:
    def sys_ctx(self, tau, Xp, Xn, L):
        return FitnessContext(
            tau=tau, X_prev=np.asarray(Xp, float), X_next=np.asarray(Xn, float), L=L
        )

    def test_L1_reduces_to_single_step(self):
        rng = np.random.default_rng(1)
        Xp = rng.normal(size=(15, 1))
        Xn = Xp + rng.normal(size=(15, 1)) * 0.05
        ctx1 = self.sys_ctx(0.1, Xp, Xn, L=1)
        ctx_v = ctx_from_arrays(0.1, Xp, Xp[:, 0], Xn[:, 0])
        drift, diff = parse("2*x"), parse("0.4")
        assert nll_sde_multistep([drift], [diff], ctx1) == nll_sde(
            drift, diff, ctx_v
        )
        assert mse_ode_multistep([drift], ctx1) == mse_ode(drift, ctx_v)

    def test_substep_linear_flow_oracle(self):
        # f(x) = -x, tau = 0.5, L = 5: mu = (1 - 0.1)^5 x = 0.59049 x
        Xp = np.array([[1.0], [2.0], [-3.0]])
        Xn = np.zeros_like(Xp)
        ctx = self.sys_ctx(0.5, Xp, Xn, L=5)
        expected_mu = 0.9 ** 5 * Xp
        got = mse_ode_multistep([parse("-1*x")], ctx)
        assert got == pytest.approx(float(np.sum(expected_mu ** 2)), rel=1e-12)

    def test_diffusion_averaged_along_substep_path(self):
        # g(x) = x with f(x) = -x: sigma = sqrt(tau)/L * sum of 0.9^l * x0
        tau, L = 0.5, 5
        x0 = 2.0
        Xp = np.array([[x0]])
        mu = 0.9 ** L * x0
        Xn = np.array([[mu + 0.1]])
        sig = math.sqrt(tau) / L * sum(0.9 ** l * x0 for l in range(L))
        expected = hand_nll([mu + 0.1], [mu], [sig * sig])
        got = nll_sde_multistep([parse("-1*x")], [parse("x")], self.sys_ctx(tau, Xp, Xn, L))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_substep_blowup_returns_penalty(self):
        Xp = np.array([[50.0]])
        ctx = self.sys_ctx(1.0, Xp, Xp, L=50)
        with np.errstate(all="ignore"):
            assert mse_ode_multistep([parse("x*x*x")], ctx) == PENALTY


class TestPenalty:
    def test_penalized_finite_passthrough(self):
        assert penalized(3.5, 7) == 3.5

    def test_penalized_orders_by_complexity(self):
        assert penalized(np.inf, 3) < penalized(np.nan, 9)
        assert penalized(np.inf, 3) == PENALTY + 3

    def test_penalty_dominates_any_valid_fit(self):
        ctx = ctx_from_arrays(0.1, [[1.0]], [1.0], [5.0])
        terrible_but_finite = nll_sde(parse("-100"), parse("0.001"), ctx)
        assert terrible_but_finite < PENALTY


class TestMakeFitness:
    def setup_method(self):
        rng = np.random.default_rng(2)
        xp = rng.normal(size=8)
        xn = xp + 0.01 * xp + rng.normal(size=8) * 0.03
        self.ctx = ctx_from_arrays(0.01, xp[:, None], xp, xn)
        self.sys = FitnessContext(
            tau=0.01, X_prev=xp[:, None], X_next=xn[:, None], L=5
        )

    def test_gp_sde_fitness(self):
        ind = Individual(trees=[parse("x"), parse("0.3")], roles=("drift_0", "diffusion_0"))
        fn = make_fitness("gp-sde", self.ctx)
        assert fn(ind) == pytest.approx(
            nll_sde(ind.trees[0], ind.trees[1], self.ctx)
        )

    def test_gp_ode_fitness(self):
        ind = Individual(trees=[parse("x")], roles=("drift_0",))
        fn = make_fitness("gp-ode", self.ctx)
        assert fn(ind) == pytest.approx(mse_ode(ind.trees[0], self.ctx))

    def test_gp_sde_ms_splits_tree_list(self):
        ind = Individual(
            trees=[parse("x"), parse("0.3")], roles=("drift_0", "diffusion_0")
        )
        fn = make_fitness("gp-sde-ms", self.sys)
        assert fn(ind) == pytest.approx(
            nll_sde_multistep([ind.trees[0]], [ind.trees[1]], self.sys)
        )

    def test_invalid_individual_gets_complexity_tiebreak(self):
        small = Individual(trees=[parse("x*x*x")], roles=("drift_0",))
        big = Individual(trees=[parse("x*x*x*x*x*x*x")], roles=("drift_0",))
        Xp = np.array([[1e200]])
        ctx = FitnessContext(tau=1.0, X_prev=Xp, X_next=Xp, L=2)
        fn = make_fitness("gp-ode-ms", ctx)
        with np.errstate(all="ignore"):
            assert PENALTY <= fn(small) < fn(big)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            make_fitness("gp-magic", self.ctx)
