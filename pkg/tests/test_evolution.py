import math

import numpy as np
import pytest

from sdegp import expr
from sdegp.evolution import (
    GPConfig,
    Individual,
    crossover,
    evolve,
    init_population,
    load_checkpoint,
    mutate,
    nsga2_rank,
    optimize_constants,
    pareto_front,
    roles_for,
    tournament_select,
)
from sdegp.expr import parse


def tiny_cfg(**kw):
    base = dict(
        population_size=40,
        generations=3,
        max_depth=3,
        max_nodes=15,
        opt_subset=8,
        opt_iters=3,
        step_size=0.1,
        subpopulation_count=4,
    )
    base.update(kw)
    return GPConfig(**base)


def dominates(p, q):
    return p[0] <= q[0] and p[1] <= q[1] and p != q


def brute_force_fronts(points):
    """Peel non-dominated layers by direct O(n^2) comparison."""
    remaining = list(range(len(points)))
    front = [None] * len(points)
    level = 0
    while remaining:
        layer = [
            i
            for i in remaining
            if not any(dominates(points[j], points[i]) for j in remaining if j != i)
        ]
        for i in layer:
            front[i] = level
        remaining = [i for i in remaining if i not in layer]
        level += 1
    return front


class TestNSGA2:
    def test_fronts_match_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 25))
            pts = [
                (float(rng.integers(0, 6)), float(rng.integers(0, 6)))
                for _ in range(n)
            ]
            got = [f for f, _ in nsga2_rank(pts)]
            assert got == brute_force_fronts(pts)

    def test_boundary_points_infinite_crowding(self):
        pts = [(0.0, 5.0), (1.0, 4.0), (2.0, 3.0), (3.0, 2.0), (4.0, 1.0)]
        ranks = nsga2_rank(pts)
        assert all(f == 0 for f, _ in ranks)
        crowds = [c for _, c in ranks]
        assert crowds[0] == math.inf and crowds[-1] == math.inf
        assert all(np.isfinite(crowds[i]) for i in (1, 2, 3))

    def test_interior_crowding_value(self):
        pts = [(0.0, 4.0), (1.0, 2.0), (4.0, 0.0)]
        ranks = nsga2_rank(pts)
        # middle point: (4-0)/(4-0) + (4-0)/(4-0) = 2
        assert ranks[1][1] == pytest.approx(2.0)

    def test_duplicate_points_share_front(self):
        pts = [(1.0, 1.0)] * 4 + [(2.0, 2.0)]
        ranks = nsga2_rank(pts)
        assert [f for f, _ in ranks] == [0, 0, 0, 0, 1]

    def test_pareto_front_filters_population(self):
        inds = [
            Individual((parse("x"),), ("drift",), fit)
            for fit in (3.0, 1.0, 2.0)
        ]
        # complexity equal, so only the fitness minimum is front 0
        front = pareto_front(inds)
        assert [ind.fitness for ind in front] == [1.0]


class TestTournament:
    def test_selection_probability_of_best(self):
        # with k=2 from n=10 unique ranks, P(best wins) = 1-C(9,2)/C(10,2)
        n, k, trials = 10, 2, 20_000
        sub = list(range(n))
        ranks = [(i, math.inf) for i in range(n)]
        rng = np.random.default_rng(1)
        wins = sum(
            tournament_select(rng, sub, ranks, k) == 0 for _ in range(trials)
        )
        expected = 1 - math.comb(n - 1, k) / math.comb(n, k)
        assert wins / trials == pytest.approx(expected, abs=0.02)

    def test_crowding_breaks_front_ties(self):
        sub = ["a", "b"]
        ranks = [(0, 1.0), (0, 9.0)]
        rng = np.random.default_rng(2)
        # tournament over the whole subpopulation: higher crowding wins
        assert all(
            tournament_select(rng, sub, ranks, 2) == "b" for _ in range(50)
        )

    def test_empty_subpopulation_rejected(self):
        with pytest.raises(ValueError):
            tournament_select(np.random.default_rng(0), [], [], 2)


class TestVariation:
    def make_ind(self, rng, n_trees=2, feature_count=2):
        trees = tuple(
            expr.sample_tree(rng, 3, feature_count) for _ in range(n_trees)
        )
        roles = tuple(f"r{i}" for i in range(n_trees))
        return Individual(trees, roles)

    def test_crossover_respects_size_cap(self):
        cfg = tiny_cfg(max_nodes=9)
        rng = np.random.default_rng(3)
        for _ in range(300):
            a, b = self.make_ind(rng), self.make_ind(rng)
            a = a.with_trees([t if t.size <= 9 else parse("x0") for t in a.trees])
            b = b.with_trees([t if t.size <= 9 else parse("x0") for t in b.trees])
            child = crossover(rng, a, b, cfg, mode="subtree", per_tree_prob=0.9)
            assert all(t.size <= 9 for t in child.trees)
            assert child.roles == a.roles
            assert child.fitness is None

    def test_whole_tree_crossover_swaps_exactly_one(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(4)
        a, b = self.make_ind(rng, n_trees=3), self.make_ind(rng, n_trees=3)
        child = crossover(rng, a, b, cfg, mode="whole-tree")
        from_b = sum(ct is bt for ct, bt in zip(child.trees, b.trees))
        kept = sum(ct is at for ct, at in zip(child.trees, a.trees))
        assert from_b == 1 and kept == 2

    def test_crossover_rejects_role_mismatch(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(5)
        a = Individual((parse("x0"),), ("drift",))
        b = Individual((parse("x0"),), ("diffusion",))
        with pytest.raises(ValueError):
            crossover(rng, a, b, cfg)

    def test_mutation_produces_valid_trees(self):
        cfg = tiny_cfg(max_nodes=11)
        rng = np.random.default_rng(6)
        for _ in range(500):
            ind = self.make_ind(rng)
            ind = ind.with_trees(
                [t if t.size <= 11 else parse("x0") for t in ind.trees]
            )
            child = mutate(rng, ind, cfg, feature_count=2)
            for t in child.trees:
                assert t.size <= 11
                # structural sanity: evaluation works and round-trips in value
                X = np.array([[0.7, -0.3]])
                v = expr.eval_tree(t, X)
                assert v.shape == (1,)
                back = expr.eval_tree(expr.parse(expr.to_string(t)), X)
                np.testing.assert_allclose(back, v, rtol=1e-9, atol=1e-9)

    def test_mutation_changes_at_least_one_tree(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(7)
        changed = 0
        for _ in range(200):
            ind = self.make_ind(rng)
            child = mutate(rng, ind, cfg, feature_count=2, per_tree_prob=0.0)
            changed += any(
                ct.kinds != it.kinds or ct.values != it.values
                for ct, it in zip(child.trees, ind.trees)
            )
        # a mutation may occasionally be a no-op (e.g. insert at the cap)
        assert changed > 150


class TestConstantOptimization:
    def test_converges_to_quadratic_minimum(self):
        # loss (c-2)^2 via fitness on a single-constant tree
        def fitness(ind):
            c = ind.trees[0].values[0]
            return (c - 2.0) ** 2

        ind = Individual((parse("0.5"),), ("drift",))
        out = optimize_constants(ind, fitness, opt_iters=60, step_size=0.2)
        assert out.trees[0].values[0] == pytest.approx(2.0, abs=0.02)

    def test_never_worse_than_input(self):
        rng = np.random.default_rng(8)

        def fitness(ind):
            cs = [v for t in ind.trees for v in t.values[: len(t.values)]]
            return float(np.sin(np.sum(cs)) * 100 + np.sum(np.square(cs)))

        for _ in range(30):
            tree = expr.sample_tree(rng, 3, 1)
            ind = Individual((tree,), ("drift",))
            before = fitness(ind)
            out = optimize_constants(ind, fitness, opt_iters=5, step_size=0.5)
            assert out.fitness <= before + 1e-12

    def test_no_constants_is_identity(self):
        ind = Individual((parse("x0*x0"),), ("drift",))
        out = optimize_constants(ind, lambda i: 7.0, 10, 0.1)
        assert out.trees == ind.trees
        assert out.fitness == 7.0


class TestEvolve:
    @staticmethod
    def sphere_fitness(ind):
        # minimized when every tree evaluates to 1 at x=0.5
        X = np.full((4, 1), 0.5)
        total = 0.0
        for t in ind.trees:
            v = expr.eval_tree(t, X)
            if not np.all(np.isfinite(v)):
                return 1e12 + ind.complexity
            total += float(np.sum((v - 1.0) ** 2))
        return total

    def test_population_size_invariant_and_progress(self):
        cfg = tiny_cfg(generations=5)
        rng = np.random.default_rng(9)
        res = evolve(cfg, self.sphere_fitness, rng, 1, roles_for("gp-ode", 1))
        assert res.population.size == cfg.population_size
        assert len(res.best_history) == cfg.generations + 1
        # best-so-far is non-increasing
        assert all(
            b2 <= b1 for b1, b2 in zip(res.best_history, res.best_history[1:])
        )
        assert res.best_history[-1] <= res.best_history[0]

    def test_zero_generations_returns_initial_front(self):
        cfg = tiny_cfg(generations=0)
        rng = np.random.default_rng(10)
        res = evolve(cfg, self.sphere_fitness, rng, 1, ("drift",))
        assert len(res.front_history) == 1
        assert all(ind.fitness is not None for ind in res.population.individuals)

    def test_determinism(self):
        cfg = tiny_cfg(generations=3)
        r1 = evolve(cfg, self.sphere_fitness, np.random.default_rng(11), 1, ("drift",))
        r2 = evolve(cfg, self.sphere_fitness, np.random.default_rng(11), 1, ("drift",))
        t1 = [expr.to_string(t) for ind in r1.population.individuals for t in ind.trees]
        t2 = [expr.to_string(t) for ind in r2.population.individuals for t in ind.trees]
        assert t1 == t2
        assert r1.best_history == r2.best_history

    def test_checkpoint_resume_matches_uninterrupted_structure(self, tmp_path):
        cfg = tiny_cfg(generations=4)
        d = tmp_path / "ckpt"
        evolve(cfg, self.sphere_fitness, np.random.default_rng(12), 1, ("drift",), checkpoint_dir=str(d))
        state = load_checkpoint(str(d))
        assert state is not None
        population, fronts, bests, _ = state
        assert population.generation == 4
        # resume with generations extended continues from the checkpoint
        cfg2 = tiny_cfg(generations=6)
        res = evolve(
            cfg2,
            self.sphere_fitness,
            np.random.default_rng(99),
            1,
            ("drift",),
            checkpoint_dir=str(d),
            resume=True,
        )
        assert res.population.generation == 6
        assert res.best_history[: len(bests)] == bests

    def test_init_population_ramped(self):
        cfg = tiny_cfg()
        pop = init_population(cfg, np.random.default_rng(13), 2, ("drift", "diffusion"))
        assert pop.size == cfg.population_size
        assert len(pop.subpopulations) == 4
        depths = {t.depth for ind in pop.individuals for t in ind.trees}
        assert depths >= {2, 3}
        for ind in pop.individuals:
            assert ind.roles == ("drift", "diffusion")
            assert len(ind.trees) == 2


class TestConfig:
    def test_graded_crossover_probabilities(self):
        cfg = tiny_cfg()
        assert cfg.crossover_probs() == pytest.approx(
            [0.9, 0.9 - 0.4 / 3, 0.9 - 0.8 / 3, 0.5]
        )

    def test_single_island(self):
        cfg = tiny_cfg(subpopulation_count=1)
        assert cfg.crossover_probs() == [0.9]

    def test_invalid_partition_rejected(self):
        with pytest.raises(ValueError):
            tiny_cfg(population_size=41)

    def test_roles_for_layouts(self):
        assert roles_for("gp-sde", 3) == ("drift", "diffusion")
        assert roles_for("gp-ode", 3) == ("drift",)
        assert roles_for("gp-sde-ms", 2) == (
            "drift_0",
            "drift_1",
            "diffusion_0",
            "diffusion_1",
        )
        assert roles_for("gp-ode-ms", 2) == ("drift_0", "drift_1")
        with pytest.raises(ValueError):
            roles_for("nope", 1)
