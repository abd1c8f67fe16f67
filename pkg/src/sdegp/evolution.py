"""Multi-tree genetic programming engine.

NSGA-II ranking over (fitness, complexity), tournament selection,
position-matched subtree and whole-tree crossover, five mutation kinds,
ring-migrating subpopulations with graded operator probabilities, and
finite-difference gradient descent on constant leaves.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import expr
from .expr import ExprTree, sample_tree
from .fitness import PENALTY


@dataclass
class GPConfig:
    population_size: int = 500          # p
    generations: int = 50               # g
    max_depth: int = 5                  # m
    max_nodes: int = 15                 # s
    opt_subset: int = 100               # p*
    opt_iters: int = 15                 # g*
    step_size: float = 0.1              # eta
    # island-model knobs; the source protocol leaves these open
    subpopulation_count: int = 4
    migration_interval: int = 5
    migrant_count: int = 2
    tournament_size: int = 5
    crossover_prob_high: float = 0.9
    crossover_prob_low: float = 0.5
    whole_tree_prob: float = 0.2        # share of crossovers swapping whole trees
    elite_cap_fraction: float = 0.25    # elites per subpopulation <= this * size

    def __post_init__(self):
        if self.population_size % self.subpopulation_count:
            raise ValueError("subpopulation_count must divide population_size")
        if self.opt_subset > self.population_size:
            raise ValueError("opt_subset must be <= population_size")
        for p in (
            self.crossover_prob_high,
            self.crossover_prob_low,
            self.whole_tree_prob,
        ):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    def crossover_probs(self):
        """Per-subpopulation crossover probability, linearly graded."""
        n = self.subpopulation_count
        if n == 1:
            return [self.crossover_prob_high]
        hi, lo = self.crossover_prob_high, self.crossover_prob_low
        return [hi + (lo - hi) * i / (n - 1) for i in range(n)]


@dataclass
class Individual:
    trees: tuple
    roles: tuple
    fitness: float = None

    @property
    def complexity(self):
        return sum(t.size for t in self.trees)

    def with_trees(self, trees):
        return Individual(tuple(trees), self.roles, None)

    def to_json_obj(self):
        return {
            "roles": list(self.roles),
            "trees": [t.to_json_obj() for t in self.trees],
            "fitness": self.fitness,
            "complexity": self.complexity,
        }

    @staticmethod
    def from_json_obj(obj):
        trees = tuple(ExprTree.from_json_obj(t) for t in obj["trees"])
        return Individual(trees, tuple(obj["roles"]), obj.get("fitness"))


@dataclass
class Population:
    subpopulations: list
    generation: int = 0

    @property
    def individuals(self):
        return [ind for sub in self.subpopulations for ind in sub]

    @property
    def size(self):
        return sum(len(s) for s in self.subpopulations)


def roles_for(method, n_vars):
    """Tree-role layout of an individual for a run mode."""
    if method == "gp-sde":
        return ("drift", "diffusion")
    if method == "gp-ode":
        return ("drift",)
    if method == "gp-sde-ms":
        return tuple(f"drift_{i}" for i in range(n_vars)) + tuple(
            f"diffusion_{i}" for i in range(n_vars)
        )
    if method == "gp-ode-ms":
        return tuple(f"drift_{i}" for i in range(n_vars))
    raise ValueError(f"unknown method {method!r}")


def init_population(cfg, rng, feature_count, roles):
    """p individuals with ramped half-and-half initialization over
    depths 2..m, evenly partitioned into subpopulations."""
    size = cfg.population_size
    depths = list(range(2, cfg.max_depth + 1)) or [1]
    individuals = []
    for i in range(size):
        depth = depths[i % len(depths)]
        method = "full" if (i // len(depths)) % 2 == 0 else "grow"
        trees = tuple(
            sample_tree(rng, depth, feature_count, method=method)
            for _ in roles
        )
        individuals.append(Individual(trees, tuple(roles)))
    per = size // cfg.subpopulation_count
    subs = [individuals[i * per : (i + 1) * per] for i in range(cfg.subpopulation_count)]
    return Population(subs, 0)


# ---------------------------------------------------------------------
# NSGA-II
# ---------------------------------------------------------------------

def nsga2_rank(points):
    """Fast non-dominated sort plus crowding distance.

    points: sequence of (fitness, complexity), both minimized. Returns
    a list of (front_index, crowding_distance) aligned with the input;
    boundary points of each front get infinite crowding distance.
    """
    n = len(points)
    pts = [(float(f), float(c)) for f, c in points]
    dominated_by = [[] for _ in range(n)]
    domination_count = [0] * n
    fronts = [[]]
    for i in range(n):
        fi, ci = pts[i]
        for j in range(i + 1, n):
            fj, cj = pts[j]
            if (fi <= fj and ci <= cj) and (fi < fj or ci < cj):
                dominated_by[i].append(j)
                domination_count[j] += 1
            elif (fj <= fi and cj <= ci) and (fj < fi or cj < ci):
                dominated_by[j].append(i)
                domination_count[i] += 1
    for i in range(n):
        if domination_count[i] == 0:
            fronts[0].append(i)
    front_index = [0] * n
    k = 0
    while fronts[k]:
        nxt = []
        for i in fronts[k]:
            front_index[i] = k
            for j in dominated_by[i]:
                domination_count[j] -= 1
                if domination_count[j] == 0:
                    nxt.append(j)
        fronts.append(nxt)
        k += 1
    fronts.pop()

    crowding = [0.0] * n
    for front in fronts:
        if len(front) <= 2:
            for i in front:
                crowding[i] = math.inf
            continue
        for obj in range(2):
            order = sorted(front, key=lambda i: pts[i][obj])
            lo = pts[order[0]][obj]
            hi = pts[order[-1]][obj]
            crowding[order[0]] = math.inf
            crowding[order[-1]] = math.inf
            if hi == lo:
                continue
            for a in range(1, len(order) - 1):
                i = order[a]
                if crowding[i] != math.inf:
                    crowding[i] += (pts[order[a + 1]][obj] - pts[order[a - 1]][obj]) / (
                        hi - lo
                    )
    return list(zip(front_index, crowding))


def tournament_select(rng, subpopulation, ranks, tournament_size):
    """Winner has lexicographically best (front asc, crowding desc);
    ties broken uniformly at random via a random pre-shuffle key."""
    n = len(subpopulation)
    if n == 0:
        raise ValueError("empty subpopulation")
    k = min(tournament_size, n)
    contestants = rng.choice(n, size=k, replace=False)
    best = None
    best_key = None
    for i in contestants:
        front, crowd = ranks[i]
        key = (front, -crowd, rng.random())
        if best_key is None or key < best_key:
            best_key = key
            best = i
    return subpopulation[best]


# ---------------------------------------------------------------------
# reproduction
# ---------------------------------------------------------------------

def _swap_subtrees(rng, tree_a, tree_b, max_nodes):
    """tree_a with a uniformly chosen subtree replaced by a uniformly
    chosen subtree of tree_b; retries the picks up to 8 times on size
    violations, then returns tree_a unchanged."""
    for _ in range(8):
        pos_a = int(rng.integers(tree_a.size))
        pos_b = int(rng.integers(tree_b.size))
        child = tree_a.replace_subtree(pos_a, tree_b.subtree(pos_b))
        if child.size <= max_nodes:
            return child
    return tree_a


def crossover(rng, parent_a, parent_b, cfg, mode="subtree", per_tree_prob=1.0):
    """Child from position-matched recombination of two parents.

    subtree mode swaps uniformly chosen subtrees per tree position with
    probability per_tree_prob; whole-tree mode replaces one uniformly
    chosen position with the partner's entire tree.
    """
    if parent_a.roles != parent_b.roles:
        raise ValueError("parents have mismatched tree-role layouts")
    trees = list(parent_a.trees)
    if mode == "whole-tree":
        pos = int(rng.integers(len(trees)))
        trees[pos] = parent_b.trees[pos]
    elif mode == "subtree":
        changed = False
        for i in range(len(trees)):
            if rng.random() < per_tree_prob:
                trees[i] = _swap_subtrees(rng, trees[i], parent_b.trees[i], cfg.max_nodes)
                changed = True
        if not changed:
            i = int(rng.integers(len(trees)))
            trees[i] = _swap_subtrees(rng, trees[i], parent_b.trees[i], cfg.max_nodes)
    else:
        raise ValueError(f"unknown crossover mode {mode!r}")
    return parent_a.with_trees(trees)


_MUTATION_KINDS = (
    "operator_swap",
    "leaf_replace",
    "insert",
    "delete",
    "subtree_replace",
)


def _mutate_tree(rng, tree, cfg, feature_count):
    ops = [i for i, k in enumerate(tree.kinds) if k in (expr.ADD, expr.MUL)]
    kinds = list(_MUTATION_KINDS)
    if not ops:
        kinds.remove("operator_swap")
        kinds.remove("delete")
    kind = kinds[int(rng.integers(len(kinds)))]

    if kind == "operator_swap":
        pos = ops[int(rng.integers(len(ops)))]
        new = expr.MUL if tree.kinds[pos] == expr.ADD else expr.ADD
        kinds_t = tree.kinds[:pos] + (new,) + tree.kinds[pos + 1 :]
        return ExprTree(kinds_t, tree.values)

    if kind == "leaf_replace":
        leaves = [i for i, k in enumerate(tree.kinds) if k in (expr.VAR, expr.CONST)]
        pos = leaves[int(rng.integers(len(leaves)))]
        return tree.replace_subtree(pos, sample_tree(rng, 1, feature_count))

    if kind == "insert":
        # wrap a subtree under a new operator with a fresh leaf sibling
        if tree.size + 2 > cfg.max_nodes:
            return tree
        pos = int(rng.integers(tree.size))
        sub = tree.subtree(pos)
        op = expr.ADD if rng.random() < 0.5 else expr.MUL
        leaf = sample_tree(rng, 1, feature_count)
        wrapped = (
            ExprTree.combine(op, sub, leaf)
            if rng.random() < 0.5
            else ExprTree.combine(op, leaf, sub)
        )
        return tree.replace_subtree(pos, wrapped)

    if kind == "delete":
        pos = ops[int(rng.integers(len(ops)))]
        _, lend = tree.subtree_span(pos + 1)
        child_start = pos + 1 if rng.random() < 0.5 else lend
        return tree.replace_subtree(pos, tree.subtree(child_start))

    # subtree_replace
    for _ in range(8):
        pos = int(rng.integers(tree.size))
        repl = sample_tree(rng, 2, feature_count)
        child = tree.replace_subtree(pos, repl)
        if child.size <= cfg.max_nodes:
            return child
    return tree


def mutate(rng, individual, cfg, feature_count, per_tree_prob=0.5):
    """One mutation kind per affected tree; at least one tree changes."""
    trees = list(individual.trees)
    affected = [i for i in range(len(trees)) if rng.random() < per_tree_prob]
    if not affected:
        affected = [int(rng.integers(len(trees)))]
    for i in affected:
        trees[i] = _mutate_tree(rng, trees[i], cfg, feature_count)
    return individual.with_trees(trees)


# ---------------------------------------------------------------------
# constant optimization
# ---------------------------------------------------------------------

def _get_constants(individual):
    return [
        (ti, pi)
        for ti, t in enumerate(individual.trees)
        for pi in t.constant_positions()
    ]


def _set_constants(individual, positions, values):
    trees = list(individual.trees)
    by_tree = {}
    for (ti, pi), v in zip(positions, values):
        by_tree.setdefault(ti, []).append(v)
    for ti, vals in by_tree.items():
        trees[ti] = trees[ti].with_constants(vals)
    return individual.with_trees(trees)


def optimize_constants(individual, fitness_fn, opt_iters, step_size):
    """Gradient descent on the constant leaves via central finite
    differences; returns the best-seen constant vector (never worse
    than the input fitness). Non-finite steps revert and halve the
    effective step size for the remainder.
    """
    positions = _get_constants(individual)
    if not positions:
        if individual.fitness is None:
            individual.fitness = fitness_fn(individual)
        return individual

    def loss(values):
        cand = _set_constants(individual, positions, values)
        cand.fitness = fitness_fn(cand)
        return cand.fitness, cand

    c = np.array(
        [individual.trees[ti].values[pi] for ti, pi in positions], dtype=float
    )
    groups = {}
    for idx, (ti, _) in enumerate(positions):
        groups.setdefault(ti, []).append(idx)
    best_loss, best_ind = loss(c)
    eta = step_size
    for _ in range(opt_iters):
        grad = np.empty_like(c)
        for j in range(len(c)):
            h = 1e-6 * max(1.0, abs(c[j]))
            cp = c.copy()
            cp[j] = c[j] + h
            cm = c.copy()
            cm[j] = c[j] - h
            grad[j] = (loss(cp)[0] - loss(cm)[0]) / (2.0 * h)
        if not np.all(np.isfinite(grad)):
            eta *= 0.5
            continue
        # normalize per tree: the raw summed-NLL gradient scale varies by
        # orders of magnitude with series length, and between drift and
        # diffusion trees, so a joint norm would starve the smaller group
        if float(np.linalg.norm(grad)) == 0.0:
            break
        direction = np.zeros_like(grad)
        for idxs in groups.values():
            sub = grad[idxs]
            direction[idxs] = sub / max(1.0, float(np.linalg.norm(sub)))
        c_new = c - eta * direction
        new_loss, new_ind = loss(c_new)
        if not np.isfinite(new_loss) or new_loss >= PENALTY:
            eta *= 0.5
            continue
        if new_loss < best_loss:
            best_loss, best_ind = new_loss, new_ind
            c = c_new
            eta *= 1.2
        else:
            # overshoot: stay at the best point with a smaller step
            c = c_new
            eta *= 0.5
    return best_ind


# ---------------------------------------------------------------------
# the generational loop
# ---------------------------------------------------------------------

@dataclass
class EvolveResult:
    population: Population
    front_history: list   # per generation: list of front-0 Individuals
    best_history: list    # per generation: best fitness seen so far


def pareto_front(individuals):
    ranks = nsga2_rank([(ind.fitness, ind.complexity) for ind in individuals])
    return [ind for ind, (front, _) in zip(individuals, ranks) if front == 0]


def _evaluate(individuals, fitness_fn):
    for ind in individuals:
        if ind.fitness is None:
            ind.fitness = fitness_fn(ind)


def _reproduce_subpop(rng, sub, cfg, feature_count, p_cross):
    """Next generation of one subpopulation: elitism then tournament +
    {crossover | mutation} until the size is restored."""
    size = len(sub)
    ranks = nsga2_rank([(ind.fitness, ind.complexity) for ind in sub])
    front0 = [
        (ind, crowd)
        for ind, (front, crowd) in zip(sub, ranks)
        if front == 0
    ]
    cap = max(1, int(size * cfg.elite_cap_fraction))
    # keep the fitness minimum first so elitism is strictly monotone,
    # then fill by crowding distance
    best_i = min(range(len(front0)), key=lambda i: front0[i][0].fitness)
    front0.insert(0, front0.pop(best_i))
    front0[1:] = sorted(front0[1:], key=lambda pair: -pair[1])
    elites = [Individual(ind.trees, ind.roles, ind.fitness) for ind, _ in front0[:cap]]
    offspring = list(elites)
    while len(offspring) < size:
        p1 = tournament_select(rng, sub, ranks, cfg.tournament_size)
        if rng.random() < p_cross:
            p2 = tournament_select(rng, sub, ranks, cfg.tournament_size)
            mode = "whole-tree" if (
                len(p1.trees) > 1 and rng.random() < cfg.whole_tree_prob
            ) else "subtree"
            child = crossover(rng, p1, p2, cfg, mode=mode, per_tree_prob=p_cross)
        else:
            child = mutate(rng, p1, cfg, feature_count)
        offspring.append(child)
    return offspring


def _migrate(population, cfg):
    """Ring migration: the best migrant_count individuals of each
    subpopulation replace the worst of the next one."""
    subs = population.subpopulations
    n = len(subs)
    if n < 2:
        return
    k = cfg.migrant_count
    migrants = []
    for sub in subs:
        best = sorted(sub, key=lambda ind: ind.fitness)[:k]
        migrants.append([Individual(b.trees, b.roles, b.fitness) for b in best])
    for i, sub in enumerate(subs):
        incoming = migrants[(i - 1) % n]
        sub.sort(key=lambda ind: ind.fitness)
        for j, mig in enumerate(incoming):
            sub[len(sub) - 1 - j] = mig


def evolve(
    cfg,
    fitness_fn,
    rng,
    feature_count,
    roles,
    checkpoint_dir=None,
    resume=False,
):
    """Run the full generational loop; returns the final population and
    the per-generation front-0 archive. Bit-reproducible for a fixed
    rng state and config (single-threaded)."""
    population = None
    front_history = []
    best_history = []
    start_gen = 0
    if resume and checkpoint_dir:
        state = load_checkpoint(checkpoint_dir)
        if state is not None:
            population, front_history, best_history, rng = state
            start_gen = population.generation

    if population is None:
        population = init_population(cfg, rng, feature_count, roles)

    _evaluate(population.individuals, fitness_fn)
    p_cross = cfg.crossover_probs()

    for gen in range(start_gen, cfg.generations):
        # gradient descent on the p* fittest individuals
        all_inds = population.individuals
        order = sorted(range(len(all_inds)), key=lambda i: all_inds[i].fitness)
        chosen = set(order[: cfg.opt_subset])
        flat = 0
        for si, sub in enumerate(population.subpopulations):
            for j in range(len(sub)):
                if flat in chosen and sub[j].fitness < PENALTY:
                    sub[j] = optimize_constants(
                        sub[j], fitness_fn, cfg.opt_iters, cfg.step_size
                    )
                flat += 1

        front_history.append(pareto_front(population.individuals))
        best = min(ind.fitness for ind in population.individuals)
        best_history.append(
            min(best, best_history[-1]) if best_history else best
        )

        new_subs = [
            _reproduce_subpop(rng, sub, cfg, feature_count, p_cross[si])
            for si, sub in enumerate(population.subpopulations)
        ]
        population = Population(new_subs, gen + 1)
        _evaluate(population.individuals, fitness_fn)

        if cfg.migration_interval and (gen + 1) % cfg.migration_interval == 0:
            _migrate(population, cfg)

        if checkpoint_dir:
            save_checkpoint(
                checkpoint_dir, population, front_history, best_history, rng
            )

    front_history.append(pareto_front(population.individuals))
    best = min(ind.fitness for ind in population.individuals)
    best_history.append(min(best, best_history[-1]) if best_history else best)
    return EvolveResult(population, front_history, best_history)


# ---------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------

def _checkpoint_path(checkpoint_dir):
    return os.path.join(checkpoint_dir, "checkpoint.json")


def save_checkpoint(checkpoint_dir, population, front_history, best_history, rng):
    os.makedirs(checkpoint_dir, exist_ok=True)
    obj = {
        "generation": population.generation,
        "subpopulations": [
            [ind.to_json_obj() for ind in sub] for sub in population.subpopulations
        ],
        "front_history": [
            [ind.to_json_obj() for ind in front] for front in front_history
        ],
        "best_history": best_history,
        "rng_state": rng.bit_generator.state,
    }
    tmp = _checkpoint_path(checkpoint_dir) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh)
    os.replace(tmp, _checkpoint_path(checkpoint_dir))


def load_checkpoint(checkpoint_dir):
    path = _checkpoint_path(checkpoint_dir)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        obj = json.load(fh)
    subs = [
        [Individual.from_json_obj(i) for i in sub] for sub in obj["subpopulations"]
    ]
    population = Population(subs, obj["generation"])
    front_history = [
        [Individual.from_json_obj(i) for i in front] for front in obj["front_history"]
    ]
    rng = np.random.default_rng()
    rng.bit_generator.state = obj["rng_state"]
    return population, front_history, obj["best_history"], rng
