"""Ground-truth data generation for the benchmark SDE/SPDE systems.

Integrates each system with Euler-Maruyama (default, Ito) or
Heun-Stratonovich at dt, subsamples observations on the tau grid, and
packages optimization/validation/test splits with disjoint seed
streams. SPDEs are semi-discretized on periodic grids with central
finite-difference stencils; spatial derivatives are exposed as extra
leaf features.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

MAGIC = b"SDEV1"
SPLITS = ("optimization", "validation", "test")


class SimulationError(RuntimeError):
    """Trajectory blew up repeatedly or input was inconsistent."""


# ---------------------------------------------------------------------
# grids for SPDEs
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Periodic uniform grid: lengths of the spatial domain and points
    per dimension. Supplies derivative features computed with central
    stencils (second order)."""

    lengths: tuple
    shape: tuple
    feature_names: tuple  # e.g. ("u", "u_x", "u_xx")

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def n_points(self):
        return int(np.prod(self.shape))

    def spacings(self):
        return tuple(L / n for L, n in zip(self.lengths, self.shape))

    def coordinates(self):
        axes = [
            np.arange(n) * (L / n) for L, n in zip(self.lengths, self.shape)
        ]
        return np.meshgrid(*axes, indexing="ij")

    def derivative(self, flat_field, axis, order):
        """First or second derivative along an axis, periodic wrap."""
        u = np.asarray(flat_field, dtype=float)
        batch = u.shape[:-1]
        u = u.reshape(batch + self.shape)
        h = self.spacings()[axis]
        ax = len(batch) + axis
        up = np.roll(u, -1, axis=ax)
        um = np.roll(u, 1, axis=ax)
        if order == 1:
            out = (up - um) / (2.0 * h)
        elif order == 2:
            out = (up - 2.0 * u + um) / (h * h)
        else:
            raise ValueError("order must be 1 or 2")
        return out.reshape(batch + (self.n_points,))

    def features(self, flat_field):
        """Feature matrix (..., n_points, F) for a flattened field."""
        u = np.asarray(flat_field, dtype=float)
        cols = []
        for name in self.feature_names:
            if name == "u":
                cols.append(u)
            elif name == "u_x":
                cols.append(self.derivative(u, 0, 1))
            elif name == "u_xx":
                cols.append(self.derivative(u, 0, 2))
            elif name == "u_y":
                cols.append(self.derivative(u, 1, 1))
            elif name == "u_yy":
                cols.append(self.derivative(u, 1, 2))
            elif name == "lap_u":
                lap = self.derivative(u, 0, 2)
                for a in range(1, self.ndim):
                    lap = lap + self.derivative(u, a, 2)
                cols.append(lap)
            else:
                raise ValueError(f"unknown grid feature {name!r}")
        return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class EnvironmentSpec:
    """Full description of one benchmark system.

    drift/diffusion are vectorized callables mapping a feature matrix
    (n, F) to per-variable outputs (n, N); for SPDEs they map per-point
    features (n, F) to scalars (n,). truth_drift/truth_diffusion hold
    the ground-truth equations as parseable text, one per variable.
    """

    name: str
    state_dim: int
    drift: object
    diffusion: object
    params: dict
    init_sampler: object  # (rng) -> initial state vector
    T: float
    dt: float
    tau: float
    n_traj: int
    feature_names: tuple
    truth_drift: tuple
    truth_diffusion: tuple
    grid: GridSpec = None
    # evaluation targets; Lorenz96 only learns the x1 equation
    target_vars: tuple = None

    @property
    def n_steps(self):
        K = self.T / self.tau
        if abs(K - round(K)) > 1e-9:
            raise SimulationError("T/tau is not an integer")
        return int(round(K))

    @property
    def substeps(self):
        r = self.tau / self.dt
        if abs(r - round(r)) > 1e-9:
            raise SimulationError("tau/dt is not an integer")
        return int(round(r))

    @property
    def targets(self):
        if self.target_vars is not None:
            return tuple(self.target_vars)
        if self.grid is not None:
            return (0,)
        return tuple(range(self.state_dim))

    @property
    def feature_count(self):
        return len(self.feature_names)

    def truth_drift_fn(self, i):
        from . import expr

        tree = expr.parse(self.truth_drift[i], names=list(self.feature_names))
        return lambda X: expr.eval_tree(tree, X)

    def truth_diffusion_fn(self, i):
        from . import expr

        tree = expr.parse(self.truth_diffusion[i], names=list(self.feature_names))
        return lambda X: expr.eval_tree(tree, X)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray   # (K+1,)
    states: np.ndarray  # (K+1, N); flattened field for SPDEs
    seed: tuple

    @property
    def n_obs(self):
        return self.states.shape[0]


@dataclass
class Dataset:
    trajectories: list
    split: str
    env: EnvironmentSpec

    @property
    def tau(self):
        return self.env.tau

    def state_matrix(self):
        """All observed states stacked, (total_obs, N)."""
        return np.concatenate([t.states for t in self.trajectories], axis=0)

    def feature_matrix(self):
        """All observed feature rows stacked.

        SDE: identical to state_matrix. SPDE: per-grid-point feature
        rows, (total_obs * n_points, F).
        """
        X = self.state_matrix()
        if self.env.grid is None:
            return X
        F = self.env.grid.features(X)
        return F.reshape(-1, F.shape[-1])

    def transitions(self, var_index):
        """Per-variable transition triples (features_prev, x_prev, x_next).

        features_prev is (M, F); for SPDEs every grid point contributes
        one row and var_index must be 0 (the field value itself).
        """
        grid = self.env.grid
        feats, xp, xn = [], [], []
        for traj in self.trajectories:
            s = traj.states
            if grid is None:
                feats.append(s[:-1])
                xp.append(s[:-1, var_index])
                xn.append(s[1:, var_index])
            else:
                if var_index != 0:
                    raise ValueError("SPDE datasets expose a single field variable")
                f = grid.features(s[:-1])
                feats.append(f.reshape(-1, f.shape[-1]))
                xp.append(s[:-1].reshape(-1))
                xn.append(s[1:].reshape(-1))
        return (
            np.concatenate(feats, axis=0),
            np.concatenate(xp, axis=0),
            np.concatenate(xn, axis=0),
        )

    def system_transitions(self):
        """Whole-system transitions (X_prev, X_next), each (M, N)."""
        if self.env.grid is not None:
            raise ValueError("whole-system transitions are SDE-only")
        Xp = np.concatenate([t.states[:-1] for t in self.trajectories], axis=0)
        Xn = np.concatenate([t.states[1:] for t in self.trajectories], axis=0)
        return Xp, Xn


# -- integrators ------------------------------------------------------

def _step_euler(x, drift_fn, diff_fn, dt, dW):
    return x + drift_fn(x) * dt + diff_fn(x) * dW


def _step_heun(x, drift_fn, diff_fn, dt, dW):
    f0 = drift_fn(x)
    g0 = diff_fn(x)
    xp = x + f0 * dt + g0 * dW
    return x + 0.5 * (f0 + drift_fn(xp)) * dt + 0.5 * (g0 + diff_fn(xp)) * dW


_SCHEMES = {"euler_maruyama": _step_euler, "heun_stratonovich": _step_heun}


def _drift_state(env):
    """Drift as a function of the raw state row-matrix."""
    if env.grid is None:
        return lambda x: env.drift(x[None, :])[0]
    grid = env.grid
    return lambda x: env.drift(grid.features(x[None, :])[0])


def _diff_state(env):
    if env.grid is None:
        return lambda x: env.diffusion(x[None, :])[0]
    grid = env.grid
    return lambda x: env.diffusion(grid.features(x[None, :])[0])


def _integrate(env, rng, scheme):
    step = _SCHEMES[scheme]
    drift_fn = _drift_state(env)
    diff_fn = _diff_state(env)
    n_sub = env.substeps
    K = env.n_steps
    dt = env.dt
    sd = np.sqrt(dt)
    x = np.asarray(env.init_sampler(rng), dtype=float)
    n_state = x.shape[0]
    out = np.empty((K + 1, n_state))
    out[0] = x
    for k in range(K):
        for _ in range(n_sub):
            dW = rng.normal(0.0, sd, size=n_state)
            x = step(x, drift_fn, diff_fn, dt, dW)
        out[k + 1] = x
        if not np.all(np.isfinite(x)):
            return None
    return out


def integrate_sde(env, rng, scheme="euler_maruyama", seed_info=()):
    """One trajectory observed on the tau grid; reject-and-resample on
    blow-up (at most 10 attempts)."""
    if scheme not in _SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    for attempt in range(10):
        states = _integrate(env, rng, scheme)
        if states is not None:
            times = np.arange(env.n_steps + 1) * env.tau
            return Trajectory(times, states, tuple(seed_info) + (attempt,))
    raise SimulationError(f"trajectory blew up 10 times in environment {env.name}")


def integrate_spde(env, rng, scheme="euler_maruyama", seed_info=()):
    """SPDE trajectory on the flattened grid; identical stepping to
    integrate_sde with per-grid-point independent Wiener increments."""
    if env.grid is None:
        raise ValueError(f"environment {env.name} carries no grid spec")
    return integrate_sde(env, rng, scheme=scheme, seed_info=seed_info)


def integrate_ensemble(env, rng, n_paths, scheme="euler_maruyama"):
    """Many paths at once, vectorized over the ensemble axis.

    Returns observed states of shape (K+1, n_paths, N). No blow-up
    resampling: non-finite paths propagate as NaN/inf for the caller
    to filter. Used for moment checks and generative statistics.
    """
    step = _SCHEMES[scheme]
    if env.grid is None:
        drift_fn, diff_fn = env.drift, env.diffusion
    else:
        grid = env.grid
        drift_fn = lambda x: env.drift(grid.features(x))
        diff_fn = lambda x: env.diffusion(grid.features(x))
    n_sub = env.substeps
    K = env.n_steps
    dt = env.dt
    sd = np.sqrt(dt)
    x = np.stack([np.asarray(env.init_sampler(rng), dtype=float) for _ in range(n_paths)])
    out = np.empty((K + 1,) + x.shape)
    out[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            for _ in range(n_sub):
                dW = rng.normal(0.0, sd, size=x.shape)
                x = step(x, drift_fn, diff_fn, dt, dW)
            out[k + 1] = x
    return out


def generate_splits(env, master_seed, scheme="euler_maruyama"):
    """(optimization, validation, test) datasets from disjoint seed streams."""
    datasets = []
    for split_index, split in enumerate(SPLITS):
        trajectories = []
        for j in range(env.n_traj):
            seed = (int(master_seed), split_index, j)
            rng = np.random.default_rng(np.random.SeedSequence(seed))
            trajectories.append(
                integrate_sde(env, rng, scheme=scheme, seed_info=seed)
            )
        datasets.append(Dataset(trajectories, split, env))
    return tuple(datasets)


# ---------------------------------------------------------------------
# environment registry (Appendix A systems)
# ---------------------------------------------------------------------

def _double_well(noise):
    if noise == "additive":
        g_text = "0.5"

        def g(X):
            return np.full_like(X, 0.5)

    elif noise == "linear":
        g_text = "0.5*x"

        def g(X):
            return 0.5 * X

    elif noise == "nonlinear":
        g_text = "0.5 + 0.5*x*x"

        def g(X):
            return 0.5 * (1.0 + X ** 2)

    else:
        raise ValueError(noise)

    return EnvironmentSpec(
        name=f"double_well_{noise}",
        state_dim=1,
        drift=lambda X: X - X ** 3,
        diffusion=g,
        params={"noise": noise},
        init_sampler=lambda rng: rng.normal(0.0, np.sqrt(0.1), size=1),
        T=50.0,
        dt=0.001,
        tau=0.01,
        n_traj=8,
        feature_names=("x",),
        truth_drift=("x - x*x*x",),
        truth_diffusion=(g_text,),
    )


def _van_der_pol():
    mu, sigma = 1.0, 0.2

    def drift(X):
        v, w = X[:, 0], X[:, 1]
        return np.stack([w, mu * w * (1.0 - v ** 2) - v], axis=-1)

    def diffusion(X):
        v = X[:, 0]
        zero = np.zeros_like(v)
        return np.stack([zero, sigma * (1.0 + 0.5 * v ** 2)], axis=-1)

    return EnvironmentSpec(
        name="van_der_pol",
        state_dim=2,
        drift=drift,
        diffusion=diffusion,
        params={"mu": mu, "sigma": sigma},
        init_sampler=lambda rng: rng.normal(0.0, 1.0, size=2),
        T=50.0,
        dt=0.001,
        tau=0.01,
        n_traj=8,
        feature_names=("v", "w"),
        truth_drift=("w", "w - w*v*v - v"),
        truth_diffusion=("0", "0.2 + 0.1*v*v"),
    )


def _rossler():
    a = b = 0.2
    c = 5.7
    sigma = 0.1

    def drift(X):
        x, y, z = X[:, 0], X[:, 1], X[:, 2]
        return np.stack([-x - y, x + a * y, b + z * (x - c)], axis=-1)

    def diffusion(X):
        return sigma * X

    return EnvironmentSpec(
        name="rossler",
        state_dim=3,
        drift=drift,
        diffusion=diffusion,
        params={"a": a, "b": b, "c": c, "sigma": sigma},
        init_sampler=lambda rng: rng.normal(0.0, 1.0, size=3),
        T=50.0,
        dt=0.001,
        tau=0.01,
        n_traj=8,
        feature_names=("x", "y", "z"),
        truth_drift=("-x - y", "x + 0.2*y", "0.2 + x*z - 5.7*z"),
        truth_diffusion=("0.1*x", "0.1*y", "0.1*z"),
    )


def _lorenz96(n):
    F = 4.0
    sigma = 0.2

    def drift(X):
        xp1 = np.roll(X, -1, axis=-1)
        xm1 = np.roll(X, 1, axis=-1)
        xm2 = np.roll(X, 2, axis=-1)
        return (xp1 - xm2) * xm1 - X + F

    def diffusion(X):
        return sigma * X

    names = tuple(f"x{i}" for i in range(n))
    truth_drift = []
    for i in range(n):
        ip1 = (i + 1) % n
        im1 = (i - 1) % n
        im2 = (i - 2) % n
        truth_drift.append(
            f"x{ip1}*x{im1} - x{im2}*x{im1} - x{i} + 4"
        )
    truth_diffusion = tuple(f"0.2*x{i}" for i in range(n))

    return EnvironmentSpec(
        name=f"lorenz96_{n}",
        state_dim=n,
        drift=drift,
        diffusion=diffusion,
        params={"F": F, "sigma": sigma, "N": n},
        init_sampler=lambda rng: rng.normal(0.0, np.sqrt(0.1), size=n),
        T=25.0,
        dt=0.001,
        tau=0.01,
        n_traj=8,
        feature_names=names,
        truth_drift=tuple(truth_drift),
        truth_diffusion=truth_diffusion,
        target_vars=(0,),
    )


def _lotka_volterra():
    alpha, beta, delta, gamma, sigma = 1.1, 0.4, 0.1, 0.4, 0.2

    def drift(X):
        x, y = X[:, 0], X[:, 1]
        return np.stack([alpha * x - beta * x * y, delta * x * y - gamma * y], axis=-1)

    def diffusion(X):
        return sigma * X

    return EnvironmentSpec(
        name="lotka_volterra",
        state_dim=2,
        drift=drift,
        diffusion=diffusion,
        params={
            "alpha": alpha,
            "beta": beta,
            "delta": delta,
            "gamma": gamma,
            "sigma": sigma,
        },
        init_sampler=lambda rng: rng.uniform(5.0, 10.0, size=2),
        T=50.0,
        dt=0.001,
        tau=0.02,
        n_traj=8,
        feature_names=("x", "y"),
        truth_drift=("1.1*x - 0.4*x*y", "0.1*x*y - 0.4*y"),
        truth_diffusion=("0.2*x", "0.2*y"),
    )


def _fisher_kpp():
    D, sigma = 1.0, 0.1
    grid = GridSpec(lengths=(20.0,), shape=(64,), feature_names=("u", "u_x", "u_xx"))

    def drift(F):
        u, uxx = F[..., 0], F[..., 2]
        return D * uxx + u * (1.0 - u)

    def diffusion(F):
        return sigma * F[..., 0]

    def init(rng):
        (x,) = grid.coordinates()
        return 1.0 + np.sin(x)

    return EnvironmentSpec(
        name="fisher_kpp",
        state_dim=grid.n_points,
        drift=drift,
        diffusion=diffusion,
        params={"D": D, "sigma": sigma},
        init_sampler=init,
        T=1.0,
        dt=0.001,
        tau=0.02,
        n_traj=4,
        feature_names=grid.feature_names,
        truth_drift=("u_xx + u - u*u",),
        truth_diffusion=("0.1*u",),
        grid=grid,
    )


def _heat_transfer():
    D, alpha, beta = 0.1, 1.0, 1.0
    grid = GridSpec(
        lengths=(4.0, 4.0),
        shape=(16, 16),
        feature_names=("u", "u_x", "u_y", "u_xx", "u_yy"),
    )

    def drift(F):
        return D * (F[..., 3] + F[..., 4])

    def diffusion(F):
        return alpha * F[..., 1] + beta * F[..., 2]

    def init(rng):
        x, y = grid.coordinates()
        return (0.2 * np.sin(np.pi / 2 * x) * np.cos(np.pi / 2 * y)).reshape(-1)

    return EnvironmentSpec(
        name="heat_transfer",
        state_dim=grid.n_points,
        drift=drift,
        diffusion=diffusion,
        params={"D": D, "alpha": alpha, "beta": beta},
        init_sampler=init,
        T=1.0,
        dt=0.001,
        tau=0.02,
        n_traj=4,
        feature_names=grid.feature_names,
        truth_drift=("0.1*u_xx + 0.1*u_yy",),
        truth_diffusion=("u_x + u_y",),
        grid=grid,
    )


_BUILDERS = {
    "double_well_additive": lambda: _double_well("additive"),
    "double_well_linear": lambda: _double_well("linear"),
    "double_well_nonlinear": lambda: _double_well("nonlinear"),
    "van_der_pol": _van_der_pol,
    "rossler": _rossler,
    "lorenz96_5": lambda: _lorenz96(5),
    "lorenz96_10": lambda: _lorenz96(10),
    "lorenz96_20": lambda: _lorenz96(20),
    "lotka_volterra": _lotka_volterra,
    "fisher_kpp": _fisher_kpp,
    "heat_transfer": _heat_transfer,
}

ENVIRONMENT_NAMES = tuple(_BUILDERS)


def make_environment(name, **overrides):
    """Environment by name, optionally overriding T, tau, dt or n_traj."""
    if name not in _BUILDERS:
        raise KeyError(
            f"unknown environment {name!r}; available: {', '.join(_BUILDERS)}"
        )
    env = _BUILDERS[name]()
    allowed = {"T", "tau", "dt", "n_traj"}
    bad = set(overrides) - allowed
    if bad:
        raise ValueError(f"unsupported overrides: {sorted(bad)}")
    if overrides:
        env = replace(env, **overrides)
    env.n_steps  # validate T/tau
    env.substeps  # validate tau/dt
    return env


# ---------------------------------------------------------------------
# dataset file format
# ---------------------------------------------------------------------

def save_dataset(dataset, path):
    """Compact binary layout: magic 'SDEV1', uint32 header length,
    UTF-8 JSON header, then per-trajectory float64 little-endian
    row-major state matrices."""
    env = dataset.env
    header = {
        "environment": env.name,
        "params": env.params,
        "split": dataset.split,
        "tau": env.tau,
        "dt": env.dt,
        "T": env.T,
        "N": env.state_dim,
        "K": env.n_steps,
        "n_traj": len(dataset.trajectories),
        "feature_names": list(env.feature_names),
        "seeds": [list(t.seed) for t in dataset.trajectories],
        "grid": None
        if env.grid is None
        else {"lengths": list(env.grid.lengths), "shape": list(env.grid.shape)},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for traj in dataset.trajectories:
            fh.write(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a SDEV1 dataset file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        env = make_environment(
            header["environment"],
            T=header["T"],
            tau=header["tau"],
            dt=header["dt"],
            n_traj=header["n_traj"],
        )
        K, N = header["K"], header["N"]
        times = np.arange(K + 1) * header["tau"]
        trajectories = []
        for seed in header["seeds"]:
            raw = fh.read((K + 1) * N * 8)
            states = np.frombuffer(raw, dtype="<f8").reshape(K + 1, N).copy()
            trajectories.append(Trajectory(times, states, tuple(seed)))
    return Dataset(trajectories, header["split"], env)


def export_csv(dataset, path):
    """Flat CSV: trajectory, k, t, then one column per state variable."""
    env = dataset.env
    with open(path, "w") as fh:
        if env.grid is None:
            cols = list(env.feature_names)
        else:
            cols = [f"u{i}" for i in range(env.state_dim)]
        fh.write("trajectory,k,t," + ",".join(cols) + "\n")
        for j, traj in enumerate(dataset.trajectories):
            for k, (t, row) in enumerate(zip(traj.times, traj.states)):
                vals = ",".join(repr(v) for v in row)
                fh.write(f"{j},{k},{t!r},{vals}\n")
