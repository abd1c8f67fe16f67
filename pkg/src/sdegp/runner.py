"""Experiment pipeline: dataset preparation, per-seed fits with every
method, report assembly and aggregation. The CLI is a thin wrapper
around these functions so they stay scriptable and testable.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import __version__, evaluation, expr, fitness, kmsr, presets, simulate
from .evolution import GPConfig, Individual, evolve, roles_for
from .evaluation import EvalReport, component_mse, select_model, structure_match, tree_fn

METHOD_TAGS = {
    "gp-sde": "GP-SDE",
    "gp-sde-ms": "GP-SDE-MS",
    "gp-ode": "GP-ODE",
    "gp-ode-ms": "GP-ODE-MS",
    "km-sr": "KM-SR",
}


@dataclass
class RunConfig:
    """Everything one fit run needs; hashable for provenance."""

    environment: str
    method: str
    seed: int
    scale: str = "desk"
    tau: float = None
    T: float = None
    n_traj: int = None
    scheme: str = "euler_maruyama"
    multistep_L: int = 5
    gp: GPConfig = None

    def __post_init__(self):
        if self.method not in METHOD_TAGS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.gp is None and self.method != "km-sr":
            self.gp = presets.gp_config(self.environment, self.method, self.scale)
        if self.T is None and self.scale == "desk":
            self.T = presets.desk_T(self.environment)

    def env_overrides(self):
        out = {}
        if self.tau is not None:
            out["tau"] = float(self.tau)
        if self.T is not None:
            out["T"] = float(self.T)
        if self.n_traj is not None:
            out["n_traj"] = int(self.n_traj)
        return out

    def environment_spec(self):
        return simulate.make_environment(self.environment, **self.env_overrides())

    def to_json_obj(self):
        obj = asdict(self)
        return obj

    def config_hash(self):
        blob = json.dumps(self.to_json_obj(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _atomic_write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_datasets(env, master_seed, out_dir, scheme="euler_maruyama", csv=False):
    """Generate and persist the three splits plus a provenance manifest."""
    os.makedirs(out_dir, exist_ok=True)
    datasets = simulate.generate_splits(env, master_seed, scheme=scheme)
    paths = {}
    for ds in datasets:
        path = os.path.join(out_dir, f"{ds.split}.sdev")
        simulate.save_dataset(ds, path)
        paths[ds.split] = path
        if csv:
            simulate.export_csv(ds, os.path.join(out_dir, f"{ds.split}.csv"))
    manifest = {
        "environment": env.name,
        "params": env.params,
        "tau": env.tau,
        "dt": env.dt,
        "T": env.T,
        "K": env.n_steps,
        "n_traj": env.n_traj,
        "master_seed": int(master_seed),
        "scheme": scheme,
        "splits": {k: os.path.basename(v) for k, v in paths.items()},
        "version": __version__,
    }
    _atomic_write(
        os.path.join(out_dir, "manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True),
    )
    return datasets, paths


def load_splits(data_dir):
    out = []
    for split in simulate.SPLITS:
        path = os.path.join(data_dir, f"{split}.sdev")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing dataset file {path}")
        out.append(simulate.load_dataset(path))
    return tuple(out)


def _gp_rng(seed, var_index):
    return np.random.default_rng(np.random.SeedSequence((int(seed), 7001, var_index)))


def _fit_gp(config, env, opt_ds, val_ds, checkpoint_dir=None, resume=False):
    """Per-variable or whole-system GP run; returns
    (selected trees by role, fronts for serialization)."""
    method = config.method
    n_vars = env.feature_count if env.grid is None else 1
    selected = {}
    fronts = {}
    if method in ("gp-sde", "gp-ode"):
        for i in env.targets:
            ctx = fitness.FitnessContext.for_variable(opt_ds, i)
            fn = fitness.make_fitness(method, ctx)
            roles = roles_for(method, n_vars)
            ckpt = (
                os.path.join(checkpoint_dir, f"var{i}") if checkpoint_dir else None
            )
            result = evolve(
                config.gp,
                fn,
                _gp_rng(config.seed, i),
                env.feature_count,
                roles,
                checkpoint_dir=ckpt,
                resume=resume,
            )
            best = select_model(result.front_history[-1], val_ds, env, var_index=i)
            selected[f"drift_{i}"] = best.trees[0]
            if method == "gp-sde":
                selected[f"diffusion_{i}"] = best.trees[1]
            fronts[i] = result.front_history[-1]
    else:  # multi-step whole-system modes
        if env.grid is not None:
            raise ValueError("multi-step modes are defined for SDE systems only")
        ctx = fitness.FitnessContext.for_system(opt_ds, L=config.multistep_L)
        fn = fitness.make_fitness(method, ctx)
        roles = roles_for(method, env.state_dim)
        ckpt = os.path.join(checkpoint_dir, "system") if checkpoint_dir else None
        result = evolve(
            config.gp,
            fn,
            _gp_rng(config.seed, 9999),
            env.feature_count,
            roles,
            checkpoint_dir=ckpt,
            resume=resume,
        )
        best = select_model(result.front_history[-1], val_ds, env)
        for role, tree in zip(best.roles, best.trees):
            selected[role] = tree
        fronts["system"] = result.front_history[-1]
    return selected, fronts


def _fit_kmsr(config, env, opt_ds, val_ds):
    if env.grid is not None:
        raise ValueError("km-sr is defined for SDE systems only")
    grids = kmsr.grids_for(env.name)
    selected = {}
    records = {}
    for i in env.targets:
        result = kmsr.kmsr_discover(opt_ds, val_ds, i, grids, env=env)
        selected[f"drift_{i}"] = result.drift_model.to_tree()
        selected[f"diffusion_{i}"] = result.diffusion_model.to_tree()
        records[i] = result
    return selected, records


def _report_from_model(config, env, selected, test_ds, runtime_s):
    names = list(env.feature_names)
    has_diffusion = any(r.startswith("diffusion") for r in selected)
    drift_mses, diff_mses = [], []
    per_eq = {}
    for i in env.targets:
        drift_tree = selected[f"drift_{i}"]
        drift_mses.append(
            component_mse(tree_fn(drift_tree), env.truth_drift_fn(i), test_ds)
        )
        per_eq[f"drift_{i}"] = structure_match(
            drift_tree, env.truth_drift[i], names=names
        )
        if has_diffusion:
            diff_tree = selected[f"diffusion_{i}"]
            diff_mses.append(
                component_mse(
                    tree_fn(diff_tree),
                    env.truth_diffusion_fn(i),
                    test_ds,
                    absolute=True,
                )
            )
            per_eq[f"diffusion_{i}"] = structure_match(
                diff_tree, env.truth_diffusion[i], names=names
            )
    model_text = {
        role: expr.polynomial_string(tree, names=names)
        for role, tree in sorted(selected.items())
    }
    return EvalReport(
        environment=env.name,
        method=METHOD_TAGS[config.method],
        seed=config.seed,
        drift_mse=float(np.mean(drift_mses)),
        diffusion_mse=float(np.mean(diff_mses)) if diff_mses else float("nan"),
        structure_ok=all(per_eq.values()),
        per_equation=per_eq,
        model_text=model_text,
        runtime_s=runtime_s,
    )


def run_fit(config, out_dir, data_dir=None, resume=False):
    """One (environment, method, seed) fit. Writes model.json,
    pareto.json / kmsr_grid.csv, and report.json under out_dir and
    returns the EvalReport."""
    os.makedirs(out_dir, exist_ok=True)
    env = config.environment_spec()
    if data_dir is not None:
        opt_ds, val_ds, test_ds = load_splits(data_dir)
    else:
        opt_ds, val_ds, test_ds = simulate.generate_splits(
            env, config.seed, scheme=config.scheme
        )

    t0 = time.perf_counter()
    if config.method == "km-sr":
        selected, records = _fit_kmsr(config, env, opt_ds, val_ds)
    else:
        ckpt = os.path.join(out_dir, "checkpoints") if resume else None
        selected, fronts = _fit_gp(
            config, env, opt_ds, val_ds, checkpoint_dir=ckpt, resume=resume
        )
    runtime_s = time.perf_counter() - t0

    names = list(env.feature_names)
    model_obj = {
        "environment": env.name,
        "method": METHOD_TAGS[config.method],
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "version": __version__,
        "feature_names": names,
        "trees": {
            role: tree.to_json_obj() for role, tree in sorted(selected.items())
        },
        "expressions": {
            role: expr.to_string(tree, names=names)
            for role, tree in sorted(selected.items())
        },
        "expressions_pretty": {
            role: expr.polynomial_string(tree, names=names)
            for role, tree in sorted(selected.items())
        },
    }
    _atomic_write(
        os.path.join(out_dir, "model.json"),
        json.dumps(model_obj, indent=2, sort_keys=True),
    )

    if config.method == "km-sr":
        lines = ["variable,component,b,beta,alpha,lambda,validation_mse"]
        for i, result in records.items():
            for rec in result.records:
                lines.append(
                    f"{i},{rec.component},{rec.b},{rec.beta},{rec.alpha},"
                    f"{rec.threshold},{rec.validation_mse!r}"
                )
        _atomic_write(os.path.join(out_dir, "kmsr_grid.csv"), "\n".join(lines) + "\n")
    else:
        front_obj = {
            str(key): [ind.to_json_obj() for ind in front]
            for key, front in fronts.items()
        }
        _atomic_write(
            os.path.join(out_dir, "pareto.json"),
            json.dumps(front_obj, indent=2, sort_keys=True),
        )

    report = _report_from_model(config, env, selected, test_ds, runtime_s)
    _atomic_write(os.path.join(out_dir, "report.json"), report.to_json())
    return report


def load_model_trees(model_path):
    """(env name, method tag, seed, {role: ExprTree}) from a model file."""
    with open(model_path) as fh:
        obj = json.load(fh)
    from .expr import ExprTree

    trees = {
        role: ExprTree.from_json_obj(nodes) for role, nodes in obj["trees"].items()
    }
    return obj, trees


def aggregate_reports(run_dirs, force=False):
    """Collect report.json files below the given directories.

    Returns (rows, mean_rows); every row is a dict with the CSV
    columns. Mixing environments is rejected unless force is set.
    """
    reports = []
    for root in run_dirs:
        for dirpath, _, filenames in os.walk(root):
            if "report.json" in filenames:
                with open(os.path.join(dirpath, "report.json")) as fh:
                    reports.append(EvalReport(**json.load(fh)))
    if not reports:
        raise FileNotFoundError("no report.json files found under the given paths")
    envs = {r.environment for r in reports}
    if len(envs) > 1 and not force:
        raise ValueError(
            f"refusing to merge reports from multiple environments {sorted(envs)}; "
            "pass force to override"
        )
    rows = [
        {
            "environment": r.environment,
            "method": r.method,
            "seed": r.seed,
            "drift_mse": r.drift_mse,
            "diffusion_mse": r.diffusion_mse,
            "structure_ok": r.structure_ok,
            "runtime_s": r.runtime_s,
        }
        for r in reports
    ]
    mean_rows = []
    for method in sorted({r["method"] for r in rows}):
        sub = [r for r in rows if r["method"] == method]
        diff = [r["diffusion_mse"] for r in sub if not np.isnan(r["diffusion_mse"])]
        mean_rows.append(
            {
                "environment": sub[0]["environment"] if len(envs) == 1 else "mixed",
                "method": f"{method}(mean)",
                "seed": "",
                "drift_mse": float(np.mean([r["drift_mse"] for r in sub])),
                "diffusion_mse": float(np.mean(diff)) if diff else float("nan"),
                "structure_ok": all(r["structure_ok"] for r in sub),
                "runtime_s": float(np.mean([r["runtime_s"] for r in sub])),
            }
        )
    return rows, mean_rows


def write_aggregate_csv(rows, mean_rows, path):
    def fmt(r):
        diff = "" if _nan(r["diffusion_mse"]) else repr(float(r["diffusion_mse"]))
        return (
            f"{r['environment']},{r['method']},{r['seed']},"
            f"{float(r['drift_mse'])!r},{diff},{int(bool(r['structure_ok']))},"
            f"{float(r['runtime_s'])!r}"
        )

    lines = [",".join(evaluation.CSV_COLUMNS)]
    lines += [fmt(r) for r in rows]
    lines += [fmt(r) for r in mean_rows]
    _atomic_write(path, "\n".join(lines) + "\n")


def _nan(v):
    try:
        return np.isnan(float(v))
    except (TypeError, ValueError):
        return True
