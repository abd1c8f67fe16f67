"""Command-line entry points.

Commands: generate-data, fit, evaluate, sample, report.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.
"""
from __future__ import annotations

import json
import os
import sys

import click
import numpy as np
import yaml

from . import evaluation, expr, plots, presets, runner, simulate
from .kmsr import BinningError
from .simulate import SimulationError

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map exception classes onto the documented exit codes."""
    try:
        return fn()
    except (KeyError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (SimulationError, BinningError, FloatingPointError) as exc:
        _fail(EXIT_NUMERICAL, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))


@click.group()
def main():
    """Symbolic discovery of stochastic differential equations."""


@main.command("generate-data")
@click.option("--env", "env_name", required=True, help="environment name")
@click.option("--seed", type=int, required=True, help="master seed")
@click.option("--tau", type=float, default=None, help="observation interval override")
@click.option("--horizon", "-T", "T", type=float, default=None, help="horizon override")
@click.option("--n-traj", type=int, default=None, help="trajectory count override")
@click.option(
    "--scheme",
    type=click.Choice(["euler_maruyama", "heun_stratonovich"]),
    default="euler_maruyama",
)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--csv", is_flag=True, help="also export CSV alongside the binary files")
def generate_data(env_name, seed, tau, T, n_traj, scheme, out_dir, csv):
    """Simulate the three dataset splits and write them with a manifest."""

    def go():
        overrides = {}
        if tau is not None:
            overrides["tau"] = tau
        if T is not None:
            overrides["T"] = T
        if n_traj is not None:
            overrides["n_traj"] = n_traj
        env = simulate.make_environment(env_name, **overrides)
        _, paths = runner.write_datasets(env, seed, out_dir, scheme=scheme, csv=csv)
        for split, path in paths.items():
            click.echo(f"wrote {split}: {path}")

    _guard(go)


def _load_run_config(config_path, **overrides):
    base = {}
    if config_path:
        with open(config_path) as fh:
            base = yaml.safe_load(fh) or {}
    gp_obj = base.pop("gp", None)
    base.update({k: v for k, v in overrides.items() if v is not None})
    if gp_obj is not None and base.get("gp") is None:
        from .evolution import GPConfig

        base["gp"] = GPConfig(**gp_obj)
    return runner.RunConfig(**base)


@main.command("fit")
@click.option("--env", "environment", default=None)
@click.option(
    "--method", type=click.Choice(sorted(runner.METHOD_TAGS)), default=None
)
@click.option("--seed", type=int, default=None, help="first seed")
@click.option("--seeds", "seed_count", type=int, default=1, help="number of seeds")
@click.option("--scale", type=click.Choice(["full", "desk"]), default=None)
@click.option("--tau", type=float, default=None)
@click.option("--horizon", "-T", "T", type=float, default=None)
@click.option("--data-dir", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--resume", is_flag=True, help="resume from per-generation checkpoints")
def fit(environment, method, seed, seed_count, scale, tau, T, data_dir, out_dir, config_path, resume):
    """Fit one method on one environment for one or more seeds."""

    def go():
        first = seed if seed is not None else 0
        for s in range(first, first + seed_count):
            cfg = _load_run_config(
                config_path,
                environment=environment,
                method=method,
                seed=s,
                scale=scale,
                tau=tau,
                T=T,
            )
            run_dir = os.path.join(out_dir, f"seed_{s}")
            report = runner.run_fit(cfg, run_dir, data_dir=data_dir, resume=resume)
            click.echo(
                f"seed {s}: drift_mse={report.drift_mse:.6g} "
                f"diffusion_mse={report.diffusion_mse:.6g} "
                f"structure_ok={report.structure_ok}"
            )

    _guard(go)


@main.command("evaluate")
@click.option("--run-dir", required=True, type=click.Path(exists=True))
@click.option("--env", "environment", default=None, help="override environment name")
@click.option("--seed", type=int, default=None, help="dataset seed (defaults to model seed)")
def evaluate_cmd(run_dir, environment, seed):
    """Recompute the evaluation report of a stored model on fresh data."""

    def go():
        obj, trees = runner.load_model_trees(os.path.join(run_dir, "model.json"))
        env = simulate.make_environment(environment or obj["environment"])
        data_seed = seed if seed is not None else obj["seed"]
        method = {v: k for k, v in runner.METHOD_TAGS.items()}[obj["method"]]
        cfg = runner.RunConfig(environment=env.name, method=method, seed=data_seed)
        env = cfg.environment_spec()
        _, _, test_ds = simulate.generate_splits(env, data_seed)
        report = runner._report_from_model(cfg, env, trees, test_ds, 0.0)
        path = os.path.join(run_dir, "report.json")
        runner._atomic_write(path, report.to_json())
        click.echo(report.to_json())

    _guard(go)


@main.command("sample")
@click.option("--run-dir", required=True, type=click.Path(exists=True))
@click.option("--n-paths", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", default=None, help="output directory (default: run dir)")
def sample(run_dir, n_paths, seed, out_dir):
    """Generative sampling of a discovered system, with truth overlay."""

    def go():
        obj, trees = runner.load_model_trees(os.path.join(run_dir, "model.json"))
        env = simulate.make_environment(obj["environment"])
        if env.grid is not None:
            raise ValueError("sampling figures are defined for SDE systems only")
        dest = out_dir or run_dir
        os.makedirs(dest, exist_ok=True)
        n_vars = env.state_dim
        drift_roles = [f"drift_{i}" for i in range(n_vars)]
        if not all(r in trees for r in drift_roles):
            raise ValueError(
                "model lacks drift equations for some variables; "
                "sampling needs a full system"
            )
        drift_fns = [evaluation.tree_fn(trees[r]) for r in drift_roles]
        has_diff = all(f"diffusion_{i}" in trees for i in range(n_vars))
        diffusion_fns = (
            [evaluation.tree_fn(trees[f"diffusion_{i}"]) for i in range(n_vars)]
            if has_diff
            else None
        )
        rng = np.random.default_rng(np.random.SeedSequence((seed, 4242)))
        x0 = np.asarray(env.init_sampler(rng), dtype=float)
        truth_paths = _truth_paths(env, x0, 3, rng)
        mean, std, flagged = evaluation.generative_sample(
            drift_fns, diffusion_fns, env, x0, n_paths, rng
        )
        times = np.arange(env.n_steps + 1) * env.tau
        png = os.path.join(dest, "sample.png")
        plots.sample_paths(
            times,
            truth_paths,
            mean,
            std,
            list(env.feature_names),
            png,
            title=f"{env.name}: {obj['method']} generative samples",
        )
        csv = os.path.join(dest, "sample.csv")
        with open(csv, "w") as fh:
            cols = [f"mean_{n}" for n in env.feature_names] + [
                f"std_{n}" for n in env.feature_names
            ]
            fh.write("t," + ",".join(cols) + "\n")
            for k in range(mean.shape[0]):
                vals = list(mean[k]) + list(std[k])
                fh.write(f"{times[k]!r}," + ",".join(repr(v) for v in vals) + "\n")
        if flagged:
            click.echo("warning: more than half of the sample paths blew up", err=True)
        click.echo(f"wrote {png} and {csv}")

    _guard(go)


def _truth_paths(env, x0, n, rng):
    from dataclasses import replace

    fixed = replace(env, init_sampler=lambda r: x0.copy())
    return [
        simulate.integrate_sde(fixed, rng).states for _ in range(n)
    ]


@main.command("report")
@click.option(
    "--runs",
    "run_dirs",
    multiple=True,
    required=True,
    type=click.Path(exists=True),
    help="run directories to aggregate (repeatable)",
)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--force", is_flag=True, help="allow mixing environments")
def report(run_dirs, out_dir, force):
    """Merge per-seed reports into one CSV plus summary figures."""

    def go():
        rows, mean_rows = runner.aggregate_reports(list(run_dirs), force=force)
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "aggregate.csv")
        runner.write_aggregate_csv(rows, mean_rows, csv_path)
        click.echo(f"wrote {csv_path} ({len(rows)} rows + {len(mean_rows)} mean rows)")
        env_label = rows[0]["environment"] if not force else "all environments"
        for component in ("drift", "diffusion"):
            fig_path = os.path.join(out_dir, f"mse_{component}.png")
            if plots.mse_scatter(rows, component, fig_path, title=env_label):
                click.echo(f"wrote {fig_path}")

    _guard(go)


if __name__ == "__main__":
    main()
