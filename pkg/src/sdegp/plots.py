"""Figure rendering for the report and sampling paths.

All figures are written to files; nothing opens an interactive window.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

METHOD_ORDER = ("KM-SR", "GP-ODE", "GP-ODE-MS", "GP-SDE", "GP-SDE-MS")
METHOD_COLORS = {
    "KM-SR": "tab:green",
    "GP-ODE": "tab:orange",
    "GP-ODE-MS": "tab:red",
    "GP-SDE": "tab:blue",
    "GP-SDE-MS": "tab:purple",
}


def _method_positions(methods):
    present = [m for m in METHOD_ORDER if m in methods]
    extra = [m for m in sorted(set(methods)) if m not in present]
    order = present + extra
    return {m: i for i, m in enumerate(order)}, order


def mse_scatter(rows, component, path, title=None):
    """Per-seed MSE scatter by method with the mean as a black cross.

    rows: dicts with keys method, seed, <component>_mse, structure_ok.
    Star markers flag runs that recovered the correct structure of
    every equation; circles flag runs that did not.
    """
    key = f"{component}_mse"
    rows = [r for r in rows if r.get(key) not in (None, "") and not _isnan(r[key])]
    if not rows:
        return False
    pos, order = _method_positions([r["method"] for r in rows])
    fig, ax = plt.subplots(figsize=(1.2 + 1.3 * len(order), 4.0))
    rng = np.random.default_rng(0)  # deterministic jitter
    for r in rows:
        x = pos[r["method"]] + rng.uniform(-0.12, 0.12)
        marker = "*" if r["structure_ok"] else "o"
        ax.scatter(
            [x],
            [float(r[key])],
            marker=marker,
            s=90 if marker == "*" else 40,
            color=METHOD_COLORS.get(r["method"], "tab:gray"),
            alpha=0.8,
            zorder=3,
        )
    for m in order:
        vals = [float(r[key]) for r in rows if r["method"] == m]
        ax.scatter([pos[m]], [np.mean(vals)], marker="x", s=120, color="black", zorder=4)
    ax.set_xticks(range(len(order)))
    ax.set_xticklabels(order)
    ax.set_yscale("log")
    ax.set_ylabel(f"{component} MSE")
    if title:
        ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True


def _isnan(v):
    try:
        return np.isnan(float(v))
    except (TypeError, ValueError):
        return True


def sample_paths(times, truth_paths, mean, std, var_names, path, title=None):
    """Truth trajectories (black) against the generative mean (line)
    with a +-1 std band, one panel per variable."""
    n_vars = mean.shape[1]
    fig, axes = plt.subplots(n_vars, 1, figsize=(8, 2.2 * n_vars), sharex=True, squeeze=False)
    for i in range(n_vars):
        ax = axes[i, 0]
        for p in truth_paths:
            ax.plot(times, p[:, i], color="black", lw=0.8, alpha=0.7)
        ax.plot(times, mean[:, i], color="tab:blue", lw=1.5, label="model mean")
        ax.fill_between(
            times,
            mean[:, i] - std[:, i],
            mean[:, i] + std[:, i],
            color="tab:blue",
            alpha=0.25,
            label="model +-1 std",
        )
        ax.set_ylabel(var_names[i] if i < len(var_names) else f"x{i}")
        if i == 0:
            ax.legend(loc="upper right", fontsize=8)
            if title:
                ax.set_title(title)
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
