"""CSV and figure writers for every CLI artifact.

Every CSV starts with a comment line naming its schema version plus the
config hash and master seed that produced it, so any artifact can be traced
back to (and re-run from) its manifest.  Floats are written with repr's
shortest round-trip form; re-parsing a cell recovers the exact double.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "format_cell",
    "write_csv",
    "write_metrics_csv",
    "write_summary_csv",
    "write_sweep_csv",
    "write_bounds_csv",
    "write_lemma_csv",
    "write_empirical_allocation_csv",
    "write_grid_allocation_csv",
    "write_matrix_csv",
    "write_manifest",
    "plot_loss_curves",
    "plot_sweep",
    "plot_allocation",
    "plot_bound_terms",
    "plot_matrix_heatmap",
    "plot_lemma_margins",
]


def format_cell(value) -> str:
    """Shortest exact decimal for floats; plain str otherwise."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def write_csv(
    path: str | Path,
    schema: str,
    header: Sequence[str],
    rows: Iterable[Sequence],
    config_hash: str = "",
    seed: int | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {schema} config={config_hash} seed={'' if seed is None else seed}"]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(format_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_metrics_csv(path, metrics, config_hash: str, seed: int) -> Path:
    rows = [
        (t, metrics.losses[t], metrics.grad_norms[t], metrics.consensus_gaps[t])
        for t in range(len(metrics.losses))
    ]
    return write_csv(
        path,
        "dflsim-metrics-v1",
        ("round", "loss", "grad_norm", "consensus_gap"),
        rows,
        config_hash,
        seed,
    )


def write_summary_csv(path, result, config_hash: str, seed: int) -> Path:
    """One row per repetition; diverged repetitions keep their error text."""
    failed = dict(result.failures)
    rows = []
    completed = iter(result.runs)
    total = len(result.runs) + len(result.failures)
    for rep in range(total):
        if rep in failed:
            note = failed[rep].replace(",", ";").replace("\n", " ")
            rows.append((rep, "diverged", "", "", "", "", "", note))
            continue
        run = next(completed)
        rows.append(
            (
                rep,
                "ok",
                run.rounds,
                run.losses[-1],
                run.grad_norms[-1],
                run.consensus_gaps[-1],
                "" if run.beta_bar_realized is None else run.beta_bar_realized,
                "",
            )
        )
    return write_csv(
        path,
        "dflsim-summary-v1",
        ("rep", "status", "rounds", "final_loss", "final_grad_norm", "final_consensus_gap", "beta_bar", "note"),
        rows,
        config_hash,
        seed,
    )


def write_sweep_csv(path, rows, config_hash: str, seed: int) -> Path:
    return write_csv(
        path,
        "dflsim-sweep-v1",
        ("axis", "value", "repetitions", "final_loss_mean", "final_loss_std", "final_gap_mean", "failed"),
        [
            (r.axis, r.value, r.repetitions, r.final_loss_mean, r.final_loss_std, r.final_gap_mean, r.failed)
            for r in rows
        ],
        config_hash,
        seed,
    )


def write_bounds_csv(path, rows, config_hash: str = "", seed: int | None = None) -> Path:
    """rows: (name, value, feasible, note) tuples, one per bound."""
    return write_csv(
        path,
        "dflsim-bounds-v1",
        ("name", "value", "feasible", "note"),
        rows,
        config_hash,
        seed,
    )


def write_lemma_csv(path, checks, config_hash: str = "", seed: int | None = None) -> Path:
    return write_csv(
        path,
        "dflsim-lemmas-v1",
        ("quantity", "empirical_mean", "bound", "std_error", "n_samples", "passed"),
        [
            (c.quantity, c.empirical_mean, c.bound, c.std_error, c.n_samples, c.passed)
            for c in checks
        ],
        config_hash,
        seed,
    )


def write_empirical_allocation_csv(path, allocation, config_hash: str, seed: int) -> Path:
    return write_csv(
        path,
        "dflsim-allocation-v1",
        ("tau1", "tau2", "rounds", "final_loss_mean", "final_loss_std", "failed"),
        [
            (c.tau1, c.tau2, c.rounds, c.final_loss_mean, c.final_loss_std, c.failed)
            for c in allocation.table
        ],
        config_hash,
        seed,
    )


def write_grid_allocation_csv(path, result, config_hash: str = "", seed: int | None = None) -> Path:
    return write_csv(
        path,
        "dflsim-grid-allocation-v1",
        ("tau1", "tau2", "rounds", "bound_total"),
        [(c.tau1, c.tau2, c.rounds, c.bound_total) for c in result.table],
        config_hash,
        seed,
    )


def write_matrix_csv(path, matrix, config_hash: str = "", seed: int | None = None) -> Path:
    matrix = np.asarray(matrix)
    return write_csv(
        path,
        "dflsim-matrix-v1",
        tuple(f"c{j}" for j in range(matrix.shape[1])),
        matrix.tolist(),
        config_hash,
        seed,
    )


def write_manifest(path, raw_config: dict, config_hash: str, seed: int, command: str, artifacts: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "artifacts": list(artifacts),
        "config": raw_config,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------ figures


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(path, result) -> Path:
    """Mean loss per round with a one-standard-deviation band."""
    fig, ax = plt.subplots(figsize=(6, 4))
    rounds = np.arange(len(result.mean_losses))
    ax.plot(rounds, result.mean_losses, color="tab:blue", label="mean loss")
    if result.repetitions > 1:
        lo = result.mean_losses - result.std_losses
        hi = result.mean_losses + result.std_losses
        ax.fill_between(rounds, lo, hi, alpha=0.25, color="tab:blue", label="+/- 1 std")
    ax.set_xlabel("update round")
    ax.set_ylabel("global loss")
    if np.all(result.mean_losses > 0):
        ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def plot_sweep(path, rows) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    values = [r.value for r in rows]
    x = np.arange(len(values))
    means = np.array([r.final_loss_mean for r in rows])
    stds = np.array([r.final_loss_std for r in rows])
    ax.errorbar(x, means, yerr=stds, marker="o", capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels([str(v) for v in values])
    ax.set_xlabel(rows[0].axis if rows else "value")
    ax.set_ylabel("final loss (mean over repetitions)")
    return _save(fig, path)


def plot_allocation(path, allocation) -> Path:
    """Final loss against training steps, one line per gossip count."""
    fig, ax = plt.subplots(figsize=(6, 4))
    by_tau2: dict[int, list] = {}
    for c in allocation.table:
        by_tau2.setdefault(c.tau2, []).append(c)
    for tau2, cands in sorted(by_tau2.items()):
        cands = sorted(cands, key=lambda c: c.tau1)
        xs = [c.tau1 for c in cands if math.isfinite(c.final_loss_mean)]
        ys = [c.final_loss_mean for c in cands if math.isfinite(c.final_loss_mean)]
        if xs:
            ax.plot(xs, ys, marker="o", label=f"tau2={tau2}")
    ax.set_xlabel("local training steps per round")
    ax.set_ylabel("final loss (mean)")
    ax.legend()
    return _save(fig, path)


def plot_bound_terms(path, named_reports) -> Path:
    """Stacked bars of each bound's additive terms, one bar per report."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [name for name, _ in named_reports]
    x = np.arange(len(names))
    bottom = np.zeros(len(names))
    parts = [
        ("communication", [r.comm_term for _, r in named_reports]),
        ("local training", [r.train_term for _, r in named_reports]),
        ("receiver noise", [r.noise_term for _, r in named_reports]),
        ("optimum offset", [r.opt_term for _, r in named_reports]),
    ]
    for label, values in parts:
        values = np.asarray(values, dtype=float)
        ax.bar(x, values, bottom=bottom, label=label)
        bottom += values
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("bound value")
    ax.legend()
    return _save(fig, path)


def plot_matrix_heatmap(path, matrix, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    image = ax.imshow(np.asarray(matrix), cmap="viridis")
    fig.colorbar(image, ax=ax)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_lemma_margins(path, checks) -> Path:
    """Empirical means beside their bounds, one bar pair per check."""
    fig, ax = plt.subplots(figsize=(max(6, len(checks) * 0.5), 4))
    x = np.arange(len(checks))
    ax.bar(x - 0.2, [c.empirical_mean for c in checks], width=0.4, label="empirical mean")
    ax.bar(x + 0.2, [c.bound for c in checks], width=0.4, label="bound")
    ax.set_xticks(x)
    ax.set_xticklabels([c.quantity for c in checks], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("Frobenius norm")
    ax.legend()
    return _save(fig, path)
