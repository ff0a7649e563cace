"""Command-line entry point: simulate, bounds, verify-lemmas, sweep,
allocate, spectral.

Every command writes its delimited outputs plus rendered figures into the
--out directory, alongside a manifest that embeds the effective config and
its hash; feeding a manifest back through --config reproduces the artifacts
byte for byte.  Exit codes: 0 success, 1 a verifier failed, 2 invalid or
infeasible config, 3 runtime failure (divergence or deep fade).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import allocator as al
from . import analysis as an
from . import reports as rp
from . import topology as tp
from .config import (
    BOUNDS_SCHEMA,
    ConfigError,
    build_run_config,
    config_hash,
    load_config,
)
from .engine import materialize, run_monte_carlo, sweep as run_sweep
from .rng import DOMAIN_REP, derive_seed

__all__ = ["main", "build_parser"]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _effective_config(args) -> tuple[dict, int, int]:
    raw = load_config(args.config)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    reps = args.reps if getattr(args, "reps", None) is not None else raw.get("repetitions", 1)
    effective = dict(raw)
    effective["seed"] = seed
    effective["repetitions"] = reps
    return effective, seed, reps


def _parse_values(text: str, axis: str) -> list:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("no values given")
    if axis == "topology":
        return parts
    if axis in ("tau1", "tau2", "n_devices"):
        return [int(p) for p in parts]
    return [float(p) for p in parts]


def _parse_int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    effective, seed, _ = _effective_config(args)
    chash = config_hash(effective)
    cfg = build_run_config(effective)
    result = run_monte_carlo(cfg)
    out = _out_dir(args)

    mean_curve = SimpleNamespace(
        losses=result.mean_losses,
        grad_norms=np.mean([r.grad_norms for r in result.runs], axis=0),
        consensus_gaps=np.mean([r.consensus_gaps for r in result.runs], axis=0),
    )
    artifacts = [
        rp.write_metrics_csv(out / "metrics.csv", mean_curve, chash, seed).name,
        rp.write_summary_csv(out / "summary.csv", result, chash, seed).name,
    ]
    if not args.no_plot:
        artifacts.append(rp.plot_loss_curves(out / "loss_curve.png", result).name)
    rp.write_manifest(out / "manifest.json", effective, chash, seed, "simulate", artifacts)

    rounds = result.runs[0].rounds
    print(
        f"simulate: rounds={rounds} reps={result.repetitions} "
        f"final_loss_mean={result.final_loss_mean:.6g} final_loss_std={result.final_loss_std:.3g} "
        f"diverged={len(result.failures)}"
    )
    if result.convergence is not None:
        worst = float(result.convergence.probabilities.max())
        print(f"simulate: worst per-device miss probability {worst:.3g} at epsilon={cfg.epsilon}")
    print(f"simulate: wrote {', '.join(artifacts)} to {out}")
    return 0


# ------------------------------------------------------------------ bounds


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def cmd_bounds(args) -> int:
    raw = load_config(args.config, schema=BOUNDS_SCHEMA)
    b = an.BoundInputs(**raw)
    digital = an.digital_gap_bound(b)
    analog = an.analog_gap_bound(b)
    rows: list[tuple] = [
        (
            "digital_gap_total",
            digital.total,
            True,
            f"comm={_fmt(digital.comm_term)} train={_fmt(digital.train_term)} opt={_fmt(digital.opt_term)}",
        ),
        (
            "analog_gap_total",
            analog.total,
            True,
            f"comm={_fmt(analog.comm_term)} train={_fmt(analog.train_term)} "
            f"noise={_fmt(analog.noise_term)} opt={_fmt(analog.opt_term)}",
        ),
        ("fading_penalty", an.fading_penalty_bound(b), True, ""),
        ("max_tolerable_noise", an.max_tolerable_noise(b), True, ""),
    ]
    if b.beta_bar is None:
        rows.append(("min_rounds", "", False, "supply beta_bar to evaluate"))
    else:
        mr = an.min_rounds_for_convergence(b)
        rows.append(
            (
                "min_rounds",
                "" if mr.t_min is None else mr.t_min,
                mr.feasible,
                f"phi1={_fmt(mr.phi1)} phi2={_fmt(mr.phi2)} deficit={_fmt(mr.deficit)}",
            )
        )
    try:
        mp = an.min_correct_probability(b)
        rows.append(("min_correct_probability", mp.clamped, True, f"raw={_fmt(mp.raw)}"))
    except ValueError as exc:
        rows.append(("min_correct_probability", "", False, str(exc).replace(",", ";")))
    cc = an.communication_complexity(b)
    rows.append(
        (
            "communication_complexity",
            "" if cc.value is None else cc.value,
            cc.feasible,
            f"deficit={_fmt(cc.deficit)}",
        )
    )
    cmp_report = an.compare_transports(b)
    rows.append(
        (
            "transport_reliable_total",
            cmp_report.reliable_total,
            True,
            f"is_min={cmp_report.reliable_is_min} p_threshold={_fmt(cmp_report.p_threshold)} "
            f"p_above_threshold={cmp_report.p_above_threshold}",
        )
    )
    rows.append(("transport_lossy_total", cmp_report.lossy_total, True, ""))
    rows.append(("transport_analog_total", cmp_report.analog_total, True, ""))

    out = _out_dir(args)
    chash = config_hash(raw)
    artifacts = [rp.write_bounds_csv(out / "bounds.csv", rows, chash).name]
    if not args.no_plot:
        artifacts.append(
            rp.plot_bound_terms(
                out / "bound_terms.png", [("digital", digital), ("analog", analog)]
            ).name
        )
    rp.write_manifest(out / "manifest.json", raw, chash, raw.get("seed", 0), "bounds", artifacts)
    for name, value, feasible, note in rows:
        value_text = _fmt(value) if isinstance(value, float) else str(value)
        print(f"{name:<28} {value_text:>14} feasible={feasible} {note}")
    return 0


# ----------------------------------------------------------- verify-lemmas


def cmd_verify_lemmas(args) -> int:
    p_values = [float(p) for p in args.p.split(",")]
    tau2_values = _parse_int_list(args.tau2)
    graph = tp.build_graph(args.topology, args.n)
    mixing = tp.build_mixing_matrix(graph, tp.MixingScheme.METROPOLIS_HASTINGS)

    checks = []
    counter = 0
    for p in p_values:
        for tau2 in tau2_values:
            tag = f"topology={args.topology} n={args.n} p={p} tau2={tau2}"
            for fn in (an.check_masked_product_norm, an.check_masked_product_deviation):
                check = fn(
                    mixing,
                    tau2,
                    args.rounds,
                    p,
                    n_samples=args.samples,
                    seed=derive_seed(args.seed, DOMAIN_REP, counter),
                )
                checks.append(replace(check, quantity=f"{check.quantity} {tag}"))
                counter += 1
    for rows_cols_sigma in ((4, 4, 0.5), (8, 8, 1.0), (1, 1, 1.0)):
        m_rows, n_cols, sigma = rows_cols_sigma
        check = an.check_noise_norm(
            m_rows,
            n_cols,
            sigma,
            n_samples=args.samples,
            seed=derive_seed(args.seed, DOMAIN_REP, counter),
        )
        checks.append(
            replace(check, quantity=f"{check.quantity} m={m_rows} n={n_cols} sigma={sigma}")
        )
        counter += 1

    if args.bound_scale != 1.0:
        # Test hook: shrink every bound to exercise the failure path.
        checks = [
            replace(
                c,
                bound=c.bound * args.bound_scale,
                passed=c.empirical_mean <= c.bound * args.bound_scale + 3.0 * c.std_error,
            )
            for c in checks
        ]

    out = _out_dir(args)
    artifacts = [rp.write_lemma_csv(out / "lemma_checks.csv", checks, "", args.seed).name]
    if not args.no_plot:
        artifacts.append(rp.plot_lemma_margins(out / "lemma_margins.png", checks).name)
    rp.write_manifest(
        out / "manifest.json",
        {"suite": "verify-lemmas", "topology": args.topology, "n": args.n},
        "",
        args.seed,
        "verify-lemmas",
        artifacts,
    )
    failed = [c for c in checks if not c.passed]
    for c in checks:
        status = "pass" if c.passed else "FAIL"
        print(f"{status}  {c.quantity}: mean={c.empirical_mean:.6g} bound={c.bound:.6g} se={c.std_error:.2g}")
    print(f"verify-lemmas: {len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


# ------------------------------------------------------------------- sweep


def cmd_sweep(args) -> int:
    effective, seed, _ = _effective_config(args)
    block = effective.get("sweep", {})
    axis = args.axis or block.get("axis")
    if axis is None:
        raise ConfigError("give --axis or a sweep block in the config")
    if args.values is not None:
        values = _parse_values(args.values, axis)
    elif "values" in block:
        values = list(block["values"])
    else:
        raise ConfigError("give --values or a sweep block in the config")
    effective["sweep"] = {"axis": axis, "values": values}
    chash = config_hash(effective)
    cfg = build_run_config(effective)
    rows = run_sweep(cfg, axis, values)

    out = _out_dir(args)
    artifacts = [rp.write_sweep_csv(out / "sweep.csv", rows, chash, seed).name]
    if not args.no_plot:
        artifacts.append(rp.plot_sweep(out / "sweep.png", rows).name)
    rp.write_manifest(out / "manifest.json", effective, chash, seed, "sweep", artifacts)
    for row in rows:
        print(
            f"{axis}={row.value}: final_loss_mean={row.final_loss_mean:.6g} "
            f"std={row.final_loss_std:.3g} failed={row.failed}"
        )
    return 0


# ---------------------------------------------------------------- allocate


def cmd_allocate(args) -> int:
    raw = load_config(args.config) if args.config else None
    block = (raw or {}).get("allocate", {})
    r1 = args.r1 if args.r1 is not None else block.get("r1")
    r2 = args.r2 if args.r2 is not None else block.get("r2")
    r_c = args.rc if args.rc is not None else block.get("r_c")
    if r1 is None or r2 is None or r_c is None:
        raise ConfigError("give --r1/--r2/--rc or an allocate block in the config")
    budget = al.Budget(r1=r1, r2=r2, r_c=r_c)
    closed = al.allocate_budget(budget)
    print(
        f"allocate: closed-form tau1={closed.tau1} tau2={closed.tau2} "
        f"cost={closed.cost:g} repaired={closed.repaired}"
    )

    out = _out_dir(args)
    artifacts = []
    chash = "" if raw is None else config_hash(raw)

    if args.bounds:
        template = an.BoundInputs(**load_config(args.bounds, schema=BOUNDS_SCHEMA))
        grid = al.grid_search_allocate(
            budget, template, rounds_mode=args.rounds_mode, r_total=args.r_total
        )
        artifacts.append(rp.write_grid_allocation_csv(out / "grid_allocation.csv", grid, chash).name)
        print(
            f"allocate: grid-search tau1={grid.tau1} tau2={grid.tau2} "
            f"rounds={grid.rounds} bound={grid.bound_total:.6g}"
        )

    if raw is not None:
        seed = args.seed if args.seed is not None else raw.get("seed", 0)
        reps = args.reps if args.reps is not None else raw.get("repetitions", 1)
        effective = dict(raw)
        effective["seed"] = seed
        effective["repetitions"] = reps
        effective["allocate"] = {"r1": r1, "r2": r2, "r_c": r_c}
        cfg = build_run_config(effective)
        if args.tau1_values:
            tau1_values = _parse_int_list(args.tau1_values)
        elif "tau1_values" in block:
            tau1_values = list(block["tau1_values"])
        else:
            tau1_values = list(range(1, int((budget.r_c - budget.r2) // budget.r1) + 1))
        if args.tau2_values:
            tau2_values = _parse_int_list(args.tau2_values)
        elif "tau2_values" in block:
            tau2_values = list(block["tau2_values"])
        else:
            tau2_values = [cfg.tau2]
        effective["allocate"]["tau1_values"] = tau1_values
        effective["allocate"]["tau2_values"] = tau2_values
        chash = config_hash(effective)
        emp = al.empirical_allocate(cfg, tau1_values, tau2_values, budget)
        artifacts.append(
            rp.write_empirical_allocation_csv(out / "empirical_allocation.csv", emp, chash, seed).name
        )
        if not args.no_plot:
            artifacts.append(rp.plot_allocation(out / "allocation.png", emp).name)
        rp.write_manifest(out / "manifest.json", effective, chash, seed, "allocate", artifacts)
        print(
            f"allocate: empirical tau1={emp.tau1} tau2={emp.tau2} "
            f"final_loss_mean={emp.final_loss_mean:.6g}"
        )
    print(f"allocate: wrote {', '.join(artifacts) if artifacts else 'no tables'} to {out}")
    return 0


# ---------------------------------------------------------------- spectral


def cmd_spectral(args) -> int:
    if args.config:
        raw = load_config(args.config)
        cfg = build_run_config(raw)
        _, mixing, _ = materialize(cfg)
    else:
        graph = tp.build_graph(args.topology, args.n)
        mixing = tp.build_mixing_matrix(graph, tp.MixingScheme(args.scheme))
    report = tp.spectral_report(mixing.matrix)
    out = _out_dir(args)
    artifacts = [
        rp.write_matrix_csv(out / "mixing_matrix.csv", mixing.matrix).name,
        rp.write_csv(
            out / "spectral.csv",
            "dflsim-spectral-v1",
            ("lambda2", "beta", "top_eigvec_residual", "infeasible"),
            [(report.lambda2, report.beta, report.top_eigvec_residual, report.infeasible)],
        ).name,
    ]
    if not args.no_plot:
        artifacts.append(
            rp.plot_matrix_heatmap(
                out / "mixing_matrix.png", mixing.matrix, title=f"{mixing.scheme.value} weights"
            ).name
        )
    print(
        f"spectral: n={mixing.graph.n} lambda2={report.lambda2:.12g} "
        f"beta={report.beta:.6g} infeasible={report.infeasible}"
    )
    print(f"spectral: wrote {', '.join(artifacts)} to {out}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dflsim",
        description="Simulator and bound toolkit for gossip-based decentralized learning over lossy links.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="JSON config or manifest path")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--format", choices=["csv"], default="csv", help="table format")
        p.add_argument("--no-plot", action="store_true", help="skip figure rendering")

    p_sim = sub.add_parser("simulate", help="run the configured experiment")
    common(p_sim)
    p_sim.add_argument("--reps", type=int, default=None, help="repetition override")
    p_sim.set_defaults(func=cmd_simulate)

    p_bounds = sub.add_parser("bounds", help="evaluate closed-form bounds from a constants file")
    common(p_bounds)
    p_bounds.set_defaults(func=cmd_bounds)

    p_verify = sub.add_parser("verify-lemmas", help="Monte Carlo checks of the norm bounds")
    p_verify.add_argument("--topology", default="ring", choices=["ring", "chain", "complete"])
    p_verify.add_argument("--n", type=int, default=8)
    p_verify.add_argument("--p", default="0.6,0.8,1.0", help="comma-separated success probabilities")
    p_verify.add_argument("--tau2", default="1,3", help="comma-separated gossip counts")
    p_verify.add_argument("--rounds", type=int, default=2)
    p_verify.add_argument("--samples", type=int, default=10_000)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--out", default="out")
    p_verify.add_argument("--format", choices=["csv"], default="csv")
    p_verify.add_argument("--no-plot", action="store_true")
    p_verify.add_argument("--bound-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    p_verify.set_defaults(func=cmd_verify_lemmas)

    p_sweep = sub.add_parser("sweep", help="rerun the config across one axis")
    common(p_sweep)
    p_sweep.add_argument("--reps", type=int, default=None)
    p_sweep.add_argument("--axis", default=None, help="tau1,tau2,p,noise_dbm,n_devices,topology,eta")
    p_sweep.add_argument("--values", default=None, help="comma-separated axis values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_alloc = sub.add_parser("allocate", help="split a per-round budget between training and gossip")
    p_alloc.add_argument("--r1", type=float, default=None, help="cost of one training step")
    p_alloc.add_argument("--r2", type=float, default=None, help="cost of one gossip round")
    p_alloc.add_argument("--rc", type=float, default=None, help="per-round budget")
    p_alloc.add_argument("--config", default=None, help="simulate config for the empirical table")
    p_alloc.add_argument("--bounds", default=None, help="constants file for the grid search")
    p_alloc.add_argument("--rounds-mode", choices=["fixed", "budget"], default="fixed")
    p_alloc.add_argument("--r-total", type=float, default=None, help="whole-run budget (budget mode)")
    p_alloc.add_argument("--tau1-values", default=None)
    p_alloc.add_argument("--tau2-values", default=None)
    p_alloc.add_argument("--seed", type=int, default=None)
    p_alloc.add_argument("--reps", type=int, default=None)
    p_alloc.add_argument("--out", default="out")
    p_alloc.add_argument("--format", choices=["csv"], default="csv")
    p_alloc.add_argument("--no-plot", action="store_true")
    p_alloc.set_defaults(func=cmd_allocate)

    p_spec = sub.add_parser("spectral", help="mixing matrix and its spectral quantities")
    p_spec.add_argument("--config", default=None)
    p_spec.add_argument("--topology", default="ring", choices=["ring", "chain", "complete"])
    p_spec.add_argument("--n", type=int, default=8)
    p_spec.add_argument(
        "--scheme",
        default="metropolis_hastings",
        choices=["uniform_neighbor", "metropolis_hastings"],
    )
    p_spec.add_argument("--out", default="out")
    p_spec.add_argument("--format", choices=["csv"], default="csv")
    p_spec.add_argument("--no-plot", action="store_true")
    p_spec.set_defaults(func=cmd_spectral)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
