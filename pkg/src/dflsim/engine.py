"""Update-loop orchestration: local training, gossip, budgets, repetitions.

One update round is tau1 local descent steps followed by tau2 gossip rounds
over the configured channel.  The engine owns seed derivation, per-round
metric collection, and the realized-product bookkeeping that the digital
disagreement analysis needs.
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import channels as ch
from . import learners as ln
from . import topology as tp
from .rng import DOMAIN_INIT, DOMAIN_MASK, DOMAIN_NOISE, derive_rng

__all__ = [
    "GraphSpec",
    "Stopping",
    "RunConfig",
    "RunMetrics",
    "ConvergenceStats",
    "MonteCarloResult",
    "SweepRow",
    "InfeasibleConfigError",
    "budget_rounds",
    "materialize",
    "run_dfl",
    "run_monte_carlo",
    "sweep",
    "rounds_to_threshold",
]

SWEEP_AXES = ("tau1", "tau2", "p", "noise_dbm", "n_devices", "topology", "eta")


class InfeasibleConfigError(ValueError):
    """The budget or configuration admits no complete update round."""


@dataclass(frozen=True)
class GraphSpec:
    """Declarative graph description, materialized on demand."""

    kind: str = "ring"
    n: int = 8
    edges: tuple[tuple[int, int], ...] | None = None

    def build(self) -> tp.Graph:
        return tp.build_graph(self.kind, self.n, edges=self.edges)


@dataclass(frozen=True)
class Stopping:
    """How many update rounds to run.

    Exactly one mode: a fixed round count, a simulation-step budget
    (every local step and every gossip round costs one step), or a resource
    budget with per-step prices.
    """

    t: int | None = None
    t_max: int | None = None
    r1: float | None = None
    r2: float | None = None
    r_total: float | None = None

    def __post_init__(self) -> None:
        modes = [self.t is not None, self.t_max is not None, self.r_total is not None]
        if sum(modes) != 1:
            raise ValueError("choose exactly one stopping mode: t, t_max, or r_total")
        if self.r_total is not None and (self.r1 is None or self.r2 is None):
            raise ValueError("resource budgets need r1 and r2 prices")

    def resolve(self, tau1: int, tau2: int) -> int:
        if self.t is not None:
            if self.t < 1:
                raise InfeasibleConfigError("round count must be at least 1")
            return self.t
        if self.t_max is not None:
            return budget_rounds(tau1, tau2, t_max=self.t_max)
        return budget_rounds(tau1, tau2, r1=self.r1, r2=self.r2, r_total=self.r_total)


def budget_rounds(
    tau1: int,
    tau2: int,
    t_max: int | None = None,
    r1: float | None = None,
    r2: float | None = None,
    r_total: float | None = None,
) -> int:
    """Largest whole number of update rounds affordable under the budget."""
    if tau1 < 1 or tau2 < 1:
        raise ValueError("tau1 and tau2 must be at least 1")
    if (t_max is None) == (r_total is None):
        raise ValueError("give either a step budget or a resource budget")
    if t_max is not None:
        rounds = t_max // (tau1 + tau2)
    else:
        if r1 is None or r2 is None or r1 <= 0 or r2 <= 0 or r_total <= 0:
            raise ValueError("resource prices and total must be positive")
        rounds = int(r_total // (tau1 * r1 + tau2 * r2))
    if rounds < 1:
        raise InfeasibleConfigError(
            f"budget affords zero complete rounds at tau1={tau1}, tau2={tau2}"
        )
    return rounds


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; value-like so sweeps can copy-and-replace."""

    problem: ln.Problem | ln.ProblemSpec
    graph: tp.Graph | GraphSpec
    tau1: int
    tau2: int
    stopping: Stopping
    schedule: ln.LearningSchedule
    seed: int = 0
    scheme: tp.MixingScheme = tp.MixingScheme.METROPOLIS_HASTINGS
    channel: ch.DigitalChannel | ch.AnalogChannel | None = None
    repetitions: int = 1
    clip: float | None = None
    init: str = "shared"
    init_scale: float = 1.0
    epsilon: float = 0.5
    delta: float = 1.0
    track_realized: bool = True

    def __post_init__(self) -> None:
        if self.tau1 < 1 or self.tau2 < 1:
            raise ValueError("tau1 and tau2 must be at least 1")
        if self.init not in ("shared", "distinct"):
            raise ValueError("init must be 'shared' or 'distinct'")
        if self.repetitions < 1:
            raise ValueError("need at least one repetition")
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in (0, 1]")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    def n_devices(self) -> int:
        return self.graph.n if isinstance(self.graph, GraphSpec) else self.graph.n


def materialize(cfg: RunConfig) -> tuple[ln.Problem, tp.MixingMatrix, int]:
    if isinstance(cfg.graph, GraphSpec):
        graph = tp.Graph(n=1, edges=()) if cfg.graph.n == 1 else cfg.graph.build()
    else:
        graph = cfg.graph
    if graph.n == 1:
        # Single-device runs reduce to centralized descent; the trivial mixing
        # matrix bypasses build_graph's two-vertex minimum.
        mixing = tp.MixingMatrix(
            matrix=np.ones((1, 1)), scheme=tp.MixingScheme(cfg.scheme), graph=graph
        )
    else:
        mixing = tp.build_mixing_matrix(graph, cfg.scheme)
    problem = cfg.problem if isinstance(cfg.problem, ln.Problem) else cfg.problem.build(graph.n)
    if problem.n_devices != graph.n:
        raise ValueError(
            f"problem has {problem.n_devices} devices but graph has {graph.n}"
        )
    rounds = cfg.stopping.resolve(cfg.tau1, cfg.tau2)
    return problem, mixing, rounds


def _initial_params(cfg: RunConfig, problem: ln.Problem, n: int) -> np.ndarray:
    rng = derive_rng(cfg.seed, DOMAIN_INIT)
    if cfg.init == "shared":
        col = cfg.init_scale * rng.standard_normal(problem.dim)
        return np.tile(col[:, None], (1, n))
    return cfg.init_scale * rng.standard_normal((problem.dim, n))


@dataclass(frozen=True)
class RunMetrics:
    """Per-round trajectory of one run; arrays have length rounds + 1."""

    losses: np.ndarray
    grad_norms: np.ndarray
    consensus_gaps: np.ndarray
    final_params: np.ndarray
    initial_params: np.ndarray
    rounds: int
    seed: int
    beta_bar_realized: float | None
    wall_clock_s: float


def _consensus_gap(w: np.ndarray) -> float:
    return float(np.linalg.norm(w - w.mean(axis=1, keepdims=True)))


def _mean_grad_norm(problem: ln.Problem, w: np.ndarray) -> float:
    g = ln.global_gradient(problem, w)
    return float(np.mean(np.linalg.norm(g, axis=0)))


def run_dfl(cfg: RunConfig, rep: int = 0) -> RunMetrics:
    """Simulate one seeded trajectory of the decentralized update loop.

    Initialization is derived from the master seed alone; channel randomness
    is derived from (seed, repetition, round), so repetitions share their
    starting point and differ only in what the channel did.
    """
    started = time.perf_counter()
    problem, mixing, rounds = materialize(cfg)
    n = mixing.graph.n
    w0 = _initial_params(cfg, problem, n)
    w = w0.copy()

    losses = [ln.global_loss(problem, w)]
    grad_norms = [_mean_grad_norm(problem, w)]
    gaps = [_consensus_gap(w)]

    digital = isinstance(cfg.channel, ch.DigitalChannel)
    analog = isinstance(cfg.channel, ch.AnalogChannel)
    cumulative = None
    cumulative_betas: list[np.ndarray] = []

    for t in range(1, rounds + 1):
        w = ln.local_train(problem, w, cfg.tau1, cfg.schedule, t, clip=cfg.clip)
        if digital:
            rng = derive_rng(cfg.seed, DOMAIN_MASK, rep, t)
            w, realized = ch.gossip_digital(w, mixing, cfg.channel, cfg.tau2, rng)
            if cfg.track_realized and t < rounds:
                cumulative = realized if cumulative is None else cumulative @ realized
                cumulative_betas.append(cumulative)
        elif analog:
            rng = derive_rng(cfg.seed, DOMAIN_NOISE, rep, t)
            w = ch.gossip_analog(w, mixing, cfg.channel, cfg.tau2, rng)
        else:
            w = ch.gossip_ideal(w, mixing, cfg.tau2)
        losses.append(ln.global_loss(problem, w))
        grad_norms.append(_mean_grad_norm(problem, w))
        gaps.append(_consensus_gap(w))

    bbar = None
    if digital and cfg.track_realized and cumulative_betas:
        bbar = tp.beta_bar(cumulative_betas)

    return RunMetrics(
        losses=np.asarray(losses),
        grad_norms=np.asarray(grad_norms),
        consensus_gaps=np.asarray(gaps),
        final_params=w,
        initial_params=w0,
        rounds=rounds,
        seed=cfg.seed,
        beta_bar_realized=bbar,
        wall_clock_s=time.perf_counter() - started,
    )


@dataclass(frozen=True)
class ConvergenceStats:
    """Per-device empirical failure probabilities against the certificate.

    probabilities[i] estimates Pr(|w_i - w_i*| / (|w_i initial| + delta) >= epsilon)
    over the repetitions' channel randomness.
    """

    probabilities: np.ndarray
    epsilon: float
    delta: float
    repetitions: int

    def all_below(self, level: float) -> bool:
        return bool(np.all(self.probabilities <= level))


@dataclass(frozen=True)
class MonteCarloResult:
    runs: tuple[RunMetrics, ...]
    mean_losses: np.ndarray
    std_losses: np.ndarray
    final_loss_mean: float
    final_loss_std: float
    convergence: ConvergenceStats | None
    failures: tuple[tuple[int, str], ...]

    @property
    def repetitions(self) -> int:
        return len(self.runs)


def _thread_count() -> int:
    raw = os.environ.get("DFL_THREADS", "1")
    try:
        count = int(raw)
    except ValueError as exc:
        raise ValueError(f"DFL_THREADS must be an integer, got {raw!r}") from exc
    return max(count, 1)


def run_monte_carlo(cfg: RunConfig, certificate: ln.OptimumCertificate | None = None) -> MonteCarloResult:
    """Repeat the run over independent channel streams and aggregate.

    A failed repetition (divergence) is recorded with its error message and
    excluded from the aggregates.  When the problem admits a certificate (or
    one is passed in), per-device convergence statistics are attached.
    """
    workers = _thread_count()
    results: list[RunMetrics | None] = [None] * cfg.repetitions
    failures: list[tuple[int, str]] = []

    def one(rep: int) -> tuple[int, RunMetrics | None, str | None]:
        try:
            return rep, run_dfl(cfg, rep=rep), None
        except ln.DivergenceError as exc:
            return rep, None, str(exc)

    if workers == 1:
        outcomes = [one(r) for r in range(cfg.repetitions)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, range(cfg.repetitions)))
    for rep, metrics, err in outcomes:
        if err is not None:
            failures.append((rep, err))
        else:
            results[rep] = metrics

    completed = [r for r in results if r is not None]
    if not completed:
        raise ln.DivergenceError(
            "every repetition diverged", round_index=0, max_abs=math.inf
        )
    loss_matrix = np.vstack([r.losses for r in completed])
    finals = loss_matrix[:, -1]

    convergence = None
    problem = cfg.problem if isinstance(cfg.problem, ln.Problem) else None
    if certificate is None and problem is not None and problem.kind is not ln.ProblemKind.MLP_SOFTMAX:
        try:
            certificate = ln.solve_optimum(problem)
        except (ln.SeparableDataError, ValueError, RuntimeError):
            certificate = None
    if certificate is not None:
        failures_per_device = None
        for r in completed:
            denom = np.linalg.norm(r.initial_params, axis=0) + cfg.delta
            dist = np.linalg.norm(r.final_params - certificate.w_star, axis=0)
            misses = (dist / denom >= cfg.epsilon).astype(float)
            failures_per_device = misses if failures_per_device is None else failures_per_device + misses
        convergence = ConvergenceStats(
            probabilities=failures_per_device / len(completed),
            epsilon=cfg.epsilon,
            delta=cfg.delta,
            repetitions=len(completed),
        )

    return MonteCarloResult(
        runs=tuple(completed),
        mean_losses=loss_matrix.mean(axis=0),
        std_losses=loss_matrix.std(axis=0),
        final_loss_mean=float(finals.mean()),
        final_loss_std=float(finals.std()),
        convergence=convergence,
        failures=tuple(failures),
    )


# --------------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: object
    repetitions: int
    final_loss_mean: float
    final_loss_std: float
    final_gap_mean: float
    failed: int


def _with_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "tau1":
        return replace(cfg, tau1=int(value))
    if axis == "tau2":
        return replace(cfg, tau2=int(value))
    if axis == "eta":
        return replace(cfg, schedule=replace(cfg.schedule, eta0=float(value)))
    if axis == "p":
        return replace(cfg, channel=ch.DigitalChannel(p_correct=float(value)))
    if axis == "noise_dbm":
        base = cfg.channel if isinstance(cfg.channel, ch.AnalogChannel) else ch.AnalogChannel(noise_std=0.0)
        return replace(cfg, channel=replace(base, noise_std=ch.sigma_n_from_dbm(float(value))))
    if axis == "n_devices":
        if not isinstance(cfg.graph, GraphSpec):
            raise ValueError("sweeping device count needs a declarative graph")
        if not isinstance(cfg.problem, ln.ProblemSpec):
            raise ValueError("sweeping device count needs a declarative problem")
        return replace(cfg, graph=replace(cfg.graph, n=int(value)))
    if axis == "topology":
        if not isinstance(cfg.graph, GraphSpec):
            raise ValueError("sweeping topology needs a declarative graph")
        return replace(cfg, graph=replace(cfg.graph, kind=str(value)))
    raise ValueError(f"unknown sweep axis {axis!r}; valid axes: {', '.join(SWEEP_AXES)}")


def sweep(cfg: RunConfig, axis: str, values: Sequence) -> list[SweepRow]:
    """Rerun the configuration across one axis and tabulate final metrics."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; valid axes: {', '.join(SWEEP_AXES)}")
    if len(values) == 0:
        raise ValueError("sweep needs at least one value")
    rows = []
    for value in values:
        sub = _with_axis(cfg, axis, value)
        result = run_monte_carlo(sub)
        gap_mean = float(np.mean([r.consensus_gaps[-1] for r in result.runs]))
        rows.append(
            SweepRow(
                axis=axis,
                value=value,
                repetitions=result.repetitions,
                final_loss_mean=result.final_loss_mean,
                final_loss_std=result.final_loss_std,
                final_gap_mean=gap_mean,
                failed=len(result.failures),
            )
        )
    return rows


def rounds_to_threshold(losses: np.ndarray, threshold: float) -> int:
    """First round index whose loss is at or below the threshold.

    Returns len(losses) (one past the last round) when the threshold is never
    reached, so non-reaching runs sort as slowest.
    """
    hits = np.nonzero(np.asarray(losses) <= threshold)[0]
    return int(hits[0]) if hits.size else len(losses)
