"""Closed-form optimality-gap bounds and their Monte Carlo verifiers.

The bounds split the expected gap into a communication term (what masking or
noise does to the mixed parameters), a local-training term, a fading-noise
term, and a constant offset from the size of the optimum.  Verifiers draw
realized channel matrices or noise samples and check each inequality at a
three-standard-error tolerance, since the bounds constrain expectations
rather than individual draws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import learners as ln
from . import topology as tp
from .engine import RunConfig, materialize, run_monte_carlo
from .rng import DOMAIN_MASK, DOMAIN_NOISE, derive_rng

__all__ = [
    "BoundInputs",
    "BoundReport",
    "MinRoundsResult",
    "MinProbabilityResult",
    "ComplexityResult",
    "TransportComparison",
    "MonteCarloCheck",
    "GapBoundCheck",
    "ConvergenceReport",
    "mixing_frob2_from",
    "digital_gap_bound",
    "analog_gap_bound",
    "fading_penalty_bound",
    "min_rounds_from_terms",
    "min_rounds_for_convergence",
    "min_correct_probability",
    "communication_complexity",
    "max_tolerable_noise",
    "compare_transports",
    "check_masked_product_norm",
    "check_noise_norm",
    "check_masked_product_deviation",
    "check_digital_gap_bound_empirical",
    "convergence_probability",
]


@dataclass(frozen=True)
class BoundInputs:
    """Constants the closed-form bounds consume.

    mixing_frob2 is the squared Frobenius norm of the ideal mixing product
    accumulated over all gossip rounds before the last update round; it lies
    in [1, n_devices] for any doubly stochastic symmetric matrix.
    init_spread is the extra term a distinct-initialization run contributes.
    """

    lipschitz: float
    grad_bound: float
    eta: float
    tau1: int
    tau2: int
    rounds: int
    n_devices: int
    dim: int
    p_correct: float = 1.0
    noise_scale: float = 0.0
    norm_w_init: float = 0.0
    norm_w_opt: float = 0.0
    mixing_frob2: float = 1.0
    init_spread: float = 0.0
    delta: float = 1.0
    epsilon: float = 0.5
    beta_bar: float | None = None

    def __post_init__(self) -> None:
        assert self.lipschitz > 0 and self.grad_bound > 0
        assert self.eta >= 0
        assert self.tau1 >= 1 and self.tau2 >= 1
        assert self.rounds >= 2, "bounds need at least two update rounds"
        assert self.n_devices >= 2 and self.dim >= 1
        assert 0.0 < self.p_correct <= 1.0
        assert self.noise_scale >= 0
        assert self.norm_w_init >= 0 and self.norm_w_opt >= 0
        assert 1.0 - 1e-9 <= self.mixing_frob2 <= self.n_devices + 1e-9
        assert self.init_spread >= 0
        assert self.delta > 0
        assert 0.0 < self.epsilon < 1.0


@dataclass(frozen=True)
class BoundReport:
    """Additive breakdown of one gap bound; total includes every term."""

    comm_term: float
    train_term: float
    noise_term: float
    opt_term: float
    total: float
    inputs: BoundInputs


def mixing_frob2_from(mixing: tp.MixingMatrix | np.ndarray, tau2: int, rounds: int) -> float:
    """Squared Frobenius norm of the mixing product before the last round."""
    assert rounds >= 2
    matrix = mixing.matrix if isinstance(mixing, tp.MixingMatrix) else np.asarray(mixing)
    q = tp.mixing_power(matrix, (rounds - 1) * tau2)
    return float(np.sum(q * q))


def _masked_frob_factor(mixing_frob2: float, n: int, p: float) -> float:
    radicand = (mixing_frob2 - n) * p * p + n * p
    assert radicand >= -1e-12, "masked-norm radicand went negative; inputs invalid"
    return math.sqrt(max(radicand, 0.0))


def _comm_and_train_terms(b: BoundInputs, p: float) -> tuple[float, float]:
    factor = _masked_frob_factor(b.mixing_frob2, b.n_devices, p)
    comm = b.lipschitz * b.norm_w_init * factor
    horizon = b.rounds - 1
    train = (
        b.lipschitz
        * b.eta
        * b.tau1
        * factor
        * (1.0 / math.sqrt(b.n_devices * horizon) + b.n_devices / horizon)
    )
    return comm, train


def _fading_term(b: BoundInputs) -> float:
    return (
        (b.rounds - 1)
        * b.lipschitz
        * b.noise_scale
        * math.sqrt(b.tau2 * b.dim * b.n_devices)
    )


def digital_gap_bound(b: BoundInputs) -> BoundReport:
    """Expected optimality-gap bound under packet-erasure gossip."""
    comm, train = _comm_and_train_terms(b, b.p_correct)
    opt = b.lipschitz * b.norm_w_opt
    return BoundReport(
        comm_term=comm,
        train_term=train,
        noise_term=0.0,
        opt_term=opt,
        total=comm + train + opt,
        inputs=b,
    )


def analog_gap_bound(b: BoundInputs) -> BoundReport:
    """Expected optimality-gap bound under noisy analog gossip.

    The analog channel delivers every packet, so the erasure probability is
    pinned to 1 and the only new term is the accumulated receiver noise.
    """
    comm, train = _comm_and_train_terms(b, 1.0)
    noise = _fading_term(b)
    opt = b.lipschitz * b.norm_w_opt
    return BoundReport(
        comm_term=comm,
        train_term=train,
        noise_term=noise,
        opt_term=opt,
        total=comm + train + noise + opt,
        inputs=b,
    )


def fading_penalty_bound(b: BoundInputs) -> float:
    """Expected loss increase attributable to analog receiver noise alone."""
    return _fading_term(b)


@dataclass(frozen=True)
class MinRoundsResult:
    feasible: bool
    t_min: int | None
    phi1: float
    phi2: float
    deficit: float


def min_rounds_from_terms(phi1: float, phi2: float, epsilon: float) -> MinRoundsResult:
    """Round-count formula on raw terms, usable outside the reachable regime."""
    assert phi1 >= 0 and phi2 >= 0
    assert 0.0 < epsilon < 1.0
    deficit = epsilon * epsilon - phi2
    if deficit <= 0.0:
        return MinRoundsResult(feasible=False, t_min=None, phi1=phi1, phi2=phi2, deficit=deficit)
    t_min = math.ceil(phi1 / deficit) + 1
    return MinRoundsResult(feasible=True, t_min=t_min, phi1=phi1, phi2=phi2, deficit=deficit)


def min_rounds_for_convergence(b: BoundInputs) -> MinRoundsResult:
    """Smallest round count satisfying the per-device convergence condition.

    The literal formula is vacuous for any real input set: phi2 is at least
    sqrt(n_devices) >= sqrt(2), which no epsilon < 1 can clear.  The result
    therefore usually carries feasible=False with the deficit, which is still
    worth reporting because the deficit is the quantity a tighter analysis
    would have to close.
    """
    assert b.beta_bar is not None, "supply beta_bar from realized mixing products"
    phi1 = b.eta * b.tau1 * b.grad_bound * b.beta_bar / b.delta
    phi2 = (
        math.sqrt((b.mixing_frob2 - b.n_devices) * b.p_correct**2 + b.n_devices * b.p_correct + b.n_devices)
        + b.init_spread
    )
    return min_rounds_from_terms(phi1, phi2, b.epsilon)


@dataclass(frozen=True)
class MinProbabilityResult:
    raw: float
    clamped: float


def min_correct_probability(b: BoundInputs) -> MinProbabilityResult:
    """Smallest per-link success probability meeting the convergence target.

    Evaluated literally; the raw root is reported alongside the [0, 1] clamp
    because the literal regime can push it negative.
    """
    n = b.n_devices
    q2 = b.mixing_frob2
    if abs(n - q2) < 1e-12:
        raise ValueError("mixing product norm equals device count; probability root is undefined")
    shift = (b.epsilon**2 - b.init_spread) ** 2
    radicand = n * n + 4.0 * (q2 - n) * shift
    if radicand < 0.0:
        raise ValueError("negative discriminant; no real success probability satisfies the target")
    raw = (-n + math.sqrt(radicand)) / (2.0 * (n - q2))
    return MinProbabilityResult(raw=raw, clamped=min(1.0, max(0.0, raw)))


@dataclass(frozen=True)
class ComplexityResult:
    feasible: bool
    value: float | None
    deficit: float


def communication_complexity(b: BoundInputs) -> ComplexityResult:
    """Communication cost scaling at the convergence threshold.

    Same feasibility region as min_rounds_for_convergence; the value is
    epsilon over the feasibility deficit.
    """
    phi2 = (
        math.sqrt((b.mixing_frob2 - b.n_devices) * b.p_correct**2 + b.n_devices * b.p_correct + b.n_devices)
        + b.init_spread
    )
    deficit = b.epsilon**2 - phi2
    if deficit <= 0.0:
        return ComplexityResult(feasible=False, value=None, deficit=deficit)
    return ComplexityResult(feasible=True, value=b.epsilon / deficit, deficit=deficit)


def max_tolerable_noise(b: BoundInputs) -> float:
    """Largest per-round analog noise scale the training progress can absorb."""
    horizon = b.rounds - 1
    comm_at_one = b.lipschitz * b.norm_w_init * _masked_frob_factor(b.mixing_frob2, b.n_devices, 1.0)
    lead = b.eta * b.tau1 * comm_at_one / (b.lipschitz * math.sqrt(b.tau2 * b.dim))
    return lead * (horizon**1.5 / (2.0 * b.n_devices) + math.sqrt(b.n_devices) / horizon**2)


@dataclass(frozen=True)
class TransportComparison:
    """Gap-bound totals for the three transports at one set of constants.

    reliable: every packet delivered (retransmission model, erasures off).
    lossy: per-link erasures at p_correct, no noise.
    analog: every packet delivered but carrying receiver noise.
    """

    reliable_total: float
    lossy_total: float
    analog_total: float
    reliable_is_min: bool
    p_threshold: float
    p_above_threshold: bool


def compare_transports(b: BoundInputs) -> TransportComparison:
    """Rank the three transport models by their gap-bound totals.

    The reliable transport is guaranteed cheapest once p_correct exceeds
    n/(2(n - mixing_frob2)): past that point the erasure factor decreases
    toward its p = 1 value, and any receiver noise only adds on top.
    """
    reliable = digital_gap_bound(replace(b, p_correct=1.0)).total
    lossy = digital_gap_bound(b).total
    analog = analog_gap_bound(b).total
    denom = 2.0 * (b.n_devices - b.mixing_frob2)
    threshold = math.inf if denom <= 0 else b.n_devices / denom
    return TransportComparison(
        reliable_total=reliable,
        lossy_total=lossy,
        analog_total=analog,
        reliable_is_min=reliable <= min(lossy, analog),
        p_threshold=threshold,
        p_above_threshold=b.p_correct > threshold,
    )


# ------------------------------------------------------ Monte Carlo checks


@dataclass(frozen=True)
class MonteCarloCheck:
    """One expectation-vs-bound comparison at 3 standard errors."""

    quantity: str
    empirical_mean: float
    bound: float
    std_error: float
    n_samples: int
    passed: bool


def _as_matrix(mixing: tp.MixingMatrix | np.ndarray) -> np.ndarray:
    matrix = mixing.matrix if isinstance(mixing, tp.MixingMatrix) else np.asarray(mixing, dtype=float)
    assert matrix.ndim == 2 and matrix.shape[0] == matrix.shape[1]
    return matrix


def _sample_masked_products(
    matrix: np.ndarray, p: float, factors: int, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Batch of realized erasure-masked mixing products, shape (s, n, n)."""
    n = matrix.shape[0]
    diag = np.arange(n)
    out = None
    for _ in range(factors):
        keep = rng.random((n_samples, n, n)) < p
        keep[:, diag, diag] = True
        masked = matrix[None, :, :] * keep
        out = masked if out is None else out @ masked
    assert out is not None
    return out


def _check_from_samples(quantity: str, values: np.ndarray, bound: float) -> MonteCarloCheck:
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    # The absolute term absorbs roundoff in the deterministic p = 1 case,
    # where the draws are all identical and the bound holds with equality.
    tol = 3.0 * se + 1e-12 * max(1.0, abs(bound))
    return MonteCarloCheck(
        quantity=quantity,
        empirical_mean=mean,
        bound=bound,
        std_error=se,
        n_samples=int(values.size),
        passed=mean <= bound + tol,
    )


def check_masked_product_norm(
    mixing: tp.MixingMatrix | np.ndarray,
    tau2: int,
    rounds: int,
    p_correct: float,
    n_samples: int = 10_000,
    seed: int = 0,
) -> MonteCarloCheck:
    """Mean Frobenius norm of realized masked products against its bound.

    At p_correct = 1 every sample equals the ideal product, so the empirical
    mean matches the bound exactly.
    """
    matrix = _as_matrix(mixing)
    n = matrix.shape[0]
    assert tau2 >= 1 and rounds >= 2 and n_samples >= 2
    assert 0.0 < p_correct <= 1.0
    rng = derive_rng(seed, DOMAIN_MASK)
    products = _sample_masked_products(matrix, p_correct, (rounds - 1) * tau2, n_samples, rng)
    norms = np.linalg.norm(products, axis=(1, 2))
    q2 = mixing_frob2_from(matrix, tau2, rounds)
    bound = _masked_frob_factor(q2, n, p_correct)
    return _check_from_samples("masked_product_norm", norms, bound)


def check_noise_norm(
    n_rows: int, n_cols: int, sigma: float, n_samples: int = 10_000, seed: int = 0
) -> MonteCarloCheck:
    """Mean Frobenius norm of an i.i.d. Gaussian matrix against sqrt(m*n)*sigma."""
    assert n_rows >= 1 and n_cols >= 1 and sigma >= 0 and n_samples >= 2
    rng = derive_rng(seed, DOMAIN_NOISE)
    draws = sigma * rng.standard_normal((n_samples, n_rows, n_cols))
    norms = np.linalg.norm(draws, axis=(1, 2))
    bound = math.sqrt(n_rows * n_cols) * sigma
    return _check_from_samples("noise_norm", norms, bound)


def check_masked_product_deviation(
    mixing: tp.MixingMatrix | np.ndarray,
    tau2: int,
    rounds: int,
    p_correct: float,
    n_samples: int = 10_000,
    seed: int = 0,
) -> MonteCarloCheck:
    """Mean distance of realized masked products from the identity."""
    matrix = _as_matrix(mixing)
    n = matrix.shape[0]
    assert tau2 >= 1 and rounds >= 2 and n_samples >= 2
    assert 0.0 < p_correct <= 1.0
    rng = derive_rng(seed, DOMAIN_MASK)
    products = _sample_masked_products(matrix, p_correct, (rounds - 1) * tau2, n_samples, rng)
    norms = np.linalg.norm(products - np.eye(n)[None, :, :], axis=(1, 2))
    q2 = mixing_frob2_from(matrix, tau2, rounds)
    radicand = (q2 - n) * p_correct**2 + n * p_correct + n
    return _check_from_samples("masked_product_deviation", norms, math.sqrt(radicand))


@dataclass(frozen=True)
class GapBoundCheck:
    empirical_gap: float
    bound: float
    tightness: float
    passed: bool
    inputs: BoundInputs
    constants: ln.ConstantEstimates


def check_digital_gap_bound_empirical(
    cfg: RunConfig,
    constants: ln.ConstantEstimates | None = None,
    constants_samples: int = 2_000,
    constants_seed: int = 0,
) -> GapBoundCheck:
    """Simulate the lossy digital run and compare its mean gap to the bound.

    Constants are estimated on a ball sized to cover the initial point and
    the optimum unless the caller supplies measured ones.
    """
    problem, mixing, rounds = materialize(cfg)
    assert rounds >= 2
    certificate = ln.solve_optimum(problem)
    result = run_monte_carlo(replace(cfg, problem=problem), certificate=certificate)
    empirical_gap = result.final_loss_mean - certificate.f_star

    norm_w1 = float(np.linalg.norm(result.runs[0].initial_params))
    norm_wstar = float(np.linalg.norm(certificate.w_star))
    if constants is None:
        radius = 1.5 * max(norm_w1, norm_wstar, 1.0)
        constants = ln.estimate_constants(
            problem, n_samples=constants_samples, seed=constants_seed, radius=radius
        )
    p_correct = cfg.channel.p_correct if hasattr(cfg.channel, "p_correct") else 1.0
    b = BoundInputs(
        lipschitz=constants.lipschitz,
        grad_bound=constants.grad_bound,
        eta=cfg.schedule.eta0,
        tau1=cfg.tau1,
        tau2=cfg.tau2,
        rounds=rounds,
        n_devices=problem.n_devices,
        dim=problem.dim,
        p_correct=p_correct,
        norm_w_init=norm_w1,
        norm_w_opt=norm_wstar,
        mixing_frob2=mixing_frob2_from(mixing, cfg.tau2, rounds),
        delta=cfg.delta,
        epsilon=cfg.epsilon,
    )
    report = digital_gap_bound(b)
    tightness = empirical_gap / report.total if report.total > 0 else math.inf
    return GapBoundCheck(
        empirical_gap=empirical_gap,
        bound=report.total,
        tightness=tightness,
        passed=empirical_gap <= report.total,
        inputs=b,
        constants=constants,
    )


@dataclass(frozen=True)
class ConvergenceReport:
    per_device_pass: np.ndarray
    all_pass: bool
    epsilon: float


def convergence_probability(stats, epsilon: float) -> ConvergenceReport:
    """Check the per-device convergence condition on empirical probabilities.

    A device passes when its probability of ending far from its optimum
    (relative error at least epsilon) is itself at most epsilon.
    """
    assert 0.0 < epsilon <= 1.0
    probs = np.asarray(stats.probabilities, dtype=float)
    per_device = probs <= epsilon
    return ConvergenceReport(
        per_device_pass=per_device,
        all_pass=bool(per_device.all()),
        epsilon=epsilon,
    )
