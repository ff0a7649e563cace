import math
from dataclasses import replace

import numpy as np
import pytest

import dflsim.analysis as an
import dflsim.channels as ch
import dflsim.engine as eg
import dflsim.learners as ln
import dflsim.topology as tp
from helpers import mh_mixing

RNG = np.random.default_rng(77)


def random_inputs(rng: np.random.Generator, **overrides) -> an.BoundInputs:
    n = int(rng.integers(2, 13))
    fields = dict(
        lipschitz=float(rng.uniform(0.1, 5.0)),
        grad_bound=float(rng.uniform(0.1, 5.0)),
        eta=float(rng.uniform(0.0, 1.0)),
        tau1=int(rng.integers(1, 6)),
        tau2=int(rng.integers(1, 6)),
        rounds=int(rng.integers(2, 60)),
        n_devices=n,
        dim=int(rng.integers(1, 25)),
        p_correct=float(rng.uniform(0.05, 1.0)),
        noise_scale=float(rng.uniform(0.0, 0.5)),
        norm_w_init=float(rng.uniform(0.0, 10.0)),
        norm_w_opt=float(rng.uniform(0.0, 10.0)),
        mixing_frob2=float(rng.uniform(1.0, n)),
        init_spread=float(rng.uniform(0.0, 3.0)),
        delta=float(rng.uniform(0.1, 2.0)),
        epsilon=float(rng.uniform(0.05, 0.95)),
        beta_bar=float(rng.uniform(1.0, 10.0)),
    )
    fields.update(overrides)
    return an.BoundInputs(**fields)


# Hand-recoded references, written from the formulas alone.


def oracle_factor(q2: float, n: int, p: float) -> float:
    return math.sqrt((q2 - n) * p * p + n * p)


def oracle_digital_total(b: an.BoundInputs) -> tuple[float, float, float]:
    factor = oracle_factor(b.mixing_frob2, b.n_devices, b.p_correct)
    comm = b.lipschitz * b.norm_w_init * factor
    h = b.rounds - 1
    train = b.lipschitz * b.eta * b.tau1 * factor * (
        1.0 / math.sqrt(b.n_devices * h) + b.n_devices / h
    )
    opt = b.lipschitz * b.norm_w_opt
    return comm, train, opt


def oracle_noise_term(b: an.BoundInputs) -> float:
    return (b.rounds - 1) * b.lipschitz * b.noise_scale * math.sqrt(
        b.tau2 * b.dim * b.n_devices
    )


# ------------------------------------------------------------- closed forms


def test_digital_bound_matches_recoded_formula():
    for _ in range(30):
        b = random_inputs(RNG)
        comm, train, opt = oracle_digital_total(b)
        report = an.digital_gap_bound(b)
        assert report.comm_term == pytest.approx(comm, rel=1e-12)
        assert report.train_term == pytest.approx(train, rel=1e-12)
        assert report.opt_term == pytest.approx(opt, rel=1e-12)
        assert report.noise_term == 0.0
        assert report.total == pytest.approx(comm + train + opt, rel=1e-12)


def test_analog_bound_matches_recoded_formula_and_pins_delivery():
    for _ in range(30):
        b = random_inputs(RNG)
        at_one = replace(b, p_correct=1.0)
        comm, train, opt = oracle_digital_total(at_one)
        noise = oracle_noise_term(b)
        report = an.analog_gap_bound(b)
        assert report.comm_term == pytest.approx(comm, rel=1e-12)
        assert report.train_term == pytest.approx(train, rel=1e-12)
        assert report.noise_term == pytest.approx(noise, rel=1e-12)
        assert report.total == pytest.approx(comm + train + noise + opt, rel=1e-12)
        # Erasure probability is irrelevant to the analog transport.
        degraded = an.analog_gap_bound(replace(b, p_correct=0.3))
        assert degraded.total == report.total


def test_silent_analog_equals_certain_digital_bitwise():
    for _ in range(20):
        b = random_inputs(RNG, noise_scale=0.0, p_correct=1.0)
        assert an.analog_gap_bound(b).total == an.digital_gap_bound(b).total


def test_noise_penalty_is_exactly_linear():
    b = random_inputs(np.random.default_rng(3), noise_scale=0.25)
    base = an.fading_penalty_bound(b)
    assert an.fading_penalty_bound(replace(b, noise_scale=0.5)) == 2.0 * base
    assert an.fading_penalty_bound(replace(b, noise_scale=1.0)) == 4.0 * base
    assert an.fading_penalty_bound(replace(b, tau2=4 * b.tau2)) == 2.0 * base
    doubled_h = replace(b, rounds=2 * (b.rounds - 1) + 1)
    assert an.fading_penalty_bound(doubled_h) == 2.0 * base
    assert an.fading_penalty_bound(replace(b, noise_scale=0.0)) == 0.0


def test_digital_bound_non_increasing_in_p_on_grid():
    # With a long mixing product the squared norm sits near 1 and the erasure
    # factor decreases across 0.6, 0.8, 1.0 even though its true peak lies
    # between the first two grid points.
    q2 = an.mixing_frob2_from(mh_mixing("ring", 4), 2, 10)
    totals = []
    for p in (0.6, 0.8, 1.0):
        b = random_inputs(np.random.default_rng(8), n_devices=4, mixing_frob2=q2, p_correct=p)
        totals.append(an.digital_gap_bound(b).total)
    assert totals[0] >= totals[1] >= totals[2]


def test_mixing_frob2_matches_matrix_power():
    for kind, n in (("ring", 4), ("chain", 6), ("complete", 5)):
        mixing = mh_mixing(kind, n)
        for tau2, rounds in ((1, 2), (2, 5), (3, 4)):
            q = np.linalg.matrix_power(mixing.matrix, (rounds - 1) * tau2)
            expected = float(np.sum(q * q))
            got = an.mixing_frob2_from(mixing, tau2, rounds)
            assert got == pytest.approx(expected, rel=1e-12)
            assert 1.0 - 1e-9 <= got <= n + 1e-9


def test_bound_inputs_reject_bad_values():
    good = dict(
        lipschitz=1.0, grad_bound=1.0, eta=0.1, tau1=1, tau2=1,
        rounds=5, n_devices=4, dim=2,
    )
    an.BoundInputs(**good)
    for bad in (
        {"rounds": 1},
        {"n_devices": 1},
        {"lipschitz": 0.0},
        {"p_correct": 0.0},
        {"mixing_frob2": 6.0},
        {"mixing_frob2": 0.5},
        {"epsilon": 1.0},
        {"delta": 0.0},
    ):
        with pytest.raises(AssertionError):
            an.BoundInputs(**{**good, **bad})


# ------------------------------------------------------- feasibility pieces


def test_min_rounds_from_terms_arithmetic():
    result = an.min_rounds_from_terms(2.0, 0.24, 0.8)
    assert result.feasible
    assert result.deficit == pytest.approx(0.4, rel=1e-12)
    assert result.t_min == 6
    blocked = an.min_rounds_from_terms(2.0, 1.5, 0.8)
    assert not blocked.feasible and blocked.t_min is None
    assert blocked.deficit < 0
    with pytest.raises(AssertionError):
        an.min_rounds_from_terms(-1.0, 0.1, 0.5)
    with pytest.raises(AssertionError):
        an.min_rounds_from_terms(1.0, 0.1, 1.0)


def test_min_rounds_needed_is_monotone_in_epsilon():
    # Larger targets are easier: the round count never increases with epsilon.
    prev = None
    for eps in (0.6, 0.7, 0.8, 0.9):
        res = an.min_rounds_from_terms(3.0, 0.3, eps)
        assert res.feasible
        if prev is not None:
            assert res.t_min <= prev
        prev = res.t_min


def test_literal_convergence_condition_is_always_infeasible():
    # The deviation term includes a sqrt(n_devices) floor, which no epsilon
    # below one can clear; the reported deficit still tracks the inputs.
    for _ in range(25):
        b = random_inputs(RNG)
        result = an.min_rounds_for_convergence(b)
        assert not result.feasible
        phi1 = b.eta * b.tau1 * b.grad_bound * b.beta_bar / b.delta
        assert result.phi1 == pytest.approx(phi1, rel=1e-12)
        radicand = (
            (b.mixing_frob2 - b.n_devices) * b.p_correct**2
            + b.n_devices * b.p_correct
            + b.n_devices
        )
        assert result.phi2 == pytest.approx(math.sqrt(radicand) + b.init_spread, rel=1e-12)
        complexity = an.communication_complexity(b)
        assert not complexity.feasible
        assert complexity.deficit == pytest.approx(b.epsilon**2 - result.phi2, rel=1e-10)


def test_min_rounds_requires_a_realized_beta():
    b = random_inputs(np.random.default_rng(0), beta_bar=None)
    with pytest.raises(AssertionError, match="beta_bar"):
        an.min_rounds_for_convergence(b)


def test_min_correct_probability_frozen_case():
    b = random_inputs(
        np.random.default_rng(1),
        n_devices=4,
        mixing_frob2=1.0,
        epsilon=math.sqrt(0.5),
        init_spread=0.0,
    )
    result = an.min_correct_probability(b)
    assert result.raw == pytest.approx((-4.0 + math.sqrt(13.0)) / 6.0, rel=1e-12)
    assert result.clamped == 0.0


def test_min_correct_probability_error_branches():
    undefined = random_inputs(np.random.default_rng(2), n_devices=4, mixing_frob2=4.0)
    with pytest.raises(ValueError, match="equals device count"):
        an.min_correct_probability(undefined)
    complex_root = random_inputs(
        np.random.default_rng(4),
        n_devices=2,
        mixing_frob2=1.0,
        epsilon=0.5,
        init_spread=10.0,
    )
    with pytest.raises(ValueError, match="negative discriminant"):
        an.min_correct_probability(complex_root)


def test_max_tolerable_noise_frozen_case():
    b = an.BoundInputs(
        lipschitz=1.0,
        grad_bound=1.0,
        eta=1.0,
        tau1=1,
        tau2=1,
        rounds=5,
        n_devices=4,
        dim=1,
        norm_w_init=1.0,
        mixing_frob2=1.0,
    )
    assert an.max_tolerable_noise(b) == pytest.approx(1.125, rel=1e-12)


def test_max_tolerable_noise_scales_with_the_training_signal():
    b = random_inputs(np.random.default_rng(5), eta=0.5)
    base = an.max_tolerable_noise(b)
    assert an.max_tolerable_noise(replace(b, eta=1.0)) == pytest.approx(2.0 * base, rel=1e-12)
    assert an.max_tolerable_noise(replace(b, noise_scale=9.0)) == base


def test_compare_transports_threshold_and_ranking():
    saturated = random_inputs(np.random.default_rng(6), n_devices=4, mixing_frob2=4.0, p_correct=0.5, noise_scale=0.0)
    report = an.compare_transports(saturated)
    assert report.p_threshold == math.inf
    assert not report.p_above_threshold
    # At a saturated product norm the erasure factor grows with p, so the
    # lossy transport undercuts the reliable one.
    assert report.lossy_total < report.reliable_total
    assert not report.reliable_is_min

    contracted = random_inputs(np.random.default_rng(7), n_devices=4, mixing_frob2=1.0, p_correct=0.9, noise_scale=0.1)
    report2 = an.compare_transports(contracted)
    assert report2.p_threshold == pytest.approx(4.0 / 6.0, rel=1e-12)
    assert report2.p_above_threshold
    assert report2.reliable_is_min
    assert report2.analog_total > report2.reliable_total


# -------------------------------------------------------------- MC checkers


def test_masked_norm_check_is_exact_at_full_reliability():
    check = an.check_masked_product_norm(mh_mixing("ring", 4), 2, 4, 1.0, n_samples=50)
    assert check.passed
    assert check.std_error <= 1e-15
    assert abs(check.empirical_mean - check.bound) <= 1e-9


def test_masked_norm_check_passes_under_erasures():
    for p in (0.6, 0.8):
        check = an.check_masked_product_norm(mh_mixing("ring", 4), 1, 3, p, n_samples=4000, seed=1)
        assert check.passed, (p, check)
        assert check.empirical_mean <= check.bound + 3 * check.std_error
        assert check.n_samples == 4000


def test_masked_deviation_check_passes():
    for p in (1.0, 0.7):
        check = an.check_masked_product_deviation(mh_mixing("chain", 5), 2, 3, p, n_samples=3000, seed=2)
        assert check.passed, (p, check)


def test_noise_norm_check():
    silent = an.check_noise_norm(4, 3, 0.0, n_samples=100)
    assert silent.passed and silent.empirical_mean == 0.0 and silent.bound == 0.0
    noisy = an.check_noise_norm(6, 4, 0.3, n_samples=5000, seed=3)
    assert noisy.passed
    assert noisy.empirical_mean <= noisy.bound
    assert noisy.empirical_mean >= 0.9 * noisy.bound


def test_check_determinism_by_seed():
    a = an.check_masked_product_norm(mh_mixing("ring", 4), 1, 3, 0.8, n_samples=500, seed=9)
    b = an.check_masked_product_norm(mh_mixing("ring", 4), 1, 3, 0.8, n_samples=500, seed=9)
    assert a == b


def test_empirical_gap_check_on_a_small_run():
    cfg = eg.RunConfig(
        problem=ln.ProblemSpec(kind="quadratic", dim=3, samples_per_device=6, seed=0),
        graph=eg.GraphSpec(kind="ring", n=4),
        tau1=2,
        tau2=2,
        stopping=eg.Stopping(t=10),
        schedule=ln.LearningSchedule(eta0=0.05),
        channel=ch.DigitalChannel(0.8),
        repetitions=5,
        track_realized=False,
    )
    check = an.check_digital_gap_bound_empirical(cfg)
    assert check.passed
    assert 0.0 < check.tightness <= 1.0
    assert check.inputs.p_correct == 0.8
    assert check.inputs.rounds == 10
    assert check.constants.lipschitz > 0


# ------------------------------------------------------------- convergence


def test_convergence_probability_report():
    stats = eg.ConvergenceStats(
        probabilities=np.array([0.1, 0.6]), epsilon=0.5, delta=1.0, repetitions=10
    )
    report = an.convergence_probability(stats, 0.5)
    assert report.per_device_pass.tolist() == [True, False]
    assert not report.all_pass
    assert report.epsilon == 0.5
    ok = an.convergence_probability(stats, 0.7)
    assert ok.all_pass
    with pytest.raises(AssertionError):
        an.convergence_probability(stats, 0.0)
