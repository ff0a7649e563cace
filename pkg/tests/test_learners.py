import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dflsim.learners as ln

RNG = np.random.default_rng(2024)


def small_problems(seed: int = 0) -> dict[str, ln.Problem]:
    return {
        "quadratic": ln.make_quadratic(3, 4, 8, seed),
        "isotropic": ln.make_isotropic_quadratic(3, 4, [0.5, 1.0, 2.0], seed, centers_scale=1.0),
        "logistic": ln.make_logistic(3, 4, 12, seed),
        "mlp": ln.make_mlp_softmax(2, 3, 4, 3, 10, seed),
    }


# --------------------------------------------------------------- gradients


def finite_difference(problem: ln.Problem, device: int, w: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(w)
    for k in range(w.size):
        up = w.copy()
        dn = w.copy()
        up[k] += h
        dn[k] -= h
        grad[k] = (ln.local_loss(problem, device, up) - ln.local_loss(problem, device, dn)) / (2 * h)
    return grad


def test_gradients_match_finite_differences_everywhere():
    # 100 random evaluation points spread over all problem kinds and devices.
    problems = small_problems()
    per_kind = 25
    for name, problem in problems.items():
        for trial in range(per_kind):
            device = trial % problem.n_devices
            w = RNG.standard_normal(problem.dim)
            analytic = ln.local_gradient(problem, device, w)
            numeric = finite_difference(problem, device, w)
            scale = max(np.linalg.norm(numeric), 1e-8)
            assert np.linalg.norm(analytic - numeric) / scale < 1e-4, (name, trial)


def test_global_gradient_stacks_per_device_columns():
    problem = ln.make_quadratic(3, 4, 8, 1)
    w = RNG.standard_normal((4, 3))
    stacked = ln.global_gradient(problem, w)
    for i in range(3):
        assert np.array_equal(stacked[:, i], ln.local_gradient(problem, i, w[:, i]))


def test_global_loss_averages_own_columns():
    # Each device is scored at its own column; putting every column at its
    # own center zeroes the loss while any cross assignment does not.
    centers = np.array([[0.0, 0.0], [3.0, 4.0]])
    problem = ln.make_isotropic_quadratic(2, 2, [1.0, 1.0], 0, centers=centers)
    aligned = centers.T
    assert ln.global_loss(problem, aligned) < 1e-24
    swapped = centers[::-1].T
    assert ln.global_loss(problem, swapped) > 1.0


# ---------------------------------------------------------------- training


def test_local_train_single_device_arithmetic():
    # Unit curvature centered at zero: two steps at eta = 0.1 contract the
    # parameter by (1 - 0.1)^2.
    a = np.array([[1.0]])
    b = np.array([0.0])
    problem = ln.Problem(kind=ln.ProblemKind.QUADRATIC, dim=1, device_data=((a, b),))
    schedule = ln.LearningSchedule(eta0=0.1)
    w = np.array([[1.0]])
    out = ln.local_train(problem, w, 2, schedule, 1)
    assert abs(out[0, 0] - 0.81) < 1e-12


def test_local_train_matches_manual_descent_loop():
    problem = ln.make_quadratic(3, 4, 8, 5)
    schedule = ln.LearningSchedule(eta0=0.05)
    w = RNG.standard_normal((4, 3))
    expected = w.copy()
    for _ in range(4):
        expected = expected - 0.05 * ln.global_gradient(problem, expected)
    got = ln.local_train(problem, w.copy(), 4, schedule, 1)
    assert np.allclose(got, expected, atol=0.0, rtol=1e-12)


def test_local_train_clip_bounds_every_step():
    problem = ln.make_isotropic_quadratic(2, 3, [50.0, 50.0], 3, centers_scale=0.0)
    schedule = ln.LearningSchedule(eta0=0.01)
    clip = 0.5
    w = 10.0 * RNG.standard_normal((3, 2))
    expected = w.copy()
    for _ in range(6):
        g = ln.global_gradient(problem, expected)
        fro = np.linalg.norm(g)
        if fro > clip:
            g = g * (clip / fro)
        assert np.linalg.norm(g) <= clip + 1e-12
        expected = expected - 0.01 * g
    got = ln.local_train(problem, w.copy(), 6, schedule, 1, clip=clip)
    assert np.allclose(got, expected, atol=0.0, rtol=1e-12)


def test_local_train_raises_divergence_error_with_context():
    a = np.array([[1.0]])
    problem = ln.Problem(kind=ln.ProblemKind.QUADRATIC, dim=1, device_data=((a, np.array([0.0])),))
    schedule = ln.LearningSchedule(eta0=3.0)
    w = np.array([[1e3]])
    with pytest.raises(ln.DivergenceError) as info:
        ln.local_train(problem, w, 60, schedule, 7)
    assert info.value.round_index == 7
    assert info.value.max_abs > ln.DIVERGENCE_LIMIT


def test_local_train_requires_at_least_one_step():
    problem = ln.make_quadratic(2, 3, 6, 0)
    with pytest.raises(ValueError):
        ln.local_train(problem, np.zeros((3, 2)), 0, ln.LearningSchedule(0.1), 1)


def test_descent_is_monotone_for_small_steps():
    problem = ln.make_quadratic(3, 4, 8, 11)
    schedule = ln.LearningSchedule(eta0=0.02)
    w = RNG.standard_normal((4, 3))
    prev = ln.global_loss(problem, w)
    for _ in range(20):
        w = ln.local_train(problem, w, 1, schedule, 1)
        cur = ln.global_loss(problem, w)
        assert cur <= prev + 1e-12
        prev = cur


# ---------------------------------------------------------------- schedules


def test_schedule_rules_exact_values():
    const = ln.LearningSchedule(eta0=0.4)
    assert const.eta_at(1) == 0.4
    assert const.eta_at(50) == 0.4
    sq = ln.LearningSchedule(eta0=0.4, rule=ln.ScheduleRule.INVERSE_SQUARE)
    assert sq.eta_at(1) == 0.4
    assert sq.eta_at(3) == 0.4 / 4.0
    th = ln.LearningSchedule(eta0=0.4, rule=ln.ScheduleRule.INVERSE_THREE_HALVES)
    assert th.eta_at(5) == 0.4 / 8.0


def test_schedule_is_non_increasing_in_round():
    for rule in ln.ScheduleRule:
        sched = ln.LearningSchedule(eta0=1.0, rule=rule)
        etas = [sched.eta_at(t) for t in range(1, 30)]
        assert all(a >= b for a, b in zip(etas, etas[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        ln.LearningSchedule(eta0=-0.1)
    with pytest.raises(ValueError):
        ln.LearningSchedule(eta0=0.1).eta_at(0)


# ----------------------------------------------------------------- optimum


def test_solve_optimum_quadratic_matches_lstsq():
    problem = ln.make_quadratic(4, 5, 9, 2)
    cert = ln.solve_optimum(problem)
    assert cert.method == "normal_equations"
    for i, (a, b) in enumerate(problem.device_data):
        expected, *_ = np.linalg.lstsq(a, b, rcond=None)
        assert np.allclose(cert.w_star[:, i], expected, atol=1e-9)
    assert cert.residual < 1e-9
    assert abs(cert.f_star - ln.global_loss(problem, cert.w_star)) < 1e-15


def test_solve_optimum_logistic_reaches_stationarity():
    problem = ln.make_logistic(2, 3, 40, 4)
    cert = ln.solve_optimum(problem, tol=1e-8)
    assert cert.method == "line_search_descent"
    assert cert.residual <= 1e-8
    for i in range(problem.n_devices):
        assert np.linalg.norm(ln.local_gradient(problem, i, cert.w_star[:, i])) <= 1e-8


def test_solve_optimum_rejects_rank_deficient_designs():
    a = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    problem = ln.Problem(
        kind=ln.ProblemKind.QUADRATIC, dim=2, device_data=((a, np.ones(3)),)
    )
    with pytest.raises(ValueError, match="rank-deficient"):
        ln.solve_optimum(problem)


def test_solve_optimum_refuses_nonconvex_problems():
    problem = ln.make_mlp_softmax(2, 3, 4, 3, 10, 0)
    with pytest.raises(ln.NoCertificateError):
        ln.solve_optimum(problem)


def test_solve_optimum_logistic_iteration_cap():
    problem = ln.make_logistic(1, 3, 40, 4)
    with pytest.raises(RuntimeError, match="did not converge"):
        ln.solve_optimum(problem, tol=1e-300, max_iter=3)


# -------------------------------------------------------------- partitioning


def test_partition_is_a_permutation_of_the_input():
    data = RNG.standard_normal(23)
    shards = ln.partition_data(data, 4, seed=0)
    sizes = sorted(len(s) for s in shards)
    assert max(sizes) - min(sizes) <= 1
    assert np.allclose(np.sort(np.concatenate(shards)), np.sort(data))


def test_partition_keeps_paired_arrays_aligned():
    x = RNG.standard_normal((10, 3))
    y = np.arange(10)
    shards = ln.partition_data((x, y), 3, seed=1)
    for sx, sy in shards:
        for row, label in zip(sx, sy):
            assert np.array_equal(row, x[label])


def test_partition_validation_and_determinism():
    with pytest.raises(ValueError):
        ln.partition_data(np.arange(3), 4, seed=0)
    with pytest.raises(ValueError):
        ln.partition_data(np.arange(3), 0, seed=0)
    with pytest.raises(ValueError):
        ln.partition_data((np.arange(3), np.arange(4)), 2, seed=0)
    a = ln.partition_data(np.arange(17), 5, seed=3)
    b = ln.partition_data(np.arange(17), 5, seed=3)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa, sb)


@settings(max_examples=30, deadline=None)
@given(n_samples=st.integers(1, 40), n=st.integers(1, 10), seed=st.integers(0, 10))
def test_partition_permutation_property(n_samples, n, seed):
    if n > n_samples:
        return
    data = np.arange(n_samples)
    shards = ln.partition_data(data, n, seed=seed)
    assert sorted(np.concatenate(shards).tolist()) == list(range(n_samples))


# ---------------------------------------------------------------- factories


def test_make_quadratic_validation_and_determinism():
    with pytest.raises(ValueError, match="full column rank"):
        ln.make_quadratic(2, 5, 4, 0)
    with pytest.raises(ValueError, match="one factor per device"):
        ln.make_quadratic(2, 3, 6, 0, curvature_scales=[1.0])
    p1 = ln.make_quadratic(3, 4, 8, 9)
    p2 = ln.make_quadratic(3, 4, 8, 9)
    for (a1, b1), (a2, b2) in zip(p1.device_data, p2.device_data):
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def test_make_quadratic_noise_free_shares_the_target():
    problem = ln.make_quadratic(3, 4, 8, 6, noise=0.0)
    cert = ln.solve_optimum(problem)
    # All devices see exact linear measurements of one target vector.
    for i in range(1, 3):
        assert np.allclose(cert.w_star[:, i], cert.w_star[:, 0], atol=1e-9)


def test_isotropic_quadratic_has_exact_curvature():
    problem = ln.make_isotropic_quadratic(3, 5, [0.25, 1.0, 4.0], 0)
    for curvature, (a, _) in zip([0.25, 1.0, 4.0], problem.device_data):
        assert np.allclose(a.T @ a, curvature * np.eye(5), atol=1e-12)


def test_isotropic_quadratic_centers_are_local_optima():
    centers = RNG.standard_normal((3, 4))
    problem = ln.make_isotropic_quadratic(3, 4, [1.0, 2.0, 0.5], 1, centers=centers)
    cert = ln.solve_optimum(problem)
    assert np.allclose(cert.w_star, centers.T, atol=1e-10)


def test_isotropic_quadratic_shared_center_mode():
    problem = ln.make_isotropic_quadratic(4, 3, [1.0] * 4, 2, centers_scale=2.0, shared_center=True)
    cert = ln.solve_optimum(problem)
    for i in range(1, 4):
        assert np.allclose(cert.w_star[:, i], cert.w_star[:, 0], atol=1e-10)
    assert np.linalg.norm(cert.w_star[:, 0]) > 0.1


def test_isotropic_quadratic_validation():
    with pytest.raises(ValueError, match="positive"):
        ln.make_isotropic_quadratic(2, 3, [1.0, -1.0], 0)
    with pytest.raises(ValueError, match="one positive value per device"):
        ln.make_isotropic_quadratic(2, 3, [1.0], 0)


def test_make_logistic_labels_and_validation():
    problem = ln.make_logistic(2, 3, 20, 0)
    for _, y in problem.device_data:
        assert set(np.unique(y)).issubset({-1.0, 1.0})
    with pytest.raises(ValueError, match="label_flip"):
        ln.make_logistic(2, 3, 20, 0, label_flip=0.0)


def test_make_mlp_softmax_dimensions():
    problem = ln.make_mlp_softmax(2, in_dim=3, hidden=5, classes=4, samples_per_device=11, seed=0)
    assert problem.arch.n_params == 5 * 3 + 5 + 4 * 5 + 4
    assert problem.dim == problem.arch.n_params
    for x, y in problem.device_data:
        assert x.shape == (11, 3)
        assert y.shape == (11,)
        assert y.min() >= 0 and y.max() < 4


def test_build_from_idx_produces_shards():
    images = RNG.integers(0, 256, size=(12, 4, 5)).astype(np.uint8)
    labels = np.array([0, 1, 2] * 4, dtype=np.uint8)
    problem = ln.build_from_idx(images, labels, n_devices=3, hidden=4, seed=0)
    assert problem.kind is ln.ProblemKind.MLP_SOFTMAX
    assert problem.arch.in_dim == 20
    assert problem.arch.classes == 3
    total = sum(x.shape[0] for x, _ in problem.device_data)
    assert total == 12
    with pytest.raises(ValueError):
        ln.build_from_idx(images[:, :, 0], labels, n_devices=2, hidden=4, seed=0)


# ---------------------------------------------------------------- constants


def test_estimate_constants_monotone_in_sample_count():
    problem = ln.make_quadratic(2, 3, 6, 0)
    small = ln.estimate_constants(problem, 100, seed=0)
    large = ln.estimate_constants(problem, 200, seed=0)
    assert large.lipschitz >= small.lipschitz
    assert large.grad_bound >= small.grad_bound


def test_estimate_constants_bounds_hold_on_fresh_draws():
    problem = ln.make_quadratic(2, 3, 6, 0)
    est = ln.estimate_constants(problem, 400, seed=0, radius=2.0)
    check = np.random.default_rng(99)
    for _ in range(50):
        w = check.standard_normal((3, 2))
        w *= 2.0 * check.uniform() / max(np.linalg.norm(w, axis=0).max(), 1e-9)
        assert np.linalg.norm(ln.global_gradient(problem, w)) <= est.grad_bound * 1.5


def test_estimate_constants_validation():
    problem = ln.make_quadratic(2, 3, 6, 0)
    with pytest.raises(ValueError):
        ln.estimate_constants(problem, 99, seed=0)
    with pytest.raises(ValueError):
        ln.estimate_constants(problem, 100, seed=0, radius=-1.0)


# ------------------------------------------------------------ problem specs


def test_problem_spec_builds_each_kind():
    assert ln.ProblemSpec(kind="quadratic").build(3).kind is ln.ProblemKind.QUADRATIC
    assert ln.ProblemSpec(kind="logistic").build(2).kind is ln.ProblemKind.LOGISTIC
    assert ln.ProblemSpec(kind="mlp_softmax", dim=3).build(2).kind is ln.ProblemKind.MLP_SOFTMAX
    iso = ln.ProblemSpec(kind="isotropic_quadratic", dim=3, stiff_curvature=5.0, n_stiff=2)
    problem = iso.build(4)
    tops = [float(np.linalg.eigvalsh(a.T @ a).max()) for a, _ in problem.device_data]
    assert np.allclose(tops, [5.0, 5.0, 1.0, 1.0], atol=1e-9)
    with pytest.raises(ValueError, match="unknown problem kind"):
        ln.ProblemSpec(kind="banana").build(2)


def test_problem_requires_devices_and_arch():
    with pytest.raises(ValueError):
        ln.Problem(kind=ln.ProblemKind.QUADRATIC, dim=2, device_data=())
    with pytest.raises(ValueError, match="architecture"):
        ln.Problem(kind=ln.ProblemKind.MLP_SOFTMAX, dim=2, device_data=((np.eye(2), np.zeros(2)),))
