"""Per-device objectives, local training, and the constants the bounds consume.

Devices hold private datasets; the simulator tracks one parameter column per
device.  The loss kinds are a least-squares quadratic, binary logistic
regression, and a small softmax network.  Quadratic and logistic problems can
produce an optimum certificate so runs can be measured against the true
per-device minima; the network cannot, and says so.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .rng import DOMAIN_DATA, DOMAIN_SAMPLER, derive_rng

__all__ = [
    "ProblemKind",
    "ScheduleRule",
    "LearningSchedule",
    "Problem",
    "ProblemSpec",
    "OptimumCertificate",
    "ConstantEstimates",
    "DivergenceError",
    "NoCertificateError",
    "SeparableDataError",
    "partition_data",
    "local_loss",
    "local_gradient",
    "global_loss",
    "global_gradient",
    "local_train",
    "solve_optimum",
    "estimate_constants",
    "make_quadratic",
    "make_isotropic_quadratic",
    "make_logistic",
    "make_mlp_softmax",
]

DIVERGENCE_LIMIT = 1e12


class ProblemKind(str, Enum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"
    MLP_SOFTMAX = "mlp_softmax"


class ScheduleRule(str, Enum):
    CONSTANT = "constant"
    INVERSE_SQUARE = "inverse_square"
    INVERSE_THREE_HALVES = "inverse_three_halves"


@dataclass(frozen=True)
class LearningSchedule:
    """Step size as a function of the update-round index t (t starts at 1).

    The decaying rules keep eta_1 = eta0 and scale later rounds by
    (t-1)^-2 or (t-1)^-1.5, so the sequence is non-increasing in t.
    """

    eta0: float
    rule: ScheduleRule = ScheduleRule.CONSTANT

    def __post_init__(self) -> None:
        if self.eta0 < 0:
            raise ValueError("step size must be non-negative")

    def eta_at(self, t: int) -> float:
        if t < 1:
            raise ValueError("round index starts at 1")
        if self.rule is ScheduleRule.CONSTANT or t == 1:
            return self.eta0
        if self.rule is ScheduleRule.INVERSE_SQUARE:
            return self.eta0 / (t - 1) ** 2
        return self.eta0 / (t - 1) ** 1.5


class DivergenceError(RuntimeError):
    """A parameter magnitude exceeded the divergence limit during training."""

    def __init__(self, message: str, round_index: int, max_abs: float):
        super().__init__(message)
        self.round_index = round_index
        self.max_abs = max_abs


class NoCertificateError(RuntimeError):
    """Requested an optimum certificate for a non-convex problem."""


class SeparableDataError(RuntimeError):
    """Logistic data is separable, so the minimizer runs off to infinity."""


@dataclass(frozen=True)
class MlpArch:
    in_dim: int
    hidden: int
    classes: int

    @property
    def n_params(self) -> int:
        return self.hidden * self.in_dim + self.hidden + self.classes * self.hidden + self.classes


@dataclass(frozen=True)
class Problem:
    """A fixed multi-device objective: one private dataset per device."""

    kind: ProblemKind
    dim: int
    device_data: tuple
    arch: MlpArch | None = None
    lipschitz_hint: float | None = None
    grad_bound_hint: float | None = None

    @property
    def n_devices(self) -> int:
        return len(self.device_data)

    def __post_init__(self) -> None:
        if self.n_devices < 1:
            raise ValueError("need at least one device")
        if self.kind is ProblemKind.MLP_SOFTMAX and self.arch is None:
            raise ValueError("mlp problems carry their architecture")


# ---------------------------------------------------------------- data utils


def partition_data(dataset, n: int, seed: int) -> list:
    """Shuffle and split a dataset into n near-equal IID shards.

    ``dataset`` is either one array or a tuple of arrays sharing their first
    dimension.  Shard sizes differ by at most one, and the same seed always
    yields the same split.
    """
    if n < 1:
        raise ValueError("need at least one shard")
    parts = dataset if isinstance(dataset, (tuple, list)) else (dataset,)
    arrays = [np.asarray(a) for a in parts]
    n_samples = arrays[0].shape[0]
    for a in arrays[1:]:
        if a.shape[0] != n_samples:
            raise ValueError("dataset arrays disagree on sample count")
    if n > n_samples:
        raise ValueError(f"cannot split {n_samples} samples into {n} shards")
    perm = derive_rng(seed, DOMAIN_DATA).permutation(n_samples)
    chunks = np.array_split(perm, n)
    if isinstance(dataset, (tuple, list)):
        return [tuple(a[idx] for a in arrays) for idx in chunks]
    return [arrays[0][idx] for idx in chunks]


# ------------------------------------------------------- losses and gradients


def _mlp_unpack(w: np.ndarray, arch: MlpArch):
    d, h, c = arch.in_dim, arch.hidden, arch.classes
    i = 0
    w1 = w[i : i + h * d].reshape(h, d)
    i += h * d
    b1 = w[i : i + h]
    i += h
    w2 = w[i : i + c * h].reshape(c, h)
    i += c * h
    b2 = w[i : i + c]
    return w1, b1, w2, b2


def _mlp_forward(w: np.ndarray, x: np.ndarray, arch: MlpArch):
    w1, b1, w2, b2 = _mlp_unpack(w, arch)
    hidden = np.tanh(x @ w1.T + b1)
    logits = hidden @ w2.T + b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return hidden, shifted, log_z


def local_loss(problem: Problem, device: int, w: np.ndarray) -> float:
    """Loss of device ``device`` at its own parameter column."""
    if problem.kind is ProblemKind.QUADRATIC:
        a, b = problem.device_data[device]
        r = a @ w - b
        return 0.5 * float(r @ r)
    if problem.kind is ProblemKind.LOGISTIC:
        x, y = problem.device_data[device]
        z = y * (x @ w)
        return float(np.mean(np.logaddexp(0.0, -z)))
    x, y = problem.device_data[device]
    _, shifted, log_z = _mlp_forward(w, x, problem.arch)
    return float(np.mean(log_z - shifted[np.arange(len(y)), y]))


def local_gradient(problem: Problem, device: int, w: np.ndarray) -> np.ndarray:
    """Full-batch gradient of one device's loss at w."""
    if problem.kind is ProblemKind.QUADRATIC:
        a, b = problem.device_data[device]
        return a.T @ (a @ w - b)
    if problem.kind is ProblemKind.LOGISTIC:
        x, y = problem.device_data[device]
        z = y * (x @ w)
        sig = 0.5 * (1.0 - np.tanh(0.5 * z))  # sigmoid(-z), overflow-safe
        return -(x.T @ (y * sig)) / len(y)
    x, y = problem.device_data[device]
    arch = problem.arch
    w1, b1, w2, b2 = _mlp_unpack(w, arch)
    hidden, shifted, log_z = _mlp_forward(w, x, arch)
    probs = np.exp(shifted - log_z[:, None])
    probs[np.arange(len(y)), y] -= 1.0
    probs /= len(y)
    d_w2 = probs.T @ hidden
    d_b2 = probs.sum(axis=0)
    d_hidden = (probs @ w2) * (1.0 - hidden**2)
    d_w1 = d_hidden.T @ x
    d_b1 = d_hidden.sum(axis=0)
    return np.concatenate([d_w1.ravel(), d_b1, d_w2.ravel(), d_b2])


def global_loss(problem: Problem, w: np.ndarray) -> float:
    """Average of per-device losses, each at its own column of w (dim x n)."""
    return float(
        np.mean([local_loss(problem, i, w[:, i]) for i in range(problem.n_devices)])
    )


def global_gradient(problem: Problem, w: np.ndarray) -> np.ndarray:
    """Stack of per-device gradients matching the parameter matrix layout."""
    return np.column_stack(
        [local_gradient(problem, i, w[:, i]) for i in range(problem.n_devices)]
    )


def local_train(
    problem: Problem,
    w: np.ndarray,
    tau1: int,
    schedule: LearningSchedule,
    t: int,
    clip: float | None = None,
) -> np.ndarray:
    """Run tau1 full-batch descent steps on every device at the round-t step size.

    With ``clip`` set, each step's stacked gradient is rescaled so its
    Frobenius norm never exceeds the clip value (a global rescale, applied
    identically to every device).  Raises DivergenceError once any parameter
    magnitude passes the divergence limit.
    """
    if tau1 < 1:
        raise ValueError("need at least one local step per round")
    eta = schedule.eta_at(t)
    out = w
    for _ in range(tau1):
        grad = global_gradient(problem, out)
        if clip is not None:
            fro = float(np.linalg.norm(grad))
            if fro > clip:
                grad = grad * (clip / fro)
        out = out - eta * grad
        max_abs = float(np.max(np.abs(out))) if out.size else 0.0
        if not np.isfinite(max_abs) or max_abs > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"divergence at round {t}: max |parameter| = {max_abs:g}",
                round_index=t,
                max_abs=max_abs,
            )
    return out


# ----------------------------------------------------------- optimum solving


@dataclass(frozen=True)
class OptimumCertificate:
    """Per-device minimizers with the residual that backs them up."""

    w_star: np.ndarray
    f_star: float
    residual: float
    method: str


def _solve_logistic_device(problem: Problem, device: int, tol: float, max_iter: int) -> np.ndarray:
    w = np.zeros(problem.dim)
    step = 1.0
    loss = local_loss(problem, device, w)
    for _ in range(max_iter):
        grad = local_gradient(problem, device, w)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return w
        # Backtracking line search (Armijo, c = 0.25), with the accepted step
        # carried over as the next starting guess.
        step = min(step * 4.0, 1e6)
        while True:
            cand = w - step * grad
            cand_loss = local_loss(problem, device, cand)
            if cand_loss <= loss - 0.25 * step * gnorm * gnorm:
                break
            step *= 0.5
            if step < 1e-18:
                raise RuntimeError(f"device {device}: line search collapsed")
        w, loss = cand, cand_loss
        if float(np.linalg.norm(w)) > 1e8:
            raise SeparableDataError(
                f"device {device}: data looks separable, optimum is unbounded"
            )
    raise RuntimeError(f"device {device}: optimum solve did not converge")


def solve_optimum(problem: Problem, tol: float = 1e-9, max_iter: int = 200_000) -> OptimumCertificate:
    """Solve every device's local problem to high precision.

    Quadratics go through the normal equations; logistic losses run descent
    with a line search.  The softmax network is non-convex and has no
    certificate.
    """
    if problem.kind is ProblemKind.MLP_SOFTMAX:
        raise NoCertificateError("no certificate for non-convex problems")
    cols = []
    if problem.kind is ProblemKind.QUADRATIC:
        for i, (a, b) in enumerate(problem.device_data):
            if np.linalg.matrix_rank(a) < problem.dim:
                raise ValueError(f"device {i}: design matrix is rank-deficient")
            cols.append(np.linalg.solve(a.T @ a, a.T @ b))
        method = "normal_equations"
    else:
        for i in range(problem.n_devices):
            cols.append(_solve_logistic_device(problem, i, tol, max_iter))
        method = "line_search_descent"
    w_star = np.column_stack(cols)
    residual = max(
        float(np.linalg.norm(local_gradient(problem, i, w_star[:, i])))
        for i in range(problem.n_devices)
    )
    return OptimumCertificate(
        w_star=w_star,
        f_star=global_loss(problem, w_star),
        residual=residual,
        method=method,
    )


# ------------------------------------------------------- constant estimation


@dataclass(frozen=True)
class ConstantEstimates:
    lipschitz: float
    grad_bound: float
    n_samples: int
    radius: float


def estimate_constants(
    problem: Problem,
    n_samples: int,
    seed: int,
    radius: float = 1.0,
) -> ConstantEstimates:
    """Empirical Lipschitz and gradient-norm constants over a sampling ball.

    Draws parameter matrices whose columns are uniform in the radius-r ball,
    then takes the max loss difference ratio over pairs and the max gradient
    Frobenius norm over all points visited.  Draws are consumed in a fixed
    order, so enlarging n_samples with the same seed can only grow the
    estimates.
    """
    if n_samples < 100:
        raise ValueError("need at least 100 samples for a usable estimate")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    rng = derive_rng(seed, DOMAIN_SAMPLER)
    m, n = problem.dim, problem.n_devices

    def draw() -> np.ndarray:
        g = rng.standard_normal((m, n))
        norms = np.linalg.norm(g, axis=0)
        norms[norms == 0] = 1.0
        radii = radius * rng.uniform(0.0, 1.0, size=n) ** (1.0 / m)
        return g * (radii / norms)

    lipschitz = 0.0
    grad_bound = 0.0
    for _ in range(n_samples):
        w_a, w_b = draw(), draw()
        f_a, f_b = global_loss(problem, w_a), global_loss(problem, w_b)
        gap = float(np.linalg.norm(w_a - w_b))
        if gap > 1e-12:
            lipschitz = max(lipschitz, abs(f_a - f_b) / gap)
        grad_bound = max(
            grad_bound,
            float(np.linalg.norm(global_gradient(problem, w_a))),
            float(np.linalg.norm(global_gradient(problem, w_b))),
        )
    return ConstantEstimates(
        lipschitz=lipschitz, grad_bound=grad_bound, n_samples=n_samples, radius=radius
    )


# ------------------------------------------------------------------ factories


def make_quadratic(
    n_devices: int,
    dim: int,
    samples_per_device: int,
    seed: int,
    noise: float = 0.1,
    target_scale: float = 1.0,
    curvature_scales: Sequence[float] | None = None,
) -> Problem:
    """Random least-squares instances around a shared target vector."""
    if samples_per_device < dim:
        raise ValueError("need samples_per_device >= dim for full column rank")
    rng = derive_rng(seed, DOMAIN_DATA)
    target = target_scale * rng.standard_normal(dim)
    scales = np.ones(n_devices) if curvature_scales is None else np.asarray(curvature_scales, float)
    if scales.shape != (n_devices,):
        raise ValueError("curvature_scales must give one factor per device")
    data = []
    for i in range(n_devices):
        a = rng.standard_normal((samples_per_device, dim)) / math.sqrt(samples_per_device)
        a *= math.sqrt(scales[i])
        b = a @ target + noise * rng.standard_normal(samples_per_device)
        data.append((a, b))
    return Problem(kind=ProblemKind.QUADRATIC, dim=dim, device_data=tuple(data))


def make_isotropic_quadratic(
    n_devices: int,
    dim: int,
    curvatures: Sequence[float],
    seed: int,
    centers_scale: float = 0.0,
    centers: np.ndarray | None = None,
    shared_center: bool = False,
) -> Problem:
    """Quadratics with exactly isotropic curvature: loss_i = a_i/2 |w - c_i|^2.

    Useful when per-device contraction rates must be controlled exactly;
    device i's design matrix is sqrt(a_i) times an orthogonal matrix.  With
    shared_center every device gets the same drawn center, which keeps the
    network optimum away from the origin without introducing disagreement
    between local optima.
    """
    curv = np.asarray(curvatures, dtype=float)
    if curv.shape != (n_devices,) or np.any(curv <= 0):
        raise ValueError("curvatures must give one positive value per device")
    rng = derive_rng(seed, DOMAIN_DATA)
    if centers is None:
        if shared_center:
            centers = np.tile(centers_scale * rng.standard_normal(dim), (n_devices, 1))
        else:
            centers = centers_scale * rng.standard_normal((n_devices, dim))
    centers = np.asarray(centers, dtype=float)
    data = []
    for i in range(n_devices):
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        a = math.sqrt(curv[i]) * q
        data.append((a, a @ centers[i]))
    return Problem(kind=ProblemKind.QUADRATIC, dim=dim, device_data=tuple(data))


def make_logistic(
    n_devices: int,
    dim: int,
    samples_per_device: int,
    seed: int,
    label_flip: float = 0.1,
    target_scale: float = 1.0,
) -> Problem:
    """Binary logistic shards with label noise to keep the optimum bounded."""
    if label_flip <= 0:
        raise ValueError("label_flip must be positive or the data may be separable")
    rng = derive_rng(seed, DOMAIN_DATA)
    target = target_scale * rng.standard_normal(dim)
    data = []
    for _ in range(n_devices):
        x = rng.standard_normal((samples_per_device, dim))
        y = np.where(x @ target + 0.5 * rng.standard_normal(samples_per_device) > 0, 1.0, -1.0)
        flips = rng.uniform(size=samples_per_device) < label_flip
        y[flips] *= -1.0
        data.append((x, y))
    return Problem(kind=ProblemKind.LOGISTIC, dim=dim, device_data=tuple(data))


def make_mlp_softmax(
    n_devices: int,
    in_dim: int,
    hidden: int,
    classes: int,
    samples_per_device: int,
    seed: int,
    blob_spread: float = 2.0,
) -> Problem:
    """Gaussian-blob classification shards for the small softmax network."""
    rng = derive_rng(seed, DOMAIN_DATA)
    means = blob_spread * rng.standard_normal((classes, in_dim))
    data = []
    for _ in range(n_devices):
        y = rng.integers(0, classes, size=samples_per_device)
        x = means[y] + rng.standard_normal((samples_per_device, in_dim))
        data.append((x, y))
    arch = MlpArch(in_dim=in_dim, hidden=hidden, classes=classes)
    return Problem(
        kind=ProblemKind.MLP_SOFTMAX, dim=arch.n_params, device_data=tuple(data), arch=arch
    )


def build_from_idx(
    images: np.ndarray,
    labels: np.ndarray,
    n_devices: int,
    hidden: int,
    seed: int,
) -> Problem:
    """Turn parsed IDX image/label arrays into per-device softmax shards."""
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValueError("images must be (count, h, w) with matching labels")
    flat = images.reshape(images.shape[0], -1).astype(float) / 255.0
    classes = int(labels.max()) + 1
    shards = partition_data((flat, labels.astype(int)), n_devices, seed)
    arch = MlpArch(in_dim=flat.shape[1], hidden=hidden, classes=classes)
    return Problem(
        kind=ProblemKind.MLP_SOFTMAX,
        dim=arch.n_params,
        device_data=tuple(shards),
        arch=arch,
    )


# -------------------------------------------------------- declarative builds


@dataclass(frozen=True)
class ProblemSpec:
    """Declarative problem description; materialized per device count.

    Keeping the description separate from the data lets sweeps rebuild the
    same workload family at a different device count or seed.
    """

    kind: str = "quadratic"
    dim: int = 8
    samples_per_device: int = 16
    seed: int = 0
    noise: float = 0.1
    target_scale: float = 1.0
    label_flip: float = 0.1
    hidden: int = 8
    classes: int = 3
    base_curvature: float = 1.0
    stiff_curvature: float | None = None
    n_stiff: int = 1
    centers_scale: float = 0.0
    centers_shared: bool = False
    extra: dict = field(default_factory=dict)

    def build(self, n_devices: int) -> Problem:
        if self.kind == "quadratic":
            return make_quadratic(
                n_devices,
                self.dim,
                self.samples_per_device,
                self.seed,
                noise=self.noise,
                target_scale=self.target_scale,
            )
        if self.kind == "isotropic_quadratic":
            curv = [self.base_curvature] * n_devices
            if self.stiff_curvature is not None:
                for i in range(min(self.n_stiff, n_devices)):
                    curv[i] = self.stiff_curvature
            return make_isotropic_quadratic(
                n_devices,
                self.dim,
                curv,
                self.seed,
                centers_scale=self.centers_scale,
                shared_center=self.centers_shared,
            )
        if self.kind == "logistic":
            return make_logistic(
                n_devices,
                self.dim,
                self.samples_per_device,
                self.seed,
                label_flip=self.label_flip,
                target_scale=self.target_scale,
            )
        if self.kind == "mlp_softmax":
            return make_mlp_softmax(
                n_devices,
                self.dim,
                self.hidden,
                self.classes,
                self.samples_per_device,
                self.seed,
            )
        raise ValueError(f"unknown problem kind: {self.kind}")
