"""Imperfect-communication models for the gossip step.

Digital links drop whole parameter vectors: each off-diagonal mixing entry is
kept or zeroed by an independent Bernoulli draw per directed link per gossip
round, with no renormalization, so a realized mixing matrix is generally only
sub-stochastic.  A device always keeps its own column, hence the diagonal is
never masked.

Analog links deliver everything but add noise: parameters are packed into
complex symbols, faded, inverted at the receiver, and unpacked, which nets
out to i.i.d. real Gaussian noise of standard deviation kappa * sigma_n per
parameter entry.  Noise lands on the parameter matrix before each mixing
multiply, so every term a receiver aggregates (its own included) carries that
round's noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .topology import MixingMatrix

__all__ = [
    "DigitalChannel",
    "AnalogChannel",
    "Fading",
    "MaskedMixing",
    "DeepFadeError",
    "mask_digital",
    "gossip_digital",
    "gossip_ideal",
    "analog_pack",
    "analog_unpack",
    "analog_transmit",
    "gossip_analog",
    "sigma_n_from_dbm",
]

FADE_REJECTION_LIMIT = 100


@dataclass(frozen=True)
class DigitalChannel:
    """Erasure channel: a transmitted vector arrives intact with probability p."""

    p_correct: float

    def __post_init__(self) -> None:
        if not (0.0 < self.p_correct <= 1.0):
            raise ValueError("delivery probability must lie in (0, 1]")


class Fading(str, Enum):
    FIXED = "fixed"
    RAYLEIGH = "rayleigh"


class DeepFadeError(RuntimeError):
    """Rayleigh fading kept drawing below the inversion threshold."""


@dataclass(frozen=True)
class AnalogChannel:
    """Noisy analog link with transmit-side channel inversion.

    With FIXED fading the inversion coefficient kappa is taken as given.
    With RAYLEIGH fading the coefficient is resampled per transmitter per
    gossip round as sqrt(distance^gamma / tx_power) / |h|, h ~ CN(0, 1),
    rejecting draws with |h| below ``fade_floor``.  ``noise_std`` is the
    per-real-entry noise standard deviation sigma_n (half the complex symbol
    noise power sigma_z^2 = 2 sigma_n^2).
    """

    noise_std: float
    fading: Fading = Fading.FIXED
    kappa: float = 1.0
    tx_power: float = 1.0
    distance: float = 1.0
    gamma: float = 1.0
    fade_floor: float = 1e-3

    def __post_init__(self) -> None:
        if self.noise_std < 0:
            raise ValueError("noise level cannot be negative")
        if self.kappa < 0:
            raise ValueError("inversion coefficient cannot be negative")
        if self.tx_power <= 0 or self.distance <= 0:
            raise ValueError("power and distance must be positive")


def sigma_n_from_dbm(noise_dbm: float) -> float:
    """Per-entry noise standard deviation from complex noise power in dBm."""
    sigma_z2 = 10.0 ** ((noise_dbm - 30.0) / 10.0)
    return math.sqrt(sigma_z2 / 2.0)


# ------------------------------------------------------------------- digital


@dataclass(frozen=True)
class MaskedMixing:
    """One gossip round's realized mixing matrix and the indicator draws."""

    matrix: np.ndarray
    indicators: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.diagonal(self.indicators)):
            raise ValueError("own-column indicators must stay on")


def mask_digital(
    p: np.ndarray | MixingMatrix,
    channel: DigitalChannel,
    rng: np.random.Generator,
) -> MaskedMixing:
    """Apply one round of independent per-directed-link erasures to p.

    Entry (i, j) carries sender i's weight at receiver j; it survives with
    probability p_correct, independently of the reverse link (j, i).  The
    diagonal is never drawn: a device cannot lose its own parameters.
    Dropped weight is simply lost (no renormalization).
    """
    mat = p.matrix if isinstance(p, MixingMatrix) else np.asarray(p, dtype=float)
    n = mat.shape[0]
    keep = rng.random((n, n)) < channel.p_correct
    np.fill_diagonal(keep, True)
    return MaskedMixing(matrix=mat * keep, indicators=keep)


def gossip_ideal(w: np.ndarray, p: np.ndarray | MixingMatrix, tau2: int) -> np.ndarray:
    """tau2 noiseless gossip rounds: sequential right-multiplication by p."""
    mat = p.matrix if isinstance(p, MixingMatrix) else np.asarray(p, dtype=float)
    out = w
    for _ in range(tau2):
        out = out @ mat
    return out


def gossip_digital(
    w: np.ndarray,
    p: np.ndarray | MixingMatrix,
    channel: DigitalChannel,
    tau2: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """tau2 gossip rounds over the erasure channel.

    Returns the mixed parameters together with the realized product of the
    masked matrices (left-to-right, same order the parameters saw), which the
    disagreement analysis consumes.  With p_correct = 1 this is bit-identical
    to gossip_ideal.
    """
    mat = p.matrix if isinstance(p, MixingMatrix) else np.asarray(p, dtype=float)
    if tau2 < 1:
        raise ValueError("need at least one gossip round")
    out = w
    realized = None
    for _ in range(tau2):
        masked = mask_digital(mat, channel, rng).matrix
        out = out @ masked
        realized = masked if realized is None else realized @ masked
    return out, realized


# -------------------------------------------------------------------- analog


def analog_pack(w: np.ndarray) -> tuple[np.ndarray, bool]:
    """Pack a real vector into complex symbols: first half real, second imaginary.

    Odd lengths are zero-padded by one entry; the flag records the pad so the
    inverse knows to drop it.
    """
    v = np.asarray(w, dtype=float).ravel()
    padded = v.size % 2 == 1
    if padded:
        v = np.concatenate([v, [0.0]])
    half = v.size // 2
    return v[:half] + 1j * v[half:], padded


def analog_unpack(symbols: np.ndarray, length: int) -> np.ndarray:
    """Inverse of analog_pack: recover the original length-``length`` vector."""
    half = symbols.size
    if length not in (2 * half, 2 * half - 1):
        raise ValueError("symbol count does not match the requested length")
    out = np.concatenate([symbols.real, symbols.imag])
    return out[:length]


def _sample_kappa(channel: AnalogChannel, rng: np.random.Generator, count: int) -> np.ndarray:
    """Inversion coefficients for ``count`` transmitters in one gossip round."""
    if channel.fading is Fading.FIXED:
        return np.full(count, channel.kappa)
    scale = math.sqrt(channel.distance**channel.gamma / channel.tx_power)
    out = np.empty(count)
    for i in range(count):
        for _ in range(FADE_REJECTION_LIMIT):
            h = complex(rng.standard_normal(), rng.standard_normal()) / math.sqrt(2.0)
            mag = abs(h)
            if mag >= channel.fade_floor:
                out[i] = scale / mag
                break
        else:
            raise DeepFadeError(
                f"fading magnitude stayed below {channel.fade_floor:g} for "
                f"{FADE_REJECTION_LIMIT} draws; channel inversion is stalled"
            )
    return out


def _complex_noise(channel: AnalogChannel, rng: np.random.Generator, half: int, cols: int) -> np.ndarray:
    # Complex symbol noise CN(0, sigma_z^2) with sigma_z^2 = 2 sigma_n^2:
    # each real component is N(0, sigma_n^2).
    re = rng.standard_normal((half, cols))
    im = rng.standard_normal((half, cols))
    return channel.noise_std * (re + 1j * im)


def analog_transmit(
    w_col: np.ndarray,
    channel: AnalogChannel,
    rng: np.random.Generator,
) -> np.ndarray:
    """One device's broadcast: pack, add kappa-scaled symbol noise, unpack.

    Equivalent to adding i.i.d. real Gaussian noise of std kappa * sigma_n to
    every entry.  With sigma_n = 0 the input comes back bit-exact.
    """
    v = np.asarray(w_col, dtype=float).ravel()
    if channel.noise_std == 0.0 and channel.fading is Fading.FIXED:
        return v.copy()
    kappa = _sample_kappa(channel, rng, 1)[0]
    symbols, _ = analog_pack(v)
    noisy = symbols + kappa * _complex_noise(channel, rng, symbols.size, 1)[:, 0]
    return analog_unpack(noisy, v.size)


def gossip_analog(
    w: np.ndarray,
    p: np.ndarray | MixingMatrix,
    channel: AnalogChannel,
    tau2: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """tau2 gossip rounds over the analog channel.

    Each round, every transmitter's column picks up that round's noise (via
    the pack/fade/unpack path of analog_transmit) and the noisy matrix is
    mixed once with the fixed weights; later rounds keep mixing earlier noise.
    With sigma_n = 0 and fixed fading this is bit-identical to gossip_ideal.
    """
    mat = p.matrix if isinstance(p, MixingMatrix) else np.asarray(p, dtype=float)
    if tau2 < 1:
        raise ValueError("need at least one gossip round")
    m, n = w.shape
    out = w
    noiseless = channel.noise_std == 0.0 and channel.fading is Fading.FIXED
    for _ in range(tau2):
        if not noiseless:
            kappa = _sample_kappa(channel, rng, n)
            half = (m + 1) // 2
            noise = _complex_noise(channel, rng, half, n) * kappa
            real_noise = np.concatenate([noise.real, noise.imag])[:m]
            out = out + real_noise
        out = out @ mat
    return out
