"""Frequency-domain fading channel, AWGN, and pilot covariance estimation.

The channel generator is an exponential-power tapped delay line whose
frequency response is held constant over a slot.  It stands in for a
standardized channel model; any object with a ``sample(n_slots, config, rng)``
method returning ``(n_slots, N)`` frequency responses can replace it.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .grid import GridConfig, build_index_set, pilot_positions

CHANNEL_MAGIC = b"CHNL"
CHANNEL_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")


@dataclass(frozen=True)
class TdlProfile:
    """Tapped-delay-line profile.

    Attributes:
        num_taps: Number of paths.
        delay_spread_fraction: Largest path delay as a fraction of the symbol
            duration ``T``; delays are uniform in ``[0, delay_spread_fraction T]``.
        power_decay: Tap ``l`` (in delay order) gets power proportional to
            ``exp(-power_decay * l)``.
    """

    num_taps: int = 4
    delay_spread_fraction: float = 0.05
    power_decay: float = 1.0

    def __post_init__(self):
        if int(self.num_taps) != self.num_taps or self.num_taps < 1:
            raise ConfigError(f"num_taps must be >= 1, got {self.num_taps}")
        if not 0.0 <= self.delay_spread_fraction < 1.0:
            raise ConfigError("delay_spread_fraction must lie in [0, 1)")
        if self.power_decay < 0:
            raise ConfigError("power_decay must be >= 0")

    @property
    def tap_powers(self) -> np.ndarray:
        p = np.exp(-self.power_decay * np.arange(self.num_taps))
        return p / p.sum()

    def check_cp(self, config: GridConfig) -> None:
        """Raise if paths can outlast the cyclic prefix."""
        if self.delay_spread_fraction > config.t_cp_fraction:
            raise ConfigError(
                f"delay bound {self.delay_spread_fraction} T exceeds the CP {config.t_cp_fraction} T"
            )

    def sample(self, n_slots: int, config: GridConfig, rng: np.random.Generator) -> np.ndarray:
        """Frequency responses of ``n_slots`` independent slots, shape ``(n_slots, N)``."""
        amp = np.sqrt(self.tap_powers / 2.0)
        gains = amp * (rng.standard_normal((n_slots, self.num_taps)) + 1j * rng.standard_normal((n_slots, self.num_taps)))
        delays = np.sort(rng.uniform(0.0, self.delay_spread_fraction, (n_slots, self.num_taps)), axis=-1)
        if self.num_taps == 1:
            delays[:] = 0.0
        idx = build_index_set(config.n)
        # delays are in units of T, so n * df * tau = n * delay
        phase = np.exp(-2j * np.pi * delays[:, :, None] * idx[None, None, :])
        return np.einsum("sl,sln->sn", gains, phase)

    def to_dict(self) -> dict:
        return {
            "num_taps": self.num_taps,
            "delay_spread_fraction": self.delay_spread_fraction,
            "power_decay": self.power_decay,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TdlProfile":
        unknown = set(d) - {"num_taps", "delay_spread_fraction", "power_decay"}
        if unknown:
            raise ConfigError(f"unknown channel keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FlatProfile:
    """Single complex Rayleigh coefficient shared by all subcarriers, or a
    fixed unit coefficient when ``rayleigh`` is False."""

    rayleigh: bool = True

    def sample(self, n_slots: int, config: GridConfig, rng: np.random.Generator) -> np.ndarray:
        if self.rayleigh:
            c = (rng.standard_normal(n_slots) + 1j * rng.standard_normal(n_slots)) / np.sqrt(2.0)
        else:
            c = np.ones(n_slots, dtype=complex)
        return np.repeat(c[:, None], config.n, axis=1)


@dataclass(frozen=True)
class ChannelRealization:
    H: np.ndarray  # (M, N), identical rows

    @property
    def response(self) -> np.ndarray:
        return self.H[0]


def generate_channel(profile, config: GridConfig, rng: np.random.Generator) -> ChannelRealization:
    h = profile.sample(1, config, rng)[0]
    return ChannelRealization(np.broadcast_to(h, (config.m, config.n)).copy())


def snr_to_noise_var(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 10.0))


def complex_noise(shape, noise_var: float, rng: np.random.Generator) -> np.ndarray:
    return np.sqrt(noise_var / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def apply_channel(X: np.ndarray, H: np.ndarray, noise_var: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """``Y = H * X + noise`` with circular complex noise of variance ``noise_var``.

    ``H`` broadcasts against ``X``, so a per-slot response of shape ``(N,)`` or
    ``(B, 1, N)`` may be passed for a slot batch.
    """
    X = np.asarray(X, dtype=complex)
    H = np.asarray(H, dtype=complex)
    try:
        Y = H * X
    except ValueError as exc:
        raise DimensionError(f"channel shape {H.shape} incompatible with grid shape {X.shape}") from exc
    if Y.shape != X.shape:
        raise DimensionError(f"channel shape {H.shape} incompatible with grid shape {X.shape}")
    if noise_var < 0:
        raise ValueError("noise variance must be >= 0")
    if noise_var > 0:
        if rng is None:
            raise ValueError("an rng is required when noise_var > 0")
        Y = Y + complex_noise(X.shape, noise_var, rng)
    return Y


@dataclass(frozen=True)
class CovarianceEstimate:
    sigma: np.ndarray
    count: int
    undersampled: bool
    source: str = "clean-pilots"


def estimate_pilot_covariance(responses: np.ndarray, positions: np.ndarray | None = None) -> CovarianceEstimate:
    """Sample covariance of channel responses at the pilot subcarriers.

    ``responses`` has shape ``(D, N)``; the covariance is taken without
    mean removal, matching ``E[h h^H]`` for zero-mean fading.
    """
    responses = np.asarray(responses, dtype=complex)
    if responses.ndim != 2 or responses.shape[0] == 0:
        raise ValueError("need a non-empty (D, N) array of channel responses")
    if positions is None:
        positions = pilot_positions(responses.shape[1])
    hp = responses[:, positions]
    d = hp.shape[0]
    sigma = hp.T @ hp.conj() / d
    sigma = 0.5 * (sigma + sigma.conj().T)
    small = d < 10 * hp.shape[1]
    if small:
        warnings.warn(f"covariance from {d} samples for {hp.shape[1]} pilots is unreliable", RuntimeWarning)
    return CovarianceEstimate(sigma, d, small)


def write_channel_file(path, responses: np.ndarray) -> None:
    responses = np.ascontiguousarray(responses, dtype="<c16")
    count, n = responses.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHANNEL_MAGIC, CHANNEL_VERSION, n, count))
        fh.write(responses.tobytes())


def read_channel_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated channel file")
    magic, version, n, count = _HEADER.unpack_from(raw)
    if magic != CHANNEL_MAGIC or version != CHANNEL_VERSION:
        raise ValueError(f"not a channel dataset (magic={magic!r}, version={version})")
    body = raw[_HEADER.size:]
    if len(body) != 16 * n * count:
        raise ValueError("channel file body has the wrong size")
    return np.frombuffer(body, dtype="<c16").reshape(count, n).copy()
