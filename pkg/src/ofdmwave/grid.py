"""Subcarrier indexing, OFDM symbol synthesis and the pilot layout.

Subcarriers are indexed symmetrically around DC, ``n = -(N-1)/2 .. (N-1)/2``,
and stored in ascending order along the last axis of every array.  A signed
index ``n`` modulates ``exp(j 2 pi n t / T)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError

PILOT_SYMBOL = 1
MIN_PAPR_OVERSAMPLING = 4


class SamplingConvention(str, enum.Enum):
    """Amplitude scaling of the oversampled IDFT.

    ``PAPER_F`` uses ``1/(sqrt(N) O_s)`` per entry, so the summed sample energy
    is ``|x|^2 / O_s``.  ``UNIT_MEAN_POWER`` uses ``1/sqrt(N)`` so the mean
    sample power equals the average energy per subcarrier; it is the default
    wherever ``|z|^2`` is compared against a power threshold.
    """

    PAPER_F = "paper_f"
    UNIT_MEAN_POWER = "unit_mean_power"


class Role(enum.IntEnum):
    NULL = 0
    DATA = 1
    PILOT = 2
    PRT = 3


@dataclass(frozen=True)
class GridConfig:
    """Numerology of one slot.

    Attributes:
        n: Number of subcarriers, odd.
        m: OFDM symbols per slot.
        delta_f: Subcarrier spacing in Hz.
        t_cp_fraction: Cyclic prefix duration as a fraction of the symbol
            duration ``T = 1/delta_f``.
        oversampling: Oversampling factor of the discretized waveform.
    """

    n: int
    m: int = 14
    delta_f: float = 30e3
    t_cp_fraction: float = 0.0
    oversampling: int = 4

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1 or self.n % 2 == 0:
            raise ConfigError(f"subcarrier count must be a positive odd integer, got {self.n}")
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError(f"symbols per slot must be >= 1, got {self.m}")
        if not self.delta_f > 0:
            raise ConfigError(f"subcarrier spacing must be positive, got {self.delta_f}")
        if not 0.0 <= self.t_cp_fraction < 1.0:
            raise ConfigError(f"t_cp_fraction must lie in [0, 1), got {self.t_cp_fraction}")
        if int(self.oversampling) != self.oversampling or self.oversampling < 1:
            raise ConfigError(f"oversampling must be a positive integer, got {self.oversampling}")

    @property
    def symbol_duration(self) -> float:
        return 1.0 / self.delta_f

    @property
    def t_cp(self) -> float:
        return self.t_cp_fraction * self.symbol_duration

    @property
    def delta_f_cp(self) -> float:
        return 1.0 / (self.symbol_duration + self.t_cp)

    @property
    def num_pilots(self) -> int:
        return (self.n + 1) // 2

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "delta_f_hz": self.delta_f,
            "t_cp_fraction": self.t_cp_fraction,
            "oversampling": self.oversampling,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        allowed = {"n", "m", "delta_f_hz", "t_cp_fraction", "oversampling"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        if "n" not in d:
            raise ConfigError("grid.n is required")
        return cls(
            n=d["n"],
            m=d.get("m", 14),
            delta_f=float(d.get("delta_f_hz", 30e3)),
            t_cp_fraction=float(d.get("t_cp_fraction", 0.0)),
            oversampling=d.get("oversampling", 4),
        )


def require_papr_oversampling(oversampling: int) -> None:
    if oversampling < MIN_PAPR_OVERSAMPLING:
        raise ConfigError(
            f"peak measurements need oversampling >= {MIN_PAPR_OVERSAMPLING}, got {oversampling}"
        )


def build_index_set(config_or_n) -> np.ndarray:
    """Return the ascending signed subcarrier indices.

    Accepts either a :class:`GridConfig` or a bare subcarrier count.
    """
    n = config_or_n.n if isinstance(config_or_n, GridConfig) else config_or_n
    if int(n) != n or n < 1 or n % 2 == 0:
        raise ConfigError(f"subcarrier count must be a positive odd integer, got {n}")
    half = (n - 1) // 2
    return np.arange(-half, half + 1)


def pilot_positions(n: int) -> np.ndarray:
    """Array positions (not signed indices) of the pilot subcarriers."""
    return np.arange(0, n, 2)


def _scale(n: int, oversampling: int, convention: SamplingConvention) -> float:
    convention = SamplingConvention(convention)
    if convention is SamplingConvention.PAPER_F:
        return 1.0 / (np.sqrt(n) * oversampling)
    return 1.0 / np.sqrt(n)


def oversample(
    x: np.ndarray,
    oversampling: int,
    convention: SamplingConvention = SamplingConvention.UNIT_MEAN_POWER,
) -> np.ndarray:
    """Oversampled IDFT along the last axis.

    ``z[t] = scale * sum_n x[n] exp(j 2 pi t n / (N O_s))`` for
    ``t = 0 .. N*O_s - 1``.  Works on any leading batch shape.
    """
    x = np.asarray(x, dtype=complex)
    n = x.shape[-1]
    if n % 2 == 0:
        raise DimensionError(f"FBS vectors must have odd length, got {n}")
    if int(oversampling) != oversampling or oversampling < 1:
        raise ConfigError(f"oversampling must be a positive integer, got {oversampling}")
    length = n * oversampling
    idx = build_index_set(n) % length
    buf = np.zeros(x.shape[:-1] + (length,), dtype=complex)
    buf[..., idx] = x
    # numpy's ifft carries a 1/length factor
    return np.fft.ifft(buf, axis=-1) * (length * _scale(n, oversampling, convention))


def oversampling_matrix(
    n: int,
    oversampling: int,
    convention: SamplingConvention = SamplingConvention.UNIT_MEAN_POWER,
) -> np.ndarray:
    """Explicit ``(N*O_s, N)`` matrix of :func:`oversample`."""
    t = np.arange(n * oversampling)[:, None]
    idx = build_index_set(n)[None, :]
    return _scale(n, oversampling, convention) * np.exp(2j * np.pi * t * idx / (n * oversampling))


@dataclass(frozen=True)
class SampledWaveform:
    samples: np.ndarray
    sample_period: float
    convention: SamplingConvention


def oversampled_idft(
    x: np.ndarray,
    config: GridConfig,
    convention: SamplingConvention = SamplingConvention.UNIT_MEAN_POWER,
    oversampling: int | None = None,
) -> SampledWaveform:
    x = np.asarray(x, dtype=complex)
    if x.ndim != 1 or x.shape[0] != config.n:
        raise DimensionError(f"expected an FBS vector of length {config.n}, got shape {x.shape}")
    os_ = config.oversampling if oversampling is None else oversampling
    return SampledWaveform(
        samples=oversample(x, os_, convention),
        sample_period=config.symbol_duration / (config.n * os_),
        convention=SamplingConvention(convention),
    )


def evaluate_time_signal(x: np.ndarray, t, config: GridConfig, m: int | None = None):
    """Continuous-time baseband signal of one OFDM symbol (no CP).

    The symbol ``m`` occupies ``[(m - 1/2) T, (m + 1/2) T)``.  With ``m=None``
    the symbol containing each ``t`` is used, which makes the result the
    periodic extension of ``x``; with an explicit ``m`` the result is zero
    outside that symbol's support.
    """
    x = np.asarray(x, dtype=complex)
    if x.shape[-1] != config.n:
        raise DimensionError(f"expected an FBS vector of length {config.n}, got shape {x.shape}")
    period = config.symbol_duration
    t = np.asarray(t, dtype=float)
    sym = np.floor(t / period + 0.5)
    local = t - sym * period
    idx = build_index_set(config.n)
    phase = np.exp(2j * np.pi * np.multiply.outer(local, idx) / period)
    value = phase @ x / np.sqrt(period)
    if m is not None:
        value = np.where(sym == m, value, 0.0)
    return value[()] if np.ndim(value) == 0 else value


def evaluate_cp_spectrum(x: np.ndarray, f, config: GridConfig):
    """Spectrum of a CP-extended OFDM symbol at frequencies ``f`` (Hz)."""
    x = np.asarray(x, dtype=complex)
    if x.shape[-1] != config.n:
        raise DimensionError(f"expected an FBS vector of length {config.n}, got shape {x.shape}")
    dfc = config.delta_f_cp
    idx = build_index_set(config.n)
    f = np.asarray(f, dtype=float)
    u = (np.subtract.outer(f, idx * config.delta_f)) / dfc
    value = sinc(u) @ x / np.sqrt(dfc)
    return value[()] if np.ndim(value) == 0 else value


def sinc(u):
    """Normalized sinc, ``sin(pi u)/(pi u)`` with ``sinc(0) = 1``."""
    u = np.asarray(u, dtype=float)
    tiny = np.abs(u) < 1e-12
    safe = np.where(tiny, 1.0, u)
    return np.where(tiny, 1.0, np.sin(np.pi * safe) / (np.pi * safe))


@dataclass
class ResourceGrid:
    """FBS values of one slot together with the role of every RE."""

    values: np.ndarray
    roles: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.ndim != 2:
            raise DimensionError("resource grid values must be an (M, N) array")
        if self.roles is None:
            self.roles = np.full(self.values.shape, Role.DATA, dtype=np.int8)
        self.roles = np.asarray(self.roles, dtype=np.int8)
        if self.roles.shape != self.values.shape:
            raise DimensionError("roles and values shapes differ")

    @classmethod
    def empty(cls, config: GridConfig) -> "ResourceGrid":
        shape = (config.m, config.n)
        return cls(np.zeros(shape, dtype=complex), np.full(shape, Role.DATA, dtype=np.int8))

    def mask(self, role: Role) -> np.ndarray:
        return self.roles == role

    def copy(self) -> "ResourceGrid":
        return ResourceGrid(self.values.copy(), self.roles.copy())


def pilot_mask(config: GridConfig) -> np.ndarray:
    """Boolean ``(M, N)`` mask of pilot REs; depends only on ``(N, M)``."""
    if config.m <= PILOT_SYMBOL:
        raise ConfigError(f"the pilot symbol index {PILOT_SYMBOL} needs m >= 2, got m={config.m}")
    mask = np.zeros((config.m, config.n), dtype=bool)
    mask[PILOT_SYMBOL, pilot_positions(config.n)] = True
    return mask


def random_pilots(count: int, rng: np.random.Generator) -> np.ndarray:
    return np.exp(2j * np.pi * rng.random(count))


def insert_pilots(grid: ResourceGrid, config: GridConfig, rng: np.random.Generator) -> ResourceGrid:
    """Place unit-modulus random pilots on every other RE of the second symbol."""
    if grid.values.shape != (config.m, config.n):
        raise DimensionError(f"grid shape {grid.values.shape} does not match ({config.m}, {config.n})")
    out = grid.copy()
    pos = pilot_positions(config.n)
    pilot_mask(config)  # validates m
    out.values[PILOT_SYMBOL, pos] = random_pilots(pos.size, rng)
    out.roles[PILOT_SYMBOL, pos] = Role.PILOT
    return out
