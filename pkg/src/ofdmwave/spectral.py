"""In-band and total energy as quadratic forms, and the resulting ACLR.

The in-band energy of an FBS vector ``x`` is ``x^H V x`` where ``V`` collects
the overlap integrals of pairs of CP-widened sinc spectra over the band
``[-N df/2, N df/2]``.  The total energy is ``x^H W x`` with ``W = I``.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import quadrature
from .errors import DimensionError, NumericalError
from .grid import build_index_set, sinc

log = logging.getLogger(__name__)

CACHE_MAGIC = b"VMAT"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHIdd")
NEGATIVE_ENERGY_TOL = 1e-10


@dataclass(frozen=True)
class SpectralOperators:
    V: np.ndarray
    W: np.ndarray
    t_cp_fraction: float
    quadrature_tol: float

    @property
    def n(self) -> int:
        return self.V.shape[0]


def compute_W(n: int) -> np.ndarray:
    # (1/T) * integral of exp(j2pi(a-b)t/T) over one period is the Kronecker delta
    if n < 1:
        raise DimensionError(f"n must be >= 1, got {n}")
    return np.eye(n)


def _zeros_in_band(center: float, ratio: float, half_band: float) -> np.ndarray:
    k_lo = int(np.ceil((-half_band - center) * ratio))
    k_hi = int(np.floor((half_band - center) * ratio))
    k = np.arange(k_lo, k_hi + 1)
    k = k[k != 0]
    return center + k / ratio


def _canonical_pairs(idx: np.ndarray):
    # v(a, b) = v(b, a) = v(-a, -b): keep a <= b and a + b >= 0
    return [(a, b) for a in idx for b in idx if a <= b and a + b >= 0]


def _integrate_V(n: int, t_cp_fraction: float, tol: float) -> np.ndarray:
    ratio = 1.0 + t_cp_fraction  # delta_f / delta_f_cp
    half_band = n / 2.0
    idx = build_index_set(n)
    pairs = _canonical_pairs(idx)

    lo, hi, owner = [], [], []
    for j, (a, b) in enumerate(pairs):
        cuts = np.concatenate([
            [-half_band, half_band],
            _zeros_in_band(a, ratio, half_band),
            _zeros_in_band(b, ratio, half_band),
        ])
        edges = np.unique(cuts)
        lo.append(edges[:-1])
        hi.append(edges[1:])
        owner.append(np.full(edges.size - 1, j))
    pa = np.array([p[0] for p in pairs], dtype=float)
    pb = np.array([p[1] for p in pairs], dtype=float)

    def integrand(u, own):
        return ratio * sinc(ratio * (u - pa[own][:, None])) * sinc(ratio * (u - pb[own][:, None]))

    res = quadrature.integrate_segments(
        integrand, np.concatenate(lo), np.concatenate(hi), np.concatenate(owner), len(pairs), tol
    )
    if not res.converged.all():
        j = int(np.flatnonzero(~res.converged)[0])
        raise NumericalError(f"V entry (a={pairs[j][0]}, b={pairs[j][1]}) did not reach tolerance {tol}")

    off = (n - 1) // 2
    V = np.zeros((n, n))
    for (a, b), val in zip(pairs, res.values):
        for i, k in {(a, b), (b, a), (-a, -b), (-b, -a)}:
            V[i + off, k + off] = val
    return 0.5 * (V + V.T)


def _cache_path(cache_dir, n: int, t_cp_fraction: float, tol: float) -> Path:
    key = f"VMAT|v{CACHE_VERSION}|{n}|{float(t_cp_fraction)!r}|{float(tol)!r}"
    digest = hashlib.sha256(key.encode()).hexdigest()[:24]
    return Path(cache_dir) / f"vmat-{digest}.bin"


def write_v_cache(path, V: np.ndarray, t_cp_fraction: float, tol: float) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, V.shape[0], float(t_cp_fraction), float(tol)))
        fh.write(np.ascontiguousarray(V, dtype="<f8").tobytes())
    tmp.replace(path)


def read_v_cache(path):
    """Return ``(V, header dict)`` from a cache file, or raise ``ValueError``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated V cache file")
    magic, version, n, t_cp, tol = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise ValueError(f"not a V cache file (magic={magic!r}, version={version})")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n * n:
        raise ValueError("V cache body has the wrong size")
    V = np.frombuffer(body, dtype="<f8").reshape(n, n).copy()
    return V, {"n": n, "t_cp_fraction": t_cp, "tol": tol}


def compute_V(n: int, t_cp_fraction: float = 0.0, quadrature_tol: float = 1e-9, cache_dir=None) -> np.ndarray:
    """In-band energy matrix for ``n`` subcarriers.

    Entries are integrated in normalized frequency ``u = f / df`` with the band
    split at every zero of either sinc factor.  When ``cache_dir`` is given the
    matrix is read from / written to a binary cache keyed by its parameters.
    """
    if int(n) != n or n < 1 or n % 2 == 0:
        raise DimensionError(f"n must be a positive odd integer, got {n}")
    if not 0.0 <= t_cp_fraction < 1.0:
        raise ValueError(f"t_cp_fraction must lie in [0, 1), got {t_cp_fraction}")
    if not quadrature_tol > 0:
        raise ValueError("quadrature_tol must be positive")

    path = None
    if cache_dir is not None:
        path = _cache_path(cache_dir, n, t_cp_fraction, quadrature_tol)
        if path.exists():
            try:
                V, hdr = read_v_cache(path)
                if hdr["n"] == n and hdr["t_cp_fraction"] == t_cp_fraction and hdr["tol"] == quadrature_tol:
                    return V
            except ValueError:
                log.warning("ignoring unreadable V cache %s", path)
    V = _integrate_V(n, t_cp_fraction, quadrature_tol)
    if path is not None:
        write_v_cache(path, V, t_cp_fraction, quadrature_tol)
    return V


def spectral_operators(n: int, t_cp_fraction: float = 0.0, quadrature_tol: float = 1e-9, cache_dir=None) -> SpectralOperators:
    return SpectralOperators(
        V=compute_V(n, t_cp_fraction, quadrature_tol, cache_dir),
        W=compute_W(n),
        t_cp_fraction=t_cp_fraction,
        quadrature_tol=quadrature_tol,
    )


def quadratic_form(x: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``Re(x^H A x)`` along the last axis, with tiny negatives clamped to 0."""
    x = np.asarray(x, dtype=complex)
    if x.shape[-1] != A.shape[0]:
        raise DimensionError(f"vector length {x.shape[-1]} does not match operator size {A.shape[0]}")
    val = np.real(np.einsum("...i,ij,...j->...", x.conj(), A, x))
    if np.any(val < -NEGATIVE_ENERGY_TOL):
        raise NumericalError(f"negative quadratic form {val.min():.3e}; operator is not PSD")
    return np.maximum(val, 0.0)


def in_band_energy(x: np.ndarray, ops: SpectralOperators) -> np.ndarray:
    return quadratic_form(x, ops.V)


def total_energy(x: np.ndarray, ops: SpectralOperators) -> np.ndarray:
    return quadratic_form(x, ops.W)


def to_db(ratio):
    return 10.0 * np.log10(ratio)


def aclr_analytic(ops: SpectralOperators):
    """ACLR for i.i.d. zero-mean unit-variance FBS; returns ``(linear, dB)``."""
    tv = float(np.trace(ops.V))
    if tv <= 0:
        raise NumericalError("trace(V) must be positive")
    ratio = float(np.trace(ops.W)) / tv - 1.0
    return ratio, float(to_db(ratio))


def aclr_empirical(batch: np.ndarray, ops: SpectralOperators) -> float:
    """Pooled ACLR of a batch of FBS vectors (any leading shape)."""
    batch = np.asarray(batch, dtype=complex)
    if batch.size == 0:
        raise ValueError("empty batch")
    e_in = float(np.sum(in_band_energy(batch, ops)))
    if e_in <= 0:
        raise NumericalError("batch has zero in-band energy")
    return float(np.sum(total_energy(batch, ops))) / e_in - 1.0


def cp_sweep(n: int, t_cp_fractions, draws: int, rng: np.random.Generator, quadrature_tol=1e-9, cache_dir=None):
    """Mean in-band energy and ACLR of random FBS over a range of CP lengths.

    The same ``CN(0, I)`` draws are reused for every CP length.  Returns a
    list of ``(t_cp_fraction, mean_in_band_energy, aclr_db)``.
    """
    x = (rng.standard_normal((draws, n)) + 1j * rng.standard_normal((draws, n))) / np.sqrt(2.0)
    rows = []
    for frac in t_cp_fractions:
        ops = spectral_operators(n, float(frac), quadrature_tol, cache_dir)
        e_in = in_band_energy(x, ops)
        aclr = float(np.sum(total_energy(x, ops)) / np.sum(e_in) - 1.0)
        rows.append((float(frac), float(np.mean(e_in)), float(to_db(aclr))))
    return rows
