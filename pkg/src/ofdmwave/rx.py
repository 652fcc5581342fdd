"""Pilot-based receiver: LMMSE estimation, interpolation, equalization, soft demapping.

LLRs follow ``ln P(b=1 | y) - ln P(b=0 | y)``: a positive value favours bit 1.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError
from .grid import PILOT_SYMBOL, pilot_positions
from .mapping import Constellation

log = logging.getLogger(__name__)

LLR_CLIP = 40.0
DEGENERATE_GAIN = 1e-12
LLR_MAGIC = b"LLRS"
_LLR_HEADER = struct.Struct("<4sIII")


def extract_pilot_observations(Y: np.ndarray, pilot_values: np.ndarray, positions: np.ndarray | None = None,
                               symbol: int = PILOT_SYMBOL) -> np.ndarray:
    """Received pilot REs with the known pilot values removed.

    ``Y`` has shape ``(..., M, N)`` and ``pilot_values`` ``(..., P)``.
    """
    Y = np.asarray(Y, dtype=complex)
    if positions is None:
        positions = pilot_positions(Y.shape[-1])
    pilot_values = np.asarray(pilot_values, dtype=complex)
    if pilot_values.shape[-1] != len(positions):
        raise DimensionError(f"{pilot_values.shape[-1]} pilot values for {len(positions)} pilot positions")
    received = Y[..., symbol, positions]
    # equals multiplication by the conjugate for unit-modulus pilots
    return received * np.conj(pilot_values) / np.abs(pilot_values) ** 2


def lmmse_matrix(sigma: np.ndarray, noise_var: float):
    """Return ``(G, used_pinv)`` with ``G = Sigma (Sigma + noise_var I)^-1``."""
    sigma = np.asarray(sigma, dtype=complex)
    p = sigma.shape[0]
    a = sigma + noise_var * np.eye(p)
    # Sigma commutes with Sigma + s I, so G = (Sigma + s I)^-1 Sigma
    if np.linalg.cond(a) < 1e12:
        return scipy.linalg.solve(a, sigma, assume_a="her"), False
    log.info("LMMSE system is singular; using the pseudo-inverse")
    return sigma @ np.linalg.pinv(a, hermitian=True), True


def lmmse_estimate(p: np.ndarray, sigma: np.ndarray, noise_var: float) -> np.ndarray:
    """LMMSE channel estimate at the pilot subcarriers for observations ``p`` (..., P)."""
    p = np.asarray(p, dtype=complex)
    if p.shape[-1] != np.shape(sigma)[0]:
        raise DimensionError("pilot vector and covariance sizes differ")
    G, _ = lmmse_matrix(sigma, noise_var)
    return p @ G.T


def interpolate_full_band(h_pilots: np.ndarray, n: int, positions: np.ndarray | None = None) -> np.ndarray:
    """Linear interpolation from the pilot subcarriers to all ``n`` subcarriers.

    Subcarriers outside the pilot span take the value of the nearest pilot.
    """
    h_pilots = np.asarray(h_pilots, dtype=complex)
    if positions is None:
        positions = pilot_positions(n)
    positions = np.asarray(positions)
    if positions.size < 2:
        raise ValueError("interpolation needs at least two pilots")
    if h_pilots.shape[-1] != positions.size:
        raise DimensionError("pilot values and positions differ in length")
    target = np.arange(n)
    right = np.clip(np.searchsorted(positions, target, side="left"), 1, positions.size - 1)
    left = right - 1
    x0, x1 = positions[left], positions[right]
    w = np.clip((target - x0) / (x1 - x0), 0.0, 1.0)
    return h_pilots[..., left] * (1.0 - w) + h_pilots[..., right] * w


def replicate_over_slot(h: np.ndarray, m: int) -> np.ndarray:
    h = np.asarray(h)
    return np.broadcast_to(h[..., None, :], h.shape[:-1] + (m, h.shape[-1])).copy()


def equalize(Y: np.ndarray, H_hat: np.ndarray):
    """Single-tap equalization; returns ``(X_hat, erased)``.

    REs whose estimated gain is below ``DEGENERATE_GAIN`` are flagged erased
    and get ``X_hat = 0``.
    """
    Y = np.asarray(Y, dtype=complex)
    H_hat = np.broadcast_to(np.asarray(H_hat, dtype=complex), Y.shape)
    erased = np.abs(H_hat) < DEGENERATE_GAIN
    safe = np.where(erased, 1.0, H_hat)
    return np.where(erased, 0.0, Y / safe), erased


def _logsumexp_masked(metric, mask):
    # metric (..., L), mask (L,) boolean
    sub = metric[..., mask]
    peak = sub.max(axis=-1, keepdims=True)
    return peak[..., 0] + np.log(np.exp(sub - peak).sum(axis=-1))


def demap_llr(x_hat: np.ndarray, h_hat: np.ndarray, noise_var: float, constellation: Constellation,
              points: np.ndarray | None = None) -> np.ndarray:
    """Per-bit LLRs from the AWGN demapper with post-equalization SNR ``|h|^2 / noise_var``.

    Args:
        x_hat: Equalized symbols, any shape ``S``.
        h_hat: Channel estimates broadcastable to ``S``.
        noise_var: Noise variance, > 0.
        constellation: Supplies the bit labels (and the points by default).
        points: Optional per-RE points of shape broadcastable to ``S + (2^K,)``,
            e.g. a constellation scaled by subcarrier gains.

    Returns:
        Array of shape ``S + (K,)`` clipped to ``[-LLR_CLIP, LLR_CLIP]``; REs
        with a degenerate channel estimate get all-zero LLRs.
    """
    if not noise_var > 0:
        raise ValueError(f"noise variance must be positive, got {noise_var}")
    x_hat = np.asarray(x_hat, dtype=complex)
    h_hat = np.broadcast_to(np.asarray(h_hat, dtype=complex), x_hat.shape)
    pts = constellation.points if points is None else np.asarray(points, dtype=complex)
    snr = np.abs(h_hat) ** 2 / noise_var
    diff = x_hat[..., None] - pts
    metric = -snr[..., None] * (diff.real ** 2 + diff.imag ** 2)
    llr = np.empty(x_hat.shape + (constellation.k,))
    for k in range(constellation.k):
        ones = constellation.bits[:, k] == 1
        llr[..., k] = _logsumexp_masked(metric, ones) - _logsumexp_masked(metric, ~ones)
    llr = np.clip(llr, -LLR_CLIP, LLR_CLIP)
    llr[np.abs(h_hat) < DEGENERATE_GAIN] = 0.0
    return llr


def bit_cross_entropy(llrs: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """``-log2 P(b | y)`` per bit with ``P(b=1 | y) = sigmoid(LLR)``."""
    llrs = np.asarray(llrs, dtype=float)
    sign = 2.0 * np.asarray(bits, dtype=float) - 1.0
    return np.logaddexp(0.0, -sign * llrs) / np.log(2.0)


def bce_rate(llrs: np.ndarray, bits: np.ndarray, mask: np.ndarray | None = None):
    """Return ``(rate, bce)`` in bits per RE.

    ``llrs`` and ``bits`` have shape ``(..., K)``; ``mask`` (shape ``...``)
    selects the REs that carry data.  ``rate = K - bce``.
    """
    llrs = np.asarray(llrs, dtype=float)
    bits = np.asarray(bits)
    if llrs.shape != bits.shape:
        raise DimensionError(f"llr shape {llrs.shape} differs from bit shape {bits.shape}")
    per_re = bit_cross_entropy(llrs, bits).sum(axis=-1)
    if mask is not None:
        per_re = per_re[np.broadcast_to(mask, per_re.shape)]
    bce = float(np.mean(per_re))
    return llrs.shape[-1] - bce, bce


def hard_decisions(llrs: np.ndarray) -> np.ndarray:
    return (np.asarray(llrs) > 0).astype(np.uint8)


def bit_error_rate(llrs: np.ndarray, bits: np.ndarray, mask: np.ndarray | None = None) -> float:
    errors = hard_decisions(llrs) != np.asarray(bits)
    if mask is not None:
        errors = errors[np.broadcast_to(mask, errors.shape[:-1])]
    return float(np.mean(errors))


@dataclass
class ReceiverOutput:
    llrs: np.ndarray
    h_hat: np.ndarray  # (..., N) full-band estimate, shared by every symbol
    x_hat: np.ndarray
    used_pinv: bool


def receive(Y: np.ndarray, pilot_values: np.ndarray, sigma: np.ndarray, noise_var: float,
            constellation: Constellation, points: np.ndarray | None = None,
            pilot_noise_var: float | None = None, demap_noise_floor: float = 1e-12) -> ReceiverOutput:
    """Run the full receiver on a batch of slots ``Y`` of shape ``(..., M, N)``.

    ``pilot_noise_var`` is the noise variance on the pilot observations after
    pilot removal (defaults to ``noise_var``, exact for unit-modulus pilots).
    The demapper uses ``max(noise_var, demap_noise_floor)`` so that noiseless
    runs still produce finite, saturated LLRs.
    """
    Y = np.asarray(Y, dtype=complex)
    m, n = Y.shape[-2:]
    p = extract_pilot_observations(Y, pilot_values)
    G, used_pinv = lmmse_matrix(sigma, noise_var if pilot_noise_var is None else pilot_noise_var)
    h_p = p @ G.T
    h = interpolate_full_band(h_p, n)
    H = replicate_over_slot(h, m)
    x_hat, _ = equalize(Y, H)
    llrs = demap_llr(x_hat, H, max(noise_var, demap_noise_floor), constellation,
                     None if points is None else points)
    return ReceiverOutput(llrs, h, x_hat, used_pinv)


def write_llr_file(path, llrs: np.ndarray) -> None:
    """Write a stream of ``(M, N, K)`` LLR records after an ``LLRS`` header."""
    llrs = np.asarray(llrs, dtype="<f8")
    m, n, k = llrs.shape[-3:]
    with open(path, "wb") as fh:
        fh.write(_LLR_HEADER.pack(LLR_MAGIC, m, n, k))
        fh.write(np.ascontiguousarray(llrs).tobytes())


def read_llr_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, m, n, k = _LLR_HEADER.unpack_from(raw)
    if magic != LLR_MAGIC:
        raise ValueError(f"not an LLR dump (magic={magic!r})")
    return np.frombuffer(raw[_LLR_HEADER.size:], dtype="<f8").reshape(-1, m, n, k).copy()
