"""Gray-labelled constellations and bit/label conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


def gray_code(n_bits: int) -> np.ndarray:
    i = np.arange(1 << n_bits)
    return i ^ (i >> 1)


def label_bits(k: int) -> np.ndarray:
    """``(2^K, K)`` table of the bits of every label, most significant first."""
    labels = np.arange(1 << k)
    return ((labels[:, None] >> np.arange(k - 1, -1, -1)[None, :]) & 1).astype(np.uint8)


def bits_to_labels(bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits)
    k = bits.shape[-1]
    weights = 1 << np.arange(k - 1, -1, -1)
    return (bits.astype(np.int64) * weights).sum(axis=-1)


@dataclass(frozen=True)
class Constellation:
    """Points indexed by label; bit ``k`` of label ``l`` is ``bits[l, k]``."""

    points: np.ndarray
    bits: np.ndarray

    @property
    def k(self) -> int:
        return self.bits.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def modulate(self, bits: np.ndarray) -> np.ndarray:
        bits = np.asarray(bits)
        if bits.shape[-1] != self.k:
            raise DimensionError(f"expected {self.k} bits per symbol, got {bits.shape[-1]}")
        return self.points[bits_to_labels(bits)]


def _pam_levels(n_bits: int) -> np.ndarray:
    """Amplitude for each axis bit pattern, Gray ordered so that pattern 0 is
    the largest positive level."""
    levels = 1 << n_bits
    amp = np.empty(levels)
    # position p (0 = most positive) carries Gray pattern gray_code[p]
    amp[gray_code(n_bits)] = (levels - 1) - 2 * np.arange(levels)
    return amp


def qam(k: int) -> Constellation:
    """Square Gray ``2^K``-QAM with unit average energy.

    The first ``K/2`` bits select the in-phase level, the last ``K/2`` the
    quadrature level, each Gray coded independently.
    """
    if k < 2 or k % 2:
        raise ConfigError(f"square QAM needs an even number of bits per symbol, got {k}")
    half = k // 2
    bits = label_bits(k)
    amp = _pam_levels(half)
    i_pat = bits_to_labels(bits[:, :half])
    q_pat = bits_to_labels(bits[:, half:])
    points = amp[i_pat] + 1j * amp[q_pat]
    points = points / np.sqrt(np.mean(np.abs(points) ** 2))
    return Constellation(points, bits)


def bpsk() -> Constellation:
    """Two-point constellation with bit 1 on +1 and bit 0 on -1."""
    return Constellation(np.array([-1.0 + 0j, 1.0 + 0j]), label_bits(1))


def qam_modulate(bits: np.ndarray, constellation: Constellation) -> np.ndarray:
    return constellation.modulate(bits)
