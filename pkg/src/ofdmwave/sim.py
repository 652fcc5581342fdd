"""Link-level Monte Carlo for the tone-reservation baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import estimate_pilot_covariance, snr_to_noise_var
from .grid import PILOT_SYMBOL, GridConfig, Role, pilot_positions
from .mapping import qam
from .papr import collect_alpha, papr_epsilon
from .rx import bce_rate, bit_error_rate, receive
from .spectral import SpectralOperators, aclr_empirical, to_db
from .tr import PeakSolverConfig, build_tr_slot


@dataclass(frozen=True)
class TrBatch:
    """Transmitted TR slots together with the bits and masks needed at the receiver."""

    values: np.ndarray    # (S, M, N)
    bits: np.ndarray      # (S, M, N, K)
    data_mask: np.ndarray  # (S, M, N)
    pilots: np.ndarray    # (S, P)
    reports: list


def transmit_tr(config: GridConfig, k: int, r: int, slots: int, rng: np.random.Generator,
                solver: PeakSolverConfig | None = None) -> TrBatch:
    constellation = qam(k)
    pos = pilot_positions(config.n)
    values, bits, masks, pilots, reports = [], [], [], [], []
    for _ in range(slots):
        b = rng.integers(0, 2, (config.m, config.n, k), dtype=np.uint8)
        slot = build_tr_slot(b, config, r, constellation, rng, solver)
        values.append(slot.grid.values)
        bits.append(b)
        masks.append(slot.grid.roles == Role.DATA)
        pilots.append(slot.grid.values[PILOT_SYMBOL, pos])
        reports.extend(slot.reports)
    return TrBatch(np.array(values), np.array(bits), np.array(masks), np.array(pilots), reports)


def simulate_baseline(config: GridConfig, ops: SpectralOperators, profile, k: int, r: int, snr_db_list,
                      slots: int, rng: np.random.Generator, epsilon: float = 1e-3,
                      covariance_samples: int = 20000, solver: PeakSolverConfig | None = None,
                      llr_sink: dict | None = None):
    """BER, rate, PAPR and ACLR of the TR baseline at each SNR.

    The transmit batch, the channels and the noise directions are drawn once
    and reused at every SNR point, so the curves differ only through the
    noise level.  Returns ``(rows, batch)`` with rows of
    ``(snr_db, ber, rate, papr_db, aclr_db)``.  If ``llr_sink`` is given, the
    LLRs of every SNR point are stored in it keyed by SNR.
    """
    sigma = estimate_pilot_covariance(profile.sample(covariance_samples, config, rng)).sigma
    batch = transmit_tr(config, k, r, slots, rng, solver)
    papr_db = papr_epsilon(collect_alpha(batch.values.reshape(-1, config.n), config.oversampling), epsilon)[1]
    aclr_db = float(to_db(aclr_empirical(batch.values.reshape(-1, config.n), ops)))
    h = profile.sample(slots, config, rng)[:, None, :]
    noise = (rng.standard_normal(batch.values.shape) + 1j * rng.standard_normal(batch.values.shape)) / np.sqrt(2.0)
    constellation = qam(k)
    rows = []
    for snr_db in snr_db_list:
        noise_var = snr_to_noise_var(snr_db)
        y = h * batch.values + np.sqrt(noise_var) * noise
        out = receive(y, batch.pilots, sigma, noise_var, constellation)
        rate, _ = bce_rate(out.llrs, batch.bits, batch.data_mask)
        ber = bit_error_rate(out.llrs, batch.bits, batch.data_mask)
        if llr_sink is not None:
            llr_sink[float(snr_db)] = out.llrs
        rows.append((float(snr_db), ber, rate, papr_db, aclr_db))
    return rows, batch
