"""Tone-reservation baseline transmitter.

A random subset of subcarriers (the PRTs) per OFDM symbol carries a
peak-cancelling vector ``c`` chosen to minimize the largest oversampled
sample power of ``u + c`` subject to ``|c|^2 <= |R|``.

The peak problem is a convex QCQP in epigraph form,

    minimize s  subject to  |a_t^T (u + c)|^2 <= s  for all samples t,
                            |c|^2 <= budget,

solved here with a log-barrier Newton method.  At the end of every
centering stage the barrier weights give Lagrange multipliers whose dual
function is evaluated in closed form, so the returned objective carries a
rigorous optimality gap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import ConfigError, DimensionError
from .grid import (
    PILOT_SYMBOL,
    GridConfig,
    ResourceGrid,
    Role,
    SamplingConvention,
    insert_pilots,
    oversample,
    oversampling_matrix,
    pilot_positions,
)
from .mapping import Constellation


@dataclass(frozen=True)
class PrtPlacement:
    sets: tuple  # per-symbol arrays of subcarrier positions
    r: int
    r_pilot: int

    def mask(self, config: GridConfig) -> np.ndarray:
        m = np.zeros((config.m, config.n), dtype=bool)
        for sym, pos in enumerate(self.sets):
            m[sym, pos] = True
        return m


def sample_prt_placement(config: GridConfig, r: int, rng: np.random.Generator) -> PrtPlacement:
    """Uniformly random PRT positions, drawn independently per symbol.

    The pilot symbol gets ``r // 2`` PRTs chosen among the non-pilot positions.
    """
    if r < 0 or r >= config.n:
        raise ConfigError(f"PRT count must satisfy 0 <= R < N, got R={r}, N={config.n}")
    r_pilot = r // 2
    free_on_pilot = np.setdiff1d(np.arange(config.n), pilot_positions(config.n))
    if r_pilot > free_on_pilot.size:
        raise ConfigError(f"{r_pilot} PRTs do not fit beside the pilots for N={config.n}")
    sets = []
    for m in range(config.m):
        if m == PILOT_SYMBOL and config.m > PILOT_SYMBOL:
            pos = rng.choice(free_on_pilot, size=r_pilot, replace=False)
        else:
            pos = rng.choice(config.n, size=r, replace=False)
        sets.append(np.sort(pos))
    return PrtPlacement(tuple(sets), r, r_pilot)


@dataclass(frozen=True)
class PeakSolverConfig:
    """Settings of the barrier solver.

    ``initial_temperature`` is the starting barrier weight relative to the
    initial peak, and ``temperature_decay`` the factor applied to it after
    every centering stage.
    """

    oversampling: int = 4
    max_iters: int = 400
    rel_obj_tol: float = 1e-7
    feas_tol: float = 1e-9
    certificate_tol: float = 1e-5
    initial_temperature: float = 1.0
    temperature_decay: float = 0.1

    def __post_init__(self):
        for name in ("rel_obj_tol", "feas_tol", "certificate_tol", "initial_temperature"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.temperature_decay < 1:
            raise ConfigError("temperature_decay must lie in (0, 1)")


@dataclass
class SolveReport:
    objective: float
    initial_objective: float
    lower_bound: float
    rel_gap: float
    kkt_residual: float
    energy: float
    budget: float
    iterations: int
    certified: bool
    weights: np.ndarray = field(default=None, repr=False)
    fine_peak: float = float("nan")  # peak of u + c re-measured at 4x the solver's oversampling

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "initial_objective": self.initial_objective,
            "lower_bound": self.lower_bound,
            "rel_gap": self.rel_gap,
            "kkt_residual": self.kkt_residual,
            "energy": self.energy,
            "budget": self.budget,
            "iterations": self.iterations,
            "certified": self.certified,
            "fine_peak": self.fine_peak,
        }


def _realrep(P):
    """Real ``(2R, 2R)`` matrix of the quadratic form ``c^H P c`` (Hermitian ``P``)."""
    top = np.concatenate([P.real, -P.imag], axis=-1)
    bot = np.concatenate([P.imag, P.real], axis=-1)
    return np.concatenate([top, bot], axis=-2)


def _to_complex(y):
    r = y.shape[-1] // 2
    return y[..., :r] + 1j * y[..., r:]


def _dual_bound(base, A, rho, lam, nu):
    """``min_c sum_t lam_t |base_t + A_t c|^2 + nu (|c|^2 - rho)``, lam summing to one."""
    Ah_lam = np.conj(A) * lam[:, :, None]
    Hm = np.einsum("btr,bts->brs", Ah_lam, A) + nu[:, None, None] * np.eye(A.shape[-1])
    rhs = np.einsum("btr,bt->br", Ah_lam, base)
    const = np.einsum("bt,bt->b", lam, np.abs(base) ** 2)
    sol = np.einsum("brs,bs->br", np.linalg.pinv(Hm, hermitian=True), rhs)
    resid = np.einsum("brs,bs->br", Hm, sol) - rhs
    val = const - np.real(np.einsum("br,br->b", rhs.conj(), sol)) - nu * rho
    # rhs outside the range of Hm makes the dual function unbounded below
    unbounded = np.linalg.norm(resid, axis=-1) > 1e-8 * (1.0 + np.linalg.norm(rhs, axis=-1))
    return np.where(unbounded, -np.inf, val)


def _solve_batch(base, A, rho, cfg: PeakSolverConfig, y0):
    """Barrier method over a batch of instances with equal PRT count.

    base: (B, T) samples of ``u``; A: (B, T, R) sample responses of the PRTs;
    rho: (B,) energy budgets (> 0); y0: (B, 2R) strictly feasible start.
    ``cfg.max_iters`` caps the Newton steps of each instance.
    """
    B, T, R = A.shape
    n = 2 * R
    eye = np.eye(n)
    Ac = np.conj(A)

    def peaks(ix, yv):
        z = base[ix] + np.einsum("btr,br->bt", A[ix], _to_complex(yv))
        return z, z.real ** 2 + z.imag ** 2

    def barrier_change(ix, z, d, e, yv, dy, ds, tv):
        """Barrier increase for the move ``(dy, ds)``, formed from increments
        so that it stays accurate when ``t * s`` is large."""
        dz = np.einsum("btr,br->bt", A[ix], _to_complex(dy))
        dq = 2.0 * (z.real * dz.real + z.imag * dz.imag) + dz.real ** 2 + dz.imag ** 2
        rd = (ds[:, None] - dq) / d
        re = -(2.0 * np.einsum("bi,bi->b", yv, dy) + np.einsum("bi,bi->b", dy, dy)) / e
        ok = (rd > -1.0).all(axis=1) & (re > -1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = tv * ds - np.log1p(np.where(rd > -1.0, rd, 0.0)).sum(axis=1) - np.log1p(np.where(re > -1.0, re, 0.0))
        return np.where(ok, val, np.inf)

    everyone = np.arange(B)
    y = y0.copy()
    f_start = peaks(everyone, np.zeros_like(y))[1].max(axis=1)
    f0 = peaks(everyone, y)[1].max(axis=1)
    s = f0 * 1.05 + 1e-12 * np.maximum(f0, 1.0)
    t = (T + 1) / (cfg.initial_temperature * np.maximum(f0, 1e-300))

    done = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    best_lb = np.full(B, -np.inf)
    lam_best = np.zeros((B, T))
    nu_best = np.zeros(B)
    lam_last = np.zeros((B, T))  # multipliers of the latest centre, paired with y for the KKT check
    nu_last = np.zeros(B)

    while True:
        stage = np.flatnonzero(~done & (iters < cfg.max_iters))
        if stage.size == 0:
            break
        act = stage
        while act.size:
            iters[act] += 1
            ya, sa, ta = y[act], s[act], t[act]
            z, q = peaks(act, ya)
            d = sa[:, None] - q
            e = rho[act] - np.einsum("bi,bi->b", ya, ya)
            w1 = 1.0 / d
            w2 = w1 ** 2
            gc = 2.0 * Ac[act] * z[:, :, None]
            g = np.concatenate([gc.real, gc.imag], axis=-1)
            grad_y = np.einsum("bt,bti->bi", w1, g) + 2.0 * ya / e[:, None]
            grad_s = ta - w1.sum(axis=1)
            P = np.einsum("bt,btr,bts->brs", w1, Ac[act], A[act])
            H = np.empty((act.size, n + 1, n + 1))
            H[:, :n, :n] = (
                2.0 * _realrep(P)
                + np.einsum("bt,bti,btj->bij", w2, g, g)
                + (2.0 / e)[:, None, None] * eye
                + 4.0 * np.einsum("bi,bj->bij", ya, ya) / (e ** 2)[:, None, None]
            )
            H[:, :n, n] = H[:, n, :n] = -np.einsum("bt,bti->bi", w2, g)
            H[:, n, n] = w2.sum(axis=1)
            grad = np.concatenate([grad_y, grad_s[:, None]], axis=1)
            try:
                step = -np.linalg.solve(H, grad[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                step = -np.einsum("bij,bj->bi", np.linalg.pinv(H), grad)
            dec = -np.einsum("bi,bi->b", grad, step)
            moving = dec > 1e-8
            alpha = np.ones(act.size)
            accepted = ~moving
            for _ in range(50):
                pend = np.flatnonzero(~accepted)
                if pend.size == 0:
                    break
                dy = alpha[pend, None] * step[pend, :n]
                ds = alpha[pend] * step[pend, n]
                change = barrier_change(act[pend], z[pend], d[pend], e[pend], ya[pend], dy, ds, ta[pend])
                ok = change <= -0.25 * alpha[pend] * dec[pend]
                y[act[pend[ok]]] = ya[pend[ok]] + dy[ok]
                s[act[pend[ok]]] = sa[pend[ok]] + ds[ok]
                accepted[pend[ok]] = True
                alpha[pend[~ok]] *= 0.5
            # centred: tiny decrement, or no step length decreases the barrier
            still = moving & accepted & (alpha > 1e-12)
            act = act[still & (iters[act] < cfg.max_iters)]

        ix = stage
        z, q = peaks(ix, y[ix])
        d = s[ix, None] - q
        e = rho[ix] - np.einsum("bi,bi->b", y[ix], y[ix])
        lam = 1.0 / (t[ix, None] * d)
        nu = 1.0 / (t[ix] * e)
        norm = lam.sum(axis=1)
        lam_n = lam / norm[:, None]
        nu_n = nu / norm
        lb = _dual_bound(base[ix], A[ix], rho[ix], lam_n, nu_n)
        better = lb > best_lb[ix]
        upd = ix[better]
        best_lb[upd] = lb[better]
        lam_best[upd] = lam_n[better]
        nu_best[upd] = nu_n[better]
        lam_last[ix] = lam_n
        nu_last[ix] = nu_n
        f = q.max(axis=1)
        done[ix] = f - best_lb[ix] <= cfg.rel_obj_tol * f
        t[ix] = np.where(done[ix], t[ix], t[ix] / cfg.temperature_decay)

    z, q = peaks(everyone, y)
    f = q.max(axis=1)
    gc = 2.0 * Ac * z[:, :, None]
    g = np.concatenate([gc.real, gc.imag], axis=-1)
    resid = np.einsum("bt,bti->bi", lam_last, g) + 2.0 * nu_last[:, None] * y
    scale = np.maximum(np.einsum("bt,bt->b", lam_last, np.linalg.norm(g, axis=-1)), 1e-300)
    kkt = np.linalg.norm(resid, axis=-1) / scale
    for b in np.flatnonzero(kkt > cfg.certificate_tol):
        kkt[b] = min(kkt[b], _refined_kkt(g[b], q[b], y[b], rho[b], cfg.rel_obj_tol))
    lb = np.maximum(best_lb, 0.0)
    rel_gap = np.where(f > 0, (f - lb) / np.maximum(f, 1e-300), 0.0)
    return y, f, f_start, lb, rel_gap, kkt, iters, lam_best


def _refined_kkt(g, q, y, rho, tol):
    """Smallest stationarity residual over multipliers supported on near-active constraints.

    The barrier multipliers are only one estimate; on flat optima they can be
    far from the best ones even though the duality gap is closed.  Solves
    ``min |sum_t lam_t g_t + 2 nu y|`` over ``lam`` in the simplex (restricted
    to samples within ``tol`` of the peak) and ``nu >= 0`` when the energy
    constraint is active.
    """
    active = np.flatnonzero(q >= q.max() * (1.0 - 10.0 * tol))
    cols = g[active].T
    if rho - y @ y <= 10.0 * tol * rho:
        cols = np.column_stack([cols, 2.0 * y])
    weight = 1e3 * (1.0 + np.abs(cols).max())
    lhs = np.vstack([cols, np.r_[np.ones(active.size), np.zeros(cols.shape[1] - active.size)] * weight])
    rhs = np.r_[np.zeros(cols.shape[0]), weight]
    w, _ = nnls(lhs, rhs)
    lam = w[:active.size]
    scale = max(lam @ np.linalg.norm(g[active], axis=1), 1e-300)
    return float(np.linalg.norm(cols @ w) / scale)


def _prt_columns(n: int, oversampling: int) -> np.ndarray:
    return oversampling_matrix(n, oversampling, SamplingConvention.UNIT_MEAN_POWER)


def minimize_peak_batch(
    u: np.ndarray,
    supports,
    budgets,
    solver: PeakSolverConfig = PeakSolverConfig(),
    rng: np.random.Generator | None = None,
):
    """Solve the peak problem for many symbols.

    Args:
        u: (B, N) data vectors, zero on their PRT positions.
        supports: Sequence of B integer arrays of PRT positions.
        budgets: (B,) energy budgets for ``c``.
        solver: Solver settings.
        rng: When given, each solve starts from a random point inside the
            energy ball instead of ``c = 0``.

    Returns:
        ``(c, reports)`` with ``c`` of shape (B, N) supported on the PRTs.
    """
    u = np.asarray(u, dtype=complex)
    if u.ndim != 2:
        raise DimensionError("u must have shape (B, N)")
    B, n = u.shape
    budgets = np.broadcast_to(np.asarray(budgets, dtype=float), (B,))
    supports = [np.asarray(s, dtype=int) for s in supports]
    if len(supports) != B:
        raise DimensionError("one support set per symbol is required")
    for b, sup in enumerate(supports):
        if np.any(u[b, sup] != 0):
            raise ValueError(f"u must be zero on its PRT positions (symbol {b})")
    Fm = _prt_columns(n, solver.oversampling)
    base_all = oversample(u, solver.oversampling, SamplingConvention.UNIT_MEAN_POWER)
    peak0 = np.max(np.abs(base_all) ** 2, axis=1)

    c = np.zeros_like(u)
    reports = [None] * B
    trivial = [b for b in range(B) if supports[b].size == 0 or budgets[b] <= 0 or peak0[b] == 0]
    for b in trivial:
        reports[b] = SolveReport(
            objective=float(peak0[b]), initial_objective=float(peak0[b]), lower_bound=float(peak0[b]),
            rel_gap=0.0, kkt_residual=0.0, energy=0.0, budget=float(budgets[b]), iterations=0,
            certified=True,
        )
    by_size = {}
    for b in range(B):
        if reports[b] is None:
            by_size.setdefault(supports[b].size, []).append(b)

    for r, members in by_size.items():
        members = np.array(members)
        sup = np.stack([supports[b] for b in members])
        A = Fm[:, sup].transpose(1, 0, 2)  # (B', T, R)
        rho = budgets[members]
        if rng is None:
            y0 = np.zeros((members.size, 2 * r))
        else:
            direction = rng.standard_normal((members.size, 2 * r))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            radius = 0.9 * np.sqrt(rho) * rng.random(members.size) ** (1.0 / (2 * r))
            y0 = direction * radius[:, None]
        y, f, f_start, lb, gap, kkt, iters, lam = _solve_batch(base_all[members], A, rho, solver, y0)
        cc = _to_complex(y)
        # c = 0 is always feasible; keep it unless the solve strictly improves on it
        keep_zero = f >= peak0[members]
        if rng is None:
            f_start = peak0[members]
        cc[keep_zero] = 0.0
        f = np.where(keep_zero, peak0[members], f)
        for j, b in enumerate(members):
            c[b, supports[b]] = cc[j]
            energy = float(np.sum(np.abs(cc[j]) ** 2))
            reports[b] = SolveReport(
                objective=float(f[j]),
                initial_objective=float(f_start[j]),
                lower_bound=float(lb[j]),
                rel_gap=float(gap[j]),
                kkt_residual=float(kkt[j]),
                energy=energy,
                budget=float(rho[j]),
                iterations=int(iters[j]),
                certified=bool(
                    gap[j] <= solver.rel_obj_tol
                    and kkt[j] <= solver.certificate_tol
                    and energy <= rho[j] + solver.feas_tol
                ),
                weights=lam[j],
            )
    fine = oversample(u + c, 4 * solver.oversampling, SamplingConvention.UNIT_MEAN_POWER)
    for b, peak in enumerate(np.max(fine.real ** 2 + fine.imag ** 2, axis=1)):
        reports[b].fine_peak = float(peak)
    return c, reports


def minimize_peak(u, support, budget, solver: PeakSolverConfig = PeakSolverConfig(), rng=None):
    """Single-symbol version of :func:`minimize_peak_batch`."""
    u = np.asarray(u, dtype=complex)
    if u.ndim != 1:
        raise DimensionError("u must be a single FBS vector")
    c, reports = minimize_peak_batch(u[None, :], [np.asarray(support, dtype=int)], [budget], solver, rng)
    return c[0], reports[0]


@dataclass
class TrSlot:
    grid: ResourceGrid
    data: np.ndarray  # QAM symbols before peak reduction, zeros on PRT and pilot REs
    placement: PrtPlacement
    reports: list


def build_tr_slot(
    bits: np.ndarray,
    config: GridConfig,
    r: int,
    constellation: Constellation,
    rng: np.random.Generator,
    solver: PeakSolverConfig | None = None,
    placement: PrtPlacement | None = None,
) -> TrSlot:
    """Assemble one TR slot: pilots, QAM data on the data REs, and peak reduction.

    Args:
        bits: ``(M, N, K)`` bit array; entries on pilot and PRT REs are ignored.
    """
    solver = solver or PeakSolverConfig(oversampling=config.oversampling)
    bits = np.asarray(bits)
    if bits.shape != (config.m, config.n, constellation.k):
        raise DimensionError(f"bits must have shape {(config.m, config.n, constellation.k)}, got {bits.shape}")
    grid = insert_pilots(ResourceGrid.empty(config), config, rng)
    if placement is None:
        placement = sample_prt_placement(config, r, rng)
    prt = placement.mask(config)
    grid.roles[prt] = Role.PRT
    data_mask = grid.roles == Role.DATA
    grid.values[data_mask] = constellation.modulate(bits[data_mask])
    u = np.where(prt, 0.0, grid.values)
    budgets = np.array([float(len(s)) for s in placement.sets])
    c, reports = minimize_peak_batch(u, placement.sets, budgets, solver)
    grid.values = u + c
    return TrSlot(grid, np.where(data_mask, grid.values - c, 0.0), placement, reports)
