"""Constrained transmitter training with the augmented Lagrangian method.

The transmitter is a learnable constellation plus one complex gain per
subcarrier.  Training maximizes the bit-metric rate of the fixed LMMSE/AWGN
receiver (through the binary cross-entropy ``L_C``) subject to

* ``L_peak = 0``: the mean hinge excess of the oversampled sample power over
  ``gamma_peak``, and
* ``L_leak <= 0``: the batch ACLR minus ``beta_leak``.

Each outer iteration runs plain gradient descent on the augmented Lagrangian
and then updates the multipliers and penalty weights.

Complex gradients are carried in the form ``dL/dRe(x) + 1j dL/dIm(x)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .channel import TdlProfile, complex_noise, estimate_pilot_covariance, snr_to_noise_var
from .errors import ConfigError, DimensionError, NumericalError
from .grid import (
    PILOT_SYMBOL,
    GridConfig,
    SamplingConvention,
    oversample,
    pilot_mask,
    pilot_positions,
    random_pilots,
)
from .mapping import Constellation, bits_to_labels, label_bits, qam
from .rx import bce_rate, receive
from .spectral import SpectralOperators

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# transmitter


@dataclass
class TxParams:
    """Learnable constellation (``2^K`` points) and per-subcarrier gains (``N``)."""

    constellation: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        self.constellation = np.asarray(self.constellation, dtype=complex)
        self.gains = np.asarray(self.gains, dtype=complex)
        size = self.constellation.size
        if size < 2 or size & (size - 1):
            raise ConfigError(f"constellation size must be a power of two, got {size}")

    @property
    def k(self) -> int:
        return int(self.constellation.size).bit_length() - 1

    @property
    def n(self) -> int:
        return self.gains.size

    @property
    def labels(self) -> Constellation:
        return Constellation(self.constellation, label_bits(self.k))

    @classmethod
    def baseline(cls, k: int, n: int) -> "TxParams":
        return cls(qam(k).points.copy(), np.ones(n, dtype=complex))

    def to_vector(self) -> np.ndarray:
        c, g = self.constellation, self.gains
        return np.concatenate([c.real, c.imag, g.real, g.imag])

    @classmethod
    def from_vector(cls, vec: np.ndarray, k: int, n: int) -> "TxParams":
        size = 1 << k
        vec = np.asarray(vec, dtype=float)
        if vec.size != 2 * size + 2 * n:
            raise DimensionError(f"parameter vector has {vec.size} entries, expected {2 * size + 2 * n}")
        c = vec[:size] + 1j * vec[size:2 * size]
        g = vec[2 * size:2 * size + n] + 1j * vec[2 * size + n:]
        return cls(c, g)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n": self.n,
            "constellation": [[float(v.real), float(v.imag)] for v in self.constellation],
            "gains": [[float(v.real), float(v.imag)] for v in self.gains],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TxParams":
        c = np.array([complex(re, im) for re, im in d["constellation"]])
        g = np.array([complex(re, im) for re, im in d["gains"]])
        return cls(c, g)


def pack_gradient(grad_constellation: np.ndarray, grad_gains: np.ndarray) -> np.ndarray:
    """Real gradient vector in :meth:`TxParams.to_vector` order."""
    return np.concatenate([grad_constellation.real, grad_constellation.imag, grad_gains.real, grad_gains.imag])


def tx_forward(params: TxParams, bits: np.ndarray) -> np.ndarray:
    """Map bits ``(..., N, K)`` to FBS ``(..., N)``: ``gains[n] * constellation[label]``."""
    bits = np.asarray(bits)
    if bits.shape[-1] != params.k:
        raise DimensionError(f"expected {params.k} bits per RE, got {bits.shape[-1]}")
    if bits.shape[-2] != params.n:
        raise DimensionError(f"expected {params.n} subcarriers, got {bits.shape[-2]}")
    return params.gains * params.constellation[bits_to_labels(bits)]


def tx_backward(params: TxParams, labels: np.ndarray, grad_x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Pull a gradient on the FBS back to the parameter vector.

    ``labels`` are the constellation indices of every RE and ``mask`` selects
    the REs produced by the transmitter (pilot REs excluded).
    """
    if mask is not None:
        grad_x = np.where(mask, grad_x, 0.0)
    points = params.constellation[labels]
    grad_g = np.sum(grad_x * np.conj(points), axis=tuple(range(grad_x.ndim - 1)))
    weighted = grad_x * np.conj(params.gains)
    grad_c = np.bincount(labels.ravel(), weights=weighted.real.ravel(), minlength=params.constellation.size) \
        + 1j * np.bincount(labels.ravel(), weights=weighted.imag.ravel(), minlength=params.constellation.size)
    return pack_gradient(grad_c, grad_g)


# ---------------------------------------------------------------------------
# normalization and constraint losses


def _energy(x: np.ndarray, W: np.ndarray | None) -> float:
    if W is None:
        return float(np.sum(x.real ** 2 + x.imag ** 2))
    return float(np.sum(np.real(x.conj() * (x @ W.T))))


def batch_scale(batch: np.ndarray, W: np.ndarray | None = None) -> float:
    """RMS amplitude per RE, ``sqrt(sum x^H W x / number of REs)``."""
    batch = np.asarray(batch, dtype=complex)
    energy = _energy(batch, W)
    if not math.isfinite(energy):
        raise NumericalError("batch energy is not finite")
    if not energy > 0:
        raise NumericalError("batch has zero energy")
    return math.sqrt(energy / batch.size)


def batch_normalize(batch: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
    """Scale the whole batch so that the average energy per RE is one.

    One common factor is used for every vector, so correlated batches are
    normalized by their actual pooled energy rather than per vector.
    """
    batch = np.asarray(batch, dtype=complex)
    return batch / batch_scale(batch, W)


def normalize_backward(raw: np.ndarray, grad: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
    """Gradient wrt the raw batch given the gradient wrt its normalized version."""
    kappa = batch_scale(raw, W)
    w_raw = raw if W is None else raw @ W.T
    inner = float(np.sum(grad.real * raw.real + grad.imag * raw.imag))
    return grad / kappa - w_raw * inner / (kappa ** 3 * raw.size)


def _adjoint_oversample(grad_z: np.ndarray, n: int, oversampling: int) -> np.ndarray:
    """Apply the conjugate transpose of the unit-mean-power oversampling map."""
    length = n * oversampling
    idx = np.arange(-(n - 1) // 2, (n - 1) // 2 + 1) % length
    spec = np.fft.fft(grad_z, axis=-1) / math.sqrt(n)
    return spec[..., idx]


def loss_papr(batch: np.ndarray, gamma_peak: float, oversampling: int):
    """Mean hinge excess of ``|z|^2`` over ``gamma_peak``, and its gradient wrt ``batch``.

    ``z`` is the oversampled signal of every symbol in the batch (unit-mean
    power convention, symbol duration taken as 1), so the loss is the
    Riemann-sum average of ``(|z|^2 - gamma_peak)^+`` over all samples.
    """
    batch = np.asarray(batch, dtype=complex)
    n = batch.shape[-1]
    z = oversample(batch, oversampling, SamplingConvention.UNIT_MEAN_POWER)
    power = z.real ** 2 + z.imag ** 2
    excess = power - gamma_peak
    count = power.size
    loss = float(np.sum(np.maximum(excess, 0.0))) / count
    grad_z = np.where(excess > 0, 2.0 * z, 0.0) / count
    return loss, _adjoint_oversample(grad_z, n, oversampling)


def loss_aclr(batch: np.ndarray, beta_leak: float, V: np.ndarray, W: np.ndarray):
    """Batch ACLR minus ``beta_leak``, and its gradient wrt ``batch``."""
    batch = np.asarray(batch, dtype=complex)
    Vx = batch @ V.T
    Wx = batch @ W.T
    num = float(np.sum(np.real(batch.conj() * Wx)))
    den = float(np.sum(np.real(batch.conj() * Vx)))
    if not den > 0:
        raise NumericalError("zero in-band energy")
    ratio = num / den
    grad = 2.0 * (Wx - ratio * Vx) / den
    return ratio - 1.0 - beta_leak, grad


# ---------------------------------------------------------------------------
# augmented Lagrangian


@dataclass
class LagrangianState:
    lambda_peak: float = 0.0
    lambda_leak: float = 0.0
    mu_peak: float = 1.0
    mu_leak: float = 1.0
    tau: float = 0.05
    iteration: int = 0

    def __post_init__(self):
        if not (self.mu_peak > 0 and self.mu_leak > 0):
            raise ConfigError("penalty parameters must be positive")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")


def augmented_lagrangian(l_c: float, l_peak: float, l_leak: float, state: LagrangianState) -> float:
    """Augmented Lagrangian with the slack of the ACLR inequality minimized out."""
    shifted = max(0.0, state.lambda_leak + state.mu_leak * l_leak)
    return (
        l_c
        + state.lambda_peak * l_peak
        + 0.5 * state.mu_peak * l_peak ** 2
        + (shifted ** 2 - state.lambda_leak ** 2) / (2.0 * state.mu_leak)
    )


def lagrangian_weights(l_peak: float, l_leak: float, state: LagrangianState):
    """Derivatives of the augmented Lagrangian wrt ``l_peak`` and ``l_leak``."""
    return (
        state.lambda_peak + state.mu_peak * l_peak,
        max(0.0, state.lambda_leak + state.mu_leak * l_leak),
    )


def update_hyperparameters(state: LagrangianState, l_peak: float, l_leak: float, tau: float | None = None) -> LagrangianState:
    tau = state.tau if tau is None else tau
    return LagrangianState(
        lambda_peak=state.lambda_peak + state.mu_peak * l_peak,
        lambda_leak=max(0.0, state.lambda_leak + state.mu_leak * l_leak),
        mu_peak=(1.0 + tau) * state.mu_peak,
        mu_leak=(1.0 + tau) * state.mu_leak,
        tau=tau,
        iteration=state.iteration + 1,
    )


@dataclass
class Evaluation:
    """Losses and their gradients at one parameter vector."""

    l_c: float
    l_peak: float
    l_leak: float
    grad_c: np.ndarray
    grad_peak: np.ndarray
    grad_leak: np.ndarray
    metrics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LrSchedule:
    """Constant step for ``hold`` outer iterations, then geometric decay."""

    lr: float = 0.05
    hold: int = 20
    decay: float = 0.95

    def __call__(self, outer: int) -> float:
        return self.lr * self.decay ** max(0, outer - self.hold)


class TrainingDiverged(NumericalError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def run_augmented_lagrangian(evaluate, theta0: np.ndarray, state: LagrangianState, outer_iterations: int,
                             sgd_steps: int, schedule: LrSchedule, rng: np.random.Generator, measure=None):
    """Generic outer loop.

    ``evaluate(theta, rng)`` returns an :class:`Evaluation`; ``measure(theta,
    rng)`` (defaults to ``evaluate``) supplies the constraint values used for
    the multiplier update and the trace.

    Returns ``(theta, state, trace)``.
    """
    measure = measure or evaluate
    theta = np.array(theta0, dtype=float)
    trace = []

    def checked(fn, outer):
        if not np.all(np.isfinite(theta)):
            raise TrainingDiverged(f"non-finite parameters at outer iteration {outer}", trace)
        try:
            ev = fn(theta, rng)
        except NumericalError as exc:
            raise TrainingDiverged(f"outer iteration {outer}: {exc}", trace) from exc
        total = augmented_lagrangian(ev.l_c, ev.l_peak, ev.l_leak, state)
        if not math.isfinite(total) or not np.all(np.isfinite(ev.grad_c)):
            raise TrainingDiverged(f"non-finite augmented Lagrangian at outer iteration {outer}", trace)
        return ev, total

    for outer in range(outer_iterations):
        lr = schedule(outer)
        for _ in range(sgd_steps):
            ev, _ = checked(evaluate, outer)
            w_peak, w_leak = lagrangian_weights(ev.l_peak, ev.l_leak, state)
            theta = theta - lr * (ev.grad_c + w_peak * ev.grad_peak + w_leak * ev.grad_leak)
        ev, total = checked(measure, outer)
        trace.append({
            "iter": outer,
            "l_c": ev.l_c,
            "l_peak": ev.l_peak,
            "l_leak": ev.l_leak,
            "lambda_p": state.lambda_peak,
            "lambda_l": state.lambda_leak,
            "mu_p": state.mu_peak,
            "mu_l": state.mu_leak,
            "lagrangian": total,
            **ev.metrics,
        })
        state = update_hyperparameters(state, ev.l_peak, ev.l_leak)
    return theta, state, trace


# ---------------------------------------------------------------------------
# OFDM training problem


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``gamma_peak`` and ``beta_leak`` are linear; ``fd_step`` is the central
    finite-difference step for the rate gradient.
    """

    gamma_peak: float = 1e6
    beta_leak: float = 1e6
    k: int = 2
    batch_size: int = 128
    sgd_steps: int = 10
    outer_iterations: int = 50
    lr: float = 0.05
    lr_hold: int = 20
    lr_decay: float = 0.95
    snr_db: float = 10.0
    tau: float = 0.05
    mu0_peak: float = 1.0
    mu0_leak: float = 1.0
    lambda0: float = 0.0
    fd_step: float = 1e-4
    covariance_samples: int = 20000
    eval_batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.gamma_peak < 1:
            raise ConfigError("gamma_peak must be >= 1")
        if not self.beta_leak > 0:
            raise ConfigError("beta_leak must be positive")
        if self.batch_size < 1 or self.sgd_steps < 1 or self.outer_iterations < 0:
            raise ConfigError("batch_size and sgd_steps must be >= 1, outer_iterations >= 0")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_hold, self.lr_decay)

    def initial_state(self) -> LagrangianState:
        return LagrangianState(self.lambda0, self.lambda0, self.mu0_peak, self.mu0_leak, self.tau)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SlotBatch:
    """Everything random about one batch of slots, frozen for common random numbers."""

    bits: np.ndarray      # (B, M, N, K)
    labels: np.ndarray    # (B, M, N)
    pilots: np.ndarray    # (B, P) unit modulus
    channel: np.ndarray   # (B, N)
    noise: np.ndarray     # (B, M, N), unit variance


def draw_slots(config: GridConfig, k: int, batch_size: int, profile, rng: np.random.Generator) -> SlotBatch:
    bits = rng.integers(0, 2, (batch_size, config.m, config.n, k), dtype=np.uint8)
    pilots = random_pilots(batch_size * config.num_pilots, rng).reshape(batch_size, config.num_pilots)
    channel = profile.sample(batch_size, config, rng)
    noise = complex_noise((batch_size, config.m, config.n), 1.0, rng)
    return SlotBatch(bits, bits_to_labels(bits), pilots, channel, noise)


class OfdmTrainer:
    """Losses of the parametric transmitter on a grid, channel and receiver.

    Args:
        config: Slot numerology; ``config.oversampling`` is used for the peak loss.
        ops: Spectral operators for ``config.n``.
        train: Training hyperparameters.
        profile: Channel generator used for training batches and for the
            receiver's pilot covariance.
        rng: Source for the covariance dataset.
    """

    def __init__(self, config: GridConfig, ops: SpectralOperators, train: TrainConfig, profile=None,
                 rng: np.random.Generator | None = None):
        if ops.n != config.n:
            raise DimensionError("spectral operators and grid disagree on N")
        self.config = config
        self.ops = ops
        self.train = train
        self.profile = profile if profile is not None else TdlProfile()
        rng = rng if rng is not None else np.random.default_rng(train.seed)
        dataset = self.profile.sample(train.covariance_samples, config, rng)
        self.sigma = estimate_pilot_covariance(dataset, pilot_positions(config.n)).sigma
        self.noise_var = snr_to_noise_var(train.snr_db)
        self.pilot_mask = pilot_mask(config)
        self.data_mask = ~self.pilot_mask

    # -- forward pieces -----------------------------------------------------

    def raw_grid(self, params: TxParams, batch: SlotBatch) -> np.ndarray:
        x = params.gains * params.constellation[batch.labels]
        x[:, PILOT_SYMBOL, pilot_positions(self.config.n)] = batch.pilots
        return x

    def transmit(self, params: TxParams, batch: SlotBatch):
        raw = self.raw_grid(params, batch)
        kappa = batch_scale(raw, self.ops.W)
        return raw, raw / kappa, kappa

    def rate_loss(self, params: TxParams, batch: SlotBatch) -> float:
        """BCE of the fixed receiver on the data REs of the batch."""
        _, x, kappa = self.transmit(params, batch)
        h = batch.channel[:, None, :]
        y = h * x + math.sqrt(self.noise_var) * batch.noise
        points = (params.gains[:, None] * params.constellation[None, :]) / kappa
        out = receive(
            y,
            x[:, PILOT_SYMBOL, pilot_positions(self.config.n)],
            self.sigma,
            self.noise_var,
            params.labels,
            points=points,
            pilot_noise_var=self.noise_var * kappa ** 2,
        )
        _, bce = bce_rate(out.llrs, batch.bits, self.data_mask[None])
        return bce

    def constraint_losses(self, params: TxParams, batch: SlotBatch):
        """``(l_peak, l_leak, grad_peak, grad_leak, x)`` with parameter-space gradients."""
        raw, x, _ = self.transmit(params, batch)
        l_peak, g_peak = loss_papr(x, self.train.gamma_peak, self.config.oversampling)
        l_leak, g_leak = loss_aclr(x, self.train.beta_leak, self.ops.V, self.ops.W)
        grads = []
        for g in (g_peak, g_leak):
            g_raw = normalize_backward(raw, g, self.ops.W)
            grads.append(tx_backward(params, batch.labels, g_raw, self.data_mask))
        return l_peak, l_leak, grads[0], grads[1], x

    def rate_gradient(self, params: TxParams, batch: SlotBatch) -> np.ndarray:
        """Central finite differences of the BCE with the batch held fixed."""
        theta = params.to_vector()
        k, n = params.k, params.n
        h = self.train.fd_step
        grad = np.empty_like(theta)
        for i in range(theta.size):
            step = np.zeros_like(theta)
            step[i] = h
            up = self.rate_loss(TxParams.from_vector(theta + step, k, n), batch)
            down = self.rate_loss(TxParams.from_vector(theta - step, k, n), batch)
            grad[i] = (up - down) / (2 * h)
        return grad

    # -- evaluation -----------------------------------------------------------

    def metrics(self, x: np.ndarray) -> dict:
        from .papr import collect_alpha, papr_epsilon

        alphas = collect_alpha(x, self.config.oversampling)
        aclr = float(np.sum(np.real(x.conj() * (x @ self.ops.W.T))) / np.sum(np.real(x.conj() * (x @ self.ops.V.T))) - 1.0)
        return {"papr_db": papr_epsilon(alphas, 0.0)[1], "aclr_db": 10.0 * math.log10(aclr)}

    def evaluate(self, theta: np.ndarray, rng: np.random.Generator, with_rate_grad: bool = True,
                 batch_size: int | None = None) -> Evaluation:
        params = TxParams.from_vector(theta, self.train.k, self.config.n)
        batch = draw_slots(self.config, self.train.k, batch_size or self.train.batch_size, self.profile, rng)
        l_c = self.rate_loss(params, batch)
        l_peak, l_leak, g_peak, g_leak, x = self.constraint_losses(params, batch)
        g_c = self.rate_gradient(params, batch) if with_rate_grad else np.zeros_like(theta)
        return Evaluation(l_c, l_peak, l_leak, g_c, g_peak, g_leak)

    def measure(self, theta: np.ndarray, rng: np.random.Generator) -> Evaluation:
        params = TxParams.from_vector(theta, self.train.k, self.config.n)
        batch = draw_slots(self.config, self.train.k, self.train.batch_size, self.profile, rng)
        l_c = self.rate_loss(params, batch)
        l_peak, l_leak, g_peak, g_leak, x = self.constraint_losses(params, batch)
        zeros = np.zeros_like(theta)
        return Evaluation(l_c, l_peak, l_leak, zeros, zeros, zeros, self.metrics(x))


@dataclass
class TrainResult:
    params: TxParams
    state: LagrangianState
    trace: list


def run_training(config: GridConfig, ops: SpectralOperators, train: TrainConfig, profile=None,
                 rng: np.random.Generator | None = None, init: TxParams | None = None) -> TrainResult:
    """Train the transmitter; deterministic for a given ``train.seed`` (or ``rng``)."""
    rng = rng if rng is not None else np.random.default_rng(train.seed)
    trainer = OfdmTrainer(config, ops, train, profile, rng)
    init = init or TxParams.baseline(train.k, config.n)
    theta, state, trace = run_augmented_lagrangian(
        trainer.evaluate,
        init.to_vector(),
        train.initial_state(),
        train.outer_iterations,
        train.sgd_steps,
        train.schedule,
        rng,
        measure=trainer.measure,
    )
    return TrainResult(TxParams.from_vector(theta, train.k, config.n), state, trace)


def evaluate_params(params: TxParams, config: GridConfig, ops: SpectralOperators, train: TrainConfig,
                    profile=None, rng: np.random.Generator | None = None, slots: int | None = None) -> dict:
    """Rate, peak loss, PAPR_0 and ACLR of fixed parameters on a fresh batch."""
    rng = rng if rng is not None else np.random.default_rng(train.seed + 1)
    trainer = OfdmTrainer(config, ops, train, profile, rng)
    batch = draw_slots(config, train.k, slots or train.eval_batch_size, trainer.profile, rng)
    l_c = trainer.rate_loss(params, batch)
    l_peak, l_leak, _, _, x = trainer.constraint_losses(params, batch)
    out = {"rate": train.k - l_c, "l_c": l_c, "l_peak": l_peak, "l_leak": l_leak}
    out.update(trainer.metrics(x))
    return out


def with_targets(train: TrainConfig, gamma_peak: float, beta_leak: float) -> TrainConfig:
    return replace(train, gamma_peak=gamma_peak, beta_leak=beta_leak)
