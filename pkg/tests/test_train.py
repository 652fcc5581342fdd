import math

import numpy as np
import pytest

from conftest import crandn
from oracles import v00_closed_form
from ofdmwave.errors import ConfigError, DimensionError, NumericalError
from ofdmwave.grid import GridConfig
from ofdmwave.mapping import qam
from ofdmwave.spectral import spectral_operators
from ofdmwave.train import (
    Evaluation,
    LagrangianState,
    LrSchedule,
    OfdmTrainer,
    TrainConfig,
    TrainingDiverged,
    TxParams,
    augmented_lagrangian,
    batch_normalize,
    draw_slots,
    evaluate_params,
    loss_aclr,
    loss_papr,
    normalize_backward,
    run_augmented_lagrangian,
    run_training,
    tx_backward,
    tx_forward,
    update_hyperparameters,
)
from ofdmwave.channel import FlatProfile


def fd_complex(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        for d in (1.0, 1j):
            e = np.zeros_like(x)
            e[idx] = h * d
            g[idx] += d * (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# -- transmitter ------------------------------------------------------------


def test_baseline_reduces_to_qam(rng):
    p = TxParams.baseline(2, 9)
    bits = rng.integers(0, 2, (3, 14, 9, 2))
    np.testing.assert_array_equal(tx_forward(p, bits), qam(2).modulate(bits))
    with pytest.raises(DimensionError):
        tx_forward(p, bits[..., :1])


def test_notch_and_scale_invariance(rng):
    p = TxParams.baseline(2, 9)
    p.gains[3] = 0
    bits = rng.integers(0, 2, (5, 14, 9, 2))
    x = tx_forward(p, bits)
    assert np.all(x[..., 3] == 0)
    doubled = TxParams(p.constellation, 2 * p.gains)
    np.testing.assert_allclose(batch_normalize(tx_forward(doubled, bits)), batch_normalize(x), atol=1e-15)


def test_param_vector_roundtrip(rng):
    p = TxParams(crandn(rng, 16), crandn(rng, 9))
    q = TxParams.from_vector(p.to_vector(), 4, 9)
    np.testing.assert_array_equal(q.constellation, p.constellation)
    np.testing.assert_array_equal(q.gains, p.gains)
    assert TxParams.from_dict(p.to_dict()).to_vector().tolist() == p.to_vector().tolist()
    with pytest.raises(ConfigError):
        TxParams(np.ones(3), np.ones(9))


def test_tx_backward_matches_finite_differences(rng):
    p = TxParams(crandn(rng, 4), crandn(rng, 5))
    bits = rng.integers(0, 2, (2, 3, 5, 2))
    from ofdmwave.mapping import bits_to_labels

    labels = bits_to_labels(bits)
    w = crandn(rng, 2, 3, 5)
    f = lambda th: float(np.sum(np.real(np.conj(w) * tx_forward(TxParams.from_vector(th, 2, 5), bits))))
    th = p.to_vector()
    num = np.array([(f(th + e) - f(th - e)) / 2e-6 for e in np.eye(th.size) * 1e-6])
    np.testing.assert_allclose(tx_backward(p, labels, w), num, atol=1e-8)


# -- normalization ------------------------------------------------------------


def test_normalization_contract(rng):
    x = crandn(rng, 4, 14, 9) * 3.7
    y = batch_normalize(x)
    assert np.mean(np.abs(y) ** 2) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(batch_normalize(y), y, atol=1e-12)
    np.testing.assert_allclose(batch_normalize(3 * x), y, atol=1e-12)
    with pytest.raises(NumericalError):
        batch_normalize(np.zeros((2, 9)))


def test_correlated_batch_uses_pooled_energy():
    # every vector equal to [2, 0, 0]: per-RE energy is 4/3, so kappa = 2/sqrt(3)
    x = np.tile(np.array([2.0, 0.0, 0.0], dtype=complex), (5, 1))
    np.testing.assert_allclose(batch_normalize(x)[0], [np.sqrt(3.0), 0, 0])


def test_normalize_backward(rng, ops9):
    raw = crandn(rng, 2, 3, 9)
    f = lambda r: loss_papr(batch_normalize(r), 1.5, 4)[0]
    g = normalize_backward(raw, loss_papr(batch_normalize(raw), 1.5, 4)[1])
    assert rel_err(g, fd_complex(f, raw)) < 1e-5


# -- losses -------------------------------------------------------------------


def test_papr_loss_trivial_cases(rng):
    x = crandn(rng, 4, 9)
    loss, grad = loss_papr(x, 1e9, 4)
    assert loss == 0 and np.all(grad == 0)
    loss, _ = loss_papr(x, 0.0, 4)
    assert loss == pytest.approx(np.mean(np.abs(x) ** 2))  # mean |z|^2 equals mean |x|^2


def test_aclr_loss_values(ops9, rng):
    e0 = np.array([[1.0 + 0j]])
    loss, _ = loss_aclr(e0, 0.0, spectral_operators(1).V, np.eye(1))
    assert loss == pytest.approx(1 / v00_closed_form() - 1, rel=1e-9)
    assert loss == pytest.approx(0.2925, abs=1e-4)
    x = crandn(rng, 8, 9)
    ratio = np.sum(np.abs(x) ** 2) / np.real(np.einsum("bi,ij,bj->", x.conj(), ops9.V, x)) - 1
    assert loss_aclr(x, ratio, ops9.V, ops9.W)[0] == pytest.approx(0, abs=1e-12)
    with pytest.raises(NumericalError):
        loss_aclr(np.zeros((1, 9)), 0.0, ops9.V, ops9.W)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients(seed, ops9):
    rng = np.random.default_rng(seed)
    x = crandn(rng, 2, 9)
    gamma = 1.2
    _, g = loss_papr(x, gamma, 4)
    assert rel_err(g, fd_complex(lambda y: loss_papr(y, gamma, 4)[0], x, 1e-5)) < 1e-5
    _, g = loss_aclr(x, 0.05, ops9.V, ops9.W)
    assert rel_err(g, fd_complex(lambda y: loss_aclr(y, 0.05, ops9.V, ops9.W)[0], x, 1e-5)) < 1e-5


def test_parameter_gradients_through_full_chain(ops9):
    cfg = GridConfig(9, m=4)
    train = TrainConfig(gamma_peak=2.5, beta_leak=0.03, covariance_samples=500, batch_size=3)
    trainer = OfdmTrainer(cfg, ops9, train, rng=np.random.default_rng(0))
    batch = draw_slots(cfg, 2, 3, trainer.profile, np.random.default_rng(1))
    p = TxParams(qam(2).points * (1 + 0.1j), np.linspace(0.8, 1.2, 9) + 0.05j)
    _, _, gp, gl, _ = trainer.constraint_losses(p, batch)
    th = p.to_vector()

    def numeric(which):
        out = []
        for e in np.eye(th.size) * 1e-6:
            up = trainer.constraint_losses(TxParams.from_vector(th + e, 2, 9), batch)[which]
            dn = trainer.constraint_losses(TxParams.from_vector(th - e, 2, 9), batch)[which]
            out.append((up - dn) / 2e-6)
        return np.array(out)

    assert rel_err(gp, numeric(0)) < 1e-5
    assert rel_err(gl, numeric(1)) < 1e-5


def test_rate_gradient_is_a_central_difference(ops9):
    cfg = GridConfig(9, m=3)
    train = TrainConfig(covariance_samples=500, fd_step=1e-4)
    trainer = OfdmTrainer(cfg, ops9, train, rng=np.random.default_rng(0))
    batch = draw_slots(cfg, 2, 4, trainer.profile, np.random.default_rng(2))
    p = TxParams.baseline(2, 9)
    g = trainer.rate_gradient(p, batch)
    th = p.to_vector()
    e = np.zeros_like(th)
    e[0] = 1e-4
    manual = (trainer.rate_loss(TxParams.from_vector(th + e, 2, 9), batch)
              - trainer.rate_loss(TxParams.from_vector(th - e, 2, 9), batch)) / 2e-4
    assert g[0] == manual


# -- augmented Lagrangian -----------------------------------------------------


def test_lagrangian_hand_value():
    state = LagrangianState(lambda_peak=2, lambda_leak=1, mu_peak=4, mu_leak=2)
    assert augmented_lagrangian(1.0, 0.5, 0.25, state) == pytest.approx(2.8125, abs=1e-12)


def test_lagrangian_reductions():
    s = LagrangianState(lambda_peak=0.3, lambda_leak=0.5, mu_peak=2, mu_leak=2)
    assert augmented_lagrangian(1.0, 0.0, -1.0, s) == pytest.approx(1.0 - 0.5 ** 2 / 4)
    q = LagrangianState(mu_peak=3, mu_leak=3)
    assert augmented_lagrangian(1.0, 0.2, 0.1, q) == pytest.approx(1.0 + 1.5 * (0.04 + 0.01))
    assert augmented_lagrangian(0.7, 0.0, -0.2, LagrangianState()) == 0.7


def test_hyperparameter_updates():
    s = update_hyperparameters(LagrangianState(lambda_peak=1, mu_peak=2, tau=0.1), 0.3, 0.0)
    assert s.lambda_peak == pytest.approx(1.6) and s.mu_peak == pytest.approx(2.2) and s.iteration == 1
    s = update_hyperparameters(LagrangianState(lambda_leak=0, mu_leak=1), 0.0, -1.0)
    assert s.lambda_leak == 0
    s0 = LagrangianState(lambda_peak=0.4, lambda_leak=0.2, tau=0.05)
    s1 = update_hyperparameters(s0, 0.0, 0.0)
    assert (s1.lambda_peak, s1.lambda_leak) == (0.4, 0.2)
    assert s1.mu_peak == pytest.approx(1.05)
    with pytest.raises(ConfigError):
        LagrangianState(mu_peak=0)


def test_toy_equality_problem():
    def evaluate(theta, rng):
        t = theta[0]
        return Evaluation((t - 2) ** 2, t, -1.0, np.array([2 * (t - 2)]), np.array([1.0]), np.array([0.0]))

    theta, state, trace = run_augmented_lagrangian(
        evaluate, np.array([0.0]), LagrangianState(tau=0.1), 40, 200, LrSchedule(0.02, 40, 1.0),
        np.random.default_rng(0))
    assert abs(theta[0]) < 1e-3
    assert state.lambda_peak == pytest.approx(4.0, abs=1e-2)
    assert state.lambda_leak == 0
    mus = [t["mu_p"] for t in trace]
    assert all(b > a for a, b in zip(mus, mus[1:]))


def test_divergence_is_reported():
    def evaluate(theta, rng):
        return Evaluation(float("nan"), 0.0, 0.0, np.zeros(1), np.zeros(1), np.zeros(1))

    with pytest.raises(TrainingDiverged) as info:
        run_augmented_lagrangian(evaluate, np.zeros(1), LagrangianState(), 3, 2, LrSchedule(), np.random.default_rng(0))
    assert info.value.trace == []


def test_lr_schedule():
    s = LrSchedule(0.1, 2, 0.5)
    assert [s(i) for i in range(4)] == [0.1, 0.1, 0.1, 0.05]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(gamma_peak=0.5)
    with pytest.raises(ConfigError):
        TrainConfig(beta_leak=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


# -- training loop ------------------------------------------------------------


SMALL = dict(batch_size=4, sgd_steps=2, outer_iterations=3, covariance_samples=300, seed=3)


def test_training_is_deterministic(ops9):
    cfg = GridConfig(9, m=4)
    train = TrainConfig(**SMALL)
    a = run_training(cfg, ops9, train)
    b = run_training(cfg, ops9, train)
    np.testing.assert_array_equal(a.params.to_vector(), b.params.to_vector())
    assert a.trace == b.trace
    assert len(a.trace) == 3
    assert {"l_c", "l_peak", "l_leak", "lambda_p", "lambda_l", "mu_p", "mu_l", "papr_db", "aclr_db"} <= set(a.trace[0])


def test_unreachable_peak_target_keeps_penalty(ops9):
    cfg = GridConfig(9, m=4)
    train = TrainConfig(gamma_peak=1.0, **SMALL)
    res = run_training(cfg, ops9, train, FlatProfile(rayleigh=False))
    assert all(t["l_peak"] > 0 for t in res.trace)
    assert res.trace[-1]["mu_p"] > res.trace[0]["mu_p"]
    assert res.trace[-1]["lambda_p"] > 0


def test_unconstrained_training_lowers_bce(ops9):
    cfg = GridConfig(9, m=14)
    train = TrainConfig(batch_size=32, sgd_steps=5, outer_iterations=12, covariance_samples=2000, lr=0.1, seed=0)
    res = run_training(cfg, ops9, train)
    # same evaluation batch for both, so the comparison is free of fading noise
    before = evaluate_params(TxParams.baseline(2, 9), cfg, ops9, train, slots=64)
    after = evaluate_params(res.params, cfg, ops9, train, slots=64)
    assert after["l_c"] < before["l_c"]
