import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import crandn
from oracles import brute_force_llr
from ofdmwave.errors import DimensionError
from ofdmwave.mapping import bpsk, qam
from ofdmwave.rx import (
    LLR_CLIP,
    bce_rate,
    bit_cross_entropy,
    bit_error_rate,
    demap_llr,
    equalize,
    extract_pilot_observations,
    interpolate_full_band,
    lmmse_estimate,
    lmmse_matrix,
    read_llr_file,
    receive,
    write_llr_file,
)


def test_pilot_removal(rng):
    h = crandn(rng, 5)
    p = np.exp(1j * rng.random(5))
    Y = np.zeros((14, 9), dtype=complex)
    Y[1, ::2] = h * p
    np.testing.assert_allclose(extract_pilot_observations(Y, p), h)
    with pytest.raises(DimensionError):
        extract_pilot_observations(Y, p[:3])


def test_lmmse_hand_values():
    np.testing.assert_allclose(lmmse_estimate(np.array([2.0, 4.0]), np.eye(2), 1.0), [1.0, 2.0])
    np.testing.assert_allclose(lmmse_estimate(np.array([2.0, 4.0]), np.eye(2), 0.0), [2.0, 4.0])
    # rank-one covariance at zero noise projects onto its range
    v = np.array([1.0, 1.0]) / np.sqrt(2)
    G, used = lmmse_matrix(np.outer(v, v), 0.0)
    assert used
    np.testing.assert_allclose(G @ np.array([3.0, 1.0]), [2.0, 2.0], atol=1e-12)


def test_interpolation():
    hp = np.array([0, 2, 4, 6, 8], dtype=complex)
    np.testing.assert_allclose(interpolate_full_band(hp, 9), np.arange(9))
    np.testing.assert_allclose(interpolate_full_band(hp, 10)[-1], 8)  # nearest neighbour past the last pilot
    with pytest.raises(ValueError):
        interpolate_full_band(hp[:1], 1, np.array([0]))


def test_equalize_erasure():
    x, erased = equalize(np.array([[2.0, 1.0]]), np.array([2.0, 0.0]))
    np.testing.assert_allclose(x, [[1.0, 0.0]])
    assert erased.tolist() == [[False, True]]


@settings(max_examples=50, deadline=None)
@given(re=st.floats(-3, 3), im=st.floats(-3, 3), hr=st.floats(0.05, 2), nv=st.floats(0.05, 5))
def test_bpsk_closed_form(re, im, hr, nv):
    h = hr * np.exp(0.3j)
    llr = demap_llr(np.array([re + 1j * im]), np.array([h]), nv, bpsk())[0, 0]
    expected = np.clip(4 * abs(h) ** 2 * re / nv, -LLR_CLIP, LLR_CLIP)
    assert llr == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("k", [2, 4])
def test_demapper_matches_brute_force(k, rng):
    c = qam(k)
    for _ in range(20):
        y = crandn(rng)[()] * 1.2
        h = 0.3 + crandn(rng)[()]
        got = demap_llr(np.array([y]), np.array([h]), 0.4, c)[0]
        np.testing.assert_allclose(got, np.clip(brute_force_llr(y, h, 0.4, c.points, c.bits), -40, 40), atol=1e-9)


def test_bce_and_rate():
    bits = np.array([[1, 0]])
    assert bce_rate(np.array([[40.0, -40.0]]), bits) == pytest.approx((2.0, 0.0), abs=1e-15)
    rate, bce = bce_rate(np.zeros((1, 2)), bits)
    assert bce == pytest.approx(2.0) and rate == pytest.approx(0.0)
    assert bit_cross_entropy(np.array([-3.0]), np.array([1]))[0] == pytest.approx(np.log2(1 + np.exp(3)))
    assert bit_error_rate(np.array([[1.0, 1.0]]), bits) == 0.5


def test_mask_selects_data(rng):
    llrs = np.array([[[40.0, 40.0], [0.0, 0.0]]])
    bits = np.ones((1, 2, 2))
    assert bce_rate(llrs, bits, np.array([True, False]))[0] == pytest.approx(2.0)


def test_receive_noiseless_flat_awgn(rng):
    c = qam(2)
    bits = rng.integers(0, 2, (50, 14, 9, 2))
    X = c.modulate(bits)
    pil = np.exp(2j * np.pi * rng.random((50, 5)))
    X[:, 1, ::2] = pil
    out = receive(2.0 * X, pil, 4.0 * np.ones((5, 5)), 0.0, c)
    np.testing.assert_allclose(out.h_hat, 2.0, atol=1e-12)
    mask = np.ones((14, 9), bool)
    mask[1, ::2] = False
    assert bce_rate(out.llrs, bits, mask[None])[0] == 2.0


def test_llr_file_roundtrip(tmp_path, rng):
    llrs = rng.standard_normal((3, 14, 9, 2))
    write_llr_file(tmp_path / "l.bin", llrs)
    np.testing.assert_array_equal(read_llr_file(tmp_path / "l.bin"), llrs)
