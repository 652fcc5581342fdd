import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import crandn
from ofdmwave.errors import ConfigError
from ofdmwave.papr import ccdf, collect_alpha, papr_epsilon, peak_power


def test_quantile_semantics():
    a = np.arange(1, 1001, dtype=float)
    assert papr_epsilon(a, 0.0)[0] == 1000
    # at most 1 of 1000 samples may exceed the threshold
    assert papr_epsilon(a, 1e-3)[0] == 999
    assert papr_epsilon(a, 1e-2)[0] == 990
    assert papr_epsilon(np.full(10, 2.0), 0.5)[1] == pytest.approx(10 * np.log10(2))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=300), st.floats(0, 0.99))
def test_quantile_respects_exceedance_bound(values, eps):
    a = np.array(values)
    e, _ = papr_epsilon(a, eps)
    assert np.mean(a > e) <= eps + 1e-12
    # nothing smaller in the sample would also satisfy the bound
    smaller = a[a < e]
    if smaller.size:
        assert np.mean(a > smaller.max()) > eps


def test_ccdf_steps():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(ccdf(a, [0.5, 1.0, 2.5, 4.0]), [1.0, 0.75, 0.5, 0.0])


def test_alpha_normalized_by_batch_mean(rng):
    x = crandn(rng, 50, 9)
    s = collect_alpha(x, 4)
    assert s.alphas.size == 50 * 36
    assert s.alphas.mean() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        collect_alpha(x, 2)


def test_single_tone_has_unit_papr():
    x = np.zeros((3, 9), dtype=complex)
    x[:, 4] = 1
    assert papr_epsilon(collect_alpha(x, 4), 0.0)[0] == pytest.approx(1.0)


def test_all_equal_symbols_peak_at_n():
    x = np.ones((1, 9))
    assert peak_power(x, 4)[0] == pytest.approx(9.0)
    assert papr_epsilon(collect_alpha(x, 4), 0.0)[0] == pytest.approx(9.0)
