import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hloba.dynamics import ConfigurationError
from hloba.observations import (ObservationNetwork, apply_H, every_kth, make_network, qc_filter,
                                read_observations_csv, split_withheld, synthesize_observations,
                                withheld_count, write_observations_csv)

states = arrays(float, 40, elements=st.floats(-20, 20))


def full(n=40, std=1.0):
    return ObservationNetwork(np.arange(n), std, n)


def test_full_network_is_identity(rng):
    x = rng.standard_normal(40)
    np.testing.assert_array_equal(apply_H(x, full()), x)


def test_empty_network():
    net = ObservationNetwork(np.array([], dtype=int), 1.0, 40)
    assert apply_H(np.ones(40), net).shape == (0,)


@given(states, states, st.floats(-5, 5), st.floats(-5, 5))
def test_H_is_linear(x, y, a, b):
    net = every_kth(40, 3)
    np.testing.assert_allclose(apply_H(a * x + b * y, net), a * apply_H(x, net) + b * apply_H(y, net),
                               atol=1e-9)


def test_network_validation():
    with pytest.raises(ConfigurationError):
        ObservationNetwork(np.array([0, 40]), 1.0, 40)
    with pytest.raises(ConfigurationError):
        ObservationNetwork(np.array([3, 1]), 1.0, 40)
    with pytest.raises(ConfigurationError):
        ObservationNetwork(np.array([1, 2]), 0.0, 40)


def test_default_network_has_fourteen_points():
    assert len(every_kth(40, 3)) == 14


def test_noise_free_values_equal_H(rng):
    sigma = np.full(40, 3.5)
    net = make_network(range(0, 40, 3), sigma, 1e-300, 40)
    x = rng.standard_normal(40)
    obs = synthesize_observations(x, net, rng)
    np.testing.assert_allclose(obs.values, apply_H(x, net), atol=1e-290)
    assert np.all(obs.mask[net.observed_indices] == 1)


@pytest.mark.parametrize("c", [0.03, 0.1])
def test_noise_std_matches_configured_level(c):
    sigma = np.linspace(2.0, 5.0, 40)
    net = make_network(range(0, 40, 3), sigma, c, 40)
    rng = np.random.default_rng(0)
    x = np.zeros(40)
    draws = np.array([synthesize_observations(x, net, rng).values for _ in range(10000)])
    np.testing.assert_allclose(draws.std(axis=0), c * sigma[net.observed_indices], rtol=0.03)


def test_qc_passes_small_departures(rng):
    net = every_kth(40, 3, 0.1)
    x = rng.standard_normal(40)
    obs = synthesize_observations(x, net, rng)
    out = qc_filter(obs, x, np.full(40, 10.0))
    np.testing.assert_array_equal(out.values, obs.values)
    np.testing.assert_array_equal(out.mask, obs.mask)


def test_qc_zero_threshold_rejects_everything(rng):
    net = every_kth(40, 3, 0.1)
    obs = synthesize_observations(rng.standard_normal(40), net, rng)
    out = qc_filter(obs, np.zeros(40) + 100.0, np.zeros(40))
    assert np.all(out.mask == 0) and np.all(out.values == 0)


def test_qc_rejects_exactly_the_outlier(rng):
    net = every_kth(40, 3, 0.1)
    x = rng.standard_normal(40)
    obs = synthesize_observations(x, net, rng)
    obs.values[4] += 10 * 3.5
    out = qc_filter(obs, x, np.full(40, 1.0))
    assert list(out.active) == [p for p in range(len(net)) if p != 4]
    assert out.mask[net.observed_indices[4]] == 0


@given(arrays(float, 14, elements=st.floats(-5, 5)), arrays(float, 40, elements=st.floats(0, 3)))
def test_qc_keeps_retained_values_and_consistency(noise, thresholds):
    net = every_kth(40, 3, 0.1)
    x = np.linspace(-3, 3, 40)
    obs = synthesize_observations(x, net, np.random.default_rng(0))
    obs.values[:] = apply_H(x, net) + noise
    out = qc_filter(obs, x, thresholds)
    kept = out.mask[net.observed_indices] > 0
    np.testing.assert_array_equal(out.values[kept], obs.values[kept])
    assert np.all(out.values[~kept] == 0)


def test_withheld_rounding():
    assert withheld_count(13, 0.1) == 1
    assert withheld_count(14, 0.1) == 1
    assert withheld_count(15, 0.1) == 2
    assert withheld_count(14, 0.0) == 0


def test_split_zero_fraction(rng):
    obs = synthesize_observations(np.zeros(40), every_kth(40, 3), rng)
    kept, held = split_withheld(obs, 0.0, rng)
    assert len(held.network) == 0 and len(kept.network) == 14


@given(st.floats(0, 0.95), st.integers(0, 2 ** 32 - 1))
def test_split_is_a_partition(fraction, seed):
    obs = synthesize_observations(np.zeros(40), every_kth(40, 3), np.random.default_rng(1))
    kept, held = split_withheld(obs, fraction, np.random.default_rng(seed))
    a, b = set(kept.network.observed_indices), set(held.network.observed_indices)
    assert a | b == set(obs.network.observed_indices) and not a & b
    assert abs(len(b) - fraction * 14) <= 1
    for part in (kept, held):
        off = np.setdiff1d(np.arange(40), part.network.observed_indices)
        assert np.all(part.mask[off] == 0)


def test_split_fixed_by_seed():
    obs = synthesize_observations(np.zeros(40), every_kth(40, 3), np.random.default_rng(1))
    a = split_withheld(obs, 0.3, np.random.default_rng(9))[1].network.observed_indices
    b = split_withheld(obs, 0.3, np.random.default_rng(9))[1].network.observed_indices
    np.testing.assert_array_equal(a, b)


def test_split_fraction_bounds(rng):
    obs = synthesize_observations(np.zeros(40), every_kth(40, 3), rng)
    with pytest.raises(ConfigurationError):
        split_withheld(obs, 1.0, rng)


def test_csv_roundtrip(tmp_path, rng):
    net = every_kth(40, 3, 0.2)
    obs = synthesize_observations(rng.standard_normal(40), net, rng, cycle_time=7)
    kept, held = split_withheld(obs, 0.2, rng)
    p = tmp_path / "obs.csv"
    write_observations_csv(p, [(kept, False), (held, True)])
    header = p.read_text().splitlines()[0]
    assert header == "cycle_time,index,value,mask,withheld"
    back = read_observations_csv(p, net)
    np.testing.assert_array_equal(back[(7, False)].values, kept.values)
    np.testing.assert_array_equal(back[(7, True)].network.observed_indices,
                                  held.network.observed_indices)
