import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hloba import covariance as cv, harness, latent
from hloba.diffcore import ContractError
from hloba.dynamics import ModelConfig, advance, nature_run, spin_up
from hloba.observations import make_network

TOL = 1e-10


def naive_mean_sq_half(D):
    n, m = len(D), len(D[0])
    out = []
    for j in range(m):
        s = 0.0
        for i in range(n):
            s += D[i][j] * D[i][j]
        out.append(0.5 * s / n)
    return np.array(out)


def naive_var(Z):
    n, m = len(Z), len(Z[0])
    out = []
    for j in range(m):
        mean = sum(Z[i][j] for i in range(n)) / n
        out.append(sum((Z[i][j] - mean) ** 2 for i in range(n)) / (n - 1))
    return np.array(out)


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))


@pytest.fixture(scope="module")
def encoder():
    X = np.random.default_rng(0).standard_normal((300, 40)) * 3 + 2
    return latent.fit_linear_ae(X, 12)


# -------------------------------------------------------------------- NMC

def test_nmc_identical_forecasts_hit_floor(rng):
    x = rng.standard_normal((20, 40))
    b = cv.nmc_latent_b(lambda X: X[:, :5], (x, x), min_var=1e-8)
    np.testing.assert_array_equal(b.variances, 1e-8)


def test_nmc_constant_difference(encoder, rng):
    x = rng.standard_normal((30, 40))
    d = rng.standard_normal(40)
    b = cv.nmc_latent_b(encoder, (x, x + d))
    dz = latent.encode(encoder, d) - latent.encode(encoder, np.zeros(40))
    np.testing.assert_allclose(b.variances, dz ** 2 / 2, rtol=1e-10)


def test_nmc_matches_naive_on_forecast_pairs(encoder):
    model = ModelConfig()
    r = np.random.default_rng(4)
    starts = nature_run(spin_up(model, r), 500, model)[1:]
    x0 = starts + 0.1 * r.standard_normal(starts.shape)
    short = np.array([advance(x, 4 * model.steps_per_da_interval, model) for x in x0])
    long_ = np.array([advance(x, 8 * model.steps_per_da_interval, model) for x in x0])
    b = cv.nmc_latent_b(encoder, (short, long_))
    D = (latent.encode(encoder, long_) - latent.encode(encoder, short)).tolist()
    assert rel(b.variances, naive_mean_sq_half(D)) <= TOL


def test_nmc_needs_ten_pairs(rng):
    x = rng.standard_normal((9, 40))
    with pytest.raises(cv.InsufficientSamples):
        cv.nmc_latent_b(lambda X: X, (x, x))


# ------------------------------------------------------------- ensemble

def test_ensemble_identical_members_hit_floor():
    z = np.tile(np.arange(5.0), (4, 1))
    np.testing.assert_array_equal(cv.ensemble_cov_diag(z, min_var=1e-9).variances, 1e-9)


def test_ensemble_two_members():
    z, d = np.array([1.0, 2.0, 3.0]), np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(cv.ensemble_cov_diag([z, z + d]).variances, d ** 2 / 2)


def test_ensemble_matches_two_pass(rng):
    Z = rng.standard_normal((9, 12)) * 3 + 10
    v = cv.ensemble_cov_diag(Z).variances
    assert rel(v, naive_var(Z.tolist())) <= 1e-12


def test_ensemble_needs_two_members():
    with pytest.raises(ContractError):
        cv.ensemble_cov_diag(np.ones((1, 3)))


@given(arrays(float, (6, 4), elements=st.floats(-1e3, 1e3)))
def test_ensemble_variance_property(Z):
    v = cv.ensemble_cov_diag(Z, min_var=1e-300).variances
    ref = naive_var(Z.tolist())
    assert np.all(np.abs(v - np.maximum(ref, 1e-300)) <= 1e-10 * np.maximum(np.abs(ref), 1e-9))


# ------------------------------------------------------------ O2L-based R

def _discrepancies(art, X, seed, level, mask=None):
    values, m = latent.simulate_images(X, art.network, np.random.default_rng(seed), mask,
                                       level, art.sigma_clim)
    return (latent.o2l_apply(art.o2l, values, m) - latent.encode(art.ae, X)).tolist()


def test_clim_r_matches_naive(small_setup):
    _, art = small_setup
    X = art.archive[:600]
    r = cv.clim_latent_r(art.o2l, art.ae, X, art.network, 0.03, np.random.default_rng(3),
                         art.sigma_clim)
    assert rel(r.variances, naive_mean_sq_half(_discrepancies(art, X, 3, 0.03))) <= 1e-12


def test_clim_r_needs_archive(small_setup):
    _, art = small_setup
    with pytest.raises(cv.InsufficientSamples):
        cv.clim_latent_r(art.o2l, art.ae, art.archive[:499], art.network, 0.03,
                         np.random.default_rng(0), art.sigma_clim)


def test_clim_r_does_not_decrease_with_noise(small_setup):
    _, art = small_setup
    X = art.archive
    assert len(X) >= 2000
    # paired draws: the same normals scaled by the two noise levels
    lo = cv.clim_latent_r(art.o2l, art.ae, X, art.network, 0.1, np.random.default_rng(8),
                          art.sigma_clim)
    hi = cv.clim_latent_r(art.o2l, art.ae, X, art.network, 0.2, np.random.default_rng(8),
                          art.sigma_clim)
    assert np.all(hi.variances >= lo.variances)


def test_clim_r_vanishes_for_perfect_o2l():
    archive = harness.climatology(ModelConfig(), 3000, 2, seed=3)
    ae = latent.fit_linear_ae(archive, 8)
    sigma = archive.std(axis=0)
    net = make_network(range(40), sigma, 1e-12, 40)
    o2l = latent.train_o2l(ae, archive, net, latent.Schedule(epochs=40, batch_size=64,
                                                             learning_rate=2e-2),
                           rng_seed=2, hidden=(), mask_range=(1.0, 1.0))
    r = cv.clim_latent_r(o2l, ae, archive[:1000], net, 1e-12, np.random.default_rng(0), sigma,
                         min_var=1e-300)
    assert np.max(r.variances) < 1e-6 * np.min(np.var(latent.encode(ae, archive), axis=0))


def test_ensemble_r_identical_members(small_setup):
    _, art = small_setup
    x = art.archive[0]
    members = np.tile(x, (3, 1))
    # zero noise std makes every member's discrepancy identical
    r = cv.ensemble_latent_r(art.o2l, art.ae, members, art.network, None, 1e-300,
                             np.random.default_rng(0), art.sigma_clim, min_var=1e-300)
    d = np.array(_discrepancies(art, x[None], 0, 1e-300)[0])
    np.testing.assert_allclose(r.variances, d ** 2 * 3 / 2, rtol=1e-12)


@pytest.mark.parametrize("centered", [False, True])
def test_ensemble_r_matches_naive(small_setup, centered):
    _, art = small_setup
    X = art.archive[10:16]
    mask = np.full(len(art.network), 0.8)
    r = cv.ensemble_latent_r(art.o2l, art.ae, X, art.network, mask, 0.03,
                             np.random.default_rng(5), art.sigma_clim, centered=centered)
    D = _discrepancies(art, X, 5, 0.03, mask)
    n = len(D)
    ref = []
    for j in range(len(D[0])):
        mu = sum(D[i][j] for i in range(n)) / n if centered else 0.0
        ref.append(sum((D[i][j] - mu) ** 2 for i in range(n)) / (n - 1))
    assert rel(r.variances, np.array(ref)) <= 1e-12


def test_ensemble_r_needs_two_members(small_setup):
    _, art = small_setup
    with pytest.raises(ContractError):
        cv.ensemble_latent_r(art.o2l, art.ae, art.archive[:1], art.network, None, 0.03,
                             np.random.default_rng(0), art.sigma_clim)


# --------------------------------------------------------- blend, inflate

def test_blend_endpoints_and_midpoint():
    c, e = cv.DiagonalCovariance([2.0]), cv.DiagonalCovariance([4.0])
    assert cv.hybrid_blend(c, e, 0.0).variances[0] == 2.0
    assert cv.hybrid_blend(c, e, 1.0).variances[0] == 4.0
    assert cv.hybrid_blend(c, e, 0.5).variances[0] == 3.0
    with pytest.raises(ContractError):
        cv.hybrid_blend(c, e, 1.5)


@given(arrays(float, 5, elements=st.floats(0, 10)), arrays(float, 5, elements=st.floats(0, 10)),
       st.floats(0, 1), st.floats(0, 1))
def test_blend_monotone_in_weight(a, b, w1, w2):
    clim, ens = cv.DiagonalCovariance(np.minimum(a, b)), cv.DiagonalCovariance(np.maximum(a, b))
    lo, hi = sorted((w1, w2))
    assert np.all(cv.hybrid_blend(clim, ens, lo).variances
                  <= cv.hybrid_blend(clim, ens, hi).variances + 1e-12)


def test_inflate_and_floor():
    c = cv.DiagonalCovariance([1.0, 3.0])
    np.testing.assert_array_equal(cv.inflate(c, 1.0).variances, c.variances)
    np.testing.assert_array_equal(cv.inflate(c, 2.0).variances, [2.0, 6.0])
    assert cv.floor(cv.DiagonalCovariance([1e-30]), 1e-8).variances[0] == 1e-8
    with pytest.raises(ContractError):
        cv.inflate(c, 0.0)


def test_hybrid_weight_ranges():
    with pytest.raises(ContractError):
        cv.HybridWeights(alpha_ens=-0.1)
    with pytest.raises(ContractError):
        cv.HybridWeights(inflation_r=0.0)


# ----------------------------------------------------- time-lagged ensemble

def test_lagged_members_start_at_past_intervals(rng):
    model = ModelConfig()
    archive = {t: rng.standard_normal(40) for t in range(10)}
    ens = cv.assemble_time_lagged_ensemble(archive, model, 10, 3)
    np.testing.assert_array_equal(ens.lead_times, [1, 2, 3])
    for k, m in zip((1, 2, 3), ens.members):
        np.testing.assert_array_equal(m, advance(archive[10 - k], k * model.steps_per_da_interval,
                                                 model))


def test_lagged_perfect_archive_has_zero_spread():
    model = ModelConfig()
    truth = nature_run(spin_up(model, np.random.default_rng(2)), 12, model)
    ens = cv.assemble_time_lagged_ensemble(dict(enumerate(truth)), model, 12, 3)
    np.testing.assert_allclose(ens.members, np.tile(truth[12], (3, 1)), atol=1e-9)
    assert cv.ensemble_cov_diag(ens.members, min_var=1e-300).variances.max() < 1e-16


def test_lagged_ensemble_shrinks_then_requires_spinup(rng):
    model = ModelConfig()
    archive = {0: rng.standard_normal(40), 1: rng.standard_normal(40)}
    assert len(cv.assemble_time_lagged_ensemble(archive, model, 2, 6)) == 2
    with pytest.raises(cv.SpinUpRequired):
        cv.assemble_time_lagged_ensemble(archive, model, 1, 6)


def test_member_error_grows_with_lead():
    model = ModelConfig()
    r = np.random.default_rng(6)
    truth = nature_run(spin_up(model, r), 260, model)
    analyses = {t: x + 0.2 * r.standard_normal(40) for t, x in enumerate(truth)}
    err = np.zeros(3)
    for t in range(50, 260):
        ens = cv.assemble_time_lagged_ensemble(analyses, model, t, 3)
        err += np.sqrt(np.mean((ens.members - truth[t]) ** 2, axis=1))
    assert err[0] < err[1] < err[2]


# ------------------------------------------------------------- model space

def test_gaspari_cohn_endpoints_and_shape():
    assert cv.gaspari_cohn(0.0, 4.0) == 1.0
    assert cv.gaspari_cohn(4.0, 4.0) == 0.0
    d = np.linspace(0, 8, 200)
    g = cv.gaspari_cohn(d, 4.0)
    assert np.all((g >= 0) & (g <= 1)) and np.all(np.diff(g) <= 1e-15)
    assert np.all(g[d >= 4.0] == 0)
    np.testing.assert_array_equal(cv.gaspari_cohn(-d, 4.0), g)


def test_gaspari_cohn_inner_branch_value():
    # half the support: r = 1 in the taper's own variable
    assert cv.gaspari_cohn(2.0, 4.0) == pytest.approx(-0.25 + 0.5 + 0.625 - 5 / 3 + 1, abs=1e-15)


def test_model_b_radius_limits(rng):
    X = rng.standard_normal((30, 40))
    B0 = cv.model_space_b(X, 0.0, kind="ensemble", ridge=1e-300).matrix
    assert np.all(B0[~np.eye(40, dtype=bool)] == 0)
    Binf = cv.model_space_b(X, np.inf, kind="ensemble").matrix
    raw = np.cov(X, rowvar=False)
    w = np.linalg.eigvalsh(raw)
    shift = max(0.0, 1e-8 * w[-1] - w[0])
    np.testing.assert_allclose(Binf, raw + shift * np.eye(40), atol=1e-10)


def test_model_b_nmc_matches_naive(rng):
    short = rng.standard_normal((40, 40))
    long_ = short + rng.standard_normal((40, 40))
    B = cv.model_space_b((short, long_), np.inf, ridge=1e-300).matrix
    d = long_ - short
    ref = np.zeros((40, 40))
    for row in d:
        ref += np.outer(row, row)
    np.testing.assert_allclose(B, 0.5 * ref / len(d), rtol=1e-10, atol=1e-13)


@given(st.integers(2, 12), st.floats(0.5, 20), st.integers(0, 2 ** 32 - 1))
def test_model_b_is_spd(n_members, radius, seed):
    X = np.random.default_rng(seed).standard_normal((n_members, 20))
    B = cv.model_space_b(X, radius, kind="ensemble").matrix
    np.testing.assert_array_equal(B, B.T)
    assert np.linalg.eigvalsh(B)[0] > 0


def test_covariance_json_roundtrip(rng):
    d = cv.DiagonalCovariance(rng.uniform(0, 2, 12))
    f = cv.FullCovariance(np.cov(rng.standard_normal((50, 6)), rowvar=False))
    for c in (d, f):
        back = cv.covariance_from_json(c.to_json())
        assert type(back) is type(c)
        np.testing.assert_array_equal(getattr(back, "variances", getattr(back, "matrix", None)),
                                      getattr(c, "variances", getattr(c, "matrix", None)))


# ------------------------------------------------------------- diagnostics

def test_decorrelation_null_level():
    r = np.random.default_rng(0)
    n = 400
    vals = [cv.latent_decorrelation_report(r.standard_normal((n, 12))).mean_abs_offdiag
            for _ in range(30)]
    # |r| of independent normals is approximately half-normal with std 1/sqrt(n)
    assert np.mean(vals) == pytest.approx(math.sqrt(2 / (math.pi * n)), rel=0.05)


def test_decorrelation_perfectly_correlated(rng):
    e = rng.standard_normal((200, 1))
    E = e @ np.array([[1.0, 2.0, -3.0]])
    assert cv.latent_decorrelation_report(E).mean_abs_offdiag == pytest.approx(1.0)


def test_decorrelation_needs_samples(rng):
    with pytest.raises(cv.InsufficientSamples):
        cv.latent_decorrelation_report(rng.standard_normal((99, 4)))
