import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from roughwick.gaussian_model import (
    Bump, BumpSum, FbmModel, PathEnsemble, ZERO_BUMP, accumulated_A, constant_model, covariance_factor,
    fbm_covariance, h_norm_sq, inner_product_indicator_bump, integrate_A, operator_A, path_functional_weights,
    sample_ensemble,
)
from roughwick.grid_increments import Partition

BUMP = Bump(0.5, 0.25)


def covariance_route(model, beta, rho):
    """int_0^rho A beta = -int R(rho, y) beta'(y) dy, by adaptive quadrature."""
    lo, hi = beta.support
    pts = [rho] if lo < rho < hi else None
    return quad(lambda y: -model.covariance(rho, y) * beta.derivative(y), lo, hi, points=pts,
                epsabs=1e-14, epsrel=1e-12, limit=200)[0]


def a_by_quad(model, beta, s):
    """A beta(s) = -int d_s R(s, y) beta'(y) dy from the full derivative, split at y = s."""
    lo, hi = beta.support
    pts = [s] if lo < s < hi else None
    return quad(lambda y: -model.partial_s_covariance(s, y) * beta.derivative(y), lo, hi, points=pts,
                epsabs=1e-13, epsrel=1e-12, limit=400)[0]


# ---------------------------------------------------------------- covariance

def test_fbm_covariance_examples():
    assert fbm_covariance(1.0, 2.0, 0.5) == 1.0
    for H in (0.2, 0.5, 0.8):
        assert fbm_covariance(0.7, 0.7, H) == pytest.approx(0.7 ** (2 * H), rel=1e-15)
    assert fbm_covariance(0.0, 1.0, 0.3) == 0.0


def test_fbm_covariance_rejects_bad_hurst():
    for H in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            fbm_covariance(0.1, 0.2, H)
        with pytest.raises(ValueError):
            FbmModel(H)


@given(st.floats(0.01, 0.99), st.floats(0, 5), st.floats(0, 5))
def test_covariance_symmetric(H, s, t):
    m = FbmModel(H, T=5.0)
    a, b = m.covariance(s, t), m.covariance(t, s)
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))
    assert m.variance(t) == pytest.approx(m.covariance(t, t), rel=1e-14, abs=1e-300)


@pytest.mark.parametrize("H", [0.2, 0.4, 0.5, 0.75])
def test_covariance_matrix_symmetric_psd(H):
    m = FbmModel(H)
    c = m.covariance_matrix(Partition.uniform(512).points)
    assert np.array_equal(c, c.T)
    vals = np.linalg.eigvalsh(c)
    assert vals.min() >= -1e-10 * np.trace(c)


@pytest.mark.parametrize("H", [0.2, 0.4, 0.5, 0.75])
def test_variance_derivative_integrable(H):
    m = FbmModel(H)
    val, err = quad(lambda t: abs(m.variance_derivative(t)), 0, 1, limit=200)
    assert math.isfinite(val)
    assert val == pytest.approx(1.0, rel=1e-8)


# ---------------------------------------------------------------- sampling

def test_sample_starts_at_zero_and_is_worker_independent():
    m = FbmModel(0.4, d=2)
    part = Partition.uniform(64)
    a = sample_ensemble(m, part, 600, seed=11, workers=1)
    b = sample_ensemble(m, part, 600, seed=11, workers=4)
    assert np.array_equal(a.paths, b.paths)
    assert np.all(a.paths[:, 0, :] == 0.0)
    assert a.paths.shape == (600, 65, 2)
    c = sample_ensemble(m, part, 300, seed=11)
    assert np.array_equal(c.paths, a.paths[:300])


def test_sample_unit_gaussian_at_one():
    ens = sample_ensemble(FbmModel(0.5), Partition([0.0, 1.0]), 10 ** 5, seed=3)
    x = ens.paths[:, 1, 0]
    assert abs(x.mean()) <= 4 / math.sqrt(1e5)
    assert abs(x.var() - 1.0) <= 0.05


def test_sample_brownian_covariance_probe():
    ens = sample_ensemble(FbmModel(0.5), Partition([0.0, 0.25, 0.75, 1.0]), 10 ** 5, seed=5)
    prod = ens.paths[:, 1, 0] * ens.paths[:, 2, 0]
    se = prod.std(ddof=1) / math.sqrt(prod.size)
    assert abs(prod.mean() - 0.25) <= 3 * se


def test_empirical_covariance_on_probe_grid():
    m = FbmModel(0.4)
    part = Partition.uniform(16)
    ens = sample_ensemble(m, part, 40000, seed=2024)
    probes = [4, 8, 12, 16]
    for i in probes:
        for j in probes:
            prod = ens.paths[:, i, 0] * ens.paths[:, j, 0]
            se = prod.std(ddof=1) / math.sqrt(prod.size)
            assert abs(prod.mean() - m.covariance(part.points[i], part.points[j])) <= 3 * se


def test_degenerate_model_samples_zero():
    ens = sample_ensemble(constant_model(0.0), Partition.uniform(8), 10, seed=1)
    assert np.all(ens.paths == 0)


def test_covariance_factor_regularizes_nearly_singular_grid():
    m = FbmModel(0.9)
    part = Partition(np.r_[0.0, 0.5, 0.5 + 1e-13, 1.0])
    free, L = covariance_factor(m, part)
    assert free.tolist() == [1, 2, 3]
    assert np.allclose(L @ L.T, m.covariance_matrix(part.points)[1:, 1:], atol=1e-10)


def test_ensemble_memory_budget():
    with pytest.raises(ValueError, match="budget"):
        sample_ensemble(FbmModel(0.5), Partition.uniform(100), 1000, seed=0, memory_budget=1000)


def test_ensemble_csv_round_trip(tmp_path):
    ens = sample_ensemble(FbmModel(0.3, d=2), Partition.uniform(6), 3, seed=9)
    ens.to_csv(tmp_path / "e.csv", tmp_path / "e.json")
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "sample,i,t,x_1,x_2"
    back = PathEnsemble.from_csv(tmp_path / "e.csv", tmp_path / "e.json")
    assert np.array_equal(back.paths, ens.paths)
    assert back.partition == ens.partition
    assert back.meta == {"model": "fbm", "H": 0.3, "T": 1.0, "d": 2, "seed": 9, "n": 6, "n_samples": 3}


# ---------------------------------------------------------------- bumps

def test_bump_vanishes_outside_support():
    assert BUMP.value(0.0) == 0.0 and BUMP.value(1.0) == 0.0
    assert BUMP.derivative(0.25) == 0.0 and BUMP.derivative(0.75) == 0.0
    assert BUMP.value(0.5) == pytest.approx(math.exp(-1))
    t = np.linspace(0.3, 0.7, 9)
    h = 1e-6
    fd = (BUMP.value(t + h) - BUMP.value(t - h)) / (2 * h)
    assert np.allclose(BUMP.derivative(t), fd, atol=1e-8)


def test_bump_support_checked():
    with pytest.raises(ValueError):
        operator_A(FbmModel(0.5), Bump(0.1, 0.2), 0.5)
    with pytest.raises(ValueError):
        Bump(0.5, 0.0)


# ---------------------------------------------------------------- operator A

@pytest.mark.parametrize("beta", [BUMP, Bump(0.3, 0.1, 2.0), BumpSum(((1.0, Bump(0.4, 0.2)), (-0.5, Bump(0.6, 0.3))))])
def test_operator_a_is_identity_for_brownian(beta):
    s = np.linspace(0.05, 0.95, 20)
    assert np.max(np.abs(operator_A(FbmModel(0.5), beta, s) - beta.value(s))) <= 1e-6


def test_operator_a_of_zero_bump():
    assert operator_A(FbmModel(0.3), ZERO_BUMP, 0.4) == 0.0


@pytest.mark.parametrize("H", [0.3, 0.75])
def test_operator_a_against_adaptive_quadrature(H):
    m = FbmModel(H)
    for s in (0.5, 0.37, 0.9):
        ref = a_by_quad(m, BUMP, s)
        assert operator_A(m, BUMP, s) == pytest.approx(ref, rel=1e-6)


def test_operator_a_linear():
    m = FbmModel(0.35)
    b1, b2 = Bump(0.4, 0.2), Bump(0.6, 0.3, 0.5)
    s = np.linspace(0.1, 0.9, 7)
    combo = BumpSum(((2.5, b1), (1.0, b2)))
    assert np.allclose(operator_A(m, combo, s), 2.5 * operator_A(m, b1, s) + operator_A(m, b2, s),
                       rtol=1e-7, atol=1e-10)


def test_operator_a_arguments_checked():
    with pytest.raises(ValueError):
        operator_A(FbmModel(0.5), BUMP, 0.5, quadrature_n=16)
    with pytest.raises(ValueError):
        operator_A(FbmModel(0.5), BUMP, 1.5)


# ---------------------------------------------------------------- inner products

def test_inner_product_examples():
    m = FbmModel(0.5)
    assert inner_product_indicator_bump(m, 0.2, 0.6, BUMP, 0, 1) == 0.0
    ref = quad(BUMP.value, 0.2, 0.6, epsabs=1e-13)[0]
    assert inner_product_indicator_bump(m, 0.2, 0.6, BUMP, 1, 1) == pytest.approx(ref, abs=1e-8)
    assert inner_product_indicator_bump(m, 0.4, 0.4, BUMP, 0, 0) == 0.0
    with pytest.raises(ValueError):
        inner_product_indicator_bump(m, 0.6, 0.2, BUMP, 0, 0)


def test_accumulated_a_examples():
    m = FbmModel(0.5)
    assert accumulated_A(m, BUMP, 0.0) == 0.0
    ref = quad(BUMP.value, 0.0, 0.6, epsabs=1e-13)[0]
    assert accumulated_A(m, BUMP, 0.6) == pytest.approx(ref, abs=1e-8)
    m = FbmModel(0.3)
    assert accumulated_A(m, BUMP, 1.0) == inner_product_indicator_bump(m, 0.0, 1.0, BUMP, 2, 2)


@pytest.mark.parametrize("H", [0.3, 0.4, 0.75])
@pytest.mark.parametrize("rho", [0.3, 0.5, 1.0])
def test_accumulated_a_against_covariance_route(H, rho):
    m = FbmModel(H)
    assert accumulated_A(m, BUMP, rho) == pytest.approx(covariance_route(m, BUMP, rho), rel=1e-8, abs=1e-11)


def test_accumulated_a_frozen_values():
    # values of -int R(rho, y) beta'(y) dy from adaptive quadrature
    assert accumulated_A(FbmModel(0.4), BUMP, 0.5) == pytest.approx(0.05125635556741671, rel=1e-8)
    assert accumulated_A(FbmModel(0.75), BUMP, 1.0) == pytest.approx(0.11713374535007977, rel=1e-8)
    assert accumulated_A(FbmModel(0.3), BUMP, 0.3) == pytest.approx(-0.02474155707196593, rel=1e-8)


def test_integrate_a_additive():
    m = FbmModel(0.4)
    whole = integrate_A(m, BUMP, 0.1, 0.9)
    parts = integrate_A(m, BUMP, 0.1, 0.45) + integrate_A(m, BUMP, 0.45, 0.9)
    assert whole == pytest.approx(parts, rel=1e-8)


@pytest.mark.parametrize("H", [0.3, 0.5, 0.75])
def test_h_norm_matches_pairing_with_a(H):
    m = FbmModel(H)
    lo, hi = BUMP.support
    pairing = quad(lambda s: BUMP.value(s) * operator_A(m, BUMP, s), lo, hi, epsabs=1e-12, limit=200)[0]
    assert h_norm_sq(m, [BUMP]) == pytest.approx(pairing, rel=1e-7)
    if H == 0.5:
        assert h_norm_sq(m, [BUMP]) == pytest.approx(quad(lambda s: BUMP.value(s) ** 2, lo, hi)[0], rel=1e-8)


def test_h_norm_of_zero_and_sum_over_coordinates():
    m = FbmModel(0.4, d=2)
    assert h_norm_sq(m, [ZERO_BUMP, ZERO_BUMP]) == 0.0
    one = h_norm_sq(m, [BUMP])
    assert h_norm_sq(m, [BUMP, BUMP]) == pytest.approx(2 * one, rel=1e-12)


def test_path_functional_weights_on_linear_path():
    part = Partition.uniform(2048)
    w = path_functional_weights(part, BUMP)
    # -int t beta'(t) dt = int beta
    ref = quad(BUMP.value, 0.25, 0.75)[0]
    assert float(w @ part.points) == pytest.approx(ref, rel=1e-9)
    assert np.all(path_functional_weights(part, ZERO_BUMP) == 0)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, 0.8), st.floats(0.05, 0.15))
def test_operator_a_brownian_identity_random_bumps(c, w):
    b = Bump(c, w)
    s = np.linspace(max(0.0, c - w), min(1.0, c + w), 5)
    assert np.max(np.abs(operator_A(FbmModel(0.5), b, s) - b.value(s))) <= 1e-6
