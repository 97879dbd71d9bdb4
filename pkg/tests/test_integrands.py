import numpy as np
import pytest
from hypothesis import given, strategies as st

from afreeym.errors import InputError
from afreeym.integrands import (CATALOG_NAMES, Integrand, abs_diff_integrand, area_integrand, catalog_integrand,
                                check_lambda_convexity, clarke_support_function, fd_gradient, get_integrand,
                                hnorm, linear_integrand, norm_integrand, recession_estimate,
                                three_slope_check, transform_T, two_well_integrand)
from afreeym.operator_symbols import CATALOG, cone_samples, sphere_points


def _catalog(dim=2):
    return [norm_integrand(dim), area_integrand(dim), linear_integrand([0.3, -1.2]),
            two_well_integrand([1.0, 0.5], 0.2), abs_diff_integrand(dim)]


def _norm(z):
    return np.linalg.norm(z, axis=-1)


def test_recession_area():
    f = Integrand(2, lambda z: np.sqrt(1 + np.sum(z ** 2, axis=-1)))  # no exact recession: ray estimate
    val, ok = recession_estimate(f, np.array([3.0, 4.0]))
    assert ok and val == pytest.approx(5.0, abs=1e-3)


def test_recession_linear_exact():
    f = linear_integrand([2.0, -1.0])
    z = np.array([0.3, 0.7])
    val, ok = recession_estimate(f, z)
    assert ok and val == pytest.approx(float(f(z)), abs=1e-15)


def test_recession_bounded_perturbation():
    f = Integrand(2, lambda z: _norm(z) + np.sin(_norm(z)))
    z = np.array([0.6, -0.8])
    val, ok = recession_estimate(f, z)
    assert ok
    assert val == pytest.approx(1.0, abs=1e-2)


def test_recession_zero_rejected():
    with pytest.raises(InputError):
        recession_estimate(norm_integrand(2), np.zeros(2))


@given(z=st.lists(st.floats(-10, 10), min_size=2, max_size=2).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_homogeneous_recession_is_itself(z):
    z = np.array(z)
    for f in (norm_integrand(2), linear_integrand([1.0, 2.0]), abs_diff_integrand(2)):
        val, _ = recession_estimate(Integrand(2, f._func), z)
        assert val == pytest.approx(float(f(z)), rel=1e-12, abs=1e-12)


def test_transform_examples():
    th = np.array([0.3, -0.4])  # |zhat| = 0.5
    assert float(transform_T(norm_integrand(2))(th)) == pytest.approx(0.5)
    const = catalog_integrand("linear", 2, [0.0, 0.0])
    one = Integrand(2, lambda z: np.ones(z.shape[:-1]), recession=lambda z: np.zeros(z.shape[:-1]))
    assert float(transform_T(one)(th)) == pytest.approx(0.5)
    assert float(transform_T(one)(np.array([0.6, 0.8]))) == 0.0
    assert float(transform_T(area_integrand(2))(np.array([0.6, 0.8]))) == pytest.approx(1.0)
    assert float(transform_T(const)(th)) == 0.0


def test_transform_outside_ball():
    with pytest.raises(InputError):
        transform_T(norm_integrand(2))(np.array([1.0, 1.0]))


def test_hnorm_examples():
    assert hnorm(norm_integrand(2)) == pytest.approx(1.0, rel=1e-9)
    assert hnorm(Integrand(2, lambda z: np.zeros(z.shape[:-1]), recession=lambda z: np.zeros(z.shape[:-1]))) == 0
    assert hnorm(area_integrand(2)) == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("f", _catalog(), ids=lambda f: f.name)
def test_transform_isometry(f):
    # sup over ball samples of |T f| equals the H-norm
    pts = np.concatenate([r * sphere_points(2, 256) for r in np.linspace(0, 1, 401)])
    sup_t = float(np.abs(transform_T(f)(pts)).max())
    h = hnorm(f)
    assert abs(h - sup_t) <= 0.05 * h


@pytest.mark.parametrize("f", _catalog(), ids=lambda f: f.name)
def test_gradient_matches_finite_differences(f, rng):
    z = rng.normal(scale=2.0, size=(100, 2))
    g = f.gradient(z)
    fd = fd_gradient(f, z)
    err = np.linalg.norm(g - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1.0)
    assert err.max() <= 1e-4


@pytest.mark.parametrize("f", _catalog(), ids=lambda f: f.name)
def test_growth_bound_and_recession_homogeneity(f, rng):
    z = rng.normal(scale=5.0, size=(200, 2))
    assert np.all(np.abs(f(z)) <= f.growth_constant * (1 + _norm(z)) + 1e-12)
    for t in (0.5, 3.0, 40.0):
        np.testing.assert_allclose(f.recession(t * z), t * f.recession(z), rtol=1e-10, atol=1e-12)


def test_lambda_convexity_convex_passes():
    rep = check_lambda_convexity(norm_integrand(2), cone_samples(CATALOG["div2"], 16))
    assert rep["passed"]


def test_lambda_convexity_concave_fails():
    f = Integrand(2, lambda z: -_norm(z))
    rep = check_lambda_convexity(f, cone_samples(CATALOG["div2"], 16))
    assert not rep["passed"]
    assert rep["worst_slack"] < -0.1


def test_lambda_convexity_abs_diff_along_axis():
    rep = check_lambda_convexity(abs_diff_integrand(2), np.array([[1.0, 0.0]]))
    assert rep["passed"]
    # along e2 the function is concave, so the probe finds a violation
    assert not check_lambda_convexity(abs_diff_integrand(2), np.array([[0.0, 1.0]]))["passed"]


def test_three_slope_examples():
    cone = cone_samples(CATALOG["div2"], 16)
    assert three_slope_check(norm_integrand(2), cone)["passed"]
    rep = three_slope_check(area_integrand(2), np.array([[1.0, 0.0]]), base_points=np.zeros((1, 2)),
                            scales=(1.0,))
    # sqrt(2) <= 1 + 1
    assert rep["worst_slack"] == pytest.approx(2 - np.sqrt(2))
    assert abs(three_slope_check(linear_integrand([1.0, 2.0]), cone)["worst_slack"]) < 1e-12


def test_clarke_convex_equals_recession(rng):
    f = area_integrand(2)
    G, _ = clarke_support_function(f)
    z = rng.normal(size=(100, 2))
    assert np.abs(G(z) - _norm(z)).max() <= 1e-3


def test_clarke_linear_exact(rng):
    f = linear_integrand([0.4, -1.5])
    G, D = clarke_support_function(f)
    assert len(D) == 1
    z = rng.normal(size=(50, 2))
    np.testing.assert_allclose(G(z), f(z), atol=1e-12)


def test_clarke_homogeneous_on_cone():
    # abs-diff is 1-homogeneous and convex along the axes, which form the wave cone of grad-last2
    f = abs_diff_integrand(2)
    G, _ = clarke_support_function(f)
    axes = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0]])
    np.testing.assert_allclose(G(axes), f(axes), atol=1e-3)


@pytest.mark.parametrize("f", _catalog(), ids=lambda f: f.name)
def test_clarke_dominates_recession(f, rng):
    G, _ = clarke_support_function(f)
    z = rng.normal(size=(200, 2))
    assert np.all(G(z) - f.recession(z) >= -1e-6)


def test_catalog_resolution():
    assert set(CATALOG_NAMES) == {"norm", "area", "linear", "two-well", "abs-diff"}
    with pytest.raises(InputError):
        get_integrand("nope")
    with pytest.raises(InputError):
        catalog_integrand("linear", 2, [1.0])
    tw = get_integrand({"name": "two-well", "dim": 2, "params": [1, 0, 0.5]})
    assert float(tw(np.array([1.0, 0.0]))) == pytest.approx(0.5 * np.sqrt(2))
