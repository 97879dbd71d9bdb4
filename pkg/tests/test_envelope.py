import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import ConvexHull

from afreeym.acceptance import convexify_1d
from afreeym.envelope import (GridField, afree_defect, apply_B, cell_centers, constant_field, envelope_upper,
                              lamination_envelope, project_A_free)
from afreeym.errors import CheckFailure, InputError
from afreeym.integrands import area_integrand, linear_integrand, norm_integrand, two_well_integrand
from afreeym.operator_symbols import CATALOG, cone_samples

div2, curl_vec = CATALOG["div2"], CATALOG["curl2-vec"]


def _grid_fn(N, fn):
    x = cell_centers(N, 2)
    return GridField(fn(x[..., 0], x[..., 1]), 2)


def convex_envelope_2d(f, query, lo=-3.0, hi=3.0, k=121):
    """Oracle: lower convex hull of f sampled on [lo, hi]^2, evaluated at ``query``."""
    ax = np.linspace(lo, hi, k)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    P = np.column_stack([X.ravel(), Y.ravel()])
    hull = ConvexHull(np.column_stack([P, f(P)]))
    eq = hull.equations[hull.equations[:, 2] < -1e-12]  # lower facets: a x + b y + c F + d = 0, c < 0
    q = np.atleast_2d(query)
    planes = -(q @ eq[:, :2].T + eq[:, 3]) / eq[:, 2]
    return planes.max(axis=1)


def test_apply_B_gradient_of_sine():
    u = _grid_fn(32, lambda x, y: np.sin(2 * np.pi * x)[..., None])
    v = apply_B(CATALOG["grad-scalar2"], u)
    x = cell_centers(32, 2)
    exact = np.stack([2 * np.pi * np.cos(2 * np.pi * x[..., 0]), np.zeros((32, 32))], axis=-1)
    assert np.abs(v.values - exact).max() <= 1e-8


def test_apply_B_perp_gradient():
    u = _grid_fn(32, lambda x, y: np.sin(2 * np.pi * y)[..., None])
    v = apply_B(CATALOG["perp-grad2"], u)
    x = cell_centers(32, 2)
    exact = np.stack([2 * np.pi * np.cos(2 * np.pi * x[..., 1]), np.zeros((32, 32))], axis=-1)
    assert np.abs(v.values - exact).max() <= 1e-8


def test_apply_B_kills_constants():
    v = apply_B(CATALOG["grad-scalar2"], constant_field(np.array([3.0]), 16, 2))
    assert np.abs(v.values).max() <= 1e-12


def test_projector_removes_non_kernel_mode():
    v = _grid_fn(32, lambda x, y: np.stack([np.sin(2 * np.pi * x), 0 * x], axis=-1))
    assert np.abs(project_A_free(div2, v).values).max() <= 1e-12


def test_projector_idempotent_and_keeps_afree(rng):
    v = GridField(rng.normal(size=(16, 16, 2)), 2)
    p = project_A_free(div2, v)
    np.testing.assert_allclose(project_A_free(div2, p).values, p.values, atol=1e-10)
    assert afree_defect(div2, p) <= 1e-8
    assert np.abs(p.mean).max() <= 1e-12


def test_projector_removes_constants():
    assert np.abs(project_A_free(div2, constant_field(np.array([1.0, -2.0]), 8, 2)).values).max() <= 1e-12


def test_projector_refuses_non_constant_rank():
    with pytest.raises(CheckFailure):
        project_A_free(CATALOG["diag2"], constant_field(np.zeros(2), 8, 2))


@pytest.mark.parametrize("z", [(0.0, 0.0), (1.5, -0.5), (-2.0, 1.0)])
@pytest.mark.parametrize("opname", ["div2", "curl2-vec"])
def test_convex_integrand_is_its_own_envelope(z, opname):
    f = area_integrand(2)
    est = envelope_upper(f, np.array(z), CATALOG[opname], N=16, restarts=2)
    assert est.value == pytest.approx(float(f(np.array(z))), abs=1e-6)
    assert np.abs(est.certificate.values).max() <= 1e-3


def test_div_two_well_matches_convex_envelope():
    f = two_well_integrand([1.0, 0.0], 0.0)
    est = envelope_upper(f, np.zeros(2), div2, N=32)
    oracle = float(convex_envelope_2d(f, np.zeros(2))[0])
    assert est.value <= oracle * 1.05 + 1e-9
    assert est.value >= oracle - 1e-6


def test_curl_rank_one_two_well_midpoint():
    # a = e1 is in the kernel of the curl symbol at xi = e1
    f = two_well_integrand([1.0, 0.0], 0.0)
    assert envelope_upper(f, np.zeros(2), curl_vec, N=32).value <= 0.05


@pytest.mark.parametrize("mode", ["projection", "potential"])
def test_certificate_admissible(mode):
    f = two_well_integrand([1.0, 0.0], 0.1)
    z = np.array([0.25, 0.0])
    est = envelope_upper(f, z, div2, mode=mode, N=16, restarts=2)
    cert = est.certificate
    assert est.value <= float(f(z)) + 1e-9
    assert est.value == pytest.approx(float(np.mean(f(z + cert.flat()))), abs=1e-12)
    assert afree_defect(div2, cert) <= 1e-8
    assert np.abs(cert.mean).max() <= 1e-10


def test_potential_mode_band():
    f = two_well_integrand([1.0, 0.0], 0.1)
    est = envelope_upper(f, np.array([0.25, 0.0]), div2, mode="potential", N=16, restarts=1)
    assert est.mode == "potential"
    assert est.value < float(f(np.array([0.25, 0.0])))


@pytest.mark.parametrize("z", [(0.25, 0.0), (-0.5, 0.5), (0.0, -0.25)])
def test_grid_refinement_monotone(z):
    f = two_well_integrand([1.0, 0.0], 0.1)
    a = envelope_upper(f, np.array(z), div2, N=16).value
    b = envelope_upper(f, np.array(z), div2, N=32).value
    assert b <= a + 1e-3


def test_resolution_limit_of_volume_fractions():
    # at z = (0.3, 0) the optimal laminate puts 0.35 of the volume on -e1; 32 cells cannot resolve
    # that fraction and the best 32-cell field sits ~8% above the 1D oracle, 40 cells resolve it exactly
    f = two_well_integrand([1.0, 0.0], 0.1)
    z = np.array([0.3, 0.0])
    oracle = convexify_1d(f, z, [1.0, 0.0])
    v32 = envelope_upper(f, z, div2, N=32).value
    v40 = envelope_upper(f, z, div2, N=40).value
    assert v40 == pytest.approx(oracle, rel=1e-6)
    assert oracle < v32 < 1.1 * oracle


def test_convexify_1d_against_hull():
    f = two_well_integrand([1.0, 0.0], 0.1)
    for z in ([0.3, 0.0], [0.5, 0.25], [-0.2, 1.0]):
        s = np.linspace(-4, 4, 4001)
        g = f(np.array(z) + s[:, None] * [1.0, 0.0])
        hull = ConvexHull(np.column_stack([s, g]))
        eq = hull.equations[hull.equations[:, 1] < -1e-12]
        val = float(np.max(-eq[:, 2] / eq[:, 1]))  # planes a s + b F + c = 0 at s = 0
        assert convexify_1d(f, z, [1.0, 0.0]) == pytest.approx(val, abs=1e-9)


def test_eps_sup_does_not_change_value():
    f = two_well_integrand([1.0, 0.0], 0.1)
    vals = [envelope_upper(f, np.array([0.5, 0.25]), div2, N=16, eps_sup=e).value for e in (1.0, 0.1, 0.01)]
    assert (max(vals) - min(vals)) / min(vals) <= 0.02


def test_envelope_needs_operator():
    with pytest.raises(InputError):
        envelope_upper(norm_integrand(2), np.zeros(2))


def test_lamination_convex_unchanged():
    f = area_integrand(2)
    lam = lamination_envelope(f, cone_samples(div2, 8), depth=2, lattice=(-3, 3, 31))
    np.testing.assert_allclose(lam.values[-1], lam.values[0], atol=1e-9)


def test_lamination_rank_one_midpoint():
    f = two_well_integrand([1.0, 0.0], 0.0)
    lam = lamination_envelope(f, cone_samples(curl_vec, 8), depth=1, lattice=(-3, 3, 61))
    assert float(lam.level(1)(np.zeros(2))) == pytest.approx(0.0, abs=1e-12)


def test_lamination_depth_monotone():
    f = two_well_integrand([1.0, 0.5], 0.1)
    lam = lamination_envelope(f, cone_samples(curl_vec, 8), depth=2, lattice=(-3, 3, 31))
    v0, v1, v2 = lam.values
    assert np.all(v1 <= v0 + 1e-12) and np.all(v2 <= v1 + 1e-12)


def test_recursive_matches_lattice_on_rank_one_instance():
    f = two_well_integrand([1.0, 0.0], 0.0)
    rec = lamination_envelope(f, cone_samples(curl_vec, 8), depth=1, method="recursive",
                              thetas=[0.25, 0.5], scales=[1.0, 2.0])
    assert float(rec(np.zeros(2))) == pytest.approx(0.0, abs=1e-12)


def test_upper_bound_chain():
    f = two_well_integrand([1.0, 0.0], 0.1)
    lam = lamination_envelope(f, cone_samples(div2, 16), depth=2)
    pts = np.array([[0.0, 0.0], [0.5, 0.25], [-0.25, 0.5], [0.75, -0.5]])
    conv = convex_envelope_2d(f, pts)
    for p, c in zip(pts, conv):
        e = envelope_upper(f, p, div2, N=32).value
        lv = float(lam(p))
        assert e <= lv * 1.05 + 1e-9
        # the sampled hull over-estimates the true convex envelope by at most the sampling error
        assert e >= c - 2e-3 and lv >= c - 2e-3


@given(z=st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_linear_integrand_exact(z):
    f = linear_integrand([0.7, -0.2])
    est = envelope_upper(f, np.array(z), div2, N=8, restarts=1, max_iters=20)
    assert est.value == pytest.approx(float(f(np.array(z))), abs=1e-9)
