import numpy as np
import pytest
from hypothesis import given, strategies as st

from afreeym.acceptance import lamination_integrand, violation_fixture_path, violation_integrand_path
from afreeym.errors import InputError
from afreeym.integrands import (abs_diff_integrand, area_integrand, constant_integrand, get_integrand,
                                linear_integrand, norm_integrand, two_well_integrand)
from afreeym.operator_symbols import CATALOG
from afreeym.young_measures import (DiscreteYoungMeasure, VectorMeasure, afree_residual, barycentre, elementary,
                                    homogeneous_certificate, homogeneous_measure, jensen_regular, jensen_singular,
                                    load_ym, make_cell, pair, polar_in_cone_check, strengthened_jensen,
                                    ym_from_dict)

div2 = CATALOG["div2"]


def _dirac_measure(z, grid=2):
    return homogeneous_measure([[1.0] + list(z)], grid=grid)


def test_barycentre_of_dirac():
    v = barycentre(_dirac_measure([0.4, -1.0]))
    np.testing.assert_allclose(v.ac_density, np.tile([0.4, -1.0], (4, 1)))
    assert v.atoms == []


def test_barycentre_of_symmetric_pair():
    v = barycentre(homogeneous_measure([[0.5, 1.0, 2.0], [0.5, -1.0, -2.0]], grid=2))
    np.testing.assert_allclose(v.ac_density, 0.0, atol=1e-15)


def test_barycentre_singular_atom():
    nu = homogeneous_measure([[1.0, 0.0, 0.0]], singular=[{"x": [0.3, 0.6], "mass": 1.0, "sphere": [[1.0, 0.0, 1.0]]}])
    (x, m, p), = barycentre(nu).atoms
    np.testing.assert_allclose(x, [0.3, 0.6])
    assert m == pytest.approx(1.0)
    np.testing.assert_allclose(p, [0.0, 1.0])


def test_barycentre_drops_zero_mean_atom_with_warning():
    nu = homogeneous_measure([[1.0, 0.0, 0.0]],
                             singular=[{"x": [0.5, 0.5], "mass": 1.0, "sphere": [[0.5, 1.0, 0.0], [0.5, -1.0, 0.0]]}])
    with pytest.warns(UserWarning):
        assert barycentre(nu).atoms == []


def test_pair_norm_on_dirac():
    assert pair(_dirac_measure([3.0, 4.0]), None, norm_integrand(2)) == pytest.approx(5.0)


@pytest.mark.parametrize("t", [0.5, 2.0])
def test_pair_adds_concentration(t):
    base = _dirac_measure([0.0, 0.0])
    nu = homogeneous_measure([[1.0, 0.0, 0.0]], grid=2,
                             singular=[{"x": [0.5, 0.5], "mass": t, "sphere": [[1.0, 0.6, 0.8]]}])
    f = area_integrand(2)
    assert pair(nu, None, f) - pair(base, None, f) == pytest.approx(t)


def test_pair_with_linear_eta_1d():
    nu = DiscreteYoungMeasure(1, 64, 2, [make_cell([[1.0, 0.0, 0.0]]) for _ in range(64)])
    assert pair(nu, lambda x: x[:, 0], area_integrand(2)) == pytest.approx(0.5)


def test_mass_normalization():
    nu = homogeneous_measure([[0.3, 1.0, 0.0], [0.7, 0.0, 2.0]], lam_a=0.4, sphere=[[1.0, 0.0, 1.0]], grid=2,
                             singular=[{"x": [0.2, 0.7], "mass": 1.5, "sphere": [[1.0, 1.0, 0.0]]}])
    one = constant_integrand(1.0)

    class OneWithUnitRecession:
        name = "one"

        def __call__(self, z):
            return one(z)

        def recession(self, z):
            return np.ones(np.shape(z)[:-1])

    assert pair(nu, None, OneWithUnitRecession()) == pytest.approx(1.0 + nu.total_concentration())


@given(seed=st.integers(0, 1000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_pair_linear_in_eta(seed, a, b):
    rng = np.random.default_rng(seed)
    nu = homogeneous_measure([[0.5] + list(rng.normal(size=2)), [0.5] + list(rng.normal(size=2))], grid=2)
    f = area_integrand(2)
    e1, e2 = (lambda x: x[:, 0]), (lambda x: 1 + x[:, 1] ** 2)
    combo = pair(nu, lambda x: a * e1(x) + b * e2(x), f)
    assert combo == pytest.approx(a * pair(nu, e1, f) + b * pair(nu, e2, f), abs=1e-9)


def test_elementary_of_constant_density():
    v = VectorMeasure(2, 2, np.tile([1.0, 2.0], (4, 1)))
    nu = elementary(v)
    assert all(len(c.osc_w) == 1 for c in nu.cells)
    np.testing.assert_allclose(nu.cells[0].osc_z, [[1.0, 2.0]])


def test_elementary_with_atom():
    v = VectorMeasure(2, 2, np.zeros((4, 2)), [([0.5, 0.5], 2.0, [0.0, 1.0])])
    s, = elementary(v).singular
    assert s.mass == 2.0
    np.testing.assert_allclose(s.sph_e, [[0.0, 1.0]])


def test_elementary_pairing_with_area(rng):
    dens = rng.normal(size=(16, 2))
    v = VectorMeasure(2, 4, dens, [([0.3, 0.3], 0.7, [0.6, -0.8])])
    f = area_integrand(2)
    direct = float(np.mean(f(dens))) + 0.7 * 1.0
    assert pair(elementary(v), None, f) == pytest.approx(direct, abs=1e-12)


def test_elementary_inverts_barycentre_on_dirac_measures(rng):
    dens = rng.normal(size=(4, 2))
    v = VectorMeasure(2, 2, dens, [([0.25, 0.75], 1.3, [1.0, 0.0])])
    back = barycentre(elementary(v))
    np.testing.assert_allclose(back.ac_density, dens)
    (x, m, p), = back.atoms
    assert m == pytest.approx(1.3)
    np.testing.assert_allclose(p, [1.0, 0.0])


def test_afree_residual_constant():
    assert afree_residual(VectorMeasure(2, 8, np.tile([1.0, -1.0], (64, 1))), div2) == 0.0


def test_afree_residual_kernel_plane_wave():
    # div2 symbol at xi = e1 annihilates w = e2
    x = (np.arange(16) + 0.5) / 16
    X, _ = np.meshgrid(x, x, indexing="ij")
    dens = np.stack([0 * X, np.sin(2 * np.pi * X)], axis=-1).reshape(-1, 2)
    assert afree_residual(VectorMeasure(2, 16, dens), div2) <= 1e-8


def test_afree_residual_non_kernel_direction():
    x = (np.arange(16) + 0.5) / 16
    X, _ = np.meshgrid(x, x, indexing="ij")
    dens = np.stack([np.sin(2 * np.pi * X), 0 * X], axis=-1).reshape(-1, 2)
    assert afree_residual(VectorMeasure(2, 16, dens), div2) > 1e-2


@pytest.mark.parametrize("f", [norm_integrand(2), area_integrand(2)])
def test_jensen_convex_passes(f, rng):
    cells = [make_cell(np.column_stack([np.full(3, 1 / 3), rng.normal(size=(3, 2))]), 0.5, [[1.0, 0.6, 0.8]])
             for _ in range(4)]
    nu = DiscreteYoungMeasure(2, 2, 2, cells)
    rep = jensen_regular(nu, [f])
    assert rep["passed"]


def test_jensen_dirac_equality():
    rep = jensen_regular(_dirac_measure([1.0, 2.0]), [area_integrand(2), norm_integrand(2)])
    assert all(abs(p["min_slack"]) <= 1e-15 for p in rep["per_integrand"])


def test_jensen_affine_equality_random():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.normal(size=2)
        f = linear_integrand(a)
        cells = [make_cell(np.column_stack([np.full(2, 0.5), rng.normal(size=(2, 2))]), rng.uniform(0, 1),
                           [[1.0] + list(np.array([0.6, 0.8]))]) for _ in range(4)]
        rep = jensen_regular(DiscreteYoungMeasure(2, 2, 2, cells), [f])
        assert max(abs(s) for s in rep["_slacks"][0]) <= 1e-9


def test_jensen_laminate_against_numerical_envelope():
    # laminate across a rank-one direction of curl2-vec, tested with the lamination envelope of the two-well
    f = two_well_integrand([1.0, 0.0], 0.1)
    fl = lamination_integrand(f, CATALOG["curl2-vec"])
    nu = homogeneous_measure([[0.5, 1.0, 0.0], [0.5, -1.0, 0.0]])
    rep = jensen_regular(nu, [fl])
    assert rep["per_integrand"][0]["min_slack"] >= -5e-3


def test_jensen_singular_single_atom_equality():
    nu = homogeneous_measure([[1.0, 0.0, 0.0]], singular=[{"x": [0.5, 0.5], "mass": 1.0, "sphere": [[1.0, 0.6, 0.8]]}])
    rep = jensen_singular(nu, [area_integrand(2), abs_diff_integrand(2)])
    assert all(abs(r["slack"]) <= 1e-12 for r in rep["atoms"])


def test_jensen_singular_norm_slack():
    sphere = [[0.25, 1.0, 0.0], [0.75, 0.0, 1.0]]
    nu = homogeneous_measure([[1.0, 0.0, 0.0]], singular=[{"x": [0.5, 0.5], "mass": 1.0, "sphere": sphere}])
    rep = jensen_singular(nu, [norm_integrand(2)])
    assert rep["atoms"][0]["slack"] == pytest.approx(1 - np.hypot(0.25, 0.75))


def test_jensen_singular_symmetric_pair():
    nu = homogeneous_measure([[1.0, 0.0, 0.0]],
                             singular=[{"x": [0.5, 0.5], "mass": 1.0, "sphere": [[0.5, 0.0, 1.0], [0.5, 0.0, -1.0]]}])
    f = two_well_integrand([1.0, 0.0], 0.0)
    assert jensen_singular(nu, [f])["atoms"][0]["slack"] == pytest.approx(1.0)


def test_strengthened_equals_weak_for_convex():
    rep = strengthened_jensen([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]], area_integrand(2))
    assert rep["strengthened_slack"] == pytest.approx(rep["weak_slack"], abs=1e-6)


def test_strengthened_equals_weak_on_cone():
    # a single sphere atom at e1: G(e1) = |1| + |0| = F(e1)
    rep = strengthened_jensen([1.0], [[1.0, 0.0]], abs_diff_integrand(2))
    assert rep["strengthened_slack"] == pytest.approx(rep["weak_slack"], abs=1e-6)


def test_strengthened_strictly_smaller_for_abs_diff():
    # Clarke gradients of |z1| - |z2| fill the square, so G = |z1| + |z2| and G(1/2, 1/2) = 1 > F(1/2, 1/2) = 0
    rep = strengthened_jensen([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]], abs_diff_integrand(2))
    assert rep["weak_slack"] == pytest.approx(0.0, abs=1e-12)
    assert rep["strengthened_slack"] == pytest.approx(-1.0, abs=1e-6)
    assert rep["consistent"]


@given(seed=st.integers(0, 1000))
def test_strengthened_never_exceeds_weak(seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(3, 2))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    w = rng.dirichlet(np.ones(3))
    rep = strengthened_jensen(w, e, abs_diff_integrand(2), clarke_kwargs={"count": 512})
    assert rep["strengthened_slack"] <= rep["weak_slack"] + 1e-6


def test_homogeneous_certificate_trivial_member():
    rep = homogeneous_certificate([1.0], [[0.5, 0.5]], [0.5, 0.5], [area_integrand(2)])
    assert rep["verdict"] == "consistent"


def test_homogeneous_certificate_laminate():
    rep = homogeneous_certificate([0.5, 0.5], [[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0],
                                  [lamination_integrand(two_well_integrand([1.0, 0.0], 0.1), CATALOG["curl2-vec"])])
    assert rep["verdict"] == "consistent"


def test_homogeneous_certificate_barycentre_mismatch():
    rep = homogeneous_certificate([1.0], [[1.0, 0.0]], [0.0, 0.0], [area_integrand(2)])
    assert rep["verdict"] == "violated"
    assert rep["witness"]["barycentre_error"] == pytest.approx(1.0)


def test_homogeneous_certificate_identity_not_rank_one():
    f = get_integrand(violation_integrand_path())
    fl = lamination_integrand(f, CATALOG["curl2-mat"])
    a = [1.0, 0.0, 0.0, 1.0]
    rep = homogeneous_certificate([0.5, 0.5], [a, [-x for x in a]], [0.0] * 4, [fl])
    assert rep["verdict"] == "violated"
    assert rep["witness"]["slack"] < -0.05


def test_violation_fixture_fails_regular_jensen():
    fixture = load_ym(violation_fixture_path())
    fl = lamination_integrand(get_integrand(violation_integrand_path()), CATALOG["curl2-mat"])
    rep = jensen_regular(fixture, [fl])
    assert not rep["passed"]
    assert rep["worst"]["relative_slack"] < -0.05


def test_homogeneous_certificate_needs_probability():
    with pytest.raises(InputError):
        homogeneous_certificate([0.5], [[0.0, 0.0]], [0.0, 0.0], [area_integrand(2)])


def test_polar_kernel_vector_passes():
    v = VectorMeasure(2, 2, np.zeros((4, 2)), [([0.5, 0.5], 1.0, [0.0, 1.0])])
    assert polar_in_cone_check(v, div2)["passed"]


def test_polar_any_direction_for_div(rng):
    for p in rng.normal(size=(5, 2)):
        v = VectorMeasure(2, 2, np.zeros((4, 2)), [([0.5, 0.5], 1.0, p / np.linalg.norm(p))])
        assert polar_in_cone_check(v, div2)["passed"]


def test_polar_identity_fails_for_curl_mat():
    p = np.array([1.0, 0.0, 0.0, 1.0]) / np.sqrt(2)
    v = VectorMeasure(2, 2, np.zeros((4, 4)), [([0.5, 0.5], 1.0, p)])
    assert not polar_in_cone_check(v, CATALOG["curl2-mat"])["passed"]


def test_malformed_measures():
    with pytest.raises(InputError):
        ym_from_dict({"n": 2, "grid": 1, "cells": [{"osc": [[0.5, 1.0, 0.0]]}]})
    with pytest.raises(InputError):
        ym_from_dict({"n": 2, "grid": 1, "cells": [{"osc": [[1.0, 0.0, 0.0]]}],
                      "singular": [{"x": [1.0, 0.5], "mass": 1.0, "sphere": [[1.0, 1.0, 0.0]]}]})
    with pytest.raises(InputError):
        make_cell([[1.0, 0.0, 0.0]], 1.0, [[1.0, 0.5, 0.0]])


def test_roundtrip_dict():
    nu = homogeneous_measure([[0.5, 1.0, 0.0], [0.5, 0.0, 1.0]], 0.2, [[1.0, 1.0, 0.0]], grid=2)
    back = ym_from_dict(nu.to_dict())
    assert pair(back, None, area_integrand(2)) == pytest.approx(pair(nu, None, area_integrand(2)))
