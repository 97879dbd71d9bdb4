import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from afreeym.errors import InputError
from afreeym.operator_symbols import (CATALOG, POTENTIALS, check_constant_rank, get_operator, operator_from_dict,
                                      spanning_check, symbol, verify_exactness, wave_cone_membership)

div2, curl_vec, curl_mat = CATALOG["div2"], CATALOG["curl2-vec"], CATALOG["curl2-mat"]


def test_symbol_div_at_e1():
    s = symbol(div2, [1.0, 0.0])
    np.testing.assert_array_equal(s.matrix, [[1.0, 0.0]])
    assert s.rank == 1
    np.testing.assert_allclose(np.abs(s.kernel_basis), [[0.0, 1.0]], atol=1e-15)


def test_symbol_curl_at_e2():
    s = symbol(curl_vec, [0.0, 1.0])
    np.testing.assert_array_equal(s.matrix, [[-1.0, 0.0]])
    assert s.rank == 1
    np.testing.assert_allclose(np.abs(s.kernel_basis), [[0.0, 1.0]], atol=1e-15)


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_symbol_at_zero_is_zero(name):
    op = CATALOG[name]
    s = symbol(op, np.zeros(op.n))
    assert not np.any(s.matrix)
    assert s.rank == 0
    assert len(s.kernel_basis) == op.dim_domain


def test_symbol_dimension_mismatch():
    with pytest.raises(InputError):
        symbol(div2, [1.0, 0.0, 0.0])


@pytest.mark.parametrize("name", sorted(CATALOG))
@given(xi=st.lists(st.floats(-3, 3), min_size=2, max_size=2), t=st.floats(-5, 5))
def test_symbol_homogeneity(name, xi, t):
    op = CATALOG[name]
    xi = np.array(xi[: op.n])
    a = symbol(op, t * xi).matrix
    b = t ** op.order * symbol(op, xi).matrix
    assert np.abs(a - b).max() <= 1e-12 * max(1.0, np.abs(b).max())


@pytest.mark.parametrize("name", sorted(CATALOG))
@given(xi=st.lists(st.floats(-3, 3), min_size=2, max_size=2).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_kernel_certificate(name, xi):
    op = CATALOG[name]
    s = symbol(op, np.array(xi[: op.n]))
    smax = s.singular_values.max() if s.singular_values.size else 0.0
    for v in s.kernel_basis:
        assert np.linalg.norm(s.matrix @ v) <= 1e-8 * max(smax, 1e-300)
    assert s.rank + len(s.kernel_basis) == op.dim_domain


def test_constant_rank_div():
    rep = check_constant_rank(div2, count=1000)
    assert rep.sampled_rank == 1 and rep.constant


def test_constant_rank_curl_matrix_cone_is_rank_one():
    rep = check_constant_rank(curl_mat, count=200)
    assert rep.sampled_rank == 2
    # every kernel vector of the row-wise curl is a rank-one matrix a (x) xi
    for v in rep.cone_samples:
        sv = np.linalg.svd(v.reshape(2, 2), compute_uv=False)
        assert sv[1] <= 1e-10 * sv[0]


def test_constant_rank_diag_witnesses():
    rep = check_constant_rank(CATALOG["diag2"], count=100)
    assert rep.sampled_rank == "non-constant"
    (x0, r0), (x1, r1) = rep.witnesses
    np.testing.assert_allclose(x0, [1.0, 0.0])
    assert r0 == 1
    np.testing.assert_allclose(x1, [1 / np.sqrt(2)] * 2)
    assert r1 == 2


def test_constant_rank_seed_independent():
    a = check_constant_rank(curl_mat, count=50, random_count=200, seed=1)
    b = check_constant_rank(curl_mat, count=50, random_count=200, seed=7)
    assert a.sampled_rank == b.sampled_rank == 2


def test_wave_cone_div_member():
    res, member, xi = wave_cone_membership(div2, np.array([1.0, 0.0]))
    assert member and res < 1e-12
    assert abs(xi @ [1.0, 0.0]) < 1e-8


def test_wave_cone_rank_one_matrix_member():
    res, member, _ = wave_cone_membership(curl_mat, np.array([1.0, 0.0, 0.0, 0.0]))
    assert member and res < 1e-10


def _scan_residual(op, z, count=20000):
    # independent oracle: dense angle scan of |A(xi) z| / (|z| max ||A||)
    th = np.linspace(0, np.pi, count, endpoint=False)
    xis = np.column_stack([np.cos(th), np.sin(th)])
    mats = op.matrix(xis)
    scale = np.linalg.norm(mats, ord=2, axis=(-2, -1)).max()
    return np.linalg.norm(mats @ z, axis=-1).min() / (np.linalg.norm(z) * scale)


def test_wave_cone_identity_not_member():
    z = np.array([1.0, 0.0, 0.0, 1.0])
    res, member, _ = wave_cone_membership(curl_mat, z)
    assert not member
    assert res >= 0.1
    assert res == pytest.approx(_scan_residual(curl_mat, z), rel=1e-6)


def test_wave_cone_zero_rejected():
    with pytest.raises(InputError):
        wave_cone_membership(div2, np.zeros(2))


def test_spanning():
    assert spanning_check(div2)
    assert spanning_check(curl_mat)
    assert not spanning_check(CATALOG["div1"])


@pytest.mark.parametrize("a,b", sorted(POTENTIALS.items()))
def test_catalog_pairs_exact(a, b):
    rep = verify_exactness(CATALOG[a], CATALOG[b])
    assert rep["passed"], rep


def test_div_with_gradient_is_not_exact():
    rep = verify_exactness(div2, CATALOG["grad-scalar2"])
    assert not rep["passed"]
    assert not rep["composition_ok"]


def test_exactness_shape_mismatch():
    with pytest.raises(InputError):
        verify_exactness(div2, CATALOG["grad-vec2"])


def test_operator_file_roundtrip(tmp_path):
    p = tmp_path / "op.json"
    p.write_text(json.dumps(curl_mat.to_dict()))
    op = get_operator(str(p))
    for xi in ([1.0, 0.3], [-0.2, 2.0]):
        np.testing.assert_array_equal(op.matrix(xi), curl_mat.matrix(xi))


@pytest.mark.parametrize("bad", [
    {"n": 2, "order": 1, "dim_domain": 2, "dim_codomain": 1, "terms": [{"alpha": [2, 0], "matrix": [[1, 0]]}]},
    {"n": 2, "order": 1, "dim_domain": 2, "dim_codomain": 1, "terms": [{"alpha": [1, 0], "matrix": [[0, 0]]}]},
    {"n": 2, "order": 1, "dim_domain": 2, "dim_codomain": 1, "terms": [{"alpha": [1, 0], "matrix": [[1, 0, 0]]}]},
])
def test_operator_invariants_enforced(bad):
    with pytest.raises(InputError):
        operator_from_dict(bad)


def test_unknown_operator():
    with pytest.raises(InputError):
        get_operator("no-such-operator")
