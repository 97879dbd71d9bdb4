"""Symbols of homogeneous constant-coefficient differential operators.

An operator ``A = sum_{|alpha|=k} A_alpha d^alpha`` acting on V-valued fields
on R^n is stored through its coefficient matrices.  Its symbol at a frequency
xi is ``A(xi) = sum xi^alpha A_alpha``.  Everything here works with the real
symbol; Fourier multipliers add the ``(2 pi i)^k`` factor themselves.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

RANK_RTOL = 1e-10
MEMBER_TOL = 1e-6


@dataclass(frozen=True)
class OperatorSpec:
    """Homogeneous operator of a fixed order, given by multi-index terms.

    ``terms`` maps a multi-index (tuple of n ints summing to ``order``) to a
    ``dim_codomain x dim_domain`` matrix.
    """

    n: int
    order: int
    dim_domain: int
    dim_codomain: int
    terms: tuple = field(default_factory=tuple)
    name: str = ""

    def __post_init__(self):
        if self.n < 1 or self.order < 1 or self.dim_domain < 1 or self.dim_codomain < 1:
            raise InputError("n, order and dimensions must be positive integers")
        if not self.terms:
            raise InputError("operator needs at least one term")
        cleaned = []
        seen = set()
        nonzero = False
        for alpha, mat in self.terms:
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != self.n or min(alpha) < 0:
                raise InputError(f"multi-index {alpha} does not match n={self.n}")
            if sum(alpha) != self.order:
                raise InputError(f"multi-index {alpha} has degree {sum(alpha)} != order {self.order}")
            if alpha in seen:
                raise InputError(f"duplicate multi-index {alpha}")
            seen.add(alpha)
            mat = np.array(mat, dtype=float)
            if mat.shape != (self.dim_codomain, self.dim_domain):
                raise InputError(
                    f"term {alpha}: matrix shape {mat.shape} != "
                    f"({self.dim_codomain}, {self.dim_domain})")
            mat.setflags(write=False)
            nonzero = nonzero or bool(np.any(mat != 0))
            cleaned.append((alpha, mat))
        if not nonzero:
            raise InputError("all term matrices are zero")
        object.__setattr__(self, "terms", tuple(cleaned))

    @property
    def alphas(self):
        return np.array([a for a, _ in self.terms], dtype=int)

    @property
    def coefficients(self):
        return np.stack([m for _, m in self.terms])

    def matrix(self, xi):
        """Symbol matrices at one frequency (shape (n,)) or a batch (..., n)."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.n:
            raise InputError(f"frequency has length {xi.shape[-1]}, operator has n={self.n}")
        mono = np.prod(xi[..., None, :] ** self.alphas, axis=-1)
        return np.einsum("...t,tij->...ij", mono, self.coefficients)

    def matrix_derivative(self, xi):
        """d/dxi_i of the symbol, shape (..., n, dim_codomain, dim_domain)."""
        xi = np.asarray(xi, dtype=float)
        alphas = self.alphas
        out = []
        for i in range(self.n):
            a = alphas[:, i]
            shifted = alphas.copy()
            shifted[:, i] = np.maximum(a - 1, 0)
            mono = a * np.prod(xi[..., None, :] ** shifted, axis=-1)
            out.append(np.einsum("...t,tij->...ij", mono, self.coefficients))
        return np.stack(out, axis=-3)

    def to_dict(self):
        return {
            "n": self.n,
            "order": self.order,
            "dim_domain": self.dim_domain,
            "dim_codomain": self.dim_codomain,
            "terms": [{"alpha": list(a), "matrix": m.tolist()} for a, m in self.terms],
        }


def operator_from_dict(data, name=""):
    try:
        terms = tuple((t["alpha"], t["matrix"]) for t in data["terms"])
        return OperatorSpec(int(data["n"]), int(data["order"]), int(data["dim_domain"]),
                            int(data["dim_codomain"]), terms, name=name)
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed operator description: {exc}") from exc


def _op(name, n, order, dom, cod, terms):
    return OperatorSpec(n, order, dom, cod, tuple(terms), name=name)


def _catalog():
    ops = {}
    # divergence of a vector field in the plane: A(xi) v = xi . v
    ops["div2"] = _op("div2", 2, 1, 2, 1, [((1, 0), [[1, 0]]), ((0, 1), [[0, 1]])])
    # scalar curl in the plane: A(xi) v = xi1 v2 - xi2 v1
    ops["curl2-vec"] = _op("curl2-vec", 2, 1, 2, 1, [((1, 0), [[0, 1]]), ((0, 1), [[-1, 0]])])
    # row-wise curl of 2x2 matrix fields, entries stored row-major (M11, M12, M21, M22)
    ops["curl2-mat"] = _op("curl2-mat", 2, 1, 4, 2, [
        ((1, 0), [[0, 1, 0, 0], [0, 0, 0, 1]]),
        ((0, 1), [[-1, 0, 0, 0], [0, 0, -1, 0]]),
    ])
    ops["grad-scalar2"] = _op("grad-scalar2", 2, 1, 1, 2, [((1, 0), [[1], [0]]), ((0, 1), [[0], [1]])])
    # rotated gradient: B u = (d2 u, -d1 u)
    ops["perp-grad2"] = _op("perp-grad2", 2, 1, 1, 2, [((1, 0), [[0], [-1]]), ((0, 1), [[1], [0]])])
    # gradient of a vector field as a row-major 2x2 matrix: B(xi) a = a (x) xi
    ops["grad-vec2"] = _op("grad-vec2", 2, 1, 2, 4, [
        ((1, 0), [[1, 0], [0, 0], [0, 1], [0, 0]]),
        ((0, 1), [[0, 0], [1, 0], [0, 0], [0, 1]]),
    ])
    # gradient of the second component only; its wave cone is the e1 axis
    ops["grad-last2"] = _op("grad-last2", 2, 1, 2, 2, [((1, 0), [[0, 1], [0, 0]]), ((0, 1), [[0, 0], [0, 1]])])
    ops["div-first2"] = _op("div-first2", 2, 1, 2, 2, [((1, 0), [[1, 0], [0, 0]]), ((0, 1), [[0, 1], [0, 0]])])
    # A(xi) = diag(xi1, xi2): rank drops on the coordinate axes
    ops["diag2"] = _op("diag2", 2, 1, 2, 2, [((1, 0), [[1, 0], [0, 0]]), ((0, 1), [[0, 0], [0, 1]])])
    ops["div1"] = _op("div1", 1, 1, 1, 1, [((1,), [[1]])])
    return ops


CATALOG = _catalog()

# potential operators B with ker A(xi) = im B(xi)
POTENTIALS = {
    "div2": "perp-grad2",
    "curl2-vec": "grad-scalar2",
    "curl2-mat": "grad-vec2",
    "grad-last2": "div-first2",
}


def get_operator(ref):
    """Resolve a catalog name, a JSON file path, a dict, or pass an OperatorSpec through."""
    if isinstance(ref, OperatorSpec):
        return ref
    if isinstance(ref, dict):
        return operator_from_dict(ref)
    if ref in CATALOG:
        return CATALOG[ref]
    if isinstance(ref, (str, os.PathLike)) and os.path.isfile(ref):
        try:
            with open(ref) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read operator file {ref}: {exc}") from exc
        return operator_from_dict(data, name=os.path.basename(str(ref)))
    raise InputError(f"unknown operator {ref!r} (catalog: {', '.join(sorted(CATALOG))})")


def potential_for(op):
    """Catalog potential B paired with a catalog operator A, or None."""
    name = POTENTIALS.get(getattr(op, "name", ""))
    return CATALOG[name] if name else None


# ---------------------------------------------------------------------------
# sphere sampling

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def sphere_points(n, count):
    """Deterministic, well-spread points on the unit sphere of R^n.

    Equispaced angles on the circle, a Fibonacci spiral on S^2, a generalized
    golden-ratio (Kronecker) sequence pushed through Hopf coordinates on S^3,
    and an unscrambled Halton sequence pushed through the normal quantile in
    higher dimensions.
    """
    count = int(count)
    if count < 1:
        raise InputError("need at least one sample")
    if n == 1:
        return np.array([[1.0], [-1.0]])[: max(1, min(count, 2))]
    i = np.arange(count, dtype=float)
    if n == 2:
        t = 2 * np.pi * i / count
        return np.column_stack([np.cos(t), np.sin(t)])
    if n == 3:
        zc = 1.0 - (2 * i + 1) / count
        r = np.sqrt(1.0 - zc ** 2)
        phi = _GOLDEN_ANGLE * i
        return np.column_stack([r * np.cos(phi), r * np.sin(phi), zc])
    if n == 4:
        # plastic-type constant for three dimensions: g^4 = g + 1
        g = 1.2207440846057596
        alpha = np.array([1 / g, 1 / g ** 2, 1 / g ** 3])
        u = np.mod(0.5 + np.outer(i, alpha), 1.0)
        r1, r2 = np.sqrt(u[:, 0]), np.sqrt(1 - u[:, 0])
        a, b = 2 * np.pi * u[:, 1], 2 * np.pi * u[:, 2]
        return np.column_stack([r1 * np.cos(a), r1 * np.sin(a), r2 * np.cos(b), r2 * np.sin(b)])
    from scipy.stats import norm, qmc
    h = qmc.Halton(d=n, scramble=False).random(count + 1)[1:]
    g = norm.ppf(np.clip(h, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def random_sphere_points(n, count, seed=0):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((int(count), n))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def frequency_set(n, count, random_count=0, seed=0, anchors=True):
    """Coordinate axes and the main diagonal, then the low-discrepancy set, then random points."""
    parts = []
    if anchors:
        parts.append(np.eye(n))
        if n > 1:
            parts.append(np.full((1, n), 1 / np.sqrt(n)))
    parts.append(sphere_points(n, count))
    if random_count:
        parts.append(random_sphere_points(n, random_count, seed))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# symbol and rank diagnostics


@dataclass(frozen=True)
class SymbolMatrix:
    at: np.ndarray
    matrix: np.ndarray
    rank: int
    kernel_basis: np.ndarray  # rows are orthonormal kernel vectors
    singular_values: np.ndarray


def _rank_from_sv(s):
    smax = s.max(axis=-1, initial=0.0) if s.size else 0.0
    return np.sum(s > RANK_RTOL * np.asarray(smax)[..., None], axis=-1)


def symbol(op, xi):
    """Evaluate the symbol at ``xi`` together with rank and an orthonormal kernel basis."""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1 or xi.shape[0] != op.n:
        raise InputError(f"frequency must have length {op.n}")
    mat = op.matrix(xi)
    _, s, vt = np.linalg.svd(mat, full_matrices=True)
    rank = int(_rank_from_sv(s)) if s.size and s[0] > 0 else 0
    return SymbolMatrix(at=xi, matrix=mat, rank=rank, kernel_basis=vt[rank:].copy(), singular_values=s)


def kernel_bases(op, xis, rank):
    """Orthonormal kernel bases for a batch of frequencies of known common rank."""
    mats = op.matrix(xis)
    _, _, vt = np.linalg.svd(mats, full_matrices=True)
    return vt[:, rank:, :]


@dataclass
class ConeReport:
    sampled_rank: object  # int, or the string "non-constant"
    witnesses: list
    cone_samples: np.ndarray
    spanning: bool
    n_frequencies: int

    @property
    def constant(self):
        return self.sampled_rank != "non-constant"

    def to_dict(self):
        return {
            "sampled_rank": self.sampled_rank,
            "constant_rank": self.constant,
            "witnesses": [{"xi": list(map(float, x)), "rank": int(r)} for x, r in self.witnesses],
            "spanning": bool(self.spanning),
            "n_frequencies": self.n_frequencies,
            "n_cone_samples": int(len(self.cone_samples)),
        }


def _spans(vectors, dim):
    if len(vectors) == 0:
        return False
    s = np.linalg.svd(np.asarray(vectors), compute_uv=False)
    return bool(s[0] > 0 and np.sum(s > 1e-8 * s[0]) == dim)


def check_constant_rank(op, count=1000, random_count=0, seed=0, max_cone_samples=256):
    """Sample the rank of the symbol over unit frequencies.

    Returns a :class:`ConeReport`; on a rank change the first two conflicting
    frequencies are reported as witnesses.
    """
    xis = frequency_set(op.n, count, random_count, seed)
    s = np.linalg.svd(op.matrix(xis), compute_uv=False)
    smax = s.max(axis=-1)
    ranks = np.where(smax > 0, np.sum(s > RANK_RTOL * smax[:, None], axis=-1), 0)
    differs = np.nonzero(ranks != ranks[0])[0]
    if differs.size:
        j = differs[0]
        witnesses = [(xis[0], int(ranks[0])), (xis[j], int(ranks[j]))]
        # cone samples still meaningful per frequency; collect them frequency-wise
        cone = [symbol(op, x).kernel_basis for x in xis[:: max(1, len(xis) // max_cone_samples)]]
        cone = np.concatenate(cone) if cone else np.zeros((0, op.dim_domain))
        return ConeReport("non-constant", witnesses, cone, _spans(cone, op.dim_domain), len(xis))
    rank = int(ranks[0])
    step = max(1, len(xis) // max_cone_samples)
    ker = kernel_bases(op, xis[::step], rank).reshape(-1, op.dim_domain)
    return ConeReport(rank, [], ker, _spans(ker, op.dim_domain), len(xis))


def cone_samples(op, count=64):
    """Unit vectors in the wave cone, collected from kernels at sampled frequencies."""
    rep = check_constant_rank(op, count=count, max_cone_samples=count)
    return rep.cone_samples


def spanning_check(op, samples=200):
    """True iff the kernels of the symbol over sampled frequencies span the domain."""
    xis = frequency_set(op.n, samples)
    vecs = [symbol(op, x).kernel_basis for x in xis]
    return _spans(np.concatenate(vecs), op.dim_domain)


def wave_cone_membership(op, z, grid=1000, steps=50, starts=4):
    """Normalized distance of ``z`` from being annihilated by some unit-frequency symbol.

    ``residual = min_xi |A(xi) z| / (|z| max_xi ||A(xi)||)``, minimized over a
    coarse sphere grid followed by projected gradient descent from the best
    grid points.  First-order operators are additionally handled exactly: the
    map xi -> A(xi) z is linear, so the minimum is a smallest singular value.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (op.dim_domain,):
        raise InputError(f"z must have length {op.dim_domain}")
    nz = np.linalg.norm(z)
    if nz == 0:
        raise InputError("z = 0 lies in every kernel; membership is trivial")
    xis = frequency_set(op.n, grid)
    mats = op.matrix(xis)
    scale = np.linalg.norm(mats, ord=2, axis=(-2, -1)).max()
    vals = np.linalg.norm(mats @ z, axis=-1)
    best = float(vals.min())
    best_xi = xis[int(np.argmin(vals))]

    def g(x):
        return float(np.linalg.norm(op.matrix(x) @ z))

    for k in np.argsort(vals)[:starts]:
        x = xis[k].copy()
        fx = vals[k]
        for _ in range(steps):
            az = op.matrix(x) @ z
            jac = op.matrix_derivative(x) @ z  # (n, dW)
            grad = jac @ az
            grad -= np.dot(grad, x) * x
            gn = np.linalg.norm(grad)
            if gn < 1e-300 or fx == 0:
                break
            step = fx / gn if fx > 0 else 1.0
            for _ in range(40):
                y = x - step * grad / max(fx, 1e-300)
                ny = np.linalg.norm(y)
                if ny == 0:
                    step *= 0.5
                    continue
                y /= ny
                fy = g(y)
                if fy < fx:
                    x, fx = y, fy
                    break
                step *= 0.5
            else:
                break
        if fx < best:
            best, best_xi = fx, x
    if op.order == 1:
        cols = np.zeros((op.dim_codomain, op.n))
        for alpha, m in op.terms:
            cols[:, int(np.argmax(alpha))] = m @ z
        _, s, vt = np.linalg.svd(cols, full_matrices=True)
        smin = s[-1] if len(s) == op.n else 0.0
        if smin < best:
            best, best_xi = float(smin), vt[-1]
    residual = best / (nz * scale)
    return residual, bool(residual < MEMBER_TOL), np.asarray(best_xi)


def verify_exactness(opA, opB, samples=1000, rtol=1e-12):
    """Check ``A(xi) B(xi) = 0`` and ``rank B(xi) = dim ker A(xi)`` at sampled unit frequencies."""
    if opA.n != opB.n:
        raise InputError("operators live on different space dimensions")
    if opB.dim_codomain != opA.dim_domain:
        raise InputError(f"B maps into dimension {opB.dim_codomain}, A acts on {opA.dim_domain}")
    xis = frequency_set(opA.n, samples)
    ma, mb = opA.matrix(xis), opB.matrix(xis)
    comp = np.linalg.norm(ma @ mb, ord=2, axis=(-2, -1))
    na = np.linalg.norm(ma, ord=2, axis=(-2, -1))
    nb = np.linalg.norm(mb, ord=2, axis=(-2, -1))
    ratio = comp / np.maximum(na * nb, 1e-300)
    sa = np.linalg.svd(ma, compute_uv=False)
    sb = np.linalg.svd(mb, compute_uv=False)
    rank_a = np.sum(sa > RANK_RTOL * sa.max(axis=-1, keepdims=True), axis=-1)
    rank_b = np.sum(sb > RANK_RTOL * sb.max(axis=-1, keepdims=True), axis=-1)
    ker_a = opA.dim_domain - rank_a
    bad = np.nonzero(rank_b != ker_a)[0]
    worst = int(np.argmax(ratio))
    report = {
        "passed": bool(ratio.max() <= rtol and bad.size == 0),
        "worst_ratio": float(ratio.max()),
        "worst_xi": xis[worst].tolist(),
        "composition_ok": bool(ratio.max() <= rtol),
        "rank_ok": bool(bad.size == 0),
        "samples": int(len(xis)),
    }
    if bad.size:
        j = bad[0]
        report["rank_witness"] = {"xi": xis[j].tolist(), "rank_B": int(rank_b[j]), "dim_ker_A": int(ker_a[j])}
    return report
