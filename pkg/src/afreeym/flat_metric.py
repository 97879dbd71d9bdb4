"""Bounded-Lipschitz (flat / Kantorovich) norm of finite signed measures.

For a measure ``mu = sum w_i delta_{x_i}`` the norm is

    sup { sum w_i Phi_i : |Phi_i| <= s, |Phi_i - Phi_j| <= L d(x_i, x_j), s + L <= 1 }

i.e. the dual of the sum-type norm ``sup|Phi| + lip(Phi)``.  Restricting to
the support loses nothing because McShane extension preserves both terms.
The program is solved through its dual (a transport problem with creation
and annihilation of mass) by a dense simplex method started from an obvious
feasible basis; pivoting is Dantzig's rule with a Bland fallback on
degenerate stalls.  The primal test function is read off the final basis and
its feasibility and the duality gap are checked.  Large supports go to HiGHS.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import CheckFailure, InputError

log = logging.getLogger(__name__)

METRICS = ("linf", "euclidean")
SIMPLEX_MAX_ATOMS = 80
# the dual has k(k-1) flow variables; beyond this the program no longer fits a desk machine
MAX_ATOMS = 1500


# ---------------------------------------------------------------------------
# dense simplex


class LPError(CheckFailure):
    pass


def _pivot(T, r, j):
    T[r] /= T[r, j]
    col = T[:, j].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])


def _simplex_loop(T, basis, ncols, tol, max_iter, rule="dantzig"):
    """Pivot until optimal.

    ``rule="bland"`` always takes the lowest-index improving column.  The
    default "dantzig" rule takes the most negative reduced cost but falls back
    to Bland's rule after a run of degenerate pivots, which keeps the
    anti-cycling guarantee while cutting the pivot count considerably.
    """
    m = T.shape[0] - 1
    stall = 0
    for _ in range(max_iter):
        d = T[m, :ncols]
        use_bland = rule == "bland" or stall > 25
        if use_bland:
            neg = np.nonzero(d < -tol)[0]
            if neg.size == 0:
                return
            j = neg[0]
        else:
            j = int(np.argmin(d))
            if d[j] >= -tol:
                return
        col = T[:m, j]
        pos = np.nonzero(col > tol)[0]
        if pos.size == 0:
            raise LPError("linear program is unbounded")
        ratios = T[pos, -1] / col[pos]
        rmin = ratios.min()
        ties = pos[ratios <= rmin + tol * max(1.0, abs(rmin))]
        r = ties[np.argmin(np.asarray(basis)[ties])]
        stall = stall + 1 if rmin <= tol else 0
        _pivot(T, r, j)
        basis[r] = j
    raise LPError("simplex iteration limit reached")


def simplex_min(c, A, b, basis=None, tol=1e-11, max_iter=200000, rule="dantzig"):
    """Minimize ``c.x`` subject to ``A x = b``, ``x >= 0`` on a dense tableau.

    ``basis`` may name a feasible starting basis (one column per row), which
    skips phase one.  Returns ``(x, basis, kept_rows)``.
    """
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    c = np.asarray(c, dtype=float)
    m, nv = A.shape
    if basis is not None:
        basis = list(basis)
        Binv = np.linalg.inv(A[:, basis])
        T = np.zeros((m + 1, nv + 1))
        T[:m, :nv] = Binv @ A
        T[:m, -1] = Binv @ b
        if np.any(T[:m, -1] < -1e-12):
            raise InputError("starting basis is not feasible")
        keep = list(range(m))
    else:
        flip = b < 0
        A[flip] *= -1
        b[flip] *= -1
        T = np.zeros((m + 1, nv + m + 1))
        T[:m, :nv] = A
        T[:m, nv:nv + m] = np.eye(m)
        T[:m, -1] = b
        T[m, :nv] = -A.sum(axis=0)
        T[m, -1] = -b.sum()
        basis = list(range(nv, nv + m))
        _simplex_loop(T, basis, nv, tol, max_iter, rule)
        if -T[m, -1] > 1e-9 * max(1.0, b.sum()):
            raise LPError("linear program is infeasible", witness={"phase1": float(-T[m, -1])})
        # drive artificial variables out of the basis; drop redundant rows
        keep = []
        for r in range(m):
            if basis[r] >= nv:
                cand = np.nonzero(np.abs(T[r, :nv]) > 1e-9)[0]
                if cand.size == 0:
                    continue
                _pivot(T, r, cand[0])
                basis[r] = cand[0]
            keep.append(r)
        rows = keep + [m]
        T = np.concatenate([T[rows][:, :nv], T[rows][:, -1:]], axis=1)
        basis = [basis[r] for r in keep]
    mk = len(keep)
    cb = c[basis]
    T[mk, :nv] = c - cb @ T[:mk, :nv]
    T[mk, -1] = -cb @ T[:mk, -1]
    _simplex_loop(T, basis, nv, tol, max_iter, rule)
    x = np.zeros(nv)
    x[basis] = T[:mk, -1]
    return x, basis, keep


# ---------------------------------------------------------------------------
# measures


@dataclass(frozen=True)
class PointCloudMeasure:
    points: np.ndarray
    weights: np.ndarray
    metric: str = "linf"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise InputError(f"unknown metric {self.metric!r}")
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.size == 0 or w.size == 0:
            pts = pts.reshape(0, pts.shape[-1] if pts.ndim == 2 and pts.shape[-1] else 1)
            w = np.zeros(0)
        if pts.shape[0] != w.shape[0]:
            raise InputError("points and weights differ in length")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise InputError("non-finite atom")
        if len(w):
            pts, inv = np.unique(pts, axis=0, return_inverse=True)
            w = np.bincount(inv.ravel(), weights=w, minlength=len(pts))
            nz = w != 0
            pts, w = pts[nz], w[nz]
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self):
        return self.points.shape[1]

    def total_variation(self):
        return float(np.abs(self.weights).sum())

    def mass(self):
        return float(self.weights.sum())

    def scaled(self, c):
        return PointCloudMeasure(self.points, c * self.weights, self.metric)

    def __sub__(self, other):
        return combine(self, other, -1.0)

    def __add__(self, other):
        return combine(self, other, 1.0)

    def to_dict(self):
        return {"metric": self.metric,
                "atoms": [{"point": p.tolist(), "weight": float(w)} for p, w in zip(self.points, self.weights)]}


def combine(mu, nu, sign=1.0):
    if mu.metric != nu.metric:
        raise InputError(f"metric mismatch: {mu.metric} vs {nu.metric}")
    if len(mu.weights) and len(nu.weights) and mu.dim != nu.dim:
        raise InputError("measures live in different dimensions")
    dim = mu.dim if len(mu.weights) else nu.dim
    pts = np.concatenate([mu.points.reshape(-1, dim), nu.points.reshape(-1, dim)])
    w = np.concatenate([mu.weights, sign * nu.weights])
    return PointCloudMeasure(pts, w, mu.metric)


def measure_from_dict(data, default_metric="linf"):
    try:
        metric = data.get("metric", default_metric)
        atoms = data["atoms"]
        pts = [a["point"] for a in atoms]
        w = [a["weight"] for a in atoms]
    except (KeyError, TypeError, AttributeError) as exc:
        raise InputError(f"malformed measure: {exc}") from exc
    if not atoms:
        return PointCloudMeasure(np.zeros((0, 1)), np.zeros(0), metric)
    return PointCloudMeasure(np.array(pts, dtype=float), np.array(w, dtype=float), metric)


def distance_matrix(points, metric):
    diff = points[:, None, :] - points[None, :, :]
    if metric == "linf":
        return np.abs(diff).max(axis=-1)
    return np.linalg.norm(diff, axis=-1)


# ---------------------------------------------------------------------------
# the bounded-Lipschitz program


@dataclass
class BLSolution:
    value: float
    phi: np.ndarray
    s: float
    L: float
    residual: float
    solver: str


def _dual_lp(w, d):
    """Equality-form dual: variables (a+, a-, f_ij (i != j), y_b, t_s, t_L)."""
    k = len(w)
    ii, jj = np.nonzero(~np.eye(k, dtype=bool))
    nf = len(ii)
    nv = 2 * k + nf + 3
    A = np.zeros((k + 2, nv))
    A[np.arange(k), np.arange(k)] = 1.0
    A[np.arange(k), k + np.arange(k)] = -1.0
    cols = 2 * k + np.arange(nf)
    A[ii, cols] += 1.0
    A[jj, cols] -= 1.0
    yb = 2 * k + nf
    A[k, : 2 * k] = -1.0
    A[k, yb] = 1.0
    A[k, yb + 1] = -1.0
    A[k + 1, cols] = -d[ii, jj]
    A[k + 1, yb] = 1.0
    A[k + 1, yb + 2] = -1.0
    b = np.concatenate([w, [0.0, 0.0]])
    c = np.zeros(nv)
    c[yb] = 1.0
    return c, A, b


def _dual_lp_sparse(w, d):
    """Same program as :func:`_dual_lp` with a CSR constraint matrix (HiGHS path)."""
    from scipy.sparse import coo_matrix
    k = len(w)
    ii, jj = np.nonzero(~np.eye(k, dtype=bool))
    nf = len(ii)
    nv = 2 * k + nf + 3
    yb = 2 * k + nf
    cols = 2 * k + np.arange(nf)
    ar = np.arange(k)
    rows = np.concatenate([ar, ar, ii, jj, np.full(2 * k, k), [k, k], np.full(nf, k + 1), [k + 1, k + 1]])
    cidx = np.concatenate([ar, k + ar, cols, cols, np.arange(2 * k), [yb, yb + 1], cols, [yb, yb + 2]])
    vals = np.concatenate([np.ones(k), -np.ones(k), np.ones(nf), -np.ones(nf), -np.ones(2 * k), [1.0, -1.0],
                           -d[ii, jj], [1.0, -1.0]])
    A = coo_matrix((vals, (rows, cidx)), shape=(k + 2, nv)).tocsr()
    b = np.concatenate([w, [0.0, 0.0]])
    c = np.zeros(nv)
    c[yb] = 1.0
    return c, A, b


def _primal_residual(w, d, phi, s, L):
    k = len(w)
    r = max(0.0, -s, -L, s + L - 1.0)
    if k:
        r = max(r, float(np.max(np.abs(phi) - s)))
        lip = phi[:, None] - phi[None, :] - L * d
        r = max(r, float(lip.max()))
    return r


def bl_solve(mu, solver="auto", check_tol=1e-9):
    """Solve the bounded-Lipschitz program for ``mu`` and return the optimal test function."""
    w = mu.weights
    k = len(w)
    if k == 0:
        return BLSolution(0.0, np.zeros(0), 0.0, 0.0, 0.0, "trivial")
    if k > MAX_ATOMS:
        raise InputError(f"{k} support points exceed the limit of {MAX_ATOMS}; bin the measure first "
                         "(e.g. empirical_ym(..., value_step=0.05))")
    d = distance_matrix(mu.points, mu.metric)
    if solver == "auto":
        solver = "simplex" if k <= SIMPLEX_MAX_ATOMS else "highs"
    if solver == "simplex":
        c, A, b = _dual_lp(w, d)
        # feasible start: absorb each weight by creation/annihilation, budget on y_b and t_L
        start = [i if w[i] >= 0 else k + i for i in range(k)]
        nf = k * (k - 1)
        start += [2 * k + nf, 2 * k + nf + 2]
        x, basis, keep = simplex_min(c, A, b, basis=start)
        B = A[keep][:, basis]
        pi_kept = np.linalg.lstsq(B.T, c[basis], rcond=None)[0]
        pi = np.zeros(A.shape[0])
        pi[keep] = pi_kept
    elif solver == "highs":
        from scipy.optimize import linprog
        c, A, b = _dual_lp_sparse(w, d)
        res = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
        if res.status != 0:
            raise LPError(f"HiGHS failed: {res.message}", witness=mu.to_dict())
        x = res.x
        pi = np.asarray(res.eqlin.marginals)
    else:
        raise InputError(f"unknown solver {solver!r}")
    phi, s, L = pi[:k], float(pi[k]), float(pi[k + 1])
    value = float(c @ x)
    eq_res = float(np.abs(A @ x - b).max()) / max(1.0, float(np.abs(w).max()))
    prim_res = _primal_residual(w, d, phi, s, L)
    gap = abs(float(w @ phi) - value) / max(1.0, abs(value))
    residual = max(eq_res, prim_res, gap)
    if residual > check_tol:
        raise LPError(f"LP certificate residual {residual:.3e} exceeds {check_tol:.0e}",
                      witness=mu.to_dict())
    return BLSolution(value, phi, s, L, residual, solver)


def bl_norm(mu, solver="auto"):
    """Bounded-Lipschitz norm of a finite signed measure."""
    return bl_solve(mu, solver).value


def bl_distance(mu, nu, solver="auto"):
    if mu.metric != nu.metric:
        raise InputError(f"metric mismatch: {mu.metric} vs {nu.metric}")
    return bl_norm(mu - nu, solver)


# ---------------------------------------------------------------------------
# pairs (mu0 on V, muinf on the unit sphere) and their ball picture


@dataclass(frozen=True)
class LiftedPair:
    mu0: PointCloudMeasure
    mu_inf: PointCloudMeasure

    def __post_init__(self):
        if len(self.mu_inf.weights):
            r = np.linalg.norm(self.mu_inf.points, axis=1)
            if np.any(np.abs(r - 1) > 1e-10):
                raise InputError("concentration atoms must be unit vectors")
            if len(self.mu0.weights) and self.mu0.dim != self.mu_inf.dim:
                raise InputError("mu0 and muinf live in different dimensions")

    @property
    def dim(self):
        return self.mu0.dim if len(self.mu0.weights) else self.mu_inf.dim

    def to_dict(self):
        return {"mu0": self.mu0.to_dict(), "muinf": self.mu_inf.to_dict()}


def make_pair(points0, weights0, points_inf=None, weights_inf=None):
    points0 = np.atleast_2d(np.asarray(points0, dtype=float))
    dim = points0.shape[1]
    if points_inf is None:
        points_inf, weights_inf = np.zeros((0, dim)), np.zeros(0)
    mu0 = PointCloudMeasure(points0, weights0, "euclidean")
    mui = PointCloudMeasure(np.asarray(points_inf, dtype=float).reshape(-1, dim), weights_inf, "euclidean")
    return LiftedPair(mu0, mui)


def pair_from_dict(data):
    try:
        mu0 = measure_from_dict(data["mu0"], "euclidean")
        mui = measure_from_dict(data.get("muinf", {"atoms": []}), "euclidean")
    except (KeyError, AttributeError) as exc:
        raise InputError(f"malformed lifted pair: {exc}") from exc
    if len(mui.weights) and not len(mu0.weights):
        mu0 = PointCloudMeasure(np.zeros((0, mui.dim)), np.zeros(0), "euclidean")
    return LiftedPair(mu0, mui)


def lift_pair(pair):
    """Push a pair onto the closed unit ball: z -> z/(1+|z|) with weight w(1+|z|); sphere atoms stay."""
    dim = pair.dim
    z = pair.mu0.points.reshape(-1, dim)
    r = np.linalg.norm(z, axis=1)
    pts = np.concatenate([z / (1 + r)[:, None], pair.mu_inf.points.reshape(-1, dim)])
    w = np.concatenate([pair.mu0.weights * (1 + r), pair.mu_inf.weights])
    return PointCloudMeasure(pts, w, "euclidean")


def hstar_distance(a, b, solver="auto"):
    """Flat distance of the ball pictures of two pairs (Euclidean ground metric)."""
    return bl_distance(lift_pair(a), lift_pair(b), solver)
