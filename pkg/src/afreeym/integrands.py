"""Linear-growth integrands on V = R^d, their recession functions and the ball transform.

Integrands are vectorized: ``f(z)`` accepts an array of shape ``(..., d)`` and
returns shape ``(...)``.
"""
from __future__ import annotations

import json
import logging
import os

import numpy as np

from .errors import InputError
from .operator_symbols import random_sphere_points, sphere_points

log = logging.getLogger(__name__)

RECESSION_TS = np.geomspace(1e2, 1e6, 7)
# |D Phi| <= 3 |D T Phi| on V; the constant is left unnormalized
TRANSFORM_GRADIENT_FACTOR = 3.0


def _norm(z):
    return np.linalg.norm(z, axis=-1)


def _unit(z):
    r = _norm(z)[..., None]
    return np.divide(z, r, out=np.zeros_like(z), where=r > 0)


class Integrand:
    """A continuous function of linear growth on R^d.

    Parameters
    ----------
    dim : int
        Dimension of V.
    func : callable
        Vectorized evaluation ``(..., d) -> (...)``.
    grad : callable, optional
        Vectorized gradient ``(..., d) -> (..., d)``.  Central differences with
        step ``1e-6 (1 + |z|)`` are used when absent.
    recession : callable, optional
        Exact positively 1-homogeneous recession function.
    growth_constant : float, optional
        A known ``c`` with ``|f(z)| <= c (1 + |z|)``.
    """

    def __init__(self, dim, func, grad=None, recession=None, growth_constant=None,
                 name="custom", params=()):
        self.dim = int(dim)
        self._func = func
        self._grad = grad
        self.recession_exact = recession
        self.growth_constant = growth_constant
        self.name = name
        self.params = tuple(float(p) for p in params)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.dim:
            raise InputError(f"{self.name}: expected vectors of length {self.dim}")
        return self._func(z)

    def gradient(self, z):
        z = np.asarray(z, dtype=float)
        if self._grad is not None:
            return self._grad(z)
        return fd_gradient(self, z)

    def recession(self, z):
        """Recession value; exact when known, otherwise the ray estimate (must converge)."""
        z = np.asarray(z, dtype=float)
        if self.recession_exact is not None:
            return self.recession_exact(z)
        flat = z.reshape(-1, self.dim)
        out = np.empty(len(flat))
        for i, zi in enumerate(flat):
            if not np.any(zi):
                out[i] = 0.0
                continue
            val, ok = recession_estimate(self, zi)
            if not ok:
                raise InputError(f"recession of {self.name} did not converge at {zi.tolist()}")
            out[i] = val
        return out.reshape(z.shape[:-1])

    def scaled(self, c):
        c = float(c)
        rec = self.recession_exact
        return Integrand(
            self.dim, lambda z: c * self._func(z),
            grad=(lambda z: c * self.gradient(z)),
            recession=None if rec is None else (lambda z: c * rec(z)),
            growth_constant=None if self.growth_constant is None else abs(c) * self.growth_constant,
            name=f"{c:g}*{self.name}", params=self.params)

    def to_dict(self):
        return {"name": self.name, "dim": self.dim, "params": list(self.params)}

    def __repr__(self):
        return f"Integrand({self.name!r}, dim={self.dim}, params={list(self.params)})"


def fd_gradient(f, z):
    z = np.asarray(z, dtype=float)
    h = 1e-6 * (1 + _norm(z))
    g = np.empty_like(z)
    for i in range(z.shape[-1]):
        e = np.zeros(z.shape[-1])
        e[i] = 1.0
        step = h[..., None] * e
        g[..., i] = (f(z + step) - f(z - step)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# catalog


def norm_integrand(dim):
    return Integrand(dim, _norm, grad=_unit, recession=_norm, growth_constant=1.0, name="norm")


def area_integrand(dim):
    def f(z):
        return np.sqrt(1 + np.sum(z * z, axis=-1))

    return Integrand(dim, f, grad=lambda z: z / f(z)[..., None], recession=_norm,
                     growth_constant=1.0, name="area")


def linear_integrand(a):
    a = np.asarray(a, dtype=float)

    def f(z):
        return z @ a

    return Integrand(len(a), f, grad=lambda z: np.broadcast_to(a, z.shape).copy(), recession=f,
                     growth_constant=float(np.linalg.norm(a)), name="linear", params=a)


def two_well_integrand(a, eps=0.0):
    """``min(|z - a|, |z + a|) + eps sqrt(1 + |z|^2)``."""
    a = np.asarray(a, dtype=float)
    eps = float(eps)
    if eps < 0:
        raise InputError("two-well: eps must be nonnegative")

    def f(z):
        d = np.minimum(_norm(z - a), _norm(z + a))
        return d + eps * np.sqrt(1 + np.sum(z * z, axis=-1))

    def grad(z):
        zm, zp = z - a, z + a
        near_minus = (_norm(zm) <= _norm(zp))[..., None]
        g = np.where(near_minus, _unit(zm), _unit(zp))
        return g + eps * z / np.sqrt(1 + np.sum(z * z, axis=-1))[..., None]

    return Integrand(len(a), f, grad=grad, recession=lambda z: (1 + eps) * _norm(z),
                     growth_constant=max(1.0, float(np.linalg.norm(a))) + eps,
                     name="two-well", params=list(a) + [eps])


def abs_diff_integrand(dim=2):
    """``|z1| - |z2|``: 1-homogeneous, convex along e1, concave along e2."""
    if dim < 2:
        raise InputError("abs-diff needs dim >= 2")

    def f(z):
        return np.abs(z[..., 0]) - np.abs(z[..., 1])

    def grad(z):
        g = np.zeros_like(z)
        g[..., 0] = np.sign(z[..., 0])
        g[..., 1] = -np.sign(z[..., 1])
        return g

    return Integrand(dim, f, grad=grad, recession=f, growth_constant=1.0, name="abs-diff")


def constant_integrand(c, dim=2):
    c = float(c)
    return Integrand(dim, lambda z: np.full(z.shape[:-1], c), grad=lambda z: np.zeros_like(z),
                     recession=lambda z: np.zeros(np.shape(z)[:-1]), growth_constant=abs(c),
                     name="constant", params=[c])


CATALOG_NAMES = ("norm", "area", "linear", "two-well", "abs-diff")
# entries that are convex, hence quasiconvex for every operator
CONVEX_NAMES = ("norm", "area", "linear")


def catalog_integrand(name, dim=2, params=()):
    params = [float(p) for p in params]
    if name == "norm":
        return norm_integrand(dim)
    if name == "area":
        return area_integrand(dim)
    if name == "linear":
        if len(params) != dim:
            raise InputError(f"linear needs {dim} coefficients")
        return linear_integrand(params)
    if name == "two-well":
        if len(params) not in (dim, dim + 1):
            raise InputError(f"two-well needs {dim} well coordinates and an optional eps")
        eps = params[dim] if len(params) > dim else 0.0
        return two_well_integrand(params[:dim], eps)
    if name == "abs-diff":
        return abs_diff_integrand(dim)
    raise InputError(f"unknown integrand {name!r} (catalog: {', '.join(CATALOG_NAMES)})")


def integrand_from_dict(data):
    try:
        return catalog_integrand(data["name"], int(data["dim"]), data.get("params", []))
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed integrand description: {exc}") from exc


def get_integrand(ref, dim=2, params=()):
    if isinstance(ref, Integrand):
        return ref
    if isinstance(ref, dict):
        return integrand_from_dict(ref)
    if ref in CATALOG_NAMES:
        return catalog_integrand(ref, dim, params)
    if isinstance(ref, (str, os.PathLike)) and os.path.isfile(ref):
        try:
            with open(ref) as fh:
                return integrand_from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read integrand file {ref}: {exc}") from exc
    raise InputError(f"unknown integrand {ref!r}")


# ---------------------------------------------------------------------------
# recession and transform


def recession_estimate(f, z, ts=RECESSION_TS):
    """Upper recession along the ray: ``max_t f(t z)/t`` over a geometric t-grid.

    Returns ``(value, converged)``; converged means the last three quotients
    agree to 1e-2 relative (relative to ``max(|mean|, |z|)``).  An exact
    recession, when the integrand carries one, is returned directly.
    """
    z = np.asarray(z, dtype=float)
    if not np.any(z):
        raise InputError("recession_estimate needs z != 0")
    if f.recession_exact is not None:
        return float(f.recession_exact(z)), True
    ts = np.asarray(ts, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        q = np.asarray(f(ts[:, None] * z[None, :]), dtype=float) / ts
    finite = np.isfinite(q)
    if not finite.all():
        part = float(q[finite].max()) if finite.any() else float("nan")
        return part, False
    tail = q[-3:]
    scale = max(abs(tail.mean()), float(np.linalg.norm(z)))
    converged = bool((tail.max() - tail.min()) < 1e-2 * scale)
    return float(q.max()), converged


class TransformedIntegrand:
    """``T f`` on the closed unit ball: ``(1 - |x|) f(x / (1 - |x|))`` inside, ``f^inf`` on the sphere."""

    def __init__(self, f, sphere_tol=1e-12):
        self.source = f
        self.dim = f.dim
        self.sphere_tol = sphere_tol

    def __call__(self, zhat):
        zhat = np.asarray(zhat, dtype=float)
        r = _norm(zhat)
        if np.any(r > 1 + 1e-10):
            raise InputError("transform_T is defined on the closed unit ball only")
        out = np.empty(r.shape)
        inner = r < 1 - self.sphere_tol
        if np.any(inner):
            ri = r[inner]
            out[inner] = (1 - ri) * self.source(zhat[inner] / (1 - ri)[:, None])
        if np.any(~inner):
            e = zhat[~inner] / r[~inner][:, None]
            out[~inner] = self.source.recession(e)
        return out


def transform_T(f):
    return TransformedIntegrand(f)


def inverse_transform(tf_values, zhat):
    """Recover ``f(z)`` from ``T f`` samples at ``zhat = z/(1+|z|)``: ``f(z) = (1+|z|) Tf(zhat)``."""
    r = _norm(np.asarray(zhat, dtype=float))
    return np.asarray(tf_values) / (1 - r)


def _ball_directions(dim, count):
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    return sphere_points(dim, count)


def hnorm(f, n_dirs=256, radii=None):
    """Estimate ``sup |f(z)| / (1 + |z|)`` on a radial-angular grid plus the recession on the sphere."""
    dirs = _ball_directions(f.dim, n_dirs)
    if radii is None:
        radii = np.concatenate([[0.0], np.geomspace(1e-3, 1e4, 200)])
    pts = radii[:, None, None] * dirs[None, :, :]
    vals = np.abs(f(pts)) / (1 + radii[:, None])
    best = float(vals.max())
    rec = np.abs(f.recession(dirs))
    return max(best, float(rec.max()))


def transform_lip_norm(f, n_dirs=128, n_radii=60):
    """Estimate ``sup |Tf| + lip(Tf)`` on the closed ball (difference quotients of neighbours)."""
    tf = transform_T(f)
    dirs = _ball_directions(f.dim, n_dirs)
    radii = np.linspace(0, 1, n_radii + 1)
    pts = (radii[:, None, None] * dirs[None]).reshape(-1, f.dim)
    vals = tf(pts)
    sup = float(np.abs(vals).max())
    # radial and angular neighbours on the polar grid
    grid = vals.reshape(len(radii), len(dirs))
    p = pts.reshape(len(radii), len(dirs), f.dim)
    quot = []
    dr = np.linalg.norm(p[1:] - p[:-1], axis=-1)
    quot.append(np.abs(grid[1:] - grid[:-1]) / np.maximum(dr, 1e-15))
    if len(dirs) > 1:
        dd = np.linalg.norm(p[:, :, None] - p[:, None], axis=-1)
        dv = np.abs(grid[:, :, None] - grid[:, None])
        mask = dd > 1e-12
        quot.append(np.where(mask, dv / np.where(mask, dd, 1), 0))
    lip = max(float(q.max()) for q in quot)
    return sup + lip


def gradient_bound_from_transform(f, **kw):
    """The raw bound ``sup |Df| <= 3 lip(Tf)`` evaluated with the sampled ``lip(Tf)``."""
    lip = transform_lip_norm(f, **kw)
    return TRANSFORM_GRADIENT_FACTOR * lip


# ---------------------------------------------------------------------------
# directional convexity diagnostics


def _base_points(dim, n_base, spread, seed):
    rng = np.random.default_rng(seed)
    return np.concatenate([np.zeros((1, dim)), rng.uniform(-spread, spread, size=(n_base, dim))])


def check_lambda_convexity(f, cone_samples, base_points=None, n_base=32, spread=2.0,
                           scales=(0.25, 0.5, 1.0, 2.0, 4.0), thetas=(0.25, 0.5, 0.75),
                           seed=0, tol=1e-9):
    """Probe ``f(z + t w) <= t f(z + w) + (1 - t) f(z)`` along cone directions.

    Negative slack is a violation; the most negative slack and its witness are reported.
    """
    cone = np.atleast_2d(np.asarray(cone_samples, dtype=float))
    if cone.size == 0:
        raise InputError("cone_samples must be nonempty")
    zs = _base_points(f.dim, n_base, spread, seed) if base_points is None else np.atleast_2d(base_points)
    ws = (np.asarray(scales)[:, None, None] * cone[None]).reshape(-1, f.dim)
    th = np.asarray(thetas)
    Z = zs[:, None, None, :]
    W = ws[None, :, None, :]
    T = th[None, None, :, None]
    lhs = f(Z + T * W)
    rhs = th[None, None, :] * f(Z + W) + (1 - th[None, None, :]) * f(np.broadcast_to(Z, lhs.shape + (f.dim,)))
    slack = rhs - lhs
    i, j, k = np.unravel_index(np.argmin(slack), slack.shape)
    worst = float(slack[i, j, k])
    return {
        "worst_slack": worst,
        "passed": bool(worst >= -tol),
        "witness": {"z": zs[i].tolist(), "w": ws[j].tolist(), "theta": float(th[k])},
        "probes": int(slack.size),
    }


def three_slope_check(f, cone_samples, base_points=None, n_base=32, spread=2.0,
                      scales=(0.25, 0.5, 1.0, 2.0, 4.0, 16.0), seed=0, tol=1e-9):
    """Probe ``f(z + w) <= f(z) + f^inf(w)`` for w along cone directions."""
    cone = np.atleast_2d(np.asarray(cone_samples, dtype=float))
    zs = _base_points(f.dim, n_base, spread, seed) if base_points is None else np.atleast_2d(base_points)
    ws = (np.asarray(scales)[:, None, None] * cone[None]).reshape(-1, f.dim)
    rec = f.recession(ws)
    slack = f(zs)[:, None] + rec[None, :] - f(zs[:, None, :] + ws[None, :, :])
    i, j = np.unravel_index(np.argmin(slack), slack.shape)
    worst = float(slack[i, j])
    return {"worst_slack": worst, "passed": bool(worst >= -tol),
            "witness": {"z": zs[i].tolist(), "w": ws[j].tolist()}, "probes": int(slack.size)}


# ---------------------------------------------------------------------------
# Clarke support function


class SupportFunction:
    """``G(z) = max_{zeta in D} zeta . z`` over sampled gradients ``D``.

    With ``refine=True`` the gradient at ``refine_radius * z/|z|`` is added to
    the candidates for each query, which sharpens ``G`` in directions the
    fixed sample covers poorly (the value stays a sup over genuine gradients).
    The probe sits far out so that smooth integrands, whose gradients reach
    the recession slope only asymptotically, are resolved to ~1e-12.
    """

    def __init__(self, f, samples, radius, refine_radius=1e6):
        self.f = f
        self.samples = samples
        self.radius = radius
        self.refine_radius = max(radius, refine_radius)

    def __call__(self, z, refine=True):
        z = np.asarray(z, dtype=float)
        flat = z.reshape(-1, self.f.dim)
        g = (flat @ self.samples.T).max(axis=1)
        if refine:
            probe = self.refine_radius * _unit(flat)
            extra = self.f.gradient(probe)
            ok = np.all(np.isfinite(extra), axis=1)
            g = np.where(ok, np.maximum(g, np.sum(np.where(ok[:, None], extra, 0) * flat, axis=1)), g)
        return g.reshape(z.shape[:-1])


def clarke_support_function(f, count=4096, radius=1e3, seed=0):
    """Sample gradients of ``f`` and return ``(G, D_samples)``.

    Half the large-ball budget sits on a low-discrepancy sphere of the given
    radius, half uniformly inside the ball; local clouds of radius 1 and 10
    around the origin add ``count/4`` and ``count/8`` points.
    """
    rng = np.random.default_rng(seed)
    d = f.dim
    half = count // 2
    on_sphere = radius * _ball_directions(d, half)
    u = random_sphere_points(d, count - half, seed)
    inside = radius * rng.random((count - half, 1)) ** (1.0 / d) * u
    clouds = []
    for rad, m in ((1.0, count // 4), (10.0, count // 8)):
        uu = random_sphere_points(d, m, seed + 1 + int(rad))
        clouds.append(rad * rng.random((m, 1)) ** (1.0 / d) * uu)
    pts = np.concatenate([on_sphere, inside] + clouds)
    grads = f.gradient(pts)
    ok = np.all(np.isfinite(grads), axis=1)
    if not ok.all():
        log.warning("clarke_support_function: skipped %d samples with non-finite gradient", int((~ok).sum()))
    grads = grads[ok]
    # identical gradients (piecewise-linear integrands) collapse
    grads = np.unique(np.round(grads, 14), axis=0)
    return SupportFunction(f, grads, radius), grads
