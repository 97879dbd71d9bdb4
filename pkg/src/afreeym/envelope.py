"""Upper estimates of the A-quasiconvex envelope.

Two routes: minimizing the cell average of ``f(z + v)`` over discrete periodic
test fields (either ``v = B u`` for band-supported potentials ``u`` or ``v``
the A-free projection of free Fourier data), and iterated lamination along
sampled wave-cone directions.  Both give upper bounds; neither certifies a
lower bound.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import CheckFailure, InputError
from .operator_symbols import check_constant_rank, potential_for

log = logging.getLogger(__name__)

MAX_GRID = 64
BAND = 2


# ---------------------------------------------------------------------------
# grid fields


class GridField:
    """Vector-valued samples at the cell centres of the periodic unit cube."""

    __array_priority__ = 100  # make ndarray + GridField dispatch to __radd__

    def __init__(self, values, n=None):
        values = np.asarray(values, dtype=float)
        if n is None:
            n = values.ndim - 1
        if values.ndim != n + 1 or n < 1:
            raise InputError("values must have shape (N,)*n + (dim,)")
        N = values.shape[0]
        if any(s != N for s in values.shape[:n]):
            raise InputError("grid must have the same size along every axis")
        self.values = values
        self.n = n
        self.N = N
        self._mean = None

    @property
    def dim(self):
        return self.values.shape[-1]

    @property
    def mean(self):
        if self._mean is None:
            self._mean = self.values.reshape(-1, self.dim).mean(axis=0)
        return self._mean

    def flat(self):
        return self.values.reshape(-1, self.dim)

    def fft(self):
        return np.fft.fftn(self.values, axes=tuple(range(self.n)))

    @classmethod
    def from_fft(cls, coeffs, n):
        return cls(np.fft.ifftn(coeffs, axes=tuple(range(n))).real, n)

    def __add__(self, other):
        if isinstance(other, GridField):
            return GridField(self.values + other.values, self.n)
        return GridField(self.values + np.asarray(other, dtype=float), self.n)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, GridField):
            return GridField(self.values - other.values, self.n)
        return GridField(self.values - np.asarray(other, dtype=float), self.n)

    def __mul__(self, c):
        return GridField(self.values * c, self.n)

    __rmul__ = __mul__


def cell_centers(N, n):
    c = (np.arange(N) + 0.5) / N
    grids = np.meshgrid(*([c] * n), indexing="ij")
    return np.stack(grids, axis=-1)


def frequencies(N, n):
    m = np.fft.fftfreq(N, 1.0 / N)
    grids = np.meshgrid(*([m] * n), indexing="ij")
    return np.stack(grids, axis=-1)


def nyquist_mask(N, n):
    """False on modes with a Nyquist component (even N), whose sign is ambiguous on the grid."""
    m = frequencies(N, n)
    if N % 2:
        return np.ones(m.shape[:-1], dtype=bool)
    return ~np.any(m == -N // 2, axis=-1)


def constant_field(z, N, n):
    z = np.asarray(z, dtype=float)
    return GridField(np.broadcast_to(z, (N,) * n + z.shape).copy(), n)


_MULT_CACHE = {}


def _op_key(op):
    return (op.n, op.order, op.dim_domain, op.dim_codomain,
            tuple((tuple(a), np.asarray(m, dtype=float).tobytes()) for a, m in op.terms))


def multiplier(op, N):
    """``(2 pi i)^k op(m)`` for every integer frequency of an N-grid."""
    key = ("mult", _op_key(op), N)
    if key not in _MULT_CACHE:
        m = frequencies(N, op.n)
        mult = (2j * np.pi) ** op.order * op.matrix(m)
        mult[~nyquist_mask(N, op.n)] = 0.0
        _MULT_CACHE[key] = mult
    return _MULT_CACHE[key]


def _check_grid(op, field):
    if field.n != op.n:
        raise InputError(f"field lives in {field.n} dimensions, operator in {op.n}")


def apply_operator(op, field):
    """Apply a homogeneous operator as a Fourier multiplier (real part kept)."""
    _check_grid(op, field)
    if field.dim != op.dim_domain:
        raise InputError(f"field has {field.dim} components, operator expects {op.dim_domain}")
    M = multiplier(op, field.N)
    out = np.einsum("...ij,...j->...i", M, field.fft())
    return GridField.from_fft(out, field.n)


def apply_B(opB, u):
    """``B u`` for a periodic potential ``u``; constants are annihilated."""
    return apply_operator(opB, u)


def apply_B_adjoint(opB, v):
    """Adjoint of ``apply_B`` with respect to the mean L2 inner product."""
    _check_grid(opB, v)
    M = multiplier(opB, v.N)
    out = np.einsum("...ji,...j->...i", M.conj(), v.fft())
    return GridField.from_fft(out, v.n)


def _rank_report(op):
    key = ("rank", _op_key(op))
    if key not in _MULT_CACHE:
        _MULT_CACHE[key] = check_constant_rank(op, count=400)
    return _MULT_CACHE[key]


def projector(op, N):
    """Orthogonal projectors onto ker A(m) for every nonzero grid frequency (zero at m = 0)."""
    rep = _rank_report(op)
    if not rep.constant:
        raise CheckFailure("operator does not have constant rank; the A-free projector is discontinuous",
                           witness=rep.to_dict())
    key = ("proj", _op_key(op), N)
    if key not in _MULT_CACHE:
        m = frequencies(N, op.n)
        mats = op.matrix(m)
        _, _, vt = np.linalg.svd(mats, full_matrices=True)
        K = vt[..., rep.sampled_rank:, :]
        P = np.einsum("...ki,...kj->...ij", K, K)
        P[(0,) * op.n] = 0.0
        # a Nyquist component may be read as +N/2 or -N/2; keep only content annihilated by every reading
        nyq = ~nyquist_mask(N, op.n)
        for idx in zip(*np.nonzero(nyq)):
            base = m[idx]
            flips = [i for i in range(op.n) if base[i] == -N // 2]
            stack = []
            for signs in product((1, -1), repeat=len(flips)):
                mm = base.copy()
                for i, sg in zip(flips, signs):
                    mm[i] = sg * N / 2
                stack.append(op.matrix(mm))
            S = np.concatenate(stack, axis=0)
            _, sv, vt = np.linalg.svd(S, full_matrices=True)
            r = int(np.sum(sv > 1e-10 * max(sv.max(), 1e-300))) if sv.size else 0
            Kn = vt[r:]
            P[idx] = Kn.T @ Kn
        _MULT_CACHE[key] = P
    return _MULT_CACHE[key]


def project_A_free(opA, v):
    """Project ``v`` onto zero-mean fields annihilated by the discrete symbol of ``opA``."""
    _check_grid(opA, v)
    if v.dim != opA.dim_domain:
        raise InputError(f"field has {v.dim} components, operator expects {opA.dim_domain}")
    P = projector(opA, v.N)
    out = np.einsum("...ij,...j->...i", P, v.fft())
    return GridField.from_fft(out, v.n)


def afree_defect(opA, v):
    """``max_m |A(m) v^(m)| / (|v^(m)| sigma_max(m))`` over nonzero frequencies, plus ``|mean|``."""
    c = v.fft() / v.N ** v.n
    mats = opA.matrix(frequencies(v.N, v.n))
    av = np.linalg.norm(np.einsum("...ij,...j->...i", mats, c), axis=-1)
    nv = np.linalg.norm(c, axis=-1)
    smax = np.linalg.norm(mats, ord=2, axis=(-2, -1))
    mask = (nv > 1e-14 * max(1.0, nv.max())) & (smax > 0)
    ratio = np.where(mask, av / np.where(mask, nv * smax, 1.0), 0.0)
    return float(ratio.max())


def potential_pinv(opB, v):
    """Least-squares potential ``u`` with ``B u = v`` frequency-wise (zero mean)."""
    M = multiplier(opB, v.N)
    pinv = np.linalg.pinv(M, rcond=1e-10)
    out = np.einsum("...ij,...j->...i", pinv, v.fft())
    out[(0,) * v.n] = 0.0
    return GridField.from_fft(out, v.n)


def jet_sup(opB, u):
    """Discrete sup norm of the (l-1)-jet of a potential (finite spectral derivatives)."""
    l = opB.order
    if l == 1:
        return float(np.abs(u.values).max())
    m = frequencies(u.N, u.n)
    uh = u.fft()
    best = 0.0
    from itertools import combinations_with_replacement
    for idx in combinations_with_replacement(range(u.n), l - 1):
        mult = np.prod([(2j * np.pi) * m[..., i] for i in idx], axis=0)
        d = np.fft.ifftn(mult[..., None] * uh, axes=tuple(range(u.n))).real
        best = max(best, float(np.abs(d).max()))
    return best


# ---------------------------------------------------------------------------
# descent


@dataclass
class EnvelopeEstimate:
    value: float
    certificate: GridField
    z: np.ndarray
    iterations: int
    restarts: int
    mode: str
    residual_afree: float
    tile: int = 1
    N: int = 0

    def to_dict(self):
        return {"z": [float(x) for x in self.z], "value": float(self.value), "mode": self.mode,
                "N": int(self.N), "restarts": int(self.restarts),
                "residual_afree": float(self.residual_afree)}


def _band_mask(N, n, band=BAND):
    idx = np.arange(N)
    inner = (idx >= band) & (idx < N - band)
    mask = inner
    for _ in range(n - 1):
        mask = mask[..., None] & inner
    return mask.astype(float)[..., None]


def _small_frequencies(n, reach=3):
    """Primitive integer frequencies with entries in [-reach, reach], one per line through 0."""
    out = []
    rng = range(-reach, reach + 1)
    for m in np.array(np.meshgrid(*([list(rng)] * n), indexing="ij")).reshape(n, -1).T:
        if not np.any(m) or np.gcd.reduce(np.abs(m)) != 1:
            continue
        first = m[np.nonzero(m)[0][0]]
        if first < 0:
            continue
        out.append(m)
    return sorted(out, key=lambda v: (np.abs(v).sum(), tuple(v)))


def laminate_candidates(f, z, opA, N, n, count, dirs_per_kernel=16):
    """Best simple laminates ``w h(m.x)`` for small integer frequencies m, ranked by cell average.

    Returns a list of ``(value, m, w, theta)`` where the field takes the value
    ``(1 - theta) w`` on a fraction theta of the cells and ``-theta w`` elsewhere.
    """
    thetas = np.arange(1, N) / N
    amps = np.concatenate([np.linspace(0.02, 1, 25), np.linspace(1.1, 8, 40)])
    cands = []
    for m in _small_frequencies(n):
        mats = opA.matrix(m.astype(float))
        _, sv, vt = np.linalg.svd(mats, full_matrices=True)
        rank = int(np.sum(sv > 1e-10 * sv.max())) if sv.size and sv.max() > 0 else 0
        K = vt[rank:]
        if len(K) == 0:
            continue
        if len(K) == 1:
            W = K
        else:
            from .operator_symbols import sphere_points
            W = sphere_points(len(K), dirs_per_kernel) @ K
        # symmetric in w -> -w with theta -> 1 - theta, so all signs are covered
        sw = amps[:, None, None] * W[None]  # (A, D, dim)
        t = thetas[:, None, None, None]
        vals = t[..., 0] * f(z + (1 - t) * sw[None]) + (1 - t[..., 0]) * f(z - t * sw[None])
        i, a, d = np.unravel_index(np.argmin(vals), vals.shape)
        cands.append((float(vals[i, a, d]), m, amps[a] * W[d], float(thetas[i])))
    cands.sort(key=lambda c: c[0])
    return cands[:count]


def laminate_field(m, w, theta, N, n):
    """Zero-mean two-valued laminate on the grid with the realized volume fraction."""
    x = cell_centers(N, n)
    phase = np.mod(x @ np.asarray(m, dtype=float) - 0.5 / N * np.sum(m), 1.0)
    inside = phase < theta - 1e-12
    tr = inside.mean()
    h = np.where(inside, 1 - tr, -tr)
    return h[..., None] * np.asarray(w, dtype=float)


def _smooth_seed(dim, N, n, rng, modes=3):
    m = frequencies(N, n)
    coeff = rng.standard_normal(m.shape[:-1] + (dim,)) + 1j * rng.standard_normal(m.shape[:-1] + (dim,))
    keep = (np.abs(m).max(axis=-1) <= modes)[..., None]
    field = np.fft.ifftn(coeff * keep, axes=tuple(range(n))).real
    field /= max(np.abs(field).max(), 1e-12)
    return field * rng.uniform(0.3, 1.5)


def envelope_upper(f, z, opA=None, opB=None, mode="projection", N=32, restarts=8, max_iters=400,
                   eps_sup=None, jet_budget=1.0, seed=0, n=None, tol=1e-10):
    """Upper estimate of ``f^qc(z)`` by descent over discrete test fields.

    Parameters
    ----------
    f : Integrand
    z : array_like
        Base point in V.
    opA, opB : OperatorSpec
        The constraint operator and (for potential mode or ``eps_sup``) its potential.
        For catalog operators the missing one is filled in.
    mode : {"projection", "potential"}
        ``projection`` descends on A-free fields through the Fourier projector;
        ``potential`` descends on potentials vanishing in a two-cell band next to
        the cube boundary and sets ``v = B u``.
    eps_sup : float, optional
        Bound on the sup norm of the (l-1)-jet of the potential.  The bound is
        met by tiling: the returned certificate is the base field repeated
        ``tile`` times per axis (which leaves the cell average unchanged and
        divides the jet by ``tile``), and the base potential is kept inside
        ``tile * eps_sup`` by projection after each step.
    jet_budget : float
        Target jet bound for the base cell when ``eps_sup`` is given; ``tile``
        is the smallest integer with ``tile * eps_sup >= jet_budget``.
    """
    z = np.asarray(z, dtype=float)
    if opA is None and opB is None:
        raise InputError("envelope_upper needs opA or opB")
    if opB is None and opA is not None:
        opB = potential_for(opA)
    if mode not in ("projection", "potential"):
        raise InputError(f"unknown mode {mode!r}")
    if mode == "potential" and opB is None:
        raise InputError("potential mode needs a potential operator B")
    if eps_sup is not None and opB is None:
        raise InputError("eps_sup needs a potential operator B")
    n = n or (opA.n if opA is not None else opB.n)
    if n > 2 or N > MAX_GRID:
        raise InputError(f"desk-scale limits: n <= 2 and N <= {MAX_GRID}")
    dimV = f.dim
    if z.shape != (dimV,):
        raise InputError(f"z must have length {dimV}")
    rng = np.random.default_rng(seed)
    f0 = float(f(z))
    c = f.growth_constant if f.growth_constant is not None else 1.0
    floor = -10.0 * c * (1 + np.linalg.norm(z))

    use_potential = mode == "potential" or eps_sup is not None
    tile = 1
    bound = None
    if eps_sup is not None:
        if eps_sup <= 0:
            raise InputError("eps_sup must be positive")
        tile = int(np.ceil(jet_budget / eps_sup - 1e-12))
        bound = tile * eps_sup
    mask = _band_mask(N, n) if mode == "potential" else 1.0
    shape = (N,) * n

    if use_potential:
        dimU = opB.dim_domain

        def to_field(u):
            return apply_B(opB, GridField(u, n)).values

        def grad_param(g):
            return apply_B_adjoint(opB, GridField(g, n)).values * mask

        def constrain(u):
            u = u * mask
            if bound is not None:
                if opB.order == 1:
                    u = np.clip(u, -bound, bound)
                else:
                    s = jet_sup(opB, GridField(u, n))
                    if s > bound:
                        u = u * (bound / s)
            return u
    else:
        if opA is None:
            raise InputError("projection mode needs opA")

        def to_field(c_):
            return c_

        def grad_param(g):
            return project_A_free(opA, GridField(g, n)).values

        def constrain(c_):
            return c_

    def objective(p):
        v = to_field(p)
        return float(np.mean(f(z + v))), v

    lam = laminate_candidates(f, z, opA, N, n, max(0, restarts - 1)) if opA is not None else []

    def seeds():
        yield np.zeros(shape + ((opB.dim_domain,) if use_potential else (dimV,)))
        for r in range(1, restarts):
            if r - 1 < len(lam) and (r % 4 != 0 or len(lam) >= restarts - 1):
                _, m, w, theta = lam[r - 1]
                v = laminate_field(m, w, theta, N, n)
            else:
                v = _smooth_seed(dimV, N, n, rng)
            if use_potential:
                yield constrain(potential_pinv(opB, GridField(v, n)).values)
            elif opA is not None:
                yield project_A_free(opA, GridField(v, n)).values
            else:
                yield v

    best = (f0, np.zeros(shape + (dimV,)), None)
    total_iters = 0
    n_restarts = 0
    for p in seeds():
        n_restarts += 1
        p = constrain(p)
        J, v = objective(p)
        step = 1.0
        stall = 0
        for it in range(max_iters):
            g = f.gradient(z + v)
            d = grad_param(g)
            dn = float(np.mean(d * d))
            if dn < 1e-24:
                break
            accepted = False
            for _ in range(40):
                q = constrain(p - step * d)
                Jq, vq = objective(q)
                if Jq <= J - 1e-4 * float(np.mean((q - p) * d)) and Jq < J:
                    accepted = True
                    break
                step *= 0.5
            total_iters += 1
            if not accepted:
                break
            gain = J - Jq
            p, J, v = q, Jq, vq
            step = min(step * 2.0, 1e3)
            if J < floor:
                raise CheckFailure("suspected non-spanning cone or bad growth constant",
                                   witness={"value": J, "floor": floor, "z": z.tolist()})
            stall = stall + 1 if gain < tol * max(1.0, abs(J)) else 0
            if stall >= 5:
                break
        if J < best[0]:
            best = (J, v.copy(), p.copy())
    value, vbest, _ = best
    cert = GridField(vbest, n)
    resid = afree_defect(opA, cert) if opA is not None else 0.0
    label = mode
    return EnvelopeEstimate(value=value, certificate=cert, z=z, iterations=total_iters,
                            restarts=n_restarts, mode=label, residual_afree=resid, tile=tile, N=N)


def tile_field(field, j):
    """Repeat a periodic cell field ``j`` times per axis (a finer periodic grid)."""
    return GridField(np.tile(field.values, (j,) * field.n + (1,)), field.n)


# ---------------------------------------------------------------------------
# lamination


class LaminationEnvelope:
    """Result of iterated lamination; callable on points of V."""

    def __init__(self, f, depth, evaluator, lattice=None, values=None):
        self.f = f
        self.depth = depth
        self._eval = evaluator
        self.lattice = lattice
        self.values = values  # list of lattice arrays f_0 .. f_D (lattice method)
        self.dim = f.dim

    def __call__(self, z):
        return self._eval(np.asarray(z, dtype=float), self.depth)

    def level(self, k):
        return lambda z: self._eval(np.asarray(z, dtype=float), k)

    def as_integrand(self):
        from .integrands import Integrand
        return Integrand(self.dim, self, recession=self.f.recession_exact,
                         growth_constant=self.f.growth_constant, name=f"lam{self.depth}[{self.f.name}]")


def _interp(values, lo, h, z, f):
    """Multilinear interpolation of lattice values; points off the lattice fall back to ``f``."""
    from scipy.ndimage import map_coordinates
    npts = values.shape[0]
    t = (z - lo) / h
    outside = np.any((t < -1e-9) | (t > npts - 1 + 1e-9), axis=-1)
    coords = np.moveaxis(np.clip(t, 0, npts - 1), -1, 0).reshape(z.shape[-1], -1)
    out = map_coordinates(values, coords, order=1, mode="nearest").reshape(z.shape[:-1])
    if np.any(outside):
        out[outside] = f(z[outside])
    return out


def _unique_lines(vectors, tol=1e-9):
    """Drop directions that repeat up to sign."""
    out = []
    for v in vectors:
        if not any(abs(abs(float(v @ u)) - 1) < tol for u in out):
            out.append(v)
    return np.array(out)


def lamination_envelope(f, cone_samples, depth=2, thetas=None, scales=None, lattice=(-3.0, 3.0, 61),
                        method="auto"):
    """Iterated lamination ``f_{k+1}(z) = min(f_k(z), min_{w, t} t f_k(z+(1-t)w) + (1-t) f_k(z-t w))``.

    ``method="lattice"`` memoizes each level on ``[lo, hi]^dim`` with
    multilinear interpolation (the default for dim <= 2); ``"recursive"``
    evaluates the recursion directly at the query points, which is the only
    practical option in higher dimensions.  Points outside the lattice are
    evaluated with ``f`` itself, which keeps every level an upper bound.
    """
    cone = np.atleast_2d(np.asarray(cone_samples, dtype=float))
    if cone.size == 0:
        raise InputError("cone_samples must be nonempty")
    cone = _unique_lines(cone / np.linalg.norm(cone, axis=1, keepdims=True))
    dim = f.dim
    lo, hi, npts = lattice
    h = (hi - lo) / (npts - 1)
    if method == "auto":
        method = "lattice" if dim <= 2 else "recursive"
    if thetas is None:
        # the recursive tree has (directions * thetas)^depth leaves
        thetas = np.linspace(0.1, 0.9, 9 if method == "lattice" else 5)
    thetas = np.asarray(thetas, dtype=float)
    if scales is None:
        scales = 2 * h * np.arange(1, npts // 2 + 1) if method == "lattice" else np.linspace(0.25, hi - lo, 6)
    scales = np.asarray(scales, dtype=float)
    W = (scales[:, None, None] * cone[None]).reshape(-1, dim)

    if method == "lattice":
        if np.max(scales) > hi - lo:
            warnings.warn("lamination scales exceed the lattice; off-lattice points use f", stacklevel=2)
        axes = [np.linspace(lo, hi, npts)] * dim
        Z = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        levels = [f(Z)]
        flatZ = Z.reshape(-1, dim)
        for _ in range(depth):
            prev = levels[-1]
            cur = prev.reshape(-1).copy()
            for t in thetas:
                # chunk over directions to bound memory
                for s0 in range(0, len(W), 64):
                    Wc = W[s0:s0 + 64]
                    a = _interp(prev, lo, h, flatZ[:, None, :] + (1 - t) * Wc[None], f)
                    b = _interp(prev, lo, h, flatZ[:, None, :] - t * Wc[None], f)
                    cur = np.minimum(cur, (t * a + (1 - t) * b).min(axis=1))
            levels.append(cur.reshape(prev.shape))

        def evaluate(zq, k):
            return _interp(levels[k], lo, h, zq, f)

        return LaminationEnvelope(f, depth, evaluate, lattice=(lo, hi, npts), values=levels)

    if method != "recursive":
        raise InputError(f"unknown method {method!r}")

    def evaluate(zq, k):
        if k == 0:
            return f(zq)
        base = zq[..., None, None, :]
        tt = thetas[None, :, None]
        p1 = base + (1 - tt) * W[:, None, :]
        p2 = base - tt * W[:, None, :]
        vals = thetas * evaluate(p1, k - 1) + (1 - thetas) * evaluate(p2, k - 1)
        vals = vals.reshape(zq.shape[:-1] + (-1,))
        return np.minimum(evaluate(zq, k - 1), vals.min(axis=-1))

    return LaminationEnvelope(f, depth, evaluate)
