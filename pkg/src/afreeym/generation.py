"""Constructive generating sequences on the periodic grid and their empirical Young measures.

Fields are :class:`GridField` samples at cell centres of an ``N^n`` grid.
Potentials are turned into fields with the spectral ``apply_B``; a field
``z + B u`` is therefore discretely A-free whenever the pair (A, B) is exact.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from itertools import combinations_with_replacement, product

import numpy as np

from .envelope import (GridField, apply_B, cell_centers, constant_field, frequencies, nyquist_mask,
                       potential_pinv)
from .errors import CheckFailure, InputError
from .integrands import (Integrand, abs_diff_integrand, area_integrand, linear_integrand, norm_integrand,
                         transform_lip_norm, two_well_integrand)
from .young_measures import (Cell, DiscreteYoungMeasure, VectorMeasure, afree_residual, barycentre,
                             homogeneous_certificate, pair)
from .operator_symbols import wave_cone_membership

log = logging.getLogger(__name__)

SHELL_DELTA = 0.05
PROFILE_MASS = 8.0 / 15.0  # integral of (1 - 4 s^2)^2 over [-1/2, 1/2]


class BudgetExceeded(CheckFailure):
    pass


# ---------------------------------------------------------------------------
# mollifier


def _profile_1d(s):
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) <= 0.5, (1 - 4 * s ** 2) ** 2, 0.0) / PROFILE_MASS


class Mollifier:
    """Tensor-product bump ``prod (1 - 4 (x_i/t)^2)^2`` on the closed cube ``[-t/2, t/2]^n``, unit integral."""

    def __init__(self, t, n=2):
        if not t > 0:
            raise InputError("mollifier scale must be positive")
        self.t = float(t)
        self.n = int(n)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.prod(_profile_1d(x / self.t), axis=-1) / self.t ** self.n

    @property
    def gradient_bound(self):
        """``max |grad profile|`` at ``t = 1``, maximized on a tensor grid of the cube."""
        s = np.linspace(-0.5, 0.5, 401 if self.n <= 2 else 81)
        p = _profile_1d(s)
        dp = np.where(np.abs(s) <= 0.5, 16 * s * (4 * s ** 2 - 1), 0.0) / PROFILE_MASS
        sq = 0.0
        for i in range(self.n):
            term = np.ones(())
            for k in range(self.n):
                term = np.multiply.outer(term, dp if k == i else p)
            sq = sq + term ** 2
        return float(np.sqrt(sq).max())

    def kernel(self, N):
        """Periodic discrete kernel on an N-grid, normalized to unit sum."""
        if self.t * N < 2:
            raise InputError(f"mollifier scale {self.t} is below two cells of an {N}-grid")
        k1 = _profile_1d(np.fft.fftfreq(N) / self.t)  # wrapped offsets i/N
        k = k1
        for _ in range(self.n - 1):
            k = np.multiply.outer(k, k1)
        return k / k.sum()


def mollify(v, moll, N=None):
    """Periodic convolution of a vector measure with the mollifier on an N-grid (atoms at nearest cell)."""
    N = int(N or v.grid)
    if N % v.grid:
        raise InputError("output grid must be a multiple of the measure grid")
    if moll.n != v.n:
        raise InputError("mollifier and measure live in different dimensions")
    K = moll.kernel(N)
    f = N // v.grid
    dens = v.ac_density.reshape((v.grid,) * v.n + (v.dim,))
    for ax in range(v.n):
        dens = np.repeat(dens, f, axis=ax)
    dens = dens.copy()
    for x, m, p in v.atoms:
        idx = tuple(np.minimum((np.asarray(x) * N).astype(int), N - 1))
        dens[idx] += m * np.asarray(p) * N ** v.n
    axes = tuple(range(v.n))
    out = np.fft.ifftn(np.fft.fftn(dens, axes=axes) * np.fft.fftn(K)[..., None], axes=axes).real
    return GridField(out, v.n)


# ---------------------------------------------------------------------------
# plans


class SequencePlan:
    """Ordered snapshots of one construction plus its parameters."""

    def __init__(self, snapshots, construction="", params=None):
        snapshots = list(snapshots)
        if not snapshots:
            raise InputError("a plan needs at least one snapshot")
        s0 = snapshots[0]
        for s in snapshots:
            if s.values.shape != s0.values.shape or s.n != s0.n:
                raise InputError("all snapshots must share grid and dimension")
        self.snapshots = snapshots
        self.construction = construction
        self.params = dict(params or {})

    @property
    def grid(self):
        return self.snapshots[0].N

    @property
    def n(self):
        return self.snapshots[0].n

    @property
    def dim(self):
        return self.snapshots[0].dim

    def __len__(self):
        return len(self.snapshots)

    def header(self):
        return {"grid": self.grid, "n": self.n, "dimV": self.dim, "construction": self.construction,
                "params": _jsonable(self.params)}

    def save(self, path):
        os.makedirs(path, exist_ok=True)
        names = []
        for k, s in enumerate(self.snapshots):
            name = f"snapshot_{k:03d}"
            np.save(os.path.join(path, name + ".npy"), s.values)
            with open(os.path.join(path, name + ".json"), "w") as fh:
                json.dump(dict(self.header(), index=k), fh, indent=1, sort_keys=True)
            names.append(name)
        with open(os.path.join(path, "plan.json"), "w") as fh:
            json.dump(dict(self.header(), snapshots=names), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        try:
            with open(os.path.join(path, "plan.json")) as fh:
                head = json.load(fh)
            snaps = []
            for name in head["snapshots"]:
                vals = np.load(os.path.join(path, name + ".npy"))
                snaps.append(GridField(vals, int(head["n"])))
        except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read plan {path}: {exc}") from exc
        if snaps[0].N != head["grid"] or snaps[0].dim != head["dimV"]:
            raise InputError("plan header does not match the stored arrays")
        return cls(snaps, head.get("construction", ""), head.get("params", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def sum_sequences(plan1, plan2):
    """Snapshot-wise sum of two plans on the same grid."""
    if len(plan1) != len(plan2):
        raise InputError("plans have different lengths")
    if plan1.snapshots[0].values.shape != plan2.snapshots[0].values.shape:
        raise InputError("plans live on different grids")
    snaps = [a + b for a, b in zip(plan1.snapshots, plan2.snapshots)]
    return SequencePlan(snaps, f"sum({plan1.construction},{plan2.construction})",
                        {"first": plan1.params, "second": plan2.params})


# ---------------------------------------------------------------------------
# tiling and convex combination


def resample(u, M):
    """Trigonometric resampling of a periodic grid field to the cell centres of an M-grid (M divides N)."""
    N = u.N
    if M == N:
        return u
    if N % M:
        raise InputError("resampling target must divide the grid size")
    r = N // M
    shift = (r - 1) / 2.0  # fine-cell offset between fine and coarse centres
    m = frequencies(N, u.n)
    c = u.fft()
    keep = np.all(np.abs(m) < M / 2, axis=-1)
    phase = np.exp(2j * np.pi * shift * m.sum(axis=-1) / N)
    c = np.where(keep[..., None], c * phase[..., None], 0)
    fine = np.fft.ifftn(c, axes=tuple(range(u.n))).real
    sl = (slice(None, None, r),) * u.n
    return GridField(fine[sl].copy(), u.n)


def _as_potential(u, M, n, dim=None):
    if isinstance(u, GridField):
        return resample(u, M).values
    pts = cell_centers(M, n)
    vals = np.asarray(u(pts), dtype=float)
    return vals.reshape((M,) * n + (-1,))


def tile_potential(u, j, l, N=None):
    """``j^{-l} u(j x)`` on the N-grid (N defaults to the grid of ``u``)."""
    j = int(j)
    N = int(N or u.N)
    if j < 1 or N % j:
        raise InputError(f"grid size {N} is not divisible by j={j}")
    n = u.n if isinstance(u, GridField) else 2
    coarse = _as_potential(u, N // j, n)
    return GridField(np.tile(coarse, (j,) * n + (1,)) * float(j) ** (-l), n)


def tile(u, j, z, opB):
    """``z + B(j^{-l} u(j x))``: j^n shrunken copies of the potential ``u``."""
    phi = tile_potential(u, j, opB.order)
    return apply_B(opB, phi) + np.asarray(z, dtype=float)


def jet_l1(u, l):
    """``||D^{l-1} u||_{L^1}`` (Frobenius norm over all partials of order l-1, cell quadrature)."""
    vals = _jet(u, l - 1)
    return float(np.mean(np.linalg.norm(vals, axis=-1)))


def _jet(u, order):
    if order == 0:
        return u.values
    m = frequencies(u.N, u.n)
    uh = u.fft()
    out = []
    for idx in combinations_with_replacement(range(u.n), order):
        mult = np.prod([(2j * np.pi) * m[..., i] for i in idx], axis=0)
        mult = np.where(nyquist_mask(u.N, u.n), mult, 0)
        out.append(np.fft.ifftn(mult[..., None] * uh, axes=tuple(range(u.n))).real)
    return np.concatenate(out, axis=-1)


def sobolev_l1(u, l):
    """``W^{l-1,1}`` norm: sum of L1 norms of the jets of order 0..l-1."""
    return float(sum(np.mean(np.linalg.norm(_jet(u, k), axis=-1)) for k in range(l)))


def _check_band(u, name, rtol=1e-8):
    vals = u.values
    scale = np.abs(vals).max()
    if scale == 0:
        return
    frame = np.zeros(vals.shape[:-1], dtype=bool)
    for ax in range(u.n):
        idx = [slice(None)] * u.n
        idx[ax] = 0
        frame[tuple(idx)] = True
        idx[ax] = -1
        frame[tuple(idx)] = True
    if np.abs(vals[frame]).max() > rtol * scale:
        raise InputError(f"{name} is not supported in the interior of the cell")


def combine(u0, u1, p, q, z, opB):
    """Place ``p^n`` copies of ``u1`` and ``q^n - p^n`` copies of ``u0`` on the q-mesh.

    The resulting mixture weight is ``t = (p/q)^n``.
    """
    p, q = int(p), int(q)
    if not 0 <= p < q:
        raise InputError("need 0 <= p < q")
    if p > 0 and math.gcd(p, q) != 1:
        raise InputError("p and q must be coprime")
    N, n = u0.N, u0.n
    if u1.values.shape != u0.values.shape:
        raise InputError("potentials live on different grids")
    if N % q:
        raise InputError(f"grid size {N} is not divisible by q={q}")
    _check_band(u0, "u0")
    _check_band(u1, "u1")
    M = N // q
    c0 = resample(u0, M).values
    c1 = resample(u1, M).values
    phi = np.empty_like(u0.values)
    for block in product(range(q), repeat=n):
        sl = tuple(slice(b * M, (b + 1) * M) for b in block)
        phi[sl] = c1 if all(b < p for b in block) else c0
    phi = GridField(phi * float(q) ** (-opB.order), n)
    return apply_B(opB, phi) + np.asarray(z, dtype=float)


def bump_potential(N, n=2, dim=1, amplitude=1.0, radius=0.35, center=0.5, direction=None):
    """Radial bump ``a (1 - r^2/R^2)^4`` around the cell centre (zero near the boundary)."""
    x = cell_centers(N, n)
    r2 = np.sum((x - center) ** 2, axis=-1) / radius ** 2
    b = amplitude * np.where(r2 < 1, (1 - r2) ** 4, 0.0)
    d = np.ones(dim) if direction is None else np.asarray(direction, dtype=float)
    return GridField(b[..., None] * d, n)


# ---------------------------------------------------------------------------
# plane waves and spikes


def lattice_direction(xi, reach=8, tol=1e-9):
    """Primitive integer vector parallel to ``xi`` (entries up to ``reach``)."""
    xi = np.asarray(xi, dtype=float)
    nrm = np.linalg.norm(xi)
    if nrm == 0:
        raise InputError("frequency must be nonzero")
    u = xi / nrm
    best = None
    for k in product(range(-reach, reach + 1), repeat=len(xi)):
        k = np.array(k)
        if not k.any() or math.gcd(*[int(abs(v)) for v in k]) != 1:
            continue
        if np.linalg.norm(k / np.linalg.norm(k) - u) < tol:
            if best is None or np.abs(k).sum() < np.abs(best).sum():
                best = k
    if best is None:
        raise InputError(f"direction {xi.tolist()} is not a rational lattice direction")
    return best


def square_profile(theta):
    """Mean-zero duty-theta profile: ``1 - theta`` on ``[0, theta)``, ``-theta`` elsewhere."""
    theta = float(theta)
    if not 0 <= theta <= 1:
        raise InputError("duty must lie in [0, 1]")

    def h(s):
        return np.where(np.mod(s, 1.0) < theta, 1 - theta, -theta)

    return h


def _phase(k, j, N, n):
    x = cell_centers(N, n)
    return j * (x @ np.asarray(k, dtype=float))


def plane_wave(opA, xi, w, profile, j, N, n=None):
    """``w h(j k.x)`` with ``k`` the primitive lattice vector along ``xi``; requires ``A(xi) w = 0``."""
    n = n or opA.n
    w = np.asarray(w, dtype=float)
    xi = np.asarray(xi, dtype=float)
    unit = xi / np.linalg.norm(xi)
    nw = np.linalg.norm(w)
    if nw and np.linalg.norm(opA.matrix(unit) @ w) > 1e-8 * nw:
        raise InputError("w is not in the kernel of A(xi)")
    k = lattice_direction(xi)
    s = _phase(k, j, N, n)
    vals = np.asarray(profile(s), dtype=float)[..., None] * w
    return GridField(vals, n)


def concentrating_spike(opA, xi, w, t, x0, widths, N=64):
    """Plan ``v_j = t (w/|w|) phi_{r_j}(x - x0)``: unit-integral bumps of shrinking width carrying mass t."""
    w = np.asarray(w, dtype=float)
    nw = np.linalg.norm(w)
    n = opA.n
    if nw == 0:
        raise InputError("w must be nonzero")
    xi = np.asarray(xi, dtype=float)
    if np.linalg.norm(opA.matrix(xi / np.linalg.norm(xi)) @ w) > 1e-8 * nw:
        raise InputError("w is not in the kernel of A(xi)")
    snaps = []
    for r in widths:
        if t == 0:
            snaps.append(constant_field(np.zeros(len(w)), N, n))
            continue
        v = VectorMeasure(n, 1, np.zeros((1, len(w))), [(np.asarray(x0, dtype=float), float(t), w / nw)])
        snaps.append(mollify(v, Mollifier(r, n), N))
    return SequencePlan(snaps, "spike", {"t": t, "x0": list(map(float, x0)), "w": w.tolist(),
                                         "widths": list(map(float, widths)), "xi": xi.tolist()})


# ---------------------------------------------------------------------------
# empirical Young measures


def _bin_rows(pts, w):
    if len(pts) == 0:
        return pts, w
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    out = np.zeros(len(uniq))
    np.add.at(out, inv.ravel(), w)
    return uniq, out


def empirical_ym(field, cells=8, delta=SHELL_DELTA, value_step=None, concentration="diffuse"):
    """Young measure read off a field (or the last snapshot of a plan).

    Samples are pushed to the ball by ``z -> z/(1+|z|)`` with weight ``1+|z|``.
    Per spatial cell, samples with ``|z^| <= 1 - delta`` form the oscillation
    measure (Lebesgue weights renormalized); the rest is concentration with
    sphere atoms ``z/|z|`` weighted by ``1+|z|``.  ``concentration="atomic"``
    stores each cell's concentration as a singular atom at the weighted
    location of its shell samples instead of a density.  ``value_step`` bins
    ball coordinates to a lattice of that spacing.
    """
    if isinstance(field, SequencePlan):
        field = field.snapshots[-1]
    N, n, dim = field.N, field.n, field.dim
    cells = int(cells)
    if N % cells:
        raise InputError("cells per axis must divide the grid size")
    if concentration not in ("diffuse", "atomic"):
        raise InputError("concentration must be 'diffuse' or 'atomic'")
    b = N // cells
    vals = field.values.reshape((cells, b) * n + (dim,))
    # bring block axes next to each other: (c1, c2, ..., b1, b2, ..., dim)
    order = list(range(0, 2 * n, 2)) + list(range(1, 2 * n, 2)) + [2 * n]
    blocks = vals.transpose(order).reshape(cells ** n, b ** n, dim)
    xs = cell_centers(N, n).reshape((cells, b) * n + (n,)).transpose(order).reshape(cells ** n, b ** n, n)
    out_cells, sing, flags = [], [], []
    M = b ** n
    for ci in range(cells ** n):
        S = blocks[ci]
        r = np.linalg.norm(S, axis=1)
        zh = S / (1 + r)[:, None]
        shell = np.linalg.norm(zh, axis=1) > 1 - delta
        inner = ~shell
        if inner.any():
            pts = S[inner]
            if value_step:
                q = np.round(zh[inner] / value_step) * value_step
                qr = np.minimum(np.linalg.norm(q, axis=1), 1 - delta)
                qn = np.linalg.norm(q, axis=1)
                q = np.where(qn[:, None] > 0, q * (qr / np.where(qn > 0, qn, 1))[:, None], 0)
                pts = q / (1 - qr)[:, None]
            pts, w = _bin_rows(pts, np.full(len(pts), 1.0))
            w = w / w.sum()
        else:
            pts, w = np.zeros((1, dim)), np.ones(1)
            flags.append({"cell": ci, "flag": "no interior samples; oscillation set to delta_0"})
        lam, sw, se = 0.0, np.zeros(0), np.zeros((0, dim))
        if shell.any():
            mass_w = 1 + r[shell]
            e = S[shell] / r[shell][:, None]
            if value_step:
                e = np.round(e / value_step) * value_step
                e = e / np.linalg.norm(e, axis=1, keepdims=True)
            se, sw = _bin_rows(e, mass_w)
            sw = sw / sw.sum()
            lam = float(mass_w.sum() / M)
        if concentration == "atomic" and lam > 0:
            loc = (mass_w[:, None] * xs[ci][shell]).sum(axis=0) / mass_w.sum()
            from .young_measures import SingularAtom
            sing.append(SingularAtom(loc, lam * cells ** (-n), sw, se))
            lam, sw, se = 0.0, np.zeros(0), np.zeros((0, dim))
        out_cells.append(Cell(w, pts, lam, sw, se))
    nu = DiscreteYoungMeasure(n, cells, dim, out_cells, sing)
    nu.meta = {"flags": flags, "delta": delta, "value_step": value_step, "grid": N}
    return nu


# ---------------------------------------------------------------------------
# test bank


class Eta:
    """Lipschitz weight on the closed unit cube: constant, affine or radial tent."""

    def __init__(self, kind, **params):
        if kind not in ("const", "affine", "tent"):
            raise InputError(f"unknown eta kind {kind!r}")
        self.kind = kind
        self.params = params

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "const":
            return np.full(x.shape[:-1], float(p["c"]))
        if self.kind == "affine":
            return p["c"] + x @ np.asarray(p["g"], dtype=float)
        d = np.linalg.norm(x - np.asarray(p["center"], dtype=float), axis=-1)
        return p["height"] * np.maximum(0.0, 1 - d / p["radius"])

    def lip_norm(self, n):
        """``sup |eta| + lip(eta)`` over the unit cube."""
        p = self.params
        if self.kind == "const":
            return abs(float(p["c"]))
        if self.kind == "affine":
            g = np.asarray(p["g"], dtype=float)
            verts = np.array(list(product((0.0, 1.0), repeat=n)))
            return float(np.abs(p["c"] + verts @ g).max() + np.linalg.norm(g))
        return float(abs(p["height"]) * (1 + 1 / p["radius"]))

    def describe(self):
        return {"kind": self.kind, **_jsonable(self.params)}


@dataclass
class BankEntry:
    eta: Eta
    phi: Integrand
    eta_scale: float
    phi_scale: float
    label: str = ""

    def weight(self, x):
        return self.eta(x) / self.eta_scale

    def pair_field(self, v):
        x = cell_centers(v.N, v.n).reshape(-1, v.n)
        return float(np.mean(self.weight(x) * self.phi(v.flat()))) / self.phi_scale

    def pair_ym(self, nu):
        return pair(nu, self.weight, self.phi) / self.phi_scale


_PHI_NORM_CACHE = {}


def _normalized(phi):
    key = (phi.name, phi.dim, tuple(phi.params))
    if key not in _PHI_NORM_CACHE:
        _PHI_NORM_CACHE[key] = max(transform_lip_norm(phi), 1e-12)
    return _PHI_NORM_CACHE[key]


def make_bank(dim, n=2, size=5):
    """Deterministic bank of ``(eta, Phi)`` pairs scaled to ``|eta|_LIP <= 1`` and ``|T Phi|_LIP <= 1``.

    The first five entries use the catalog integrands; larger banks cycle the
    integrands against affine weights and tents on a dyadic pattern of centres.
    """
    e1 = np.eye(dim)[0]
    ones = np.ones(dim) / np.sqrt(dim)
    phis = [area_integrand(dim), norm_integrand(dim), two_well_integrand(e1, 0.1), linear_integrand(ones)]
    if dim >= 2:
        phis.append(abs_diff_integrand(dim))
    else:
        phis.append(linear_integrand(-ones))
    g = np.zeros(n)
    g[0] = 1.0
    etas = [Eta("const", c=1.0), Eta("const", c=1.0), Eta("affine", c=0.0, g=g), Eta("const", c=1.0),
            Eta("affine", c=1.0, g=-g)]
    # extra weights: tents and affine ramps in every axis
    centres = [np.full(n, 0.5)] + [np.array(c) for c in product((0.25, 0.75), repeat=n)]
    extra = [Eta("tent", center=c.tolist(), radius=0.4, height=1.0) for c in centres]
    for ax in range(n):
        gg = np.zeros(n)
        gg[ax] = 1.0
        extra.append(Eta("affine", c=0.0, g=gg))
    k = 0
    while len(etas) < size:
        etas.append(extra[k % len(extra)])
        k += 1
    bank = []
    for i in range(size):
        phi = phis[i % len(phis)]
        eta = etas[i]
        bank.append(BankEntry(eta, phi, max(eta.lip_norm(n), 1e-12), _normalized(phi),
                              f"{eta.kind}/{phi.name}#{i}"))
    return bank


def field_pairings(v, bank):
    return np.array([b.pair_field(v) for b in bank])


def ym_pairings(nu, bank):
    return np.array([b.pair_ym(nu) for b in bank])


def verify_generation(plan, target, bank=None, tol=0.0):
    """``error_j = max over the bank |<eps_{v_j}, eta x Phi> - <target, eta x Phi>|`` for every snapshot."""
    if isinstance(plan, GridField):
        plan = SequencePlan([plan])
    if bank is None:
        bank = make_bank(plan.dim, plan.n, 20)
    if target.dim != plan.dim or target.n != plan.n:
        raise InputError("plan and target have different dimensions")
    # evaluate the target on the plan grid when the grids nest, to share the quadrature
    ref = target.refined(plan.grid // target.grid) if plan.grid % target.grid == 0 else target
    tvals = ym_pairings(ref, bank)
    errors, worst = [], []
    for snap in plan.snapshots:
        diff = np.abs(field_pairings(snap, bank) - tvals)
        k = int(np.argmax(diff))
        errors.append(float(diff[k]))
        worst.append(bank[k].label)
    monotone = all(b <= a + tol for a, b in zip(errors, errors[1:]))
    return {"errors": errors, "worst_entries": worst, "monotone": bool(monotone), "final": errors[-1],
            "bank_size": len(bank)}


# ---------------------------------------------------------------------------
# inhomogenization


def _lattice_kernel_direction(opA, w, reach=3, tol=1e-8):
    """Smallest lattice frequency k with ``A(k) w = 0``, preferring axes and diagonals."""
    nw = np.linalg.norm(w)
    cands = []
    for k in product(range(-reach, reach + 1), repeat=opA.n):
        k = np.array(k)
        if not k.any() or math.gcd(*[int(abs(v)) for v in k]) != 1:
            continue
        # canonical sign: first nonzero entry positive
        if k[np.nonzero(k)[0][0]] < 0:
            continue
        cands.append(k)
    cands.sort(key=lambda k: (np.abs(k).max(), np.abs(k).sum(), tuple(-k)))
    for k in cands:
        u = k / np.linalg.norm(k)
        if np.linalg.norm(opA.matrix(u) @ w) <= tol * max(nw, 1e-300):
            return k
    return None


def _even_indicator(k, j, N, n, width_cells, offset=0.0):
    """Indicator of the first ``width_cells`` cells of each period of ``k.x`` (even, aligned counts)."""
    period = N // j
    if N % j or period < 2:
        raise InputError(f"frequency {j} does not fit an {N}-grid")
    idx = np.indices((N,) * n).reshape(n, -1).T.reshape((N,) * n + (n,))
    s = np.mod(idx @ np.asarray(k) + int(round(offset * period)), period)
    return (s < width_cells).astype(float)


def _duty_cells(theta, period):
    """Cells of the a-phase: nearest even count (odd counts carry Nyquist content)."""
    c = int(2 * round(theta * period / 2))
    return min(max(c, 0), period)


def homogeneous_generator(opA, opB, osc_w, osc_z, lam, sph_w, sph_e, N, n, j, spike_j, strip_cells=2):
    """Zero-mean periodic field realizing ``(nu, lam nu_inf)`` minus its barycentre, and its potential.

    Two-atom oscillation becomes a laminate of frequency ``j`` across a lattice
    direction annihilating the difference of the atoms; every sphere atom
    becomes parallel strips (``strip_cells`` wide, ``spike_j`` per unit length)
    of height ``lam w_i / theta``.
    """
    dim = opA.dim_domain
    vals = np.zeros((N,) * n + (dim,))
    info = {}
    osc_w = np.asarray(osc_w, dtype=float)
    osc_z = np.atleast_2d(np.asarray(osc_z, dtype=float))
    if len(osc_w) > 2:
        raise InputError("oscillation measures with more than two atoms are not supported")
    if len(osc_w) == 2 and osc_w.min() > 0:
        d = osc_z[0] - osc_z[1]
        if np.linalg.norm(d) > 0:
            k = _lattice_kernel_direction(opA, d)
            if k is None:
                raise CheckFailure("oscillation atoms are not connected along a lattice wave-cone direction",
                                   witness={"difference": d.tolist()})
            period = N // j
            cells = _duty_cells(osc_w[0], period)
            ind = _even_indicator(k, j, N, n, cells)
            theta = ind.mean()
            vals += (ind - theta)[..., None] * d
            info["laminate"] = {"direction": k.tolist(), "frequency": j, "duty": float(theta),
                                "duty_target": float(osc_w[0])}
    if lam > 0:
        info["strips"] = []
        for wi, e in zip(np.asarray(sph_w, dtype=float), np.atleast_2d(sph_e)):
            if wi == 0:
                continue
            k = _lattice_kernel_direction(opA, e)
            if k is None:
                raise CheckFailure("sphere atom is not in a lattice wave-cone direction", witness={"e": e.tolist()})
            ind = _even_indicator(k, spike_j, N, n, strip_cells, offset=0.5)
            theta = ind.mean()
            vals += (lam * wi * (ind / theta - 1))[..., None] * e
            info["strips"].append({"direction": k.tolist(), "theta": float(theta),
                                   "height": float(lam * wi / theta)})
    F = GridField(vals, n)
    psi = potential_pinv(opB, F)
    return F, psi, info


def _region_cutoff(mask, N, n, width):
    """Indicator of a union of cubes smoothed by the mollifier of the given width (identically 1 on the torus)."""
    if mask.all():
        return np.ones(mask.shape)
    K = Mollifier(width, n).kernel(N)
    return np.fft.ifftn(np.fft.fftn(mask.astype(float)) * np.fft.fftn(K)).real


def _cell_key(c):
    return (c.osc_w.round(12).tobytes(), c.osc_z.round(12).tobytes(), round(c.lam_a, 12),
            c.sph_w.round(12).tobytes(), c.sph_e.round(12).tobytes())


def _regular_part(nu):
    out = DiscreteYoungMeasure(nu.n, nu.grid, nu.dim, nu.cells, [])
    return out


def _singular_part(nu):
    cells = [Cell(np.ones(1), np.zeros((1, nu.dim)), 0.0, np.zeros(0), np.zeros((0, nu.dim)))
             for _ in nu.cells]
    return DiscreteYoungMeasure(nu.n, nu.grid, nu.dim, cells, nu.singular)


def inhomogenize_regular(target, opA, opB, N, d, eps, t=None, j=8, spike_j=4, strip_cells=2,
                         certify=True, bank=None):
    """``phi_t * (nu_bar + lam_a nu_bar_inf) + B psi`` with ``psi`` assembled from per-cube generators.

    Dyadic cubes of generation ``d`` take the target of the cell containing
    their centre; cubes with equal targets are merged into regions and every
    region gets one periodic generator cut off smoothly at its boundary.
    """
    nu = _regular_part(target)
    n = nu.n
    if N % nu.grid or N % (2 ** d):
        raise InputError("grid must be divisible by the target grid and by 2^d")
    t = 2.0 ** (-d) if t is None else float(t)
    dim = nu.dim
    side = N // 2 ** d
    # cube representatives: target cell containing the cube centre
    cube_idx = np.indices((2 ** d,) * n).reshape(n, -1).T
    centres = (cube_idx + 0.5) / 2 ** d
    tcell = np.ravel_multi_index(tuple(np.minimum((centres * nu.grid).astype(int), nu.grid - 1).T),
                                 (nu.grid,) * n)
    regions = {}
    for q, c in zip(cube_idx, tcell):
        regions.setdefault(_cell_key(nu.cells[c]), (c, []))[1].append(q)
    psi = np.zeros((N,) * n + (opB.dim_domain,))
    region_info = []
    for key, (c, cubes) in regions.items():
        cell = nu.cells[c]
        z = cell.osc_mean + cell.lam_a * cell.sph_mean
        if certify:
            cert = homogeneous_certificate(cell.osc_w, cell.osc_z, z,
                                           [norm_integrand(dim), area_integrand(dim)],
                                           cell.sph_w, cell.sph_e, cell.lam_a)
            if cert["verdict"] != "consistent":
                raise CheckFailure("homogeneous target violates a catalog certificate", witness=cert["witness"])
        F, ps, info = homogeneous_generator(opA, opB, cell.osc_w, cell.osc_z, cell.lam_a, cell.sph_w,
                                            cell.sph_e, N, n, j, spike_j, strip_cells)
        mask = np.zeros((N,) * n, dtype=bool)
        for q in cubes:
            mask[tuple(slice(int(a) * side, (int(a) + 1) * side) for a in q)] = True
        chi = _region_cutoff(mask, N, n, 0.5 * side / N)
        psi += chi[..., None] * ps.values
        region_info.append({"cell": int(c), "cubes": len(cubes), **info})
    psi = GridField(psi, n)
    Bpsi = apply_B(opB, psi)
    bary = barycentre(nu)
    base = mollify(bary, Mollifier(t, n), N)
    out = base + Bpsi
    budget = sobolev_l1(psi, opB.order)
    report = {"budget": budget, "eps": float(eps), "d": d, "t": t, "j": j, "spike_j": spike_j,
              "regions": region_info, "afree_residual_Bpsi": afree_residual(_as_vm(Bpsi), opA),
              "afree_residual_total": afree_residual(_as_vm(out), opA), "omega_s": 0.0}
    report["discrepancy"] = verify_generation(SequencePlan([out]), nu, bank)["final"]
    if budget >= eps * 1.0:
        raise BudgetExceeded(f"potential budget {budget:.4g} exceeds eps={eps}", witness=report)
    return out, report


def _as_vm(v):
    return VectorMeasure(v.n, v.N, v.flat().copy(), [])


@dataclass
class DyadicScheme:
    d: int
    m: int
    t: float
    cubes: list = field(default_factory=list)   # integer multi-indices at generation d + m
    r: list = field(default_factory=list)
    x_q: list = field(default_factory=list)

    @property
    def side(self):
        return 2.0 ** (-(self.d + self.m))

    def to_dict(self):
        return {"d": self.d, "m": self.m, "t": self.t, "cubes": len(self.cubes),
                "active": int(sum(r > 0 for r in self.r)), "r_total": float(sum(self.r) * self.side ** len(self.cubes[0]))
                if self.cubes else 0.0}


def dyadic_scheme(nu, d, m, t, N):
    """Cubes of generation d+m at distance >= t from the boundary, with ``r_Q`` = mean of ``phi_t * lambda^s``."""
    n = nu.n
    g = 2 ** (d + m)
    if N % g:
        raise InputError("grid must be divisible by 2^(d+m)")
    mass = VectorMeasure(n, 1, np.zeros((1, 1)), [(s.x, s.mass, np.ones(1)) for s in nu.singular])
    dens = mollify(mass, Mollifier(t, n), N).values[..., 0]
    dens[np.abs(dens) < 1e-12 * np.abs(dens).max()] = 0.0  # FFT round-off outside the support
    side = N // g
    scheme = DyadicScheme(d, m, t)
    xs = np.array([s.x for s in nu.singular]) if nu.singular else np.zeros((0, n))
    for q in product(range(g), repeat=n):
        lo = np.array(q) / g
        hi = lo + 1.0 / g
        if lo.min() < t or hi.max() > 1 - t:
            continue
        sl = tuple(slice(a * side, (a + 1) * side) for a in q)
        r = float(dens[sl].mean())
        scheme.cubes.append(q)
        scheme.r.append(r)
        if r > 0 and len(xs):
            c = (lo + hi) / 2
            k = int(np.argmin(np.linalg.norm(xs - c, axis=1)))
            far = float(np.max(np.linalg.norm(np.array(list(product(*zip(lo, hi)))) - xs[k], axis=1)))
            scheme.x_q.append((k, far))
        else:
            scheme.x_q.append((None, 0.0))
    return scheme


def inhomogenize_singular(target, opA, opB, N, d, m, eps, t=None, spike_j=2, strip_cells=2, bank=None):
    """``phi_t * (nu_bar_inf lambda^s) + B phi`` for the singular atoms of ``target``."""
    nu = _singular_part(target)
    n, dim = nu.n, nu.dim
    t = 2.0 ** (-d) if t is None else float(t)
    total = sum(s.mass for s in nu.singular)
    zero = constant_field(np.zeros(dim), N, n)
    if total == 0:
        return zero, {"budget": 0.0, "eps": float(eps), "mass": 0.0, "discrepancy": 0.0, "scheme": None,
                      "omega_s": 0.0}
    for s in nu.singular:
        margin = float(min(s.x.min(), (1 - s.x).min()))
        if margin < 2 * t:
            raise InputError(f"singular atom at {s.x.tolist()} is closer than 2t={2 * t} to the boundary")
        mean = s.sph_mean
        if np.linalg.norm(mean) > 1e-12:
            res, member, _ = wave_cone_membership(opA, mean / np.linalg.norm(mean))
            if res >= 1e-4:
                raise CheckFailure("sphere mean of a singular atom lies outside the wave cone",
                                   witness={"x": s.x.tolist(), "mean": mean.tolist(), "residual": res})
    scheme = dyadic_scheme(nu, d, m, t, N)
    g = 2 ** (d + m)
    side = N // g
    psi = np.zeros((N,) * n + (opB.dim_domain,))
    gens = 0
    for q, r, (k, far) in zip(scheme.cubes, scheme.r, scheme.x_q):
        if r <= 0 or k is None:
            continue
        if far >= 2 * t:
            raise InputError("cube representative is farther than 2t from its cube")
        s = nu.singular[k]
        if len(s.sph_w) == 1:
            continue  # a single concentration direction: the mollified barycentre already concentrates along it
        if side < 4:
            raise InputError("cubes of generation d+m are too small for strip generators")
        F, ps, _ = homogeneous_generator(opA, opB, [1.0], np.zeros((1, dim)), r, s.sph_w, s.sph_e, N, n,
                                         1, spike_j * g, strip_cells)
        mask = np.zeros((N,) * n, dtype=bool)
        mask[tuple(slice(a * side, (a + 1) * side) for a in q)] = True
        chi = _region_cutoff(mask, N, n, max(0.5 * side, 2) / N)
        psi += chi[..., None] * ps.values
        gens += 1
    psi = GridField(psi, n)
    bary = barycentre(nu)
    out = mollify(bary, Mollifier(t, n), N) + apply_B(opB, psi)
    budget = sobolev_l1(psi, opB.order)
    report = {"budget": budget, "eps": float(eps), "mass": float(total), "d": d, "m": m, "t": t,
              "scheme": scheme.to_dict(), "generators": gens, "omega_s": 0.0,
              "afree_residual_total": afree_residual(_as_vm(out), opA)}
    report["discrepancy"] = verify_generation(SequencePlan([out]), nu, bank)["final"]
    if budget >= eps * total:
        raise BudgetExceeded(f"potential budget {budget:.4g} exceeds eps*mass={eps * total}", witness=report)
    return out, report


def generate_levels(target, opA, opB, N, levels, eps, bank=None):
    """Regular + singular inhomogenization summed, one snapshot per refinement level.

    ``levels`` is a list of dicts with keys ``d`` (dyadic generation, also
    fixing ``t = 2^-d``), ``j`` (laminate frequency) and ``spike_j`` (strip
    frequency); optional ``m``.
    """
    reg_snaps, sing_snaps, reports = [], [], []
    for lv in levels:
        d = int(lv["d"])
        t = float(lv.get("t", 2.0 ** (-d)))
        reg, rrep = inhomogenize_regular(target, opA, opB, N, d, eps, t=t, j=lv["j"], spike_j=lv["spike_j"])
        sing, srep = inhomogenize_singular(target, opA, opB, N, d, int(lv.get("m", 1)), eps, t=t)
        reg_snaps.append(reg)
        sing_snaps.append(sing)
        reports.append({"level": _jsonable(lv), "regular": rrep, "singular": srep})
    plan = sum_sequences(SequencePlan(reg_snaps, "inhomogenize_regular", {"levels": levels}),
                         SequencePlan(sing_snaps, "inhomogenize_singular", {"levels": levels}))
    plan.construction = "inhomogenize"
    plan.params = {"levels": _jsonable(levels), "eps": eps}
    return plan, reports
