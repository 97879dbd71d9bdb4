"""Discrete generalized Young measures on the unit cube and their Jensen-type certificates.

A measure is a triple: per-cell oscillation measures (finitely many atoms in
V with weights summing to one), a concentration part split into a per-cell
density ``lam_a`` and point masses at singular locations, and concentration
angle measures (atoms on the unit sphere of V) attached to each cell and to
each singular location.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .envelope import cell_centers, frequencies, nyquist_mask
from .errors import InputError
from .operator_symbols import wave_cone_membership

log = logging.getLogger(__name__)

JENSEN_TOL = 1e-6


def _atoms(data, dim, unit=False, what="atoms"):
    arr = np.asarray(data, dtype=float).reshape(-1, dim + 1) if len(data) else np.zeros((0, dim + 1))
    w, pts = arr[:, 0].copy(), arr[:, 1:].copy()
    if np.any(w < 0):
        raise InputError(f"{what}: negative weight")
    if unit and len(w):
        r = np.linalg.norm(pts, axis=1)
        if np.any(np.abs(r - 1) > 1e-10):
            raise InputError(f"{what}: sphere atoms must be unit vectors")
    return w, pts


@dataclass
class Cell:
    osc_w: np.ndarray
    osc_z: np.ndarray
    lam_a: float = 0.0
    sph_w: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sph_e: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))

    @property
    def osc_mean(self):
        return self.osc_w @ self.osc_z

    @property
    def sph_mean(self):
        if len(self.sph_w) == 0:
            return np.zeros(self.osc_z.shape[1])
        return self.sph_w @ self.sph_e


@dataclass
class SingularAtom:
    x: np.ndarray
    mass: float
    sph_w: np.ndarray
    sph_e: np.ndarray

    @property
    def sph_mean(self):
        return self.sph_w @ self.sph_e


class DiscreteYoungMeasure:
    """Young measure on a ``grid^n`` cell decomposition of the open unit cube."""

    def __init__(self, n, grid, dim, cells, singular=()):
        self.n = int(n)
        self.grid = int(grid)
        self.dim = int(dim)
        if self.n < 1 or self.n > 2:
            raise InputError("only n in {1, 2} is supported")
        if len(cells) != self.grid ** self.n:
            raise InputError(f"expected {self.grid ** self.n} cells, got {len(cells)}")
        self.cells = list(cells)
        self.singular = list(singular)
        self.meta = {}
        self._flat = None
        for c in self.cells:
            if c.osc_z.shape[1:] != (self.dim,):
                raise InputError("oscillation atoms have the wrong dimension")
            if abs(c.osc_w.sum() - 1) > 1e-12:
                raise InputError("oscillation weights must sum to 1 in every cell")
            if c.lam_a < 0:
                raise InputError("lam_a must be nonnegative")
            if c.lam_a > 0 and abs(c.sph_w.sum() - 1) > 1e-12:
                raise InputError("sphere weights must sum to 1 where lam_a > 0")
        for s in self.singular:
            if s.mass <= 0:
                raise InputError("singular masses must be positive")
            if np.any(s.x <= 0) or np.any(s.x >= 1):
                raise InputError("singular atoms must lie in the open unit cube")
            if abs(s.sph_w.sum() - 1) > 1e-12:
                raise InputError("sphere weights of a singular atom must sum to 1")

    @property
    def vol(self):
        return self.grid ** (-self.n)

    def centers(self):
        return cell_centers(self.grid, self.n).reshape(-1, self.n)

    def flat_atoms(self):
        """Oscillation and sphere atoms of all cells stacked, with their cell indices."""
        if self._flat is None:
            oc = np.concatenate([np.full(len(c.osc_w), i) for i, c in enumerate(self.cells)])
            ow = np.concatenate([c.osc_w for c in self.cells])
            oz = np.concatenate([c.osc_z for c in self.cells])
            sc = [np.full(len(c.sph_w), i) for i, c in enumerate(self.cells) if c.lam_a > 0]
            sw = [c.lam_a * c.sph_w for c in self.cells if c.lam_a > 0]
            se = [c.sph_e.reshape(-1, self.dim) for c in self.cells if c.lam_a > 0]
            if sc:
                sc, sw, se = np.concatenate(sc), np.concatenate(sw), np.concatenate(se)
            else:
                sc, sw, se = np.zeros(0, dtype=int), np.zeros(0), np.zeros((0, self.dim))
            self._flat = (oc.astype(int), ow, oz, sc.astype(int), sw, se)
        return self._flat

    def refined(self, factor):
        """Same measure on a grid ``factor`` times finer (cells repeated)."""
        factor = int(factor)
        if factor == 1:
            return self
        G = self.grid * factor
        idx = np.indices((G,) * self.n).reshape(self.n, -1).T // factor
        coarse = np.ravel_multi_index(tuple(idx.T), (self.grid,) * self.n)
        out = DiscreteYoungMeasure(self.n, G, self.dim, [self.cells[k] for k in coarse], self.singular)
        out.meta = dict(self.meta)
        return out

    def total_concentration(self):
        return self.vol * sum(c.lam_a for c in self.cells) + sum(s.mass for s in self.singular)

    def to_dict(self):
        cells = []
        for c in self.cells:
            cells.append({
                "osc": np.column_stack([c.osc_w, c.osc_z]).tolist(),
                "lam_a": float(c.lam_a),
                "sphere": np.column_stack([c.sph_w, c.sph_e.reshape(len(c.sph_w), -1)]).tolist()
                if len(c.sph_w) else [],
            })
        sing = [{"x": s.x.tolist(), "mass": float(s.mass),
                 "sphere": np.column_stack([s.sph_w, s.sph_e]).tolist()} for s in self.singular]
        return {"n": self.n, "grid": self.grid, "cells": cells, "singular": sing}


def make_cell(osc, lam_a=0.0, sphere=(), dim=None):
    """Cell from ``[[w, z...], ...]`` oscillation atoms and ``[[w, e...], ...]`` sphere atoms."""
    osc = np.asarray(osc, dtype=float)
    dim = dim or osc.shape[1] - 1
    w, z = _atoms(osc, dim, what="oscillation")
    sw, se = _atoms(sphere, dim, unit=True, what="sphere")
    return Cell(w, z, float(lam_a), sw, se)


def make_singular(x, mass, sphere, dim):
    sw, se = _atoms(sphere, dim, unit=True, what="singular sphere")
    return SingularAtom(np.asarray(x, dtype=float), float(mass), sw, se)


def homogeneous_measure(osc, lam_a=0.0, sphere=(), grid=1, n=2, singular=()):
    """Same cell data in every cell of a ``grid^n`` decomposition."""
    dim = np.asarray(osc).shape[1] - 1
    cells = [make_cell(osc, lam_a, sphere, dim) for _ in range(grid ** n)]
    sing = [make_singular(s["x"], s["mass"], s["sphere"], dim) for s in singular]
    return DiscreteYoungMeasure(n, grid, dim, cells, sing)


def ym_from_dict(data):
    try:
        n, grid = int(data["n"]), int(data["grid"])
        cells_raw = data["cells"]
        first = np.asarray(cells_raw[0]["osc"], dtype=float)
        dim = first.shape[1] - 1
        cells = [make_cell(c["osc"], c.get("lam_a", 0.0), c.get("sphere", []), dim) for c in cells_raw]
        if len(cells) == 1 and grid ** n > 1:
            cells = cells * grid ** n
        sing = [make_singular(s["x"], s["mass"], s["sphere"], dim) for s in data.get("singular", [])]
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise InputError(f"malformed Young measure: {exc}") from exc
    return DiscreteYoungMeasure(n, grid, dim, cells, sing)


def load_ym(path):
    try:
        with open(path) as fh:
            return ym_from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read Young measure {path}: {exc}") from exc


def ym_to_pair(nu):
    """x-integrated pair: ``mu0 = int nu_x dx`` and ``muinf = int nu_x^inf dlambda``."""
    from .flat_metric import make_pair
    oc, ow, oz, sc, sw, se = nu.flat_atoms()
    pts_inf = [se]
    w_inf = [nu.vol * sw]
    for s in nu.singular:
        pts_inf.append(s.sph_e)
        w_inf.append(s.mass * s.sph_w)
    return make_pair(oz, nu.vol * ow, np.concatenate(pts_inf), np.concatenate(w_inf))


# ---------------------------------------------------------------------------
# vector measures


@dataclass
class VectorMeasure:
    n: int
    grid: int
    ac_density: np.ndarray  # (grid^n, dim)
    atoms: list = field(default_factory=list)  # (x, mass, polar)

    @property
    def dim(self):
        return self.ac_density.shape[1]

    @property
    def vol(self):
        return self.grid ** (-self.n)

    def total_variation(self):
        return float(self.vol * np.linalg.norm(self.ac_density, axis=1).sum() + sum(m for _, m, _ in self.atoms))

    def discretize(self):
        """Density on the cell grid with each atom smeared over its cell."""
        dens = self.ac_density.copy()
        for x, m, p in self.atoms:
            idx = np.minimum((np.asarray(x) * self.grid).astype(int), self.grid - 1)
            flat = int(np.ravel_multi_index(tuple(idx), (self.grid,) * self.n))
            dens[flat] += m * np.asarray(p) / self.vol
        return dens


def barycentre(nu):
    """Underlying vector measure: ``nu_bar + lam_a nu_bar_inf`` per cell plus polar-decomposed atoms."""
    ac = np.array([c.osc_mean + c.lam_a * c.sph_mean for c in nu.cells])
    atoms = []
    for s in nu.singular:
        mbar = s.sph_mean
        r = float(np.linalg.norm(mbar))
        if r < 1e-12:
            warnings.warn(f"singular atom at {s.x.tolist()} has zero mean direction; dropped from barycentre",
                          stacklevel=2)
            continue
        atoms.append((s.x.copy(), s.mass * r, mbar / r))
    return VectorMeasure(nu.n, nu.grid, ac, atoms)


def elementary(v):
    """Young measure of a single vector measure: Diracs at the density, polar atoms on the singular part."""
    cells = [Cell(np.ones(1), z[None, :].copy(), 0.0, np.zeros(0), np.zeros((0, v.dim))) for z in v.ac_density]
    sing = [SingularAtom(np.asarray(x, dtype=float), float(m), np.ones(1), np.asarray(p, dtype=float)[None, :])
            for x, m, p in v.atoms]
    return DiscreteYoungMeasure(v.n, v.grid, v.dim, cells, sing)


def _eta_values(eta, pts):
    if eta is None:
        return np.ones(len(pts))
    if np.isscalar(eta):
        return np.full(len(pts), float(eta))
    return np.asarray(eta(pts), dtype=float).reshape(len(pts))


def pair(nu, eta, phi):
    """Duality pairing of a Young measure with ``eta (x) Phi``."""
    ev = _eta_values(eta, nu.centers())
    oc, ow, oz, sc, sw, se = nu.flat_atoms()
    total = nu.vol * float(np.sum(ev[oc] * ow * phi(oz)))
    if len(sw):
        total += nu.vol * float(np.sum(ev[sc] * sw * phi.recession(se)))
    if nu.singular:
        es = _eta_values(eta, np.array([s.x for s in nu.singular]))
        for s, e in zip(nu.singular, es):
            total += s.mass * e * float(s.sph_w @ phi.recession(s.sph_e))
    return total


def afree_residual(v, opA):
    """``max_{m != 0} |A(m) v^(m)| / ((1 + |m|)^k TV(v))`` for the cell-discretized measure.

    Atoms are smeared over their cell.  Modes with a Nyquist component are
    skipped (their sign is ambiguous on an even grid).
    """
    if v.n != opA.n:
        raise InputError("measure and operator live in different dimensions")
    tv = v.total_variation()
    if tv == 0:
        return 0.0
    dens = v.discretize().reshape((v.grid,) * v.n + (v.dim,))
    c = np.fft.fftn(dens, axes=tuple(range(v.n))) / v.grid ** v.n
    m = frequencies(v.grid, v.n)
    mats = opA.matrix(m)
    av = np.linalg.norm(np.einsum("...ij,...j->...i", mats, c), axis=-1)
    weight = (1 + np.linalg.norm(m, axis=-1)) ** opA.order
    ratio = av / weight
    ratio[~nyquist_mask(v.grid, v.n)] = 0.0
    ratio[(0,) * v.n] = 0.0
    return float(ratio.max() / tv)


# ---------------------------------------------------------------------------
# Jensen certificates


def _name(f):
    return getattr(f, "name", repr(f))


def jensen_regular(nu, integrands, tol=JENSEN_TOL):
    """Per-cell slack ``int f dnu_x + lam_a int f^inf dnu_x^inf - f(bary_x)``."""
    per = []
    worst = (np.inf, None, None)
    bary = barycentre(nu).ac_density
    for f in integrands:
        slacks = []
        for idx, (c, b) in enumerate(zip(nu.cells, bary)):
            lhs = float(c.osc_w @ f(c.osc_z))
            if c.lam_a > 0 and len(c.sph_w):
                lhs += c.lam_a * float(c.sph_w @ f.recession(c.sph_e))
            s = lhs - float(f(b))
            slacks.append(s)
            scaled = s / (1 + np.linalg.norm(b))
            if scaled < worst[0]:
                worst = (scaled, _name(f), idx)
        per.append({"integrand": _name(f), "min_slack": float(min(slacks)), "slacks": slacks})
    passed = all(s >= -tol * (1 + np.linalg.norm(b))
                 for p in per for s, b in zip(p["slacks"], bary))
    out = {"passed": bool(passed), "per_integrand": [{k: v for k, v in p.items() if k != "slacks"} for p in per]}
    if worst[1] is not None:
        out["worst"] = {"relative_slack": float(worst[0]), "integrand": worst[1], "cell": int(worst[2])}
    out["_slacks"] = [p["slacks"] for p in per]
    return out


def jensen_singular(nu, integrands, tol=JENSEN_TOL):
    """Per singular atom slack ``int f^inf dnu^inf - f^inf(nu_bar^inf)``."""
    rows = []
    passed = True
    for f in integrands:
        for k, s in enumerate(nu.singular):
            slack = float(s.sph_w @ f.recession(s.sph_e)) - float(f.recession(s.sph_mean))
            rows.append({"integrand": _name(f), "atom": k, "slack": slack})
            passed = passed and slack >= -tol
    worst = min(rows, key=lambda r: r["slack"]) if rows else None
    return {"passed": bool(passed), "atoms": rows, "worst": worst}


def strengthened_jensen(sph_w, sph_e, f, G=None, clarke_kwargs=None):
    """Weak slack ``int F^inf - F^inf(mean)`` and strengthened slack ``int F^inf - G(mean)``."""
    from .integrands import clarke_support_function
    sph_w = np.asarray(sph_w, dtype=float)
    sph_e = np.atleast_2d(np.asarray(sph_e, dtype=float))
    if G is None:
        G, _ = clarke_support_function(f, **(clarke_kwargs or {}))
    mean = sph_w @ sph_e
    integral = float(sph_w @ f.recession(sph_e))
    weak = integral - float(f.recession(mean))
    strong = integral - float(G(mean))
    return {"weak_slack": weak, "strengthened_slack": strong, "G_mean": float(G(mean)),
            "F_inf_mean": float(f.recession(mean)), "consistent": bool(strong <= weak + 1e-6)}


def homogeneous_certificate(nu0_w, nu0_z, z, integrands, nuinf_w=(), nuinf_e=(), t=0.0, tol=JENSEN_TOL):
    """Necessary-condition check for a homogeneous pair ``(nu0, t nu_inf)`` with barycentre ``z``.

    Checks ``mean(nu0) + t mean(nu_inf) = z`` (1e-9) and the Jensen inequality
    ``int f dnu0 + t int f^inf dnu_inf >= f(z)`` for every supplied integrand
    (which the caller asserts to be A-quasiconvex, e.g. convex catalog entries
    or numerical envelopes).  "consistent" means no listed test fails; it is
    evidence, not a proof of membership.
    """
    w = np.asarray(nu0_w, dtype=float)
    Z = np.atleast_2d(np.asarray(nu0_z, dtype=float))
    z = np.asarray(z, dtype=float)
    if abs(w.sum() - 1) > 1e-12 or np.any(w < 0):
        raise InputError("nu0 must be a probability measure")
    wi = np.asarray(nuinf_w, dtype=float)
    Ei = np.asarray(nuinf_e, dtype=float).reshape(len(wi), -1) if len(wi) else np.zeros((0, len(z)))
    mean = w @ Z + (t * (wi @ Ei) if len(wi) else 0.0)
    bary_err = float(np.linalg.norm(mean - z))
    rows = []
    for f in integrands:
        lhs = float(w @ f(Z))
        if len(wi) and t > 0:
            lhs += t * float(wi @ f.recession(Ei))
        rows.append({"integrand": _name(f), "slack": lhs - float(f(z))})
    bad = [r for r in rows if r["slack"] < -tol * (1 + np.linalg.norm(z))]
    if bary_err > 1e-9:
        verdict = "violated"
        witness = {"barycentre_error": bary_err}
    elif bad:
        verdict = "violated"
        witness = min(bad, key=lambda r: r["slack"])
    else:
        verdict = "consistent"
        witness = None
    return {"verdict": verdict, "witness": witness, "barycentre_error": bary_err, "checks": rows,
            "note": "necessary conditions over the supplied integrands only"}


def polar_in_cone_check(v, opA, tol=1e-4):
    """Wave-cone membership of every singular polar of ``v``."""
    rows = []
    for x, m, p in v.atoms:
        res, _, _ = wave_cone_membership(opA, np.asarray(p, dtype=float))
        rows.append({"x": list(map(float, x)), "mass": float(m), "residual": float(res)})
    passed = all(r["residual"] < tol for r in rows)
    return {"passed": bool(passed), "atoms": rows}
