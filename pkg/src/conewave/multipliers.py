"""Vector-field multipliers and a discrete auditor for the energy identity.

The pointwise layer turns a field jet (value, gradient, Hessian) into the
stress tensor, the modified current, and the interior density of the
divergence identity.  On request the divergence is evaluated twice, once
by expanding the product rule through the jet and once through the
identity's right-hand side; the two routes share nothing beyond the jet
itself, so their difference is a pure implementation check and sits at
rounding level.

The auditor integrates the identity over a slab between two hybrid leaves,
closed at large radius by an incoming null cap.  Boundary densities follow
the oriented surface measures of the underlying balance law; the global
sign convention is pinned so that for the time translation multiplier on
flat space the balance reads: flux in at the lower leaf equals flux out at
the upper leaf plus the cap outflow, all three nonnegative.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .diagnostics import InsufficientTimeLevelsError, trapezoid_weights
from .evolve import cross_derivative, first_derivative, second_derivative
from .foliation import (
    FieldState,
    OutOfDomainError,
    SnapshotSeries,
    SphereQuadrature,
    disc_samples,
    lagrange_sample,
)
from .geometry import MetricSpec, SpacetimePoint

_MINK = np.diag([-1.0, 1.0, 1.0, 1.0])


class MetricInversionError(RuntimeError):
    """Sampled inverse metric is degenerate or has lost its signature."""


def _metric_fields(metric: MetricSpec, t: float, pts: np.ndarray, need_dh: bool = False) -> dict:
    """Inverse metric, its inverse, the volume factor, and divergence data.

    dh carries d_g of the inverse-metric components; dlog is the gradient
    of log sqrt(-G) and nvec the first-order coefficients of the covariant
    wave operator, Box f = g^{mn} d2_mn f + nvec^m d_m f.
    """
    pts = np.asarray(pts, dtype=float)
    h, dh = metric.components(t, pts)
    g_up = _MINK + h
    det = np.linalg.det(g_up)
    if not np.all(np.isfinite(det)) or np.any(det >= 0.0):
        worst = float(np.max(det))
        raise MetricInversionError(f"inverse metric is not Lorentzian (max det {worst:.6g})")
    g_dn = np.linalg.inv(g_up)
    out = {"g_up": g_up, "g_dn": g_dn, "sqrtg": 1.0 / np.sqrt(-det)}
    if need_dh:
        dlog = -0.5 * np.einsum("...ab,...gab->...g", g_dn, dh)
        out["dh"] = dh
        out["dlog"] = dlog
        out["nvec"] = np.einsum("...nnm->...m", dh) + np.einsum("...nm,...n->...m", g_up, dlog)
    return out


# ---------------------------------------------------------------------------
# Multiplier specifications


@dataclass(frozen=True)
class MultiplierSpec:
    """A multiplier pair (X, chi) with optional exact derivative callables.

    X(t, pts) returns coordinate components with shape (..., 4) at
    positions pts of shape (..., 3).  dX, when given, returns (..., 4, 4)
    in slot order [mu, nu] = d_mu X^nu; leave it None to fall back to
    centered differences with a step proportional to (1 + r).  chi_jet
    returns (chi, dchi, d2chi) as the scalar, its coordinate gradient and
    Hessian; None means chi = 0.  r_min restricts the evaluation domain,
    nonzero only for the outgoing p-weighted field.
    """

    name: str
    X: Callable
    dX: Callable | None = None
    chi_jet: Callable | None = None
    r_min: float = 0.0


def _domain_check(mult: MultiplierSpec, pts: np.ndarray) -> None:
    if mult.r_min <= 0.0:
        return
    r2 = np.sum(pts * pts, axis=-1)
    if np.any(r2 < (mult.r_min - 1e-9) ** 2):
        raise OutOfDomainError(
            f"multiplier {mult.name!r} is defined only for r >= {mult.r_min!r}"
        )


def _dx_values(mult: MultiplierSpec, t: float, pts: np.ndarray, h_step: float | None) -> np.ndarray:
    if mult.dX is not None:
        return np.asarray(mult.dX(t, pts), dtype=float)
    r = np.sqrt(np.sum(pts * pts, axis=-1))
    h = np.full_like(r, h_step) if h_step else 1e-4 * (1.0 + r)
    out = np.empty(pts.shape[:-1] + (4, 4))
    ht = h_step if h_step else 1e-4
    out[..., 0, :] = (np.asarray(mult.X(t + ht, pts), float) - np.asarray(mult.X(t - ht, pts), float)) / (2.0 * ht)
    for i in range(3):
        pp = np.array(pts, copy=True)
        pm = np.array(pts, copy=True)
        pp[..., i] += h
        pm[..., i] -= h
        out[..., i + 1, :] = (np.asarray(mult.X(t, pp), float) - np.asarray(mult.X(t, pm), float)) / (2.0 * h[..., None])
    return out


def _chi_values(mult: MultiplierSpec, t: float, pts: np.ndarray):
    base = pts.shape[:-1]
    if mult.chi_jet is None:
        return np.zeros(base), np.zeros(base + (4,)), np.zeros(base + (4, 4))
    chi, dchi, d2chi = mult.chi_jet(t, pts)
    return np.asarray(chi, float), np.asarray(dchi, float), np.asarray(d2chi, float)


def dt_multiplier() -> MultiplierSpec:
    """Time translation, chi = 0."""

    def xval(t, pts):
        out = np.zeros(np.asarray(pts).shape[:-1] + (4,))
        out[..., 0] = 1.0
        return out

    def dxval(t, pts):
        return np.zeros(np.asarray(pts).shape[:-1] + (4, 4))

    return MultiplierSpec(name="dt", X=xval, dX=dxval)


# ---------------------------------------------------------------------------
# The interior multiplier f(r) d_r with chi = f / r


_SERIES_SPLIT = 1e-3


def _chi_poly(alpha: float) -> np.ndarray:
    # chi(r) = 2 sum_m (-1)^m (alpha+1)_m / (m+1)! r^m; eight terms keep the
    # truncation below double rounding on r < the series split
    coef = np.empty(8)
    poch = 1.0
    fact = 1.0
    for m in range(8):
        fact *= m + 1
        coef[m] = 2.0 * (-1.0) ** m * poch / fact
        poch *= alpha + 1.0 + m
    return coef


class MorawetzValues(NamedTuple):
    f: np.ndarray
    fp: np.ndarray
    chi: np.ndarray
    chip: np.ndarray
    identity: np.ndarray


def morawetz_profile(alpha: float, r) -> MorawetzValues:
    """Radial profile of the interior multiplier and its first derivative.

    f grows from f(0) = 0 to the asymptote 2/alpha, chi = f/r, and the
    returned identity value chi - f/r + f'/2 equals (1+r)^(-1-alpha)
    up to series truncation near the axis.
    """
    if not 0.0 < alpha <= 0.1:
        raise ValueError(f"alpha must lie in (0, 1/10], got {alpha!r}")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0.0):
        raise ValueError("radii must be nonnegative")
    ell = np.log1p(r)
    f = -(2.0 / alpha) * np.expm1(-alpha * ell)
    fp = 2.0 * np.exp(-(1.0 + alpha) * ell)
    coef = _chi_poly(alpha)
    dcoef = np.polynomial.polynomial.polyder(coef)
    small = r < _SERIES_SPLIT
    rsafe = np.where(r > 0.0, r, 1.0)
    chi = np.where(small, np.polynomial.polynomial.polyval(r, coef), f / rsafe)
    chip = np.where(small, np.polynomial.polynomial.polyval(r, dcoef), (fp * r - f) / rsafe**2)
    fr = np.where(r > 0.0, f / rsafe, coef[0])
    identity = chi - fr + 0.5 * fp
    return MorawetzValues(f=f, fp=fp, chi=chi, chip=chip, identity=identity)


def _chi_second(alpha: float, r: np.ndarray) -> np.ndarray:
    coef = _chi_poly(alpha)
    d2coef = np.polynomial.polynomial.polyder(coef, 2)
    ell = np.log1p(r)
    f = -(2.0 / alpha) * np.expm1(-alpha * ell)
    fp = 2.0 * np.exp(-(1.0 + alpha) * ell)
    fpp = -2.0 * (1.0 + alpha) * np.exp(-(2.0 + alpha) * ell)
    rsafe = np.where(r > 0.0, r, 1.0)
    closed = (fpp * rsafe**2 - 2.0 * fp * rsafe + 2.0 * f) / rsafe**3
    return np.where(r < _SERIES_SPLIT, np.polynomial.polynomial.polyval(r, d2coef), closed)


def morawetz_multiplier(alpha: float) -> MultiplierSpec:
    """X = f(r) d_r with chi = f/r.

    The Hessian of chi carries a genuine 1/r singularity from the radial
    kink at the axis.  Below r = 1e-3 the tangential part is dropped
    instead of floored: a floored sample at the origin node would enter
    cell-weighted quadratures at 1/floor, while the omitted cell integral
    of the singular part is O(dx^2), within the quadrature's own order.
    """
    morawetz_profile(alpha, 0.0)

    def xval(t, pts):
        pts = np.asarray(pts, dtype=float)
        r = np.sqrt(np.sum(pts * pts, axis=-1))
        vals = morawetz_profile(alpha, r)
        out = np.zeros(pts.shape[:-1] + (4,))
        out[..., 1:] = vals.chi[..., None] * pts
        return out

    def dxval(t, pts):
        pts = np.asarray(pts, dtype=float)
        r = np.sqrt(np.sum(pts * pts, axis=-1))
        vals = morawetz_profile(alpha, r)
        rsafe = np.where(r > 0.0, r, 1.0)
        n = pts / rsafe[..., None]
        out = np.zeros(pts.shape[:-1] + (4, 4))
        out[..., 1:, 1:] = vals.chip[..., None, None] * n[..., :, None] * pts[..., None, :]
        out[..., 1:, 1:] += vals.chi[..., None, None] * np.eye(3)
        return out

    def chijet(t, pts):
        pts = np.asarray(pts, dtype=float)
        r = np.sqrt(np.sum(pts * pts, axis=-1))
        vals = morawetz_profile(alpha, r)
        chipp = _chi_second(alpha, r)
        n = np.where(r[..., None] > 1e-12, pts / np.where(r > 0.0, r, 1.0)[..., None], 0.0)
        dchi = np.zeros(pts.shape[:-1] + (4,))
        dchi[..., 1:] = vals.chip[..., None] * n
        nn = n[..., :, None] * n[..., None, :]
        tang = np.where(r >= _SERIES_SPLIT, vals.chip / np.where(r > 0.0, r, 1.0), 0.0)
        d2chi = np.zeros(pts.shape[:-1] + (4, 4))
        d2chi[..., 1:, 1:] = chipp[..., None, None] * nn
        d2chi[..., 1:, 1:] += tang[..., None, None] * (np.eye(3) - nn)
        return vals.chi, dchi, d2chi

    return MultiplierSpec(name="morawetz", X=xval, dX=dxval, chi_jet=chijet)


# ---------------------------------------------------------------------------
# The outgoing r^p multiplier


def _lbar_parts(pts: np.ndarray):
    r = np.sqrt(np.sum(pts * pts, axis=-1))
    n = pts / r[..., None]
    lbar = np.concatenate([np.ones(r.shape + (1,)), -n], axis=-1)
    lup = np.concatenate([np.ones(r.shape + (1,)), n], axis=-1)
    return r, n, lbar, lup


def _pweight_y(metric: MetricSpec, t: float, pts: np.ndarray, need_dy: bool = False):
    """The normalized outgoing vector Y and optionally d_mu Y^nu.

    Y reduces to L on flat space exactly: the Minkowski block of the raised
    incoming covector is assembled symbolically, so only the metric
    perturbation enters the correction terms.
    """
    h, dh = metric.components(t, pts)
    r, n, lbar, lup = _lbar_parts(pts)
    lbar_up = np.concatenate([np.ones(r.shape + (1,)), -n], axis=-1)
    hl = np.einsum("...mn,...n->...m", h, lbar)
    glblb = 0.25 * np.einsum("...m,...m->...", lbar, hl)
    Y = lup - hl + glblb[..., None] * lbar_up
    if not need_dy:
        return Y, None
    # d_j n_i = P_ij / r with the tangential projector P; the time slot of
    # the frame covectors is constant
    proj = (np.eye(3) - n[..., :, None] * n[..., None, :]) / r[..., None, None]
    dlbar = np.zeros(pts.shape[:-1] + (4, 4))
    dlbar[..., 1:, 1:] = -proj
    dlup = np.zeros(pts.shape[:-1] + (4, 4))
    dlup[..., 1:, 1:] = proj
    dhl = np.einsum("...gmn,...n->...gm", dh, lbar) + np.einsum("...mn,...gn->...gm", h, dlbar)
    dglblb = 0.25 * (
        np.einsum("...gm,...m->...g", dhl, lbar)
        + np.einsum("...m,...gm->...g", hl, dlbar)
    )
    dY = dlup - dhl
    dY += dglblb[..., None] * lbar_up[..., None, :]
    dY += glblb[..., None, None] * dlbar
    return Y, dY


def pweight_vector(p: float, pt: SpacetimePoint, metric: MetricSpec) -> np.ndarray:
    """The r^p-weighted outgoing multiplier at one point, r >= R only."""
    x = np.asarray(pt.x, dtype=float)
    r = float(np.linalg.norm(x))
    R = metric.params.R
    if r < R - 1e-9:
        raise OutOfDomainError(f"p-weighted field is defined only for r >= {R!r}, got r={r!r}")
    Y, _ = _pweight_y(metric, pt.t, x[None, :])
    return (r**p) * Y[0]


def pweight_multiplier(p: float, metric: MetricSpec) -> MultiplierSpec:
    """X = r^p Y with chi = r^(p-1), restricted to r >= metric.params.R."""
    R = metric.params.R

    def xval(t, pts):
        pts = np.asarray(pts, dtype=float)
        r = np.sqrt(np.sum(pts * pts, axis=-1))
        Y, _ = _pweight_y(metric, t, pts)
        return (r**p)[..., None] * Y

    def dxval(t, pts):
        pts = np.asarray(pts, dtype=float)
        r = np.sqrt(np.sum(pts * pts, axis=-1))
        n = pts / r[..., None]
        Y, dY = _pweight_y(metric, t, pts, need_dy=True)
        out = (r**p)[..., None, None] * dY
        radial = (p * r ** (p - 1.0))[..., None] * Y
        out[..., 1:, :] += n[..., :, None] * radial[..., None, :]
        return out

    def chijet(t, pts):
        pts = np.asarray(pts, dtype=float)
        r = np.sqrt(np.sum(pts * pts, axis=-1))
        n = pts / r[..., None]
        chi = r ** (p - 1.0)
        dchi = np.zeros(pts.shape[:-1] + (4,))
        dchi[..., 1:] = ((p - 1.0) * r ** (p - 2.0))[..., None] * n
        nn = n[..., :, None] * n[..., None, :]
        d2chi = np.zeros(pts.shape[:-1] + (4, 4))
        d2chi[..., 1:, 1:] = ((p - 1.0) * (p - 2.0) * r ** (p - 3.0))[..., None, None] * nn
        d2chi[..., 1:, 1:] += ((p - 1.0) * r ** (p - 2.0))[..., None, None] * (np.eye(3) - nn) / r[..., None, None]
        return chi, dchi, d2chi

    return MultiplierSpec(name="pweight", X=xval, dX=dxval, chi_jet=chijet, r_min=R)


# ---------------------------------------------------------------------------
# Pointwise current algebra


def _stress_tensor(dphi: np.ndarray, g_up: np.ndarray, g_dn: np.ndarray):
    Q = np.einsum("...mn,...m,...n->...", g_up, dphi, dphi)
    T = dphi[..., :, None] * dphi[..., None, :] - 0.5 * g_dn * Q[..., None, None]
    return T, Q


def _point_tables(
    mult: MultiplierSpec,
    metric: MetricSpec,
    t: float,
    pts: np.ndarray,
    phi: np.ndarray,
    dphi: np.ndarray,
    d2: np.ndarray | None = None,
    *,
    need: tuple[str, ...] = ("flux",),
    h_step: float | None = None,
) -> dict:
    """Current algebra at a batch of points; the shared core of this module.

    need selects among "flux" (the three oriented boundary densities),
    "bulk" (the identity's interior density, Hessian required), and
    "residual" (the product-rule divergence for the dual-route check).
    Flux densities omit the coordinate area weights; the cone and cap
    entries are per dv domega and du domega respectively, without r^2.
    """
    pts = np.asarray(pts, dtype=float)
    need_bulk = "bulk" in need or "residual" in need
    _domain_check(mult, pts)
    mf = _metric_fields(metric, t, pts, need_dh=need_bulk)
    g_up, g_dn, sqrtg = mf["g_up"], mf["g_dn"], mf["sqrtg"]
    X = np.asarray(mult.X(t, pts), dtype=float)
    chi, dchi, d2chi = _chi_values(mult, t, pts)
    T, Q = _stress_tensor(dphi, g_up, g_dn)
    Xphi = np.einsum("...m,...m->...", X, dphi)
    J_dn = (
        np.einsum("...mn,...n->...m", T, X)
        - 0.5 * (phi * phi)[..., None] * dchi
        + (chi * phi)[..., None] * dphi
    )
    J_up = np.einsum("...mn,...n->...m", g_up, J_dn)
    out = {"T": T, "Q": Q, "J_dn": J_dn, "J_up": J_up, "sqrtg": sqrtg, "Xphi": Xphi}
    if "flux" in need:
        r = np.sqrt(np.sum(pts * pts, axis=-1))
        n = np.divide(pts, r[..., None], out=np.zeros_like(pts), where=r[..., None] > 0.0)
        jrad = np.einsum("...i,...i->...", J_up[..., 1:], n)
        out["flux_disc"] = -sqrtg * J_up[..., 0]
        out["flux_cone"] = -sqrtg * (J_up[..., 0] - jrad)
        out["flux_cap"] = sqrtg * (J_up[..., 0] + jrad)
    if need_bulk:
        dh, nvec = mf["dh"], mf["nvec"]
        dX = _dx_values(mult, t, pts, h_step)
        dg_dn = -np.einsum("...ma,...gab,...bn->...gmn", g_dn, dh, g_dn)
        pi_x = 0.5 * (
            np.einsum("...g,...gmn->...mn", X, dg_dn)
            + np.einsum("...gn,...mg->...mn", g_dn, dX)
            + np.einsum("...mg,...ng->...mn", g_dn, dX)
        )
        T_up = np.einsum("...ma,...ab,...bn->...mn", g_up, T, g_up)
        K = np.einsum("...mn,...mn->...", T_up, pi_x)
        boxphi = np.einsum("...mn,...mn->...", g_up, d2) + np.einsum("...m,...m->...", nvec, dphi)
        boxchi = np.einsum("...mn,...mn->...", g_up, d2chi) + np.einsum("...m,...m->...", nvec, dchi)
        bulk = boxphi * (Xphi + chi * phi) + K + chi * Q - 0.5 * boxchi * phi * phi
        out.update({"K": K, "boxphi": boxphi, "boxchi": boxchi, "bulk": bulk, "pi_x": pi_x})
    if "residual" in need:
        dQ = np.einsum("...gab,...a,...b->...g", dh, dphi, dphi) + 2.0 * np.einsum(
            "...ab,...ga,...b->...g", g_up, d2, dphi
        )
        dT = (
            np.einsum("...gn,...s->...gns", d2, dphi)
            + np.einsum("...n,...gs->...gns", dphi, d2)
            - 0.5 * dg_dn * Q[..., None, None, None]
            - 0.5 * np.einsum("...ns,...g->...gns", g_dn, dQ)
        )
        dJ_dn = (
            np.einsum("...gns,...s->...gn", dT, X)
            + np.einsum("...ns,...gs->...gn", T, dX)
            - 0.5 * d2chi * (phi * phi)[..., None, None]
            - np.einsum("...n,...g->...gn", dchi, phi[..., None] * dphi)
            + np.einsum("...g,...n->...gn", dchi, phi[..., None] * dphi)
            + chi[..., None, None] * np.einsum("...g,...n->...gn", dphi, dphi)
            + (chi * phi)[..., None, None] * d2
        )
        div_prod = (
            np.einsum("...ggn,...n->...", dh, J_dn)
            + np.einsum("...gn,...gn->...", g_up, dJ_dn)
            + np.einsum("...m,...m->...", J_up, mf["dlog"])
        )
        out["div_product"] = div_prod
        out["div_identity"] = out["bulk"]
        out["residual"] = np.abs(div_prod - out["bulk"])
    return out


# ---------------------------------------------------------------------------
# Jet sampling from stored snapshots


_PAIRS = ((0, 1), (0, 2), (1, 2))


def _grid_array(store: dict, state: FieldState, name: str, order: int) -> np.ndarray:
    arr = store.get(name)
    if arr is not None:
        return arr
    grid = state.grid
    if name == "phi":
        arr = state.phi
    elif name == "pi":
        arr = state.pi
    elif name == "pidot":
        if state.pidot is None:
            raise InsufficientTimeLevelsError(
                f"snapshot at t={state.t!r} carries no stored acceleration field"
            )
        arr = state.pidot
    elif name.startswith("gphi"):
        arr = first_derivative(state.phi, int(name[4]), grid.dx, order)
    elif name.startswith("gpi"):
        arr = first_derivative(state.pi, int(name[3]), grid.dx, order)
    elif name.startswith("dd"):
        i, j = int(name[2]), int(name[3])
        if i == j:
            arr = second_derivative(state.phi, i, grid.dx, order)
        else:
            arr = cross_derivative(state.phi, i, j, grid.dx, order)
    else:
        raise KeyError(name)
    store[name] = arr
    return arr


class _JetSampler:
    """Lazy per-snapshot stencil arrays with point sampling.

    Keeps one dict of derived grids per live snapshot; the audit walks its
    jobs in time order and evicts snapshots behind the moving bracket.
    """

    def __init__(self, order: int) -> None:
        self.order = order
        self._stores: dict[int, tuple[float, FieldState, dict]] = {}

    def _store(self, state: FieldState) -> dict:
        key = id(state)
        hit = self._stores.get(key)
        if hit is None:
            hit = (state.t, state, {})
            self._stores[key] = hit
        return hit[2]

    def evict_before(self, t: float) -> None:
        dead = [k for k, (ts, _, _) in self._stores.items() if ts < t - 1e-12]
        for k in dead:
            del self._stores[k]

    def state_jet(self, state: FieldState, pts: np.ndarray, need_second: bool):
        store = self._store(state)
        grid = state.grid

        def sample(name: str) -> np.ndarray:
            return lagrange_sample(_grid_array(store, state, name, self.order), grid, pts)

        phi = sample("phi")
        dphi = np.stack([sample("pi")] + [sample(f"gphi{i}") for i in range(3)], axis=-1)
        if not need_second:
            return phi, dphi, None
        d2 = np.zeros(pts.shape[:-1] + (4, 4))
        d2[..., 0, 0] = sample("pidot")
        for i in range(3):
            ti = sample(f"gpi{i}")
            d2[..., 0, i + 1] = ti
            d2[..., i + 1, 0] = ti
        for i in range(3):
            d2[..., i + 1, i + 1] = sample(f"dd{i}{i}")
        for i, j in _PAIRS:
            ij = sample(f"dd{i}{j}")
            d2[..., i + 1, j + 1] = ij
            d2[..., j + 1, i + 1] = ij
        return phi, dphi, d2

    def jet(self, history: SnapshotSeries, t: float, pts: np.ndarray, need_second: bool):
        a, b, lam = history.bracket(t)
        self.evict_before(a.t)
        if lam <= 0.0 or b is a:
            return self.state_jet(a, pts, need_second)
        if lam >= 1.0:
            return self.state_jet(b, pts, need_second)
        pa, da, sa = self.state_jet(a, pts, need_second)
        pb, db, sb = self.state_jet(b, pts, need_second)
        mix = lambda u, v: (1.0 - lam) * u + lam * v
        return mix(pa, pb), mix(da, db), (mix(sa, sb) if need_second else None)


# ---------------------------------------------------------------------------
# Pointwise public operations


def _check_point_time(state: FieldState, pt: SpacetimePoint) -> None:
    if abs(pt.t - state.t) > 1e-9 * max(1.0, abs(state.t)):
        raise ValueError(f"point time {pt.t!r} does not match the snapshot at t={state.t!r}")


def stress_energy(state: FieldState, metric: MetricSpec, pt: SpacetimePoint) -> np.ndarray:
    """T_mn at one point, indices down, built from the sampled gradient."""
    _check_point_time(state, pt)
    pts = np.asarray(pt.x, dtype=float)[None, :]
    sampler = _JetSampler(order=4)
    _, dphi, _ = sampler.state_jet(state, pts, need_second=False)
    mf = _metric_fields(metric, state.t, pts)
    T, _ = _stress_tensor(dphi, mf["g_up"], mf["g_dn"])
    return T[0]


def deformation(
    mult: MultiplierSpec, metric: MetricSpec, pt: SpacetimePoint, h_step: float | None = None
) -> np.ndarray:
    """Deformation tensor pi^X_mn = (Lie_X g)_mn / 2 at one point."""
    pts = np.asarray(pt.x, dtype=float)[None, :]
    mf = _metric_fields(metric, pt.t, pts, need_dh=True)
    g_dn = mf["g_dn"]
    dg_dn = -np.einsum("...ma,...gab,...bn->...gmn", g_dn, mf["dh"], g_dn)
    X = np.asarray(mult.X(pt.t, pts), dtype=float)
    dX = _dx_values(mult, pt.t, pts, h_step)
    pi_x = 0.5 * (
        np.einsum("...g,...gmn->...mn", X, dg_dn)
        + np.einsum("...gn,...mg->...mn", g_dn, dX)
        + np.einsum("...mg,...ng->...mn", g_dn, dX)
    )
    return pi_x[0]


@dataclass(frozen=True)
class CurrentBundle:
    """Pointwise current data for one multiplier at one spacetime point.

    divergence_residual is the absolute difference between the product-rule
    expansion of the covariant divergence and the identity's right-hand
    side, both evaluated on the same jet; it vanishes up to rounding for a
    correct implementation regardless of the field.
    """

    T: np.ndarray
    J_tilde: np.ndarray
    K: float
    bulk_density: float
    divergence_residual: float


def currents(
    mult: MultiplierSpec, state: FieldState, metric: MetricSpec, pt: SpacetimePoint
) -> CurrentBundle:
    """Stress tensor, modified current, and identity densities at a point."""
    _check_point_time(state, pt)
    pts = np.asarray(pt.x, dtype=float)[None, :]
    sampler = _JetSampler(order=4)
    phi, dphi, d2 = sampler.state_jet(state, pts, need_second=True)
    tabs = _point_tables(
        mult, metric, state.t, pts, phi, dphi, d2, need=("flux", "bulk", "residual")
    )
    return CurrentBundle(
        T=tabs["T"][0],
        J_tilde=tabs["J_up"][0],
        K=float(tabs["K"][0]),
        bulk_density=float(tabs["bulk"][0]),
        divergence_residual=float(tabs["residual"][0]),
    )


# ---------------------------------------------------------------------------
# Slab auditor


@dataclass(frozen=True)
class AuditRegion:
    """Slab between the leaves at tau_lo and tau_hi, capped at v = v_cap.

    v_cap = None lets the auditor close the region at the largest incoming
    cone every supplied trajectory can sample.
    """

    tau_lo: float
    tau_hi: float
    v_cap: float | None = None


@dataclass(frozen=True)
class AuditEntry:
    dx: float
    cadence: float
    dv: float
    v_cap: float
    flux_lo: float
    flux_hi: float
    flux_cap: float
    bulk: float
    boundary: float
    scale: float
    residual: float


@dataclass(frozen=True)
class AuditReport:
    multiplier: str
    region: AuditRegion
    entries: tuple[AuditEntry, ...]
    orders: tuple[float, ...]

    @property
    def order(self) -> float | None:
        return self.orders[-1] if self.orders else None

    def to_json(self) -> str:
        doc = {
            "multiplier": self.multiplier,
            "region": {
                "tau_lo": self.region.tau_lo,
                "tau_hi": self.region.tau_hi,
                "v_cap": [e.v_cap for e in self.entries],
            },
            "resolutions": [e.dx for e in self.entries],
            "residuals": [e.residual for e in self.entries],
            "order": self.order,
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def _ordered_states(history: SnapshotSeries) -> list[FieldState]:
    if len(history.states) < 2:
        raise OutOfDomainError("the audit needs at least two stored snapshots")
    return history.states


def _snapshot_time(ts: list[float], t: float, what: str) -> None:
    k = int(np.searchsorted(ts, t - 1e-9))
    if k >= len(ts) or abs(ts[k] - t) > 1e-9:
        raise OutOfDomainError(f"{what} {t!r} is not a snapshot time")


def _tail_stations(lo: float, hi: float, step: float):
    """Uniform stations from lo with a fractional tail ending exactly at hi."""
    count = max(0, int(math.floor((hi - lo) / step + 1e-9)))
    vals = lo + step * np.arange(count + 1)
    if hi - vals[-1] > 1e-9 * step:
        vals = np.append(vals, hi)
    w = np.zeros_like(vals)
    if vals.size > 1:
        gaps = np.diff(vals)
        w[:-1] += 0.5 * gaps
        w[1:] += 0.5 * gaps
    return vals, w


def _audit_single(
    history: SnapshotSeries,
    mult: MultiplierSpec,
    metric: MetricSpec,
    region: AuditRegion,
    v_cap: float,
    dv: float,
    quad: SphereQuadrature,
    fd_order: int,
) -> AuditEntry:
    states = _ordered_states(history)
    grid = states[0].grid
    R = metric.params.R
    ts = [s.t for s in states]
    cadence = ts[1] - ts[0]
    taus = np.array([t for t in ts if region.tau_lo - 1e-9 <= t <= region.tau_hi + 1e-9])

    ds = disc_samples(grid, R)
    jobs: list[tuple[float, np.ndarray, list]] = []
    last = len(taus) - 1
    for s, tau in enumerate(taus):
        flux_key = "lo" if s == 0 else ("hi" if s == last else None)
        items = [("bulk", s, ds.weights)]
        if flux_key is not None:
            items.append(("disc", flux_key, ds.weights))
        jobs.append((float(tau), ds.points, items))
        u_s = 0.5 * (tau - R)
        radii, wr = _tail_stations(R, v_cap - u_s, dv)
        for j, (rj, wj) in enumerate(zip(radii, wr)):
            coeff = wj * rj * rj * quad.weights
            items = [("bulk", s, coeff)]
            if flux_key is not None:
                items.append(("cone", flux_key, coeff))
            jobs.append((float(tau + (rj - R)), rj * quad.nodes, items))
    u1, u2 = 0.5 * (region.tau_lo - R), 0.5 * (region.tau_hi - R)
    us, wu = _tail_stations(u1, u2, dv)
    for uk, wk in zip(us, wu):
        rk = v_cap - uk
        coeff = wk * rk * rk * quad.weights
        jobs.append((float(v_cap + uk), rk * quad.nodes, [("cap", "cap", coeff)]))

    jobs.sort(key=lambda j: j[0])
    sampler = _JetSampler(order=fd_order)
    bulk_by_slice = np.zeros(taus.size)
    flux = {"lo": 0.0, "hi": 0.0, "cap": 0.0}
    for t, pts, items in jobs:
        need_bulk = any(kind == "bulk" for kind, _, _ in items)
        phi, dphi, d2 = sampler.jet(history, t, pts, need_second=need_bulk)
        need = ("flux", "bulk") if need_bulk else ("flux",)
        tabs = _point_tables(mult, metric, t, pts, phi, dphi, d2, need=need)
        for kind, target, coeff in items:
            if kind == "bulk":
                bulk_by_slice[target] += float(coeff @ (tabs["sqrtg"] * tabs["bulk"]))
            elif kind == "disc":
                flux[target] += float(coeff @ tabs["flux_disc"])
            elif kind == "cone":
                flux[target] += float(coeff @ tabs["flux_cone"])
            else:
                flux["cap"] += float(coeff @ tabs["flux_cap"])

    bulk_total = float(trapezoid_weights(taus) @ bulk_by_slice)
    boundary = flux["lo"] - flux["hi"] + flux["cap"]
    scale = max(abs(flux["lo"]), abs(flux["hi"]), abs(flux["cap"]), abs(bulk_total), 1e-300)
    residual = abs(bulk_total - boundary) / scale
    return AuditEntry(
        dx=grid.dx,
        cadence=cadence,
        dv=dv,
        v_cap=v_cap,
        flux_lo=flux["lo"],
        flux_hi=flux["hi"],
        flux_cap=flux["cap"],
        bulk=bulk_total,
        boundary=boundary,
        scale=scale,
        residual=residual,
    )


def audit_identity(
    trajectories,
    mult: MultiplierSpec,
    metric: MetricSpec,
    region: AuditRegion,
    *,
    dv: float | None = None,
    quad: SphereQuadrature | None = None,
    fd_order: int = 4,
) -> AuditReport:
    """Check bulk = boundary for the modified current over a capped slab.

    trajectories is one SnapshotSeries or a coarse-to-fine sequence; each
    yields one entry, and consecutive entries produce a measured
    convergence order of the residual.  The bulk and the boundary are
    independent reductions over disjoint sample sets, joined only in the
    final defect.
    """
    if isinstance(trajectories, SnapshotSeries):
        trajectories = [trajectories]
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("need at least one trajectory")
    if region.tau_hi <= region.tau_lo + 1e-12:
        raise ValueError("audit slab needs tau_hi > tau_lo")
    quad = quad if quad is not None else SphereQuadrature.build()
    R = metric.params.R

    dvs = []
    cap_limit = math.inf
    for history in trajectories:
        states = _ordered_states(history)
        grid = states[0].grid
        ts = [s.t for s in states]
        cadence = ts[1] - ts[0]
        _snapshot_time(ts, region.tau_lo, "slab endpoint")
        _snapshot_time(ts, region.tau_hi, "slab endpoint")
        dv_i = dv if dv is not None else cadence * max(1, round(grid.dx / cadence))
        if abs(dv_i / cadence - round(dv_i / cadence)) > 1e-9:
            raise ValueError(f"ring spacing dv={dv_i!r} must be a multiple of the cadence {cadence!r}")
        dvs.append(dv_i)
        reach = grid.half_width - 2.0 * grid.dx
        for tau in (region.tau_lo, region.tau_hi):
            u = 0.5 * (tau - R)
            cap_limit = min(cap_limit, u + min(reach, R + ts[-1] - tau))
    if region.v_cap is not None:
        if region.v_cap > cap_limit + 1e-9:
            raise OutOfDomainError(
                f"cap v={region.v_cap!r} extends beyond the sampled domain (limit {cap_limit!r})"
            )
        v_cap = region.v_cap
    else:
        v_cap = cap_limit
    if v_cap < 0.5 * (region.tau_hi + R) - 1e-9:
        raise OutOfDomainError("the incoming cap closes below the gluing sphere")

    entries = [
        _audit_single(history, mult, metric, region, v_cap, dv_i, quad, fd_order)
        for history, dv_i in zip(trajectories, dvs)
    ]
    orders = []
    for a, b in zip(entries, entries[1:]):
        if b.residual > 0.0 and a.residual > 0.0 and a.dx != b.dx:
            orders.append(math.log(a.residual / b.residual) / math.log(a.dx / b.dx))
        else:
            orders.append(math.inf)
    return AuditReport(
        multiplier=mult.name, region=region, entries=tuple(entries), orders=tuple(orders)
    )
