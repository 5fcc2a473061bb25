"""Hybrid foliation leaves, sphere quadrature, and grid interpolation.

A leaf at parameter tau is the flat disc {t = tau, r <= R} glued to the
outgoing null cone {t - r = tau - R, r >= R}, truncated where the stored
grid data ends.  Disc samples are grid nodes with fractionally weighted
boundary cells; cone samples are tensor products of radial stations with a
product Gauss-Legendre sphere rule.  Interpolation of grid fields onto cone
points uses a separable cubic B-spline in space (value and analytic
gradient) and is linear between stored time levels, with the time
derivative always taken from the evolved momentum field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import ndimage


class GridTooSmallError(ValueError):
    """The requested disc radius does not fit inside the grid."""


class OutOfDomainError(ValueError):
    """Interpolation requested outside the grid cube or stored time window."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform Cartesian grid on [-half_width, half_width]^3.

    Nodes sit at -half_width + i*dx for i = 0..n, so the origin is a node;
    n must be even for that reason.
    """

    half_width: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 16:
            raise ValueError("grid needs at least 16 cells per axis")
        if self.n % 2 != 0:
            raise ValueError("n must be even so the origin is a grid node")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")

    @property
    def dx(self) -> float:
        return 2.0 * self.half_width / self.n

    @property
    def shape(self) -> tuple[int, int, int]:
        m = self.n + 1
        return (m, m, m)

    @property
    def axis(self) -> np.ndarray:
        return -self.half_width + self.dx * np.arange(self.n + 1)

    def meshes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ax = self.axis
        return np.meshgrid(ax, ax, ax, indexing="ij")

    def radius_grid(self) -> np.ndarray:
        x, y, z = self.meshes()
        return np.sqrt(x * x + y * y + z * z)


@dataclass
class FieldState:
    """The field pair (phi, d_t phi) on a grid at one time level.

    pidot optionally carries the solver's momentum right-hand side at the
    same instant; when present, audits can reconstruct the wave operator on
    the grid without re-deriving second time derivatives.
    """

    t: float
    phi: np.ndarray
    pi: np.ndarray
    grid: GridSpec
    pidot: np.ndarray | None = None

    def copy(self) -> "FieldState":
        return FieldState(
            t=self.t,
            phi=self.phi.copy(),
            pi=self.pi.copy(),
            grid=self.grid,
            pidot=None if self.pidot is None else self.pidot.copy(),
        )


# ---------------------------------------------------------------------------
# Sphere quadrature


@dataclass(frozen=True)
class SphereQuadrature:
    """Nodes and weights on the unit sphere.

    Product rule: Gauss-Legendre in cos(theta) times a uniform azimuth
    grid, exact for spherical polynomials up to the stated degree.
    """

    nodes: np.ndarray  # (K, 3)
    weights: np.ndarray  # (K,)
    degree: int

    @classmethod
    def build(cls, degree: int = 11) -> "SphereQuadrature":
        if degree < 1:
            raise ValueError("degree must be positive")
        L = (degree + 2) // 2  # GL with L nodes is exact through degree 2L-1
        M = 2 * L
        mu, wmu = leggauss(L)
        phi = 2.0 * math.pi * (np.arange(M) + 0.5) / M
        wphi = 2.0 * math.pi / M
        s = np.sqrt(1.0 - mu**2)
        nodes = np.empty((L * M, 3))
        weights = np.empty(L * M)
        k = 0
        for i in range(L):
            for j in range(M):
                nodes[k] = (s[i] * math.cos(phi[j]), s[i] * math.sin(phi[j]), mu[i])
                weights[k] = wmu[i] * wphi
                k += 1
        return cls(nodes=nodes, weights=weights, degree=min(2 * L - 1, M - 1))

    def refined(self) -> "SphereQuadrature":
        return SphereQuadrature.build(degree=2 * self.degree)


# ---------------------------------------------------------------------------
# Disc geometry (shared by every leaf at fixed grid and radius)

_DISC_CACHE: dict[tuple[float, int, float], "DiscSamples"] = {}


@dataclass(frozen=True)
class DiscSamples:
    """Grid nodes covering the ball r <= R with cell-fraction weights."""

    index: tuple[np.ndarray, np.ndarray, np.ndarray]
    points: np.ndarray  # (N, 3)
    r: np.ndarray  # (N,)
    weights: np.ndarray  # (N,) already scaled by dx^3


def _subcell_fractions(centers: np.ndarray, dx: float, R: float) -> np.ndarray:
    # 8^3 stratified sample points per cell estimate the covered volume
    # fraction of boundary cells.
    m = 8
    offs = (np.arange(m) + 0.5) / m - 0.5
    ox, oy, oz = np.meshgrid(offs, offs, offs, indexing="ij")
    sub = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=-1) * dx
    frac = np.empty(centers.shape[0])
    block = 4096
    for a in range(0, centers.shape[0], block):
        pts = centers[a : a + block, None, :] + sub[None, :, :]
        inside = np.sum(pts * pts, axis=-1) <= R * R
        frac[a : a + block] = np.mean(inside, axis=-1)
    return frac


def disc_samples(grid: GridSpec, R: float) -> DiscSamples:
    key = (grid.half_width, grid.n, R)
    hit = _DISC_CACHE.get(key)
    if hit is not None:
        return hit
    ax = grid.axis
    dx = grid.dx
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    r = np.sqrt(x * x + y * y + z * z)
    half_diag = 0.5 * math.sqrt(3.0) * dx
    keep = r <= R + half_diag
    idx = np.nonzero(keep)
    pts = np.stack([x[keep], y[keep], z[keep]], axis=-1)
    rk = r[keep]
    w = np.full(rk.shape, dx**3)
    boundary = rk > R - half_diag
    w[boundary] = dx**3 * _subcell_fractions(pts[boundary], dx, R)
    nz = w > 0
    out = DiscSamples(
        index=tuple(i[nz] for i in idx),
        points=pts[nz],
        r=rk[nz],
        weights=w[nz],
    )
    _DISC_CACHE[key] = out
    return out


# ---------------------------------------------------------------------------
# Leaves


@dataclass(frozen=True)
class FoliationLeaf:
    """One hybrid surface: disc at t = tau plus truncated outgoing cone.

    Cone stations sit at radii r_j = R + j*dv (node j = 0 is the gluing
    sphere r = R) with trapezoid weights in v; every station satisfies
    t - r = tau - R.  r_max is the effective truncation radius.
    """

    tau: float
    R: float
    disc: DiscSamples
    quad: SphereQuadrature
    v_nodes: np.ndarray
    v_weights: np.ndarray
    cone_r: np.ndarray
    cone_t: np.ndarray
    dv: float

    @property
    def u(self) -> float:
        return 0.5 * (self.tau - self.R)

    @property
    def v_lo(self) -> float:
        return 0.5 * (self.tau + self.R)

    @property
    def r_max(self) -> float:
        return float(self.cone_r[-1]) if self.cone_r.size else self.R

    @property
    def n_rings(self) -> int:
        return self.cone_r.size

    def cone_points(self) -> np.ndarray:
        """Cartesian cone samples, shape (J, K, 3)."""
        return self.cone_r[:, None, None] * self.quad.nodes[None, :, :]

    def to_csv(self) -> str:
        lines = ["v,r,t,omega_x,omega_y,omega_z,weight"]
        for j in range(self.n_rings):
            for k in range(self.quad.nodes.shape[0]):
                w = self.v_weights[j] * self.quad.weights[k]
                n = self.quad.nodes[k]
                lines.append(
                    f"{self.v_nodes[j]:.17g},{self.cone_r[j]:.17g},{self.cone_t[j]:.17g},"
                    f"{n[0]:.17g},{n[1]:.17g},{n[2]:.17g},{w:.17g}"
                )
        return "\n".join(lines) + "\n"


def make_leaf(
    tau: float,
    params,
    grid: GridSpec,
    quad: SphereQuadrature | None = None,
    dv: float | None = None,
    t_available: float | None = None,
    v_max: float | None = None,
) -> FoliationLeaf:
    """Build the leaf at tau, truncating the cone at the data horizon.

    The cone extends while r <= half_width - 2 dx (the cubic interpolation
    stencils need two cells of slack at the box faces) and, when
    t_available is given, while the sample time t = tau + r - R stays
    within it.  An explicit v_max intersects both.
    """
    R = float(params.R)
    reach = grid.half_width - 2.0 * grid.dx
    if R >= reach:
        raise GridTooSmallError(
            f"disc radius R={R} does not fit in half_width={grid.half_width} "
            f"with interpolation margin 2 dx"
        )
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if quad is None:
        quad = SphereQuadrature.build()
    if dv is None:
        dv = grid.dx
    u = 0.5 * (tau - R)
    v_lo = 0.5 * (tau + R)
    # r <= reach  <=>  v <= u + reach; at fixed u, dr = dv.
    v_hi = u + reach
    if t_available is not None:
        # t = v + u must not exceed the stored data
        v_hi = min(v_hi, t_available - u)
    if v_max is not None:
        v_hi = min(v_hi, v_max)
    if v_hi < v_lo:
        raise GridTooSmallError(
            f"cone of leaf tau={tau} has no room: v_hi={v_hi} < v_lo={v_lo}"
        )
    m = int(math.floor((v_hi - v_lo) / dv + 1e-12))
    j = np.arange(m + 1)
    r_nodes = R + j * dv
    t_nodes = tau + j * dv
    v_nodes = v_lo + j * dv
    w = np.full(m + 1, dv)
    if m >= 1:
        w[0] = 0.5 * dv
        w[-1] = 0.5 * dv
    else:
        w[:] = 0.0
    return FoliationLeaf(
        tau=float(tau),
        R=R,
        disc=disc_samples(grid, R),
        quad=quad,
        v_nodes=v_nodes,
        v_weights=w,
        cone_r=r_nodes,
        cone_t=t_nodes,
        dv=dv,
    )


def cone_integral(leaf: FoliationLeaf, f) -> float:
    """Integrate f over the cone with measure r^2 dv domega.

    f may be a precomputed (J, K) array over (station, sphere node) or a
    callable f(v, r, omega) receiving broadcastable arrays of shapes
    (J, 1), (J, 1), (K, 3) and returning (J, K).
    """
    if leaf.n_rings == 0:
        return 0.0
    if callable(f):
        vals = f(leaf.v_nodes[:, None], leaf.cone_r[:, None], leaf.quad.nodes)
    else:
        vals = np.asarray(f, dtype=float)
    vals = np.broadcast_to(vals, (leaf.n_rings, leaf.quad.weights.size))
    ring = vals @ leaf.quad.weights  # fixed-order reduction over omega
    return float(np.sum(ring * leaf.cone_r**2 * leaf.v_weights))


def disc_integral(leaf: FoliationLeaf, f) -> float:
    """Integrate f over the disc with measure dx.

    f may be values at the disc nodes (N,) or a callable f(points (N,3)).
    """
    vals = f(leaf.disc.points) if callable(f) else np.asarray(f, dtype=float)
    return float(np.sum(vals * leaf.disc.weights))


# ---------------------------------------------------------------------------
# Interpolation


def _bspline_weights(s: np.ndarray) -> np.ndarray:
    """Cubic B-spline basis values at offsets -1..2 for s in [0,1); (4, N)."""
    s2 = s * s
    s3 = s2 * s
    w = np.empty((4,) + s.shape)
    w[0] = (1.0 - 3.0 * s + 3.0 * s2 - s3) / 6.0
    w[1] = (4.0 - 6.0 * s2 + 3.0 * s3) / 6.0
    w[2] = (1.0 + 3.0 * s + 3.0 * s2 - 3.0 * s3) / 6.0
    w[3] = s3 / 6.0
    return w


def _bspline_dweights(s: np.ndarray) -> np.ndarray:
    s2 = s * s
    d = np.empty((4,) + s.shape)
    d[0] = (-1.0 + 2.0 * s - s2) / 2.0
    d[1] = (-4.0 * s + 3.0 * s2) / 2.0
    d[2] = (1.0 + 2.0 * s - 3.0 * s2) / 2.0
    d[3] = s2 / 2.0
    return d


class SplineCoeffs:
    """Prefiltered cubic B-spline coefficients of one grid field."""

    def __init__(self, values: np.ndarray, grid: GridSpec) -> None:
        self.grid = grid
        self.coeffs = ndimage.spline_filter(values, order=3, mode="mirror", output=np.float64)

    def evaluate(self, pts: np.ndarray, gradient: bool = False):
        """Value (and spatial gradient) at points of shape (..., 3)."""
        grid = self.grid
        shape = pts.shape[:-1]
        p = pts.reshape(-1, 3)
        q = (p + grid.half_width) / grid.dx
        if np.any(q < 1.0 - 1e-9) or np.any(q > grid.n - 2.0 + 1e-9):
            raise OutOfDomainError("interpolation point too close to the grid edge")
        i0 = np.clip(np.floor(q).astype(np.int64), 1, grid.n - 2)
        s = q - i0
        w = [_bspline_weights(s[:, a]) for a in range(3)]
        c = self.coeffs
        val = np.zeros(p.shape[0])
        if gradient:
            dw = [_bspline_dweights(s[:, a]) for a in range(3)]
            gx = np.zeros(p.shape[0])
            gy = np.zeros(p.shape[0])
            gz = np.zeros(p.shape[0])
        for a in range(4):
            ia = i0[:, 0] + (a - 1)
            for b in range(4):
                ib = i0[:, 1] + (b - 1)
                wab = w[0][a] * w[1][b]
                for cc in range(4):
                    ic = i0[:, 2] + (cc - 1)
                    cv = c[ia, ib, ic]
                    val += wab * w[2][cc] * cv
                    if gradient:
                        gx += dw[0][a] * w[1][b] * w[2][cc] * cv
                        gy += w[0][a] * dw[1][b] * w[2][cc] * cv
                        gz += w[0][a] * w[1][b] * dw[2][cc] * cv
        if gradient:
            g = np.stack([gx, gy, gz], axis=-1) / grid.dx
            return val.reshape(shape), g.reshape(shape + (3,))
        return val.reshape(shape)


class SnapshotSeries:
    """A time-ordered window of FieldStates with cached spline coefficients."""

    def __init__(self, states: list[FieldState] | None = None) -> None:
        self.states: list[FieldState] = list(states) if states else []
        self._cache: dict[tuple[int, str], SplineCoeffs] = {}

    def append(self, state: FieldState) -> None:
        if self.states and state.t <= self.states[-1].t:
            raise ValueError("states must be appended in increasing time order")
        self.states.append(state)

    def drop_before(self, t: float) -> None:
        while len(self.states) >= 2 and self.states[1].t <= t:
            old = self.states.pop(0)
            for kk in [k for k in self._cache if k[0] == id(old)]:
                del self._cache[kk]

    @property
    def t_first(self) -> float:
        return self.states[0].t

    @property
    def t_last(self) -> float:
        return self.states[-1].t

    def spline(self, state: FieldState, name: str) -> SplineCoeffs:
        key = (id(state), name)
        hit = self._cache.get(key)
        if hit is None:
            values = getattr(state, name)
            if values is None:
                raise ValueError(f"state at t={state.t} has no field {name!r}")
            hit = SplineCoeffs(values, state.grid)
            self._cache[key] = hit
        return hit

    def bracket(self, t: float) -> tuple[FieldState, FieldState, float]:
        """The two states straddling t and the linear blend weight."""
        eps = 1e-9
        if not self.states or t < self.t_first - eps or t > self.t_last + eps:
            raise OutOfDomainError(f"time {t} outside stored window")
        ts = [s.t for s in self.states]
        k = int(np.searchsorted(ts, t, side="right")) - 1
        k = max(0, min(k, len(ts) - 2)) if len(ts) >= 2 else 0
        if len(ts) == 1:
            return self.states[0], self.states[0], 0.0
        a, b = self.states[k], self.states[k + 1]
        lam = (t - a.t) / (b.t - a.t)
        lam = min(max(lam, 0.0), 1.0)
        return a, b, lam


def interp(history: SnapshotSeries, t: float, pts: np.ndarray):
    """Field value and all four first derivatives at points on one time.

    Returns (phi, dphi) with dphi[..., 0] = d_t phi taken from the momentum
    field, never from differencing the snapshots.  Space is interpolated by
    the cubic B-spline, time linearly between the bracketing levels.
    """
    pts = np.asarray(pts, dtype=float)
    a, b, lam = history.bracket(t)
    va, ga = history.spline(a, "phi").evaluate(pts, gradient=True)
    pa = history.spline(a, "pi").evaluate(pts)
    if b is a:
        vb, gb, pb = va, ga, pa
    else:
        vb, gb = history.spline(b, "phi").evaluate(pts, gradient=True)
        pb = history.spline(b, "pi").evaluate(pts)
    val = (1.0 - lam) * va + lam * vb
    grad = (1.0 - lam) * ga + lam * gb
    pi = (1.0 - lam) * pa + lam * pb
    dphi = np.concatenate([pi[..., None], grad], axis=-1)
    return val, dphi


def interp_point(history: SnapshotSeries, t: float, x) -> tuple[float, np.ndarray]:
    val, dphi = interp(history, t, np.asarray(x, dtype=float)[None, :])
    return float(val[0]), dphi[0]


def lagrange_sample(values: np.ndarray, grid: GridSpec, pts: np.ndarray) -> np.ndarray:
    """Local 4-point cubic Lagrange interpolation of a grid field.

    No prefilter pass, so it is cheap on fields built on the fly; accuracy
    is monitor grade (one order rougher than the spline path).
    """
    pts = np.asarray(pts, dtype=float)
    shape = pts.shape[:-1]
    p = pts.reshape(-1, 3)
    q = (p + grid.half_width) / grid.dx
    if np.any(q < 1.0 - 1e-9) or np.any(q > grid.n - 2.0 + 1e-9):
        raise OutOfDomainError("interpolation point too close to the grid edge")
    i0 = np.clip(np.floor(q).astype(np.int64), 1, grid.n - 2)
    s = q - i0

    def lag(sa):
        w = np.empty((4,) + sa.shape)
        w[0] = -sa * (sa - 1.0) * (sa - 2.0) / 6.0
        w[1] = (sa + 1.0) * (sa - 1.0) * (sa - 2.0) / 2.0
        w[2] = -(sa + 1.0) * sa * (sa - 2.0) / 2.0
        w[3] = (sa + 1.0) * sa * (sa - 1.0) / 6.0
        return w

    wx, wy, wz = lag(s[:, 0]), lag(s[:, 1]), lag(s[:, 2])
    out = np.zeros(p.shape[0])
    for a in range(4):
        ia = i0[:, 0] + (a - 1)
        for b in range(4):
            ib = i0[:, 1] + (b - 1)
            wab = wx[a] * wy[b]
            for c in range(4):
                ic = i0[:, 2] + (c - 1)
                out += wab * wz[c] * values[ia, ib, ic]
    return out.reshape(shape)
