"""Background geometry: null frames, frame components, metric families.

The evolution runs on perturbations of Minkowski space written through the
inverse metric, g^{mu nu} = m0^{mu nu} + h^{mu nu}, with signature (-,+,+,+)
so that the flat principal part is -d_tt + Laplacian.  Everything here is
plain coordinate algebra at a point or on arrays of points: the null frame
{L, Lbar, S1, S2} attached to the outgoing cones, frame components of
symmetric 2-tensors, the cubic/quadratic nonlinearity coefficients and their
null-condition check, and the decay envelopes that admissible backgrounds
must satisfy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Inverse Minkowski metric m0^{mu nu}; index 0 is time.
MINKOWSKI = np.diag([-1.0, 1.0, 1.0, 1.0])

R_FLOOR_DEFAULT = 1e-8


class DegeneratePointError(ValueError):
    """Raised when a null frame is requested too close to the spatial origin."""


# ---------------------------------------------------------------------------
# Parameter bundle


@dataclass(frozen=True)
class DecayParams:
    """Smallness and decay-rate parameters for one experiment.

    delta0 scales the background perturbation, alpha sets the decay rate of
    the target energy estimates, and (epsilon, alpha1, alpha2) are the
    auxiliary weight exponents threaded through the integrated-energy and
    r^p-weighted hierarchies.  R is the radius at which the foliation
    switches from flat discs to outgoing cones.
    """

    delta0: float
    alpha: float
    epsilon: float
    alpha1: float
    alpha2: float
    R: float


def validate_params(p: DecayParams) -> list[str]:
    """Check the admissible-parameter chain; return the violated inequalities.

    An empty list means the bundle is admissible.  Each entry names one
    failed inequality in plain text so callers can surface it directly.
    """
    bad: list[str] = []
    vals = [p.delta0, p.alpha, p.epsilon, p.alpha1, p.alpha2, p.R]
    if not all(math.isfinite(v) for v in vals):
        return ["all fields finite"]
    if p.delta0 < 0:
        bad.append("delta0 >= 0")
    if not 0 < p.alpha:
        bad.append("alpha > 0")
    # The boundary value 1/10 is admitted: every validated preset uses
    # alpha = 0.1 and the chain below stays consistent there.
    if not p.alpha <= 0.1:
        bad.append("alpha < 1/10")
    if not 0 < p.epsilon:
        bad.append("epsilon > 0")
    if not p.epsilon < p.alpha**2 / 4:
        bad.append("epsilon < alpha^2/4")
    lower = (2 * p.alpha + p.alpha * p.epsilon) / (2 - p.alpha)
    if not lower <= p.alpha1:
        bad.append("(2*alpha + alpha*epsilon)/(2 - alpha) <= alpha1")
    if not p.alpha1 < p.alpha2:
        bad.append("alpha1 < alpha2")
    if not p.alpha2 <= (7.0 / 3.0) * p.alpha - p.alpha1 - p.epsilon:
        bad.append("alpha2 <= (7/3)*alpha - alpha1 - epsilon")
    if not p.R > 4:
        bad.append("R > 4")
    return bad


#: Admissible bundle used by the shipped presets.
PARAMS_DEFAULT = DecayParams(
    delta0=0.01, alpha=0.1, epsilon=0.002, alpha1=0.107, alpha2=0.12, R=10.0
)


# ---------------------------------------------------------------------------
# Points and frames


@dataclass(frozen=True)
class SpacetimePoint:
    """A point (t, x) with the retarded/advanced coordinates attached."""

    t: float
    x: tuple[float, float, float]

    @property
    def r(self) -> float:
        return math.sqrt(self.x[0] ** 2 + self.x[1] ** 2 + self.x[2] ** 2)

    @property
    def u(self) -> float:
        return 0.5 * (self.t - self.r)

    @property
    def v(self) -> float:
        return 0.5 * (self.t + self.r)


@dataclass(frozen=True)
class NullFrame:
    """The outgoing null frame at a point with r > 0.

    L and Lbar are the outgoing and incoming null directions, S1 and S2 an
    orthonormal tangent basis of the r-sphere.  lcov and lbarcov hold the
    covector components L_mu = (1, x/r) and Lbar_mu = (1, -x/r); note the
    covectors have no sign flip on the time slot.
    """

    L: np.ndarray
    Lbar: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    lcov: np.ndarray
    lbarcov: np.ndarray


def _sphere_tangent_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Deterministic gauge: project the coordinate axis least aligned with n,
    # then complete by the cross product.
    k = int(np.argmin(np.abs(n)))
    e = np.zeros(3)
    e[k] = 1.0
    s1 = e - np.dot(e, n) * n
    s1 /= np.linalg.norm(s1)
    s2 = np.cross(n, s1)
    return s1, s2


def null_frame_at(pt: SpacetimePoint, r_floor: float = R_FLOOR_DEFAULT) -> NullFrame:
    """Build the null frame at pt; raises DegeneratePointError for r < r_floor."""
    x = np.asarray(pt.x, dtype=float)
    r = float(np.linalg.norm(x))
    if r < r_floor:
        raise DegeneratePointError(f"null frame undefined at r={r!r} < {r_floor!r}")
    n = x / r
    s1, s2 = _sphere_tangent_basis(n)
    L = np.concatenate(([1.0], n))
    Lbar = np.concatenate(([1.0], -n))
    S1 = np.concatenate(([0.0], s1))
    S2 = np.concatenate(([0.0], s2))
    lcov = np.concatenate(([1.0], n))
    lbarcov = np.concatenate(([1.0], -n))
    return NullFrame(L=L, Lbar=Lbar, S1=S1, S2=S2, lcov=lcov, lbarcov=lbarcov)


# Covector legs for frame components.  Null legs carry weight 1/2, sphere
# legs weight 1; the products reproduce the inverse frame Gram matrix when
# applied to the flat inverse metric (LbarL -> -1/2, S1S1 -> 1).
_FRAME_LEGS = ("Lbar", "L", "S1", "S2")


def _leg(fr: NullFrame, name: str) -> tuple[np.ndarray, float]:
    if name == "Lbar":
        return fr.lbarcov, 0.5
    if name == "L":
        return fr.lcov, 0.5
    if name == "S1":
        return np.concatenate(([0.0], fr.S1[1:])), 1.0
    if name == "S2":
        return np.concatenate(([0.0], fr.S2[1:])), 1.0
    raise ValueError(f"unknown frame leg {name!r}")


def frame_component(k: np.ndarray, fr: NullFrame, which: str) -> float:
    """Contract a symmetric 2-tensor (upper indices) with a frame covector pair.

    `which` is two leg names drawn from {Lbar, L, S1, S2}, e.g. "LbarLbar"
    or "LbarL".  Null legs contribute a factor 1/2 each, so the null-null
    components carry the 1/4 normalization under which the flat inverse
    metric has LbarLbar component 0 and LbarL component -1/2.
    """
    k = np.asarray(k, dtype=float)
    if k.shape != (4, 4):
        raise ValueError("frame_component expects a 4x4 tensor")
    names = []
    rest = which
    while rest:
        for cand in _FRAME_LEGS:
            if rest.startswith(cand):
                names.append(cand)
                rest = rest[len(cand):]
                break
        else:
            raise ValueError(f"cannot parse frame-component name {which!r}")
    if len(names) != 2:
        raise ValueError(f"frame-component name {which!r} must have two legs")
    (ca, wa), (cb, wb) = _leg(fr, names[0]), _leg(fr, names[1])
    return float(wa * wb * ca @ k @ cb)


# ---------------------------------------------------------------------------
# Vectorized frame helpers shared by the envelope validator and diagnostics.


def lbar_covectors(x: np.ndarray) -> np.ndarray:
    """Lbar_mu = (1, -x/r) for an array of positions with shape (..., 3)."""
    r = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    out = np.empty(x.shape[:-1] + (4,))
    out[..., 0] = 1.0
    out[..., 1:] = -x / r
    return out


def lbarlbar_scalar(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """The LbarLbar frame component of h^{mu nu} as a scalar field.

    h has shape (..., 4, 4) and x shape (..., 3); the 1/4 normalization
    matches frame_component.
    """
    ell = lbar_covectors(x)
    return 0.25 * np.einsum("...mn,...m,...n->...", h, ell, ell)


def lbarlbar_gradient(h: np.ndarray, dh: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Coordinate gradient d_gamma of the LbarLbar scalar, shape (..., 4).

    dh[..., g, m, n] holds d_g h^{mn}.  The position dependence of the frame
    contributes through d_j Lbar_i = -(delta_ij - n_i n_j)/r.
    """
    ell = lbar_covectors(x)
    r = np.sqrt(np.sum(x * x, axis=-1))
    n = x / r[..., None]
    grad = 0.25 * np.einsum("...gmn,...m,...n->...g", dh, ell, ell)
    # d_j(ell_i) has no time row; assemble the correction 1/2 h^{mn} dell_m ell_n.
    proj = (np.eye(3) - n[..., :, None] * n[..., None, :]) / r[..., None, None]
    dell = np.zeros(x.shape[:-1] + (3, 4))
    dell[..., :, 1:] = -proj
    grad[..., 1:] += 0.5 * np.einsum("...mn,...jm,...n->...j", h, dell, ell)
    return grad


def good_derivative_parts(grad: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a coordinate gradient (..., 4) into (L f, |slashed grad f|)."""
    r = np.sqrt(np.sum(x * x, axis=-1))
    n = x / r[..., None]
    radial = np.sum(grad[..., 1:] * n, axis=-1)
    lf = grad[..., 0] + radial
    tang = grad[..., 1:] - radial[..., None] * n
    return lf, np.sqrt(np.sum(tang * tang, axis=-1))


# ---------------------------------------------------------------------------
# Nonlinearity coefficients and the null condition


@dataclass
class NullFormTensor:
    """Constant coefficients of the quasilinear and semilinear nonlinearities.

    gcube[m, n, g] multiplies d_g phi * d_mn phi and must be symmetric in
    (m, n); aquad[m, n] multiplies d_m phi * d_n phi.
    """

    gcube: np.ndarray = field(default_factory=lambda: np.zeros((4, 4, 4)))
    aquad: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))

    def __post_init__(self) -> None:
        self.gcube = np.asarray(self.gcube, dtype=float)
        self.aquad = np.asarray(self.aquad, dtype=float)
        if self.gcube.shape != (4, 4, 4) or self.aquad.shape != (4, 4):
            raise ValueError("gcube must be (4,4,4) and aquad (4,4)")
        if not np.array_equal(self.gcube, np.swapaxes(self.gcube, 0, 1)):
            raise ValueError("gcube must be symmetric in its first two slots")

    @classmethod
    def wave_symbol_example(cls) -> "NullFormTensor":
        """The classic null form d_t phi * (d_tt - Laplacian) phi."""
        g = np.zeros((4, 4, 4))
        g[0, 0, 0] = 1.0
        for i in (1, 2, 3):
            g[i, i, 0] = -1.0
        return cls(gcube=g)


@dataclass(frozen=True)
class NullConditionReport:
    passed: bool
    worst_residual: float
    worst_covector: tuple[float, float, float, float]
    threshold: float


def _fibonacci_directions(n: int) -> np.ndarray:
    # Golden-angle spiral on the sphere: deterministic, low discrepancy.
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = i * (math.pi * (3.0 - math.sqrt(5.0)))
    s = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def check_null_condition(
    nf: NullFormTensor, n_samples: int = 1024, tol: float = 1e-12
) -> NullConditionReport:
    """Test both coefficient tensors against null covectors xi = (1, omega).

    The cubic symbol g^{mn g} xi_m xi_n xi_g and the quadratic symbol
    A^{mn} xi_m xi_n are polynomials, so either they vanish on the whole
    cone or sampled residuals are order one; the verdict compares the worst
    residual to tol * (1 + max coefficient), which is scale invariant.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    dirs = _fibonacci_directions(n_samples)
    axes = np.concatenate([np.eye(3), -np.eye(3)], axis=0)
    omega = np.concatenate([dirs, axes], axis=0)
    xi = np.concatenate([np.ones((omega.shape[0], 1)), omega], axis=1)
    res_g = np.einsum("mng,km,kn,kg->k", nf.gcube, xi, xi, xi)
    res_a = np.einsum("mn,km,kn->k", nf.aquad, xi, xi)
    res = np.concatenate([res_g, res_a])
    k = int(np.argmax(np.abs(res)))
    worst = float(np.abs(res[k]))
    scale = 1.0 + max(float(np.max(np.abs(nf.gcube))), float(np.max(np.abs(nf.aquad))))
    xi_worst = xi[k % xi.shape[0]]
    return NullConditionReport(
        passed=worst <= tol * scale,
        worst_residual=worst,
        worst_covector=tuple(float(c) for c in xi_worst),
        threshold=tol * scale,
    )


# ---------------------------------------------------------------------------
# Decay envelopes


@dataclass(frozen=True)
class EnvelopeH:
    """Decay envelopes for admissible backgrounds on the cone portion.

    Hbar(r) = delta0 (1+r)^(-1-2 alpha) bounds the good derivatives and the
    LbarLbar component; H(tau, r) adds the slower (1+r)^(-1/2-2 alpha)
    (1+tau)^(-1/2-alpha/2) tail and bounds everything else.  H includes the
    Hbar term so that Hbar <= H holds everywhere by construction.
    """

    delta0: float
    alpha: float

    def Hbar(self, r):
        rp = 1.0 + np.asarray(r, dtype=float)
        return self.delta0 * rp ** (-1.0 - 2.0 * self.alpha)

    def H(self, tau, r):
        rp = 1.0 + np.asarray(r, dtype=float)
        taup = 1.0 + np.asarray(tau, dtype=float)
        tail = rp ** (-0.5 - 2.0 * self.alpha) * taup ** (-0.5 - 0.5 * self.alpha)
        return self.delta0 * tail + self.Hbar(r)


# ---------------------------------------------------------------------------
# Metric families

ROTATIONS = ((1, 2), (1, 3), (2, 3))


def commuting_words(k_max: int) -> list[tuple[str, ...]]:
    """Canonical words in the commuting fields up to length k_max.

    The alphabet is T (time translation) and O12, O13, O23 (rotations).
    T commutes with every rotation, so words are canonicalized with all
    T letters first; rotations do not commute among themselves and appear
    in every order.
    """
    rots = [f"O{a}{b}" for a, b in ROTATIONS]
    words: list[tuple[str, ...]] = [()]
    for k in range(1, k_max + 1):
        for m in range(k, -1, -1):
            n_rot = k - m
            if n_rot == 0:
                words.append(("T",) * m)
                continue
            stack: list[tuple[str, ...]] = [()]
            for _ in range(n_rot):
                stack = [w + (r,) for w in stack for r in rots]
            words.extend(("T",) * m + w for w in stack)
    return words


class MetricSpec:
    """Analytic inverse-metric perturbation h^{mu nu}(t, x) with derivatives.

    Subclasses implement `components`, returning h with shape (..., 4, 4)
    and dh with shape (..., 4, 4, 4) where dh[..., g, m, n] = d_g h^{mn},
    for positions x of shape (..., 3).  Families with bounded support
    advertise it through support_radius so the solver can skip evaluation
    outside.  Evaluators must be re-entrant: no state mutation in
    `components`.
    """

    family: str = "base"
    support_radius: float = math.inf

    def __init__(self, params: DecayParams | None = None) -> None:
        self.params = params if params is not None else PARAMS_DEFAULT

    def components(self, t: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def z_derivative(self, t: float, x: np.ndarray, word: tuple[str, ...]) -> np.ndarray | None:
        """Exact word derivative of the components, or None to request the
        finite-difference fallback.  Rotations act on the component
        functions, not on the tensor slots."""
        return None

    def z_derivative_or_fd(self, t: float, x: np.ndarray, word: tuple[str, ...]) -> np.ndarray:
        exact = self.z_derivative(t, x, word)
        if exact is not None:
            return exact
        return _z_word_fd(self, t, x, word)

    def component_mask(self) -> np.ndarray:
        """(4, 4) bool: which h components can ever be nonzero.

        The conservative default claims all of them; families override so
        the solver can skip structurally zero work.
        """
        return np.ones((4, 4), dtype=bool)

    def describe(self) -> dict:
        return {"family": self.family}


def _rotate(x: np.ndarray, a: int, b: int, angle: float) -> np.ndarray:
    out = np.array(x, dtype=float, copy=True)
    c, s = math.cos(angle), math.sin(angle)
    xa = x[..., a - 1]
    xb = x[..., b - 1]
    out[..., a - 1] = c * xa - s * xb
    out[..., b - 1] = c * xb + s * xa
    return out


def _z_word_fd(spec: MetricSpec, t: float, x: np.ndarray, word: tuple[str, ...]) -> np.ndarray:
    if not word:
        return spec.components(t, x)[0]
    head, rest = word[0], word[1:]
    if head == "T":
        dt = 1e-5
        hi = _z_word_fd(spec, t + dt, x, rest)
        lo = _z_word_fd(spec, t - dt, x, rest)
        return (hi - lo) / (2 * dt)
    a, b = int(head[1]), int(head[2])
    th = 1e-5
    hi = _z_word_fd(spec, t, _rotate(x, a, b, th), rest)
    lo = _z_word_fd(spec, t, _rotate(x, a, b, -th), rest)
    return (hi - lo) / (2 * th)


class FlatMetric(MetricSpec):
    """h identically zero."""

    family = "flat"
    support_radius = 0.0

    def components(self, t, x):
        x = np.asarray(x, dtype=float)
        base = x.shape[:-1]
        return np.zeros(base + (4, 4)), np.zeros(base + (4, 4, 4))

    def z_derivative(self, t, x, word):
        return np.zeros(np.asarray(x).shape[:-1] + (4, 4))

    def component_mask(self):
        return np.zeros((4, 4), dtype=bool)


def _bump(s: np.ndarray) -> np.ndarray:
    """C-infinity bump on [0, 1), identically 1 near 0, 0 for s >= 1."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = s < 1.0
    flat = s <= 0.5
    ramp = inside & ~flat
    out[flat] = 1.0
    if np.any(ramp):
        q = (s[ramp] - 0.5) / 0.5
        # Smooth step exp(-1/x) / (exp(-1/x) + exp(-1/(1-x))) descending.
        a = np.exp(-1.0 / np.maximum(1.0 - q, 1e-300))
        b = np.exp(-1.0 / np.maximum(q, 1e-300))
        out[ramp] = a / (a + b)
    return out


def _bump_deriv(s: np.ndarray, ds: float = 1e-6) -> np.ndarray:
    return (_bump(np.asarray(s) + ds) - _bump(np.asarray(s) - ds)) / (2 * ds)


class InteriorOscillator(MetricSpec):
    """Time-periodic perturbation confined to the disc region.

    h^{mu nu} = delta0 sin(t) w(r) e^{mu nu} with w supported in r <= R - 1
    and |w| + |w'| <= (1+r)^(-1-2 alpha), so every cone-region envelope bound
    holds trivially and the interior bound holds with margin.  e defaults to
    the spatial identity.
    """

    family = "interior-oscillator"

    def __init__(self, params: DecayParams | None = None, e: np.ndarray | None = None) -> None:
        super().__init__(params)
        if e is None:
            e = np.diag([0.0, 1.0, 1.0, 1.0])
        self.e = np.asarray(e, dtype=float)
        if not np.array_equal(self.e, self.e.T):
            raise ValueError("polarization matrix e must be symmetric")
        self.support_radius = self.params.R - 1.0
        # Margin 1/4 keeps |w| + |w'| below the envelope including the bump
        # shoulder, where the transition adds slope; checked in tests.
        self._scale = 0.25

    def _w(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        rp = 1.0 + r
        return self._scale * rp ** (-1.0 - 2.0 * self.params.alpha) * _bump(r / self.support_radius)

    def _wprime(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        rp = 1.0 + r
        a = self.params.alpha
        core = rp ** (-1.0 - 2.0 * a)
        dcore = (-1.0 - 2.0 * a) * rp ** (-2.0 - 2.0 * a)
        s = r / self.support_radius
        return self._scale * (dcore * _bump(s) + core * _bump_deriv(s) / self.support_radius)

    def components(self, t, x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        d0 = self.params.delta0
        w = self._w(r)
        wp = self._wprime(r)
        h = (d0 * math.sin(t) * w)[..., None, None] * self.e
        dh = np.zeros(x.shape[:-1] + (4, 4, 4))
        dh[..., 0, :, :] = (d0 * math.cos(t) * w)[..., None, None] * self.e
        rsafe = np.where(r > 0, r, 1.0)
        for j in range(3):
            nj = np.where(r > 0, x[..., j] / rsafe, 0.0)
            dh[..., 1 + j, :, :] = (d0 * math.sin(t) * wp * nj)[..., None, None] * self.e
        return h, dh

    def z_derivative(self, t, x, word):
        # Rotations annihilate every component (radial profile, constant e);
        # each T letter differentiates sin(t).
        x = np.asarray(x, dtype=float)
        if any(l != "T" for l in word):
            return np.zeros(x.shape[:-1] + (4, 4))
        m = len(word)
        phase = [math.sin, math.cos, lambda s: -math.sin(s), lambda s: -math.cos(s)][m % 4]
        r = np.sqrt(np.sum(x * x, axis=-1))
        return (self.params.delta0 * phase(t) * self._w(r))[..., None, None] * self.e

    def component_mask(self):
        return self.e != 0.0

    def describe(self):
        return {"family": self.family, "delta0": self.params.delta0, "alpha": self.params.alpha}


class ConstantTT(MetricSpec):
    """h^{tt} = delta0 with no decay; deliberately violates the envelopes."""

    family = "constant-tt"

    def components(self, t, x):
        x = np.asarray(x, dtype=float)
        base = x.shape[:-1]
        h = np.zeros(base + (4, 4))
        h[..., 0, 0] = self.params.delta0
        return h, np.zeros(base + (4, 4, 4))

    def z_derivative(self, t, x, word):
        x = np.asarray(x, dtype=float)
        if not word:
            return self.components(t, x)[0]
        return np.zeros(x.shape[:-1] + (4, 4))

    def component_mask(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        return mask


class StaticBump(MetricSpec):
    """Time-independent spatial perturbation in the disc; d_t stays Killing."""

    family = "static-bump"

    def __init__(self, params: DecayParams | None = None, e: np.ndarray | None = None) -> None:
        super().__init__(params)
        if e is None:
            e = np.diag([0.0, 1.0, 1.0, 1.0])
        self.e = np.asarray(e, dtype=float)
        self.support_radius = self.params.R - 1.0
        self._osc = InteriorOscillator(self.params, e=self.e)

    def components(self, t, x):
        h, dh = self._osc.components(math.pi / 2.0, x)
        dh = np.array(dh, copy=True)
        dh[..., 0, :, :] = 0.0
        return h, dh

    def z_derivative(self, t, x, word):
        x = np.asarray(x, dtype=float)
        if any(l == "T" for l in word):
            return np.zeros(x.shape[:-1] + (4, 4))
        return self._osc.z_derivative(math.pi / 2.0, x, word)

    def component_mask(self):
        return self.e != 0.0


_FAMILIES = {
    "flat": FlatMetric,
    "interior-oscillator": InteriorOscillator,
    "constant-tt": ConstantTT,
    "static-bump": StaticBump,
}


def make_metric(family: str, params: DecayParams | None = None, **kwargs) -> MetricSpec:
    try:
        cls = _FAMILIES[family]
    except KeyError:
        known = ", ".join(sorted(_FAMILIES))
        raise ValueError(f"unknown metric family {family!r}; known families: {known}")
    return cls(params, **kwargs)


# ---------------------------------------------------------------------------
# Envelope validation


@dataclass(frozen=True)
class EnvelopeEntry:
    name: str
    max_ratio: float
    argmax: tuple[float, float, float, float]  # (t, x, y, z)


@dataclass(frozen=True)
class EnvelopeReport:
    entries: tuple[EnvelopeEntry, ...]

    @property
    def passed(self) -> bool:
        return all(e.max_ratio <= 1.0 for e in self.entries)

    def to_json(self) -> str:
        return json.dumps(
            [
                {"name": e.name, "max_ratio": e.max_ratio, "argmax_point": list(e.argmax)}
                for e in self.entries
            ],
            indent=2,
        )


@dataclass(frozen=True)
class SamplePlan:
    """Where validate_envelope probes the background.

    Interior points cover the disc r <= R at the given times; cone points
    live on the leaves tau in cone_taus at radii cone_radii (each point is
    on S_tau, so t = tau + r - R).  Directions are shared by both regions.
    """

    interior_times: tuple[float, ...]
    interior_radii: tuple[float, ...]
    cone_taus: tuple[float, ...]
    cone_radii: tuple[float, ...]
    n_directions: int = 32
    k_max: int = 2


def default_sample_plan(p: DecayParams) -> SamplePlan:
    R = p.R
    return SamplePlan(
        interior_times=(0.0, 0.7, 1.6, 3.1, 7.9, 20.0),
        interior_radii=tuple(np.linspace(0.05, R, 12)),
        cone_taus=(0.0, 1.0, 3.0, 9.0, 27.0),
        cone_radii=tuple(R * np.array([1.0, 1.3, 2.0, 4.0, 8.0, 16.0])),
    )


def _component_sup(arr: np.ndarray) -> np.ndarray:
    """Max over the trailing tensor slots, keeping the point axes."""
    return np.max(np.abs(arr), axis=(-2, -1))


def validate_envelope(
    spec: MetricSpec, p: DecayParams, plan: SamplePlan | None = None
) -> EnvelopeReport:
    """Probe a background against the admissible-decay inequalities.

    Four bounds are checked and reported as max measured/allowed ratios:

    - "interior": |h| + |dh| against delta0 (1+r)^(-1-2 alpha) on r <= R;
    - "cone": |h| + |dh| + word derivatives up to k_max against H on the
      cone leaves;
    - "cone_good": good derivatives of h plus the full gradient and word
      derivatives of the LbarLbar scalar against Hbar on the cone;
    - "cone_angular_improved": the angular gradient of the LbarLbar scalar
      against delta0 ((1+r)^(-3/2-2 alpha)
      + (1+r)^(-1-alpha) (1+tau)^(-1/2-alpha/2)) on the cone.

    A report passes when every ratio is <= 1.
    """
    if plan is None:
        plan = default_sample_plan(p)
    env = EnvelopeH(delta0=p.delta0, alpha=p.alpha)
    dirs = _fibonacci_directions(plan.n_directions)
    # The raw-component sum already contains |h|, so its word list starts at
    # length 1; the LbarLbar scalar keeps the empty word because the bare
    # component must itself lie under Hbar.
    words = [w for w in commuting_words(plan.k_max) if w]
    words_scalar = commuting_words(plan.k_max)

    floor = 1e-300  # keeps 0/0 out of the h == 0 case

    def ratio_entry(name, ratios, pts_t, pts_x):
        k = int(np.argmax(ratios))
        t = float(np.ravel(pts_t)[k])
        xk = pts_x.reshape(-1, 3)[k]
        return EnvelopeEntry(name, float(ratios.flat[k]), (t, *map(float, xk)))

    # Interior samples: all (time, radius, direction) combinations.
    entries = []
    ti = np.asarray(plan.interior_times)
    ri = np.asarray(plan.interior_radii)
    xi = ri[:, None, None] * dirs[None, :, :]
    best = -1.0
    best_entry = None
    for t in ti:
        h, dh = spec.components(float(t), xi)
        lhs = _component_sup(h) + _component_sup(np.max(np.abs(dh), axis=-3))
        bound = p.delta0 * (1.0 + ri[:, None]) ** (-1.0 - 2.0 * p.alpha)
        ratios = lhs / np.maximum(bound, floor)
        ratios = np.where(lhs == 0.0, 0.0, ratios)
        e = ratio_entry("interior", ratios, np.full(ratios.shape, t), xi)
        if e.max_ratio > best:
            best, best_entry = e.max_ratio, e
    entries.append(best_entry)

    # Cone samples: on S_tau the time coordinate is t = tau + r - R.
    taus = np.asarray(plan.cone_taus)
    rc = np.asarray(plan.cone_radii)
    xc = rc[:, None, None] * dirs[None, :, :]
    acc = {"cone": (-1.0, None), "cone_good": (-1.0, None), "cone_angular_improved": (-1.0, None)}
    for tau in taus:
        tvals = tau + rc - p.R
        for i, (t, r) in enumerate(zip(tvals, rc)):
            x = xc[i]
            h, dh = spec.components(float(t), x)
            sup_h = _component_sup(h)
            sup_dh = _component_sup(np.max(np.abs(dh), axis=-3))
            zsup = np.zeros_like(sup_h)
            for w in words:
                zsup = np.maximum(zsup, _component_sup(spec.z_derivative_or_fd(float(t), x, w)))
            lhs_cone = sup_h + sup_dh + zsup
            bound = float(env.H(tau, r))
            ratios = np.where(lhs_cone == 0.0, 0.0, lhs_cone / max(bound, floor))
            e = ratio_entry("cone", ratios, np.full(ratios.shape, t), x)
            if e.max_ratio > acc["cone"][0]:
                acc["cone"] = (e.max_ratio, e)

            # Good derivatives of every component, then the LbarLbar scalar.
            radial = np.einsum("...j,...jmn->...mn", x / r, dh[..., 1:, :, :])
            lf = dh[..., 0, :, :] + radial
            tang = dh[..., 1:, :, :] - (x / r)[..., :, None, None] * radial[..., None, :, :]
            good = _component_sup(lf) + _component_sup(np.max(np.abs(tang), axis=-3))
            grad_s = lbarlbar_gradient(h, dh, x)
            sup_grad_s = np.max(np.abs(grad_s), axis=-1)
            zsup_s = np.zeros_like(sup_h)
            for w in words_scalar:
                zw = spec.z_derivative_or_fd(float(t), x, w)
                zsup_s = np.maximum(zsup_s, np.abs(lbarlbar_scalar(zw, x)))
            lhs_good = good + sup_grad_s + zsup_s
            bound_g = float(env.Hbar(r))
            ratios_g = np.where(lhs_good == 0.0, 0.0, lhs_good / max(bound_g, floor))
            e = ratio_entry("cone_good", ratios_g, np.full(ratios_g.shape, t), x)
            if e.max_ratio > acc["cone_good"][0]:
                acc["cone_good"] = (e.max_ratio, e)

            _, slashed = good_derivative_parts(grad_s, x)
            rp = 1.0 + r
            taup = 1.0 + max(tau, 0.0)
            bound_a = p.delta0 * (
                rp ** (-1.5 - 2.0 * p.alpha)
                + rp ** (-1.0 - p.alpha) * taup ** (-0.5 - 0.5 * p.alpha)
            )
            ratios_a = np.where(slashed == 0.0, 0.0, slashed / max(bound_a, floor))
            e = ratio_entry("cone_angular_improved", ratios_a, np.full(ratios_a.shape, t), x)
            if e.max_ratio > acc["cone_angular_improved"][0]:
                acc["cone_angular_improved"] = (e.max_ratio, e)

    for name in ("cone", "cone_good", "cone_angular_improved"):
        entries.append(acc[name][1])
    return EnvelopeReport(entries=tuple(entries))
