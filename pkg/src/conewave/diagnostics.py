"""Weighted energies on foliation leaves, commuted fields, and the
inequality monitors that shadow the continuum estimates.

Everything here consumes a SnapshotSeries.  The per-leaf quantities are
assembled from small per-ring tables, so the same code paths serve both a
fully retained history and the streaming accumulator at the bottom of the
module, and the two produce bit-identical ledgers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from conewave.evolve import first_derivative, second_derivative
from conewave.foliation import (
    FieldState,
    FoliationLeaf,
    GridSpec,
    OutOfDomainError,
    SnapshotSeries,
    SphereQuadrature,
    cone_integral,
    disc_integral,
    interp,
    lagrange_sample,
    make_leaf,
)
from conewave.geometry import DecayParams, EnvelopeH, commuting_words


class InsufficientTimeLevelsError(ValueError):
    """A time-differentiated field needs more stored snapshots."""


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# Ledger


@dataclass(frozen=True, order=True)
class LedgerKey:
    """Identifies one diagnostic series: which field, which weight family,
    and the numeric exponents of the weight."""

    field: str
    weight: str
    exponents: tuple[float, ...] = ()

    def exponent_label(self) -> str:
        return "/".join(_fmt(e) for e in self.exponents)


class EnergyLedger:
    """Append-only store of per-leaf values and slab accumulations.

    Entries are kept keyed; serialization sorts them canonically so that
    the output bytes do not depend on insertion (or merge) order.  Every
    recorded value must be nonnegative: the integrands are squares.
    """

    def __init__(self) -> None:
        self._series: dict[LedgerKey, dict[float, float]] = {}
        self._slabs: dict[LedgerKey, dict[tuple[float, float], float]] = {}

    @staticmethod
    def _check(value: float) -> float:
        value = float(value)
        if not math.isfinite(value) or value < 0.0:
            raise ValueError(f"ledger values must be finite and >= 0, got {value}")
        return value

    def record(self, key: LedgerKey, tau: float, value: float) -> None:
        bucket = self._series.setdefault(key, {})
        tau = float(tau)
        if tau in bucket:
            raise ValueError(f"duplicate entry for {key} at tau={tau}")
        bucket[tau] = self._check(value)

    def record_slab(self, key: LedgerKey, tau_lo: float, tau_hi: float, value: float) -> None:
        span = (float(tau_lo), float(tau_hi))
        if span[1] <= span[0]:
            raise ValueError("slab needs tau_hi > tau_lo")
        bucket = self._slabs.setdefault(key, {})
        if span in bucket:
            raise ValueError(f"duplicate slab for {key} over {span}")
        bucket[span] = self._check(value)

    def series(self, key: LedgerKey) -> tuple[np.ndarray, np.ndarray]:
        bucket = self._series.get(key, {})
        taus = np.array(sorted(bucket), dtype=float)
        return taus, np.array([bucket[t] for t in taus], dtype=float)

    def slab(self, key: LedgerKey, tau_lo: float, tau_hi: float) -> float:
        return self._slabs[key][(float(tau_lo), float(tau_hi))]

    def keys(self) -> list[LedgerKey]:
        return sorted(set(self._series) | set(self._slabs))

    def merge(self, other: "EnergyLedger") -> "EnergyLedger":
        out = EnergyLedger()
        for src in (self, other):
            for key, bucket in src._series.items():
                for tau, val in bucket.items():
                    out.record(key, tau, val)
            for key, bucket in src._slabs.items():
                for (lo, hi), val in bucket.items():
                    out.record_slab(key, lo, hi, val)
        return out

    def rows(self) -> list[tuple[str, str, str, float, float, float]]:
        out = []
        for key, bucket in self._series.items():
            for tau, val in bucket.items():
                out.append((key.field, key.weight, key.exponent_label(), tau, tau, val))
        for key, bucket in self._slabs.items():
            for (lo, hi), val in bucket.items():
                out.append((key.field, key.weight, key.exponent_label(), lo, hi, val))
        out.sort()
        return out

    def to_csv(self) -> str:
        lines = ["field,weight,exponents,tau_lo,tau_hi,value"]
        for f, w, e, lo, hi, val in self.rows():
            lines.append(f"{f},{w},{e},{_fmt(lo)},{_fmt(hi)},{_fmt(val)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        tree: dict = {}
        for f, w, e, lo, hi, val in self.rows():
            node = tree.setdefault(w, {}).setdefault(f, {}).setdefault(e or "-", [])
            node.append([lo, hi, val])
        return json.dumps(tree, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# Per-ring and per-disc tables

_CONE_NAMES = ("val", "dt", "lphi", "lbar", "angsq", "allsq")


def _ang_sq(n: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Squared angular gradient from unit directions and the full gradient.

    Sum of (n_i d_j - n_j d_i)^2 over i<j; the radii cancel against the
    1/r^2 in the rotation-field identity, so this stays regular at r = 0
    (where n = 0 makes it vanish).
    """
    c01 = n[..., 0] * grad[..., 1] - n[..., 1] * grad[..., 0]
    c02 = n[..., 0] * grad[..., 2] - n[..., 2] * grad[..., 0]
    c12 = n[..., 1] * grad[..., 2] - n[..., 2] * grad[..., 1]
    return c01**2 + c02**2 + c12**2


def _ring_row(history: SnapshotSeries, t: float, r: float, omega: np.ndarray) -> dict[str, np.ndarray]:
    val, dphi = interp(history, t, r * omega)
    grad = dphi[..., 1:]
    radial = np.einsum("kj,kj->k", omega, grad)
    dt = dphi[..., 0]
    return {
        "val": val,
        "dt": dt,
        "lphi": dt + radial,
        "lbar": dt - radial,
        "angsq": _ang_sq(omega, grad),
        "allsq": dt**2 + np.einsum("kj,kj->k", grad, grad),
    }


def _cone_tables(leaf: FoliationLeaf, history: SnapshotSeries) -> dict[str, np.ndarray]:
    J, K = leaf.n_rings, leaf.quad.weights.size
    tables = {name: np.zeros((J, K)) for name in _CONE_NAMES}
    for j in range(J):
        row = _ring_row(history, float(leaf.cone_t[j]), float(leaf.cone_r[j]), leaf.quad.nodes)
        for name in _CONE_NAMES:
            tables[name][j] = row[name]
    return tables


def _disc_tables(leaf: FoliationLeaf, history: SnapshotSeries) -> dict[str, np.ndarray]:
    pts = leaf.disc.points
    val, dphi = interp(history, leaf.tau, pts)
    r = leaf.disc.r
    n = np.zeros_like(pts)
    np.divide(pts, r[:, None], out=n, where=r[:, None] > 0.0)
    grad = dphi[..., 1:]
    radial = np.einsum("kj,kj->k", n, grad)
    dt = dphi[..., 0]
    return {
        "val": val,
        "dt": dt,
        "lphi": dt + radial,
        "angsq": _ang_sq(n, grad),
        "allsq": dt**2 + np.einsum("kj,kj->k", grad, grad),
        "r": r,
    }


# ---------------------------------------------------------------------------
# Leaf quantities


def energy_flux(leaf: FoliationLeaf, history: SnapshotSeries) -> float:
    """E at the leaf: all derivatives on the disc, outgoing and angular
    derivatives on the cone.

    The history argument selects the field: pass the solution series for
    the base energy, or a commuted-field series for higher energies.
    """
    dt_ = _disc_tables(leaf, history)
    ct = _cone_tables(leaf, history)
    return _energy_from_tables(leaf, dt_, ct)


def _energy_from_tables(leaf, dt_, ct) -> float:
    disc = disc_integral(leaf, dt_["allsq"])
    cone = cone_integral(leaf, ct["lphi"] ** 2 + ct["angsq"])
    return disc + cone


def weighted_cone(leaf: FoliationLeaf, history: SnapshotSeries, exponent: float, selector: str) -> float:
    """One weighted cone integral.

    selector "all" integrates (1+r)^(-1-exponent) |d phi|^2 r^2 dv domega;
    "outgoing" and "good" integrate r^exponent against the square of the
    outgoing derivative of r*phi (plus the angular part for "good") with
    the bare dv domega measure.
    """
    return _weighted_cone_from_tables(leaf, _cone_tables(leaf, history), exponent, selector)


def _weighted_cone_from_tables(leaf, ct, exponent: float, selector: str) -> float:
    if leaf.n_rings == 0:
        return 0.0
    r = leaf.cone_r[:, None]
    if selector == "all":
        rows = (1.0 + r) ** (-1.0 - exponent) * ct["allsq"]
    elif selector == "outgoing":
        rows = r**exponent * (r * ct["lphi"] + ct["val"]) ** 2 / r**2
    elif selector == "good":
        q = (r * ct["lphi"] + ct["val"]) ** 2 + r**2 * ct["angsq"]
        rows = r**exponent * q / r**2
    else:
        raise ValueError(f"unknown selector {selector!r}")
    return cone_integral(leaf, rows)


def bulk_good_leaf(leaf: FoliationLeaf, history: SnapshotSeries, alpha: float) -> float:
    """Per-leaf spatial integral of (1+r)^(-1-alpha) |good derivatives|^2.

    Trapezoid accumulation of this series over tau gives the slab bulk.
    """
    dt_ = _disc_tables(leaf, history)
    ct = _cone_tables(leaf, history)
    return _bulk_good_from_tables(leaf, dt_, ct, alpha)


def _bulk_good_from_tables(leaf, dt_, ct, alpha: float) -> float:
    wdisc = (1.0 + dt_["r"]) ** (-1.0 - alpha)
    disc = disc_integral(leaf, wdisc * (dt_["lphi"] ** 2 + dt_["angsq"]))
    r = leaf.cone_r[:, None]
    cone = cone_integral(leaf, (1.0 + r) ** (-1.0 - alpha) * (ct["lphi"] ** 2 + ct["angsq"]))
    return disc + cone


def source_weighted_leaf(leaf: FoliationLeaf, source, alpha: float) -> float:
    """Per-leaf integral of (1+r)^(1+alpha) |F|^2 for an analytic source."""
    pts = leaf.disc.points
    fd = np.broadcast_to(
        np.asarray(source(leaf.tau, pts[:, 0], pts[:, 1], pts[:, 2]), dtype=float),
        (pts.shape[0],),
    )
    disc = disc_integral(leaf, (1.0 + leaf.disc.r) ** (1.0 + alpha) * fd**2)
    if leaf.n_rings == 0:
        return disc
    J, K = leaf.n_rings, leaf.quad.weights.size
    rows = np.zeros((J, K))
    for j in range(J):
        p = leaf.cone_r[j] * leaf.quad.nodes
        fc = np.asarray(source(float(leaf.cone_t[j]), p[:, 0], p[:, 1], p[:, 2]), dtype=float)
        rows[j] = np.broadcast_to(fc, (K,))
    r = leaf.cone_r[:, None]
    return disc + cone_integral(leaf, (1.0 + r) ** (1.0 + alpha) * rows**2)


def trapezoid_weights(taus: np.ndarray) -> np.ndarray:
    """Composite trapezoid weights; split form so sub-slabs add exactly."""
    taus = np.asarray(taus, dtype=float)
    if taus.size < 2:
        raise ValueError("slab accumulation needs at least two leaves")
    if np.any(np.diff(taus) <= 0):
        raise ValueError("leaf times must be strictly increasing")
    w = np.zeros_like(taus)
    half = 0.5 * np.diff(taus)
    w[:-1] += half
    w[1:] += half
    return w


def decay_weighted_sum(taus, values, beta: float) -> float:
    """Trapezoid in tau of (1+tau)^(-beta) times a per-leaf series."""
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=float)
    w = trapezoid_weights(taus)
    return float(np.sum(w * (1.0 + taus) ** (-beta) * values))


@dataclass(frozen=True)
class LeafQuantities:
    """Everything slab accumulation needs from one leaf."""

    tau: float
    energy: float
    cone_all: dict[float, float]
    cone_out: dict[float, float]
    cone_good: dict[float, float]
    bulk_good: dict[float, float]


def _leaf_quantities(leaf, dt_, ct, params: DecayParams, ps) -> LeafQuantities:
    alphas = (params.alpha, params.epsilon)
    return LeafQuantities(
        tau=leaf.tau,
        energy=_energy_from_tables(leaf, dt_, ct),
        cone_all={a: _weighted_cone_from_tables(leaf, ct, a, "all") for a in alphas},
        cone_out={p: _weighted_cone_from_tables(leaf, ct, p, "outgoing") for p in ps},
        cone_good={p: _weighted_cone_from_tables(leaf, ct, p, "good") for p in ps},
        bulk_good={params.alpha: _bulk_good_from_tables(leaf, dt_, ct, params.alpha)},
    )


def _record_leaf(ledger: EnergyLedger, name: str, q: LeafQuantities) -> None:
    ledger.record(LedgerKey(name, "energy"), q.tau, q.energy)
    for a, v in q.cone_all.items():
        ledger.record(LedgerKey(name, "cone_all", (a,)), q.tau, v)
    for p, v in q.cone_out.items():
        ledger.record(LedgerKey(name, "cone_out", (p,)), q.tau, v)
    for p, v in q.cone_good.items():
        ledger.record(LedgerKey(name, "cone_good", (p,)), q.tau, v)
    for a, v in q.bulk_good.items():
        ledger.record(LedgerKey(name, "bulk_good_leaf", (a,)), q.tau, v)


def _record_slabs(ledger, name, params, quants, betas, ps, d_by_tau) -> None:
    taus = np.array([q.tau for q in quants])
    lo, hi = float(taus[0]), float(taus[-1])
    alpha = params.alpha
    ile = np.array([q.bulk_good[alpha] for q in quants])
    ledger.record_slab(LedgerKey(name, "bulk_good", (alpha,)), lo, hi, decay_weighted_sum(taus, ile, 0.0))
    if d_by_tau is not None:
        ledger.record_slab(
            LedgerKey("source", "source_sq", (alpha,)), lo, hi, decay_weighted_sum(taus, d_by_tau, 0.0)
        )
    energies = np.array([q.energy for q in quants])
    for beta in betas:
        ledger.record_slab(
            LedgerKey(name, "energy_decay", (beta,)), lo, hi, decay_weighted_sum(taus, energies, beta)
        )
        for p in ps:
            series = np.array([q.cone_out[p] for q in quants])
            ledger.record_slab(
                LedgerKey(name, "cone_out_decay", (p, beta)),
                lo,
                hi,
                decay_weighted_sum(taus, series, beta),
            )


def default_cone_exponents(params: DecayParams) -> tuple[float, ...]:
    return (1.0, 1.0 + params.alpha1, 1.0 - params.epsilon)


def slab_accumulate(
    ledger: EnergyLedger,
    leaves: list[FoliationLeaf],
    history: SnapshotSeries,
    params: DecayParams,
    *,
    source=None,
    betas: tuple[float, ...] = (1.0,),
    ps: tuple[float, ...] | None = None,
    field_name: str = "phi",
) -> tuple[float, float]:
    """Record per-leaf series and their trapezoid slab accumulations.

    Returns the slab span (first tau, last tau).  Leaves must be in
    strictly increasing tau order; the slab rows land under that span, so
    accumulating two adjoining slabs and the union reproduces additivity
    exactly up to reduction order.
    """
    if ps is None:
        ps = default_cone_exponents(params)
    quants = []
    d_vals = [] if source is not None else None
    for leaf in leaves:
        dt_ = _disc_tables(leaf, history)
        ct = _cone_tables(leaf, history)
        q = _leaf_quantities(leaf, dt_, ct, params, ps)
        _record_leaf(ledger, field_name, q)
        quants.append(q)
        if source is not None:
            d = source_weighted_leaf(leaf, source, params.alpha)
            ledger.record(LedgerKey("source", "source_leaf", (params.alpha,)), leaf.tau, d)
            d_vals.append(d)
    _record_slabs(ledger, field_name, params, quants, betas, ps, d_vals)
    return float(quants[0].tau), float(quants[-1].tau)


# ---------------------------------------------------------------------------
# Commuted fields

_ROT_AXES = {"O12": (0, 1), "O13": (0, 2), "O23": (1, 2)}


def canonical_word(word) -> tuple[str, ...]:
    """Time letters first; rotations keep their relative order."""
    word = tuple(word)
    for letter in word:
        if letter != "T" and letter not in _ROT_AXES:
            raise ValueError(f"unknown commuting letter {letter!r}")
    n_t = sum(1 for w in word if w == "T")
    return ("T",) * n_t + tuple(w for w in word if w != "T")


def _state_at(history: SnapshotSeries, t: float) -> FieldState:
    for s in history.states:
        if abs(s.t - t) <= 1e-9 * max(1.0, abs(t)):
            return s
    raise OutOfDomainError(f"commuted fields need an exact snapshot at t={t}")


def _level_grid(history: SnapshotSeries, state: FieldState, m: int) -> np.ndarray:
    if m == 0:
        return state.phi
    if m == 1:
        return state.pi
    if state.pidot is None:
        raise InsufficientTimeLevelsError(
            f"snapshot at t={state.t} carries no stored acceleration field"
        )
    if m == 2:
        return state.pidot
    if m == 3:
        idx = next(i for i, s in enumerate(history.states) if s is state)
        lo = history.states[idx - 1] if idx > 0 else state
        hi = history.states[idx + 1] if idx + 1 < len(history.states) else state
        if lo is hi or lo.pidot is None or hi.pidot is None:
            raise InsufficientTimeLevelsError(
                "third time derivative needs a neighboring snapshot with pidot"
            )
        # centered when both neighbors exist, one-sided at the ends
        return (hi.pidot - lo.pidot) / (hi.t - lo.t)
    raise InsufficientTimeLevelsError(f"no stored level for {m} time derivatives")


def _omega_grid(f: np.ndarray, grid: GridSpec, letter: str, order: int) -> np.ndarray:
    a, b = _ROT_AXES[letter]
    ax = grid.axis
    xa = ax.reshape([-1 if i == a else 1 for i in range(3)])
    xb = ax.reshape([-1 if i == b else 1 for i in range(3)])
    return xa * first_derivative(f, b, grid.dx, order) - xb * first_derivative(f, a, grid.dx, order)


def _word_grid(history, state, word, fd_order: int) -> np.ndarray:
    word = canonical_word(word)
    m = sum(1 for w in word if w == "T")
    g = _level_grid(history, state, m)
    for letter in reversed([w for w in word if w != "T"]):
        g = _omega_grid(g, state.grid, letter, fd_order)
    return g


def commuted(
    history: SnapshotSeries,
    word,
    t: float | None = None,
    fd_order: int = 4,
    k_max: int = 4,
) -> FieldState:
    """The commuted field for one word, as a state (value and time
    derivative grids) at an exact snapshot time.

    The rightmost letter acts first.  Time letters select the stored time
    level; rotations are centered differences, so edge cells are garbage
    and callers must sample strictly inside the interpolation reach.
    """
    word = canonical_word(word)
    if len(word) > k_max:
        raise ValueError(f"word {word} exceeds k_max={k_max}")
    state = _state_at(history, history.t_last if t is None else t)
    phi_part = _word_grid(history, state, word, fd_order)
    pi_part = _word_grid(history, state, ("T",) + word, fd_order)
    return FieldState(t=state.t, phi=phi_part, pi=pi_part, grid=state.grid)


@dataclass
class CommutedFamily:
    """All commuted fields up to k_max at one snapshot.

    Materializes full grids per word, which is fine at test scale; the
    streaming monitors sample points through commuted_point_tables instead
    and never hold more than a few transient grids.
    """

    t: float
    grid: GridSpec
    k_max: int
    fd_order: int
    fields: dict[tuple[str, ...], FieldState] = field(default_factory=dict)

    @classmethod
    def build(cls, history: SnapshotSeries, t: float | None = None, k_max: int = 2, fd_order: int = 4):
        state = _state_at(history, history.t_last if t is None else t)
        fam = cls(t=state.t, grid=state.grid, k_max=k_max, fd_order=fd_order)
        for word in commuting_words(k_max):
            fam.fields[word] = commuted(history, word, state.t, fd_order, k_max)
        return fam


# ---------------------------------------------------------------------------
# Point tables for monitors and probes


@dataclass
class PointTables:
    """Per-point sums over the commuted family at one time.

    First sums run over words up to k_max, derivative sums over words up
    to k_max - 1 (the truncation the reports carry).
    """

    k_max: int
    z_sq: np.ndarray
    z_max: np.ndarray
    lbar_sq: np.ndarray
    good_sq: np.ndarray
    lbar_max: np.ndarray
    good_max: np.ndarray
    dz_sq: np.ndarray
    dlbar_sq: np.ndarray | None = None
    dgood_sq: np.ndarray | None = None
    d2z_sq: np.ndarray | None = None


def _unit_grids(grid: GridSpec) -> tuple[np.ndarray, ...]:
    x, y, z = grid.meshes()
    r = grid.radius_grid()
    rs = np.maximum(r, 0.5 * grid.dx)
    return x / rs, y / rs, z / rs


def commuted_point_tables(
    history: SnapshotSeries,
    t: float,
    pts: np.ndarray,
    *,
    k_max: int = 2,
    fd_order: int = 2,
    second: bool = True,
) -> PointTables:
    """Sample every monitored combination of the commuted family at pts.

    Grids are built word by word and released, so memory stays a handful
    of grids regardless of k_max.  Sampling is local Lagrange (monitor
    grade); the incoming and outgoing frame fields use unit radial
    directions, which the guard at the origin flattens to zero.
    """
    state = _state_at(history, t)
    grid, dx = state.grid, state.grid.dx
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    N = pts.shape[0]
    r = np.linalg.norm(pts, axis=1)
    n = np.zeros_like(pts)
    np.divide(pts, r[:, None], out=n, where=r[:, None] > 1e-12)

    tab = PointTables(
        k_max=k_max,
        z_sq=np.zeros(N),
        z_max=np.zeros(N),
        lbar_sq=np.zeros(N),
        good_sq=np.zeros(N),
        lbar_max=np.zeros(N),
        good_max=np.zeros(N),
        dz_sq=np.zeros(N),
        dlbar_sq=np.zeros(N) if second else None,
        dgood_sq=np.zeros(N) if second else None,
        d2z_sq=np.zeros(N) if second else None,
    )
    dz_by_word: dict[tuple[str, ...], np.ndarray] = {}
    nx = ny = nz = None
    if second:
        nx, ny, nz = _unit_grids(grid)

    words = commuting_words(k_max)
    for word in words:
        phi_w = _word_grid(history, state, word, fd_order)
        pi_w = _word_grid(history, state, ("T",) + word, fd_order)
        gw = [first_derivative(phi_w, ax, dx, fd_order) for ax in range(3)]

        vals = lagrange_sample(phi_w, grid, pts)
        dt = lagrange_sample(pi_w, grid, pts)
        grad = np.stack([lagrange_sample(g, grid, pts) for g in gw], axis=-1)
        radial = np.einsum("kj,kj->k", n, grad)
        lbar = dt - radial
        lout = dt + radial
        ang = _ang_sq(n, grad)

        tab.z_sq += vals**2
        np.maximum(tab.z_max, np.abs(vals), out=tab.z_max)
        tab.lbar_sq += lbar**2
        np.maximum(tab.lbar_max, np.abs(lbar), out=tab.lbar_max)
        good_sq = lout**2 + ang
        tab.good_sq += good_sq
        np.maximum(tab.good_max, np.sqrt(good_sq), out=tab.good_max)
        dz = dt**2 + np.einsum("kj,kj->k", grad, grad)
        tab.dz_sq += dz
        dz_by_word[word] = dz

        if second and len(word) <= k_max - 1:
            # second time derivative of the word field, for the mixed and
            # double-time pieces
            tt_grid = _word_grid(history, state, ("T", "T") + word, fd_order)
            tt = lagrange_sample(tt_grid, grid, pts)
            gpi = [first_derivative(pi_w, ax, dx, fd_order) for ax in range(3)]
            ti = np.stack([lagrange_sample(g, grid, pts) for g in gpi], axis=-1)
            d2 = tt**2 + 2.0 * np.einsum("kj,kj->k", ti, ti)
            for ax in range(3):
                d2 = d2 + lagrange_sample(second_derivative(phi_w, ax, dx, fd_order), grid, pts) ** 2
            for a, b in ((0, 1), (0, 2), (1, 2)):
                cr = first_derivative(gw[a], b, dx, fd_order)
                d2 = d2 + 2.0 * lagrange_sample(cr, grid, pts) ** 2
            tab.d2z_sq += d2

            lbar_grid = pi_w - nx * gw[0] - ny * gw[1] - nz * gw[2]
            lout_grid = pi_w + nx * gw[0] + ny * gw[1] + nz * gw[2]
            dlbar = np.zeros(N)
            dlout = np.zeros(N)
            for ax in range(3):
                dlbar += lagrange_sample(first_derivative(lbar_grid, ax, dx, fd_order), grid, pts) ** 2
                dlout += lagrange_sample(first_derivative(lout_grid, ax, dx, fd_order), grid, pts) ** 2
            radial_t = np.einsum("kj,kj->k", n, ti)
            tab.dlbar_sq += (tt - radial_t) ** 2 + dlbar
            # good-derivative second sum: outgoing piece plus rotations
            # with the 1/r moved outside the derivative
            tab.dgood_sq += (tt + radial_t) ** 2 + dlout

    if second:
        rsafe = np.maximum(r, 1e-12)
        for word in words:
            if len(word) > k_max - 1:
                continue
            rot_sum = np.zeros(N)
            for rot in _ROT_AXES:
                rot_sum += dz_by_word[canonical_word((rot,) + word)]
            tab.dgood_sq += rot_sum / rsafe**2
    return tab


# ---------------------------------------------------------------------------
# Lemma-scale checks


@dataclass(frozen=True)
class LemmaReport:
    """Sharp-constant inequality ratios at one leaf.

    ring_trace compares the largest sphere trace r * int phi^2 domega on
    the cone against 4 E; weighted_mass compares the (1+r)-weighted square
    mass of the leaf against 12 E; disc_mass is its corollary on the disc
    alone; outgoing_mass has a free constant and is only required to be
    finite and stable under refinement.
    """

    tau: float
    energy: float
    energy_exact: bool
    ring_trace: float
    weighted_mass: float
    disc_mass: float
    outgoing_mass: float


def _ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def lemma_checks(
    leaf: FoliationLeaf,
    history: SnapshotSeries,
    params: DecayParams,
    e_tilde: float | None = None,
) -> LemmaReport:
    dt_ = _disc_tables(leaf, history)
    ct = _cone_tables(leaf, history)
    return _lemma_from_tables(leaf, dt_, ct, params, e_tilde)


def _lemma_from_tables(leaf, dt_, ct, params, e_tilde=None) -> LemmaReport:
    energy = _energy_from_tables(leaf, dt_, ct)
    exact = e_tilde is None
    etil = energy if exact else float(e_tilde)

    trace = 0.0
    if leaf.n_rings:
        ring = (ct["val"] ** 2) @ leaf.quad.weights
        trace = float(np.max(leaf.cone_r * ring))

    wdisc = disc_integral(leaf, (dt_["val"] / (1.0 + dt_["r"])) ** 2)
    r = leaf.cone_r[:, None]
    wcone = cone_integral(leaf, (ct["val"] / (1.0 + r)) ** 2)
    disc_sq = disc_integral(leaf, dt_["val"] ** 2)

    a1, a2 = params.alpha1, params.alpha2
    lhs = cone_integral(leaf, r ** (1.0 - a1) * ct["val"] ** 2 / r**2)
    rhs = leaf.R ** (1.0 - a1) * etil + _weighted_cone_from_tables(leaf, ct, 1.0 + a2, "outgoing")

    return LemmaReport(
        tau=leaf.tau,
        energy=energy,
        energy_exact=exact,
        ring_trace=_ratio(trace, 4.0 * etil),
        weighted_mass=_ratio(wdisc + wcone, 12.0 * etil),
        disc_mass=_ratio(disc_sq, 12.0 * (1.0 + leaf.R) ** 2 * etil),
        outgoing_mass=_ratio(lhs, rhs),
    )


# ---------------------------------------------------------------------------
# Envelope monitors


@dataclass(frozen=True)
class MonitorReport:
    """Worst bootstrap ratios at one leaf, truncated to k_max.

    cone_incoming tests the incoming-derivative sums against 2 H^2,
    cone_good the good-derivative sums against 2 Hbar^2, shell the full
    gradient sums on spheres between r = 1 and R against 2 Hbar^2, and
    core the pointwise sums inside r <= 1 against 2 delta0^2.
    """

    tau: float
    k_max: int
    delta0: float
    cone_incoming: float
    cone_good: float
    shell: float
    core: float
    rings_sampled: int


def _cone_monitor_ratios(history, t, r_val, omega, quad_w, env, tau, k_max, fd_order):
    tabs = commuted_point_tables(history, t, r_val * omega, k_max=k_max, fd_order=fd_order)
    q_in = float((tabs.lbar_sq + tabs.dlbar_sq) @ quad_w)
    q_good = float((tabs.good_sq + tabs.dgood_sq) @ quad_w)
    h = float(env.H(tau, r_val))
    hbar = float(env.Hbar(r_val))
    return q_in / (2.0 * h * h), q_good / (2.0 * hbar * hbar)


def _surface_monitor_load(history, t, pts, k_max, fd_order):
    tabs = commuted_point_tables(history, t, pts, k_max=k_max, fd_order=fd_order)
    return tabs.dz_sq + tabs.d2z_sq


def envelope_monitor(
    leaf: FoliationLeaf,
    history: SnapshotSeries,
    env: EnvelopeH,
    *,
    k_max: int = 2,
    fd_order: int = 2,
    ring_stride: int = 1,
    shell_step: float = 1.0,
    core_radius: float = 1.0,
) -> MonitorReport:
    """Evaluate the three bootstrap regimes on one leaf."""
    cone_in = 0.0
    cone_good = 0.0
    sampled = 0
    for j in range(0, leaf.n_rings, max(1, ring_stride)):
        qi, qg = _cone_monitor_ratios(
            history,
            float(leaf.cone_t[j]),
            float(leaf.cone_r[j]),
            leaf.quad.nodes,
            leaf.quad.weights,
            env,
            leaf.tau,
            k_max,
            fd_order,
        )
        cone_in = max(cone_in, qi)
        cone_good = max(cone_good, qg)
        sampled += 1

    state = _state_at(history, leaf.tau)
    shell = 0.0
    radii = np.arange(1.0, leaf.R + 1e-9, shell_step)
    for rv in radii:
        load = _surface_monitor_load(history, leaf.tau, rv * leaf.quad.nodes, k_max, fd_order)
        q = float(load @ leaf.quad.weights)
        hbar = float(env.Hbar(rv))
        shell = max(shell, q / (2.0 * hbar * hbar))

    rg = state.grid.radius_grid()
    mask = rg <= core_radius
    x, y, z = state.grid.meshes()
    core_pts = np.stack([x[mask], y[mask], z[mask]], axis=-1)
    core_load = _surface_monitor_load(history, leaf.tau, core_pts, k_max, fd_order)
    core = float(np.max(core_load)) / (2.0 * env.delta0**2) if core_load.size else 0.0

    return MonitorReport(
        tau=leaf.tau,
        k_max=k_max,
        delta0=env.delta0,
        cone_incoming=cone_in,
        cone_good=cone_good,
        shell=shell,
        core=core,
        rings_sampled=sampled,
    )


# ---------------------------------------------------------------------------
# Pointwise decay probe


@dataclass(frozen=True)
class ProbeRow:
    tau: float
    r: float
    field_sup: float
    incoming_sup: float
    good_sup: float
    field_ratio: float
    incoming_ratio: float
    good_ratio: float


@dataclass
class ProbeTable:
    k_max: int
    rows: list[ProbeRow] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["tau,r,field_sup,incoming_sup,good_sup,field_ratio,incoming_ratio,good_ratio"]
        for w in self.rows:
            lines.append(
                ",".join(
                    _fmt(v)
                    for v in (
                        w.tau,
                        w.r,
                        w.field_sup,
                        w.incoming_sup,
                        w.good_sup,
                        w.field_ratio,
                        w.incoming_ratio,
                        w.good_ratio,
                    )
                )
            )
        return "\n".join(lines) + "\n"


def _probe_envelopes(params: DecayParams, tau: float, r: float) -> tuple[float, float, float]:
    a, e = params.alpha, params.epsilon
    taup = 1.0 + tau
    rp = 1.0 + r
    env_field = rp**-0.5 * taup ** (-0.5 - 0.5 * a)
    env_in = rp ** (-1.0 + 0.5 * e) * taup ** (-0.5 - 0.5 * a)
    env_good = rp ** (-1.5 + 0.5 * e)
    return env_field, env_in, env_good


def _probe_row(history, t, r_val, omega, params, tau, k_max, fd_order) -> ProbeRow:
    tabs = commuted_point_tables(history, t, r_val * omega, k_max=k_max, fd_order=fd_order, second=False)
    fs = float(np.max(tabs.z_max))
    ins = float(np.max(tabs.lbar_max))
    gs = float(np.max(tabs.good_max))
    ef, ei, eg = _probe_envelopes(params, tau, r_val)
    return ProbeRow(tau, r_val, fs, ins, gs, fs / ef, ins / ei, gs / eg)


def pointwise_probe(
    leaves: list[FoliationLeaf],
    history: SnapshotSeries,
    params: DecayParams,
    *,
    k_max: int = 2,
    fd_order: int = 2,
    ring_stride: int = 1,
) -> ProbeTable:
    """Sup tables of the commuted fields along every leaf's cone, raw and
    divided by the decay envelopes (overall constants left free)."""
    table = ProbeTable(k_max=k_max)
    for leaf in leaves:
        for j in range(0, leaf.n_rings, max(1, ring_stride)):
            table.rows.append(
                _probe_row(
                    history,
                    float(leaf.cone_t[j]),
                    float(leaf.cone_r[j]),
                    leaf.quad.nodes,
                    params,
                    leaf.tau,
                    k_max,
                    fd_order,
                )
            )
    return table


# ---------------------------------------------------------------------------
# Streaming accumulator


@dataclass
class StreamResult:
    ledger: EnergyLedger
    lemma: list[LemmaReport]
    monitors: list[MonitorReport]
    probe: ProbeTable | None


class LeafStreamer:
    """Consumes run snapshots and assembles leaf diagnostics on the fly.

    Ring times land exactly on snapshot times (the spacing dv must be a
    multiple of the snapshot cadence), so each snapshot contributes one
    ring to every live leaf and no snapshot needs to be retained beyond a
    three-deep window.  Per-ring tables are stored per leaf; finalize runs
    the same reductions as the non-streaming functions, which makes the
    two paths bit-identical.
    """

    def __init__(
        self,
        taus,
        params: DecayParams,
        grid: GridSpec,
        *,
        cadence: float,
        t_final: float,
        quad: SphereQuadrature | None = None,
        dv: float | None = None,
        source=None,
        betas: tuple[float, ...] = (1.0,),
        ps: tuple[float, ...] | None = None,
        env: EnvelopeH | None = None,
        k_max: int = 2,
        fd_order: int = 2,
        monitor_tau_stride: int = 1,
        monitor_ring_stride: int = 1,
        probe: bool = False,
        shell_step: float = 1.0,
    ) -> None:
        self.params = params
        self.grid = grid
        self.cadence = float(cadence)
        self.source = source
        self.betas = tuple(betas)
        self.ps = tuple(ps) if ps is not None else default_cone_exponents(params)
        self.env = env
        self.k_max = k_max
        self.fd_order = fd_order
        self.probe_on = probe
        self.shell_step = shell_step

        if quad is None:
            quad = SphereQuadrature.build()
        if dv is None:
            dv = self.cadence * max(1, round(grid.dx / self.cadence))
        if abs(dv / self.cadence - round(dv / self.cadence)) > 1e-9:
            raise ValueError("ring spacing dv must be a multiple of the snapshot cadence")

        self.leaves = [
            make_leaf(tau, params, grid, quad, dv=dv, t_available=t_final) for tau in taus
        ]
        for leaf in self.leaves:
            if abs(leaf.tau / self.cadence - round(leaf.tau / self.cadence)) > 1e-9:
                raise ValueError(f"leaf tau={leaf.tau} is not a snapshot time")

        self._tables = [
            {name: np.zeros((leaf.n_rings, leaf.quad.weights.size)) for name in _CONE_NAMES}
            for leaf in self.leaves
        ]
        self._disc: list[dict | None] = [None] * len(self.leaves)
        self._ring_jobs: dict[int, list[tuple[int, int]]] = {}
        self._disc_jobs: dict[int, list[int]] = {}
        for i, leaf in enumerate(self.leaves):
            self._disc_jobs.setdefault(self._tkey(leaf.tau), []).append(i)
            for j in range(leaf.n_rings):
                self._ring_jobs.setdefault(self._tkey(leaf.cone_t[j]), []).append((i, j))

        self._monitor_jobs: dict[int, list[tuple[int, int]]] = {}
        self._monitor_disc: dict[int, list[int]] = {}
        if env is not None:
            for i in range(0, len(self.leaves), max(1, monitor_tau_stride)):
                leaf = self.leaves[i]
                self._monitor_disc.setdefault(self._tkey(leaf.tau), []).append(i)
                for j in range(0, leaf.n_rings, max(1, monitor_ring_stride)):
                    self._monitor_jobs.setdefault(self._tkey(leaf.cone_t[j]), []).append((i, j))
        self._mon_partial: dict[int, dict] = {
            i: {"cone_incoming": 0.0, "cone_good": 0.0, "shell": 0.0, "core": 0.0, "rings": 0}
            for i in range(len(self.leaves))
        }
        self._mon_leaves = sorted({i for jobs in self._monitor_jobs.values() for i, _ in jobs}
                                  | {i for ids in self._monitor_disc.values() for i in ids})
        self._probe_rows: list[ProbeRow] = []

        self.window = SnapshotSeries()
        self._deferred: int | None = None

    def _tkey(self, t: float) -> int:
        key = t / self.cadence
        if abs(key - round(key)) > 1e-6:
            raise ValueError(f"time {t} does not sit on the snapshot cadence")
        return int(round(key))

    def on_snapshot(self, state: FieldState) -> None:
        self.window.append(state)
        key = self._tkey(state.t)

        for i, j in self._ring_jobs.pop(key, []):
            leaf = self.leaves[i]
            row = _ring_row(self.window, float(leaf.cone_t[j]), float(leaf.cone_r[j]), leaf.quad.nodes)
            for name in _CONE_NAMES:
                self._tables[i][name][j] = row[name]
        for i in self._disc_jobs.pop(key, []):
            self._disc[i] = _disc_tables(self.leaves[i], self.window)

        # monitor jobs for the previous snapshot run one step late so the
        # third time level can use a centered difference
        if self._deferred is not None:
            self._run_monitors(self._deferred)
        self._deferred = key if (key in self._monitor_jobs or key in self._monitor_disc) else None
        self.window.drop_before(state.t - 2.5 * self.cadence)

    def _run_monitors(self, key: int) -> None:
        t = key * self.cadence
        for i, j in self._monitor_jobs.pop(key, []):
            leaf = self.leaves[i]
            qi, qg = _cone_monitor_ratios(
                self.window,
                t,
                float(leaf.cone_r[j]),
                leaf.quad.nodes,
                leaf.quad.weights,
                self.env,
                leaf.tau,
                self.k_max,
                self.fd_order,
            )
            part = self._mon_partial[i]
            part["cone_incoming"] = max(part["cone_incoming"], qi)
            part["cone_good"] = max(part["cone_good"], qg)
            part["rings"] += 1
            if self.probe_on:
                self._probe_rows.append(
                    _probe_row(
                        self.window,
                        t,
                        float(leaf.cone_r[j]),
                        leaf.quad.nodes,
                        self.params,
                        leaf.tau,
                        self.k_max,
                        self.fd_order,
                    )
                )
        for i in self._monitor_disc.pop(key, []):
            leaf = self.leaves[i]
            part = self._mon_partial[i]
            radii = np.arange(1.0, leaf.R + 1e-9, self.shell_step)
            for rv in radii:
                load = _surface_monitor_load(self.window, t, rv * leaf.quad.nodes, self.k_max, self.fd_order)
                q = float(load @ leaf.quad.weights)
                hbar = float(self.env.Hbar(rv))
                part["shell"] = max(part["shell"], q / (2.0 * hbar * hbar))
            rg = self.grid.radius_grid()
            mask = rg <= 1.0
            x, y, z = self.grid.meshes()
            pts = np.stack([x[mask], y[mask], z[mask]], axis=-1)
            load = _surface_monitor_load(self.window, t, pts, self.k_max, self.fd_order)
            part["core"] = max(part["core"], float(np.max(load)) / (2.0 * self.env.delta0**2))

    def finalize(self, field_name: str = "phi") -> StreamResult:
        if self._deferred is not None:
            self._run_monitors(self._deferred)
            self._deferred = None
        leftover = sorted(self._ring_jobs) + sorted(self._disc_jobs)
        if leftover:
            raise OutOfDomainError(f"run ended before covering snapshot keys {leftover[:4]}")

        ledger = EnergyLedger()
        quants = []
        lemma = []
        d_vals = [] if self.source is not None else None
        for i, leaf in enumerate(self.leaves):
            dt_, ct = self._disc[i], self._tables[i]
            q = _leaf_quantities(leaf, dt_, ct, self.params, self.ps)
            _record_leaf(ledger, field_name, q)
            quants.append(q)
            lemma.append(_lemma_from_tables(leaf, dt_, ct, self.params))
            if self.source is not None:
                d = source_weighted_leaf(leaf, self.source, self.params.alpha)
                ledger.record(LedgerKey("source", "source_leaf", (self.params.alpha,)), leaf.tau, d)
                d_vals.append(d)
        if len(quants) >= 2:
            _record_slabs(ledger, field_name, self.params, quants, self.betas, self.ps, d_vals)

        monitors = []
        for i in self._mon_leaves:
            part = self._mon_partial[i]
            monitors.append(
                MonitorReport(
                    tau=self.leaves[i].tau,
                    k_max=self.k_max,
                    delta0=self.env.delta0,
                    cone_incoming=part["cone_incoming"],
                    cone_good=part["cone_good"],
                    shell=part["shell"],
                    core=part["core"],
                    rings_sampled=part["rings"],
                )
            )
        probe = ProbeTable(k_max=self.k_max, rows=self._probe_rows) if self.probe_on else None
        return StreamResult(ledger=ledger, lemma=lemma, monitors=monitors, probe=probe)
