"""Decay-rate extraction from energy time series.

Three consumers of a ledger series live here: a log-log least-squares fit
of energy against 1 + tau with a confidence half-width, the dyadic
pigeonhole bookkeeping that turns an integrated bound into a set of good
times, and a quadrature check of the weight-trading identity that moves a
power of 1 + tau off an integrand and onto its running tail integral.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import integrate, stats


class InsufficientPointsError(ValueError):
    """Fewer usable samples in the fitting window than a line supports."""


class NonpositiveValuesError(ValueError):
    """Negative energies in the window; the series is corrupted upstream."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not converge or produced a non-finite value."""


# ---------------------------------------------------------------------------
# Log-log decay fits

#: Points with tau below this never enter a default fitting window; the
#: startup transient is not governed by the late-time rate.
_WINDOW_START = 5.0

#: Fraction of the run retained by the default window.  The final stretch
#: sees the outer boundary or the truncated cone and is dropped.
_WINDOW_KEEP = 0.9


def default_window(taus: np.ndarray) -> tuple[float, float]:
    """Fitting window skipping tau < 5 and the last tenth of the run."""
    return (_WINDOW_START, _WINDOW_KEEP * float(np.max(taus)))


@dataclass(frozen=True)
class DecayFit:
    """Least-squares line through (log(1 + tau), log y).

    ``exponent`` is the slope, so a clean power law (1 + tau)^p fits with
    exponent p and r_squared 1.  ``ci`` is the 95 percent half-width from
    the usual regression variance estimate; with a handful of correlated
    ledger samples it is indicative, not a calibrated error bar.  Samples
    at exactly zero are dropped before fitting and their times kept in
    ``excluded``.
    """

    taus: np.ndarray
    values: np.ndarray
    window: tuple[float, float]
    exponent: float
    intercept: float
    ci: float
    r_squared: float
    excluded: tuple[float, ...]

    def to_csv(self) -> str:
        lines = ["log1p_tau,log_value"]
        for t, y in zip(np.log1p(self.taus), np.log(self.values)):
            lines.append(f"{t:.17g},{y:.17g}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {
            "window": [self.window[0], self.window[1]],
            "exponent": self.exponent,
            "intercept": self.intercept,
            "ci": self.ci,
            "r_squared": self.r_squared,
            "n_points": int(self.taus.size),
            "n_excluded": len(self.excluded),
        }


def fit_exponent(
    taus: np.ndarray,
    values: np.ndarray,
    window: tuple[float, float] | None = None,
) -> DecayFit:
    """Fit log y against log(1 + tau) over a window of the series.

    Exact zeros are excluded from the fit (a compactly supported pulse can
    leave a weighted tail identically zero early on); negative values are
    refused outright since every ledger quantity is a square.
    """
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=float)
    if taus.shape != values.shape or taus.ndim != 1:
        raise ValueError("need matching one-dimensional tau and value arrays")
    if taus.size == 0:
        raise InsufficientPointsError("empty series")
    if window is None:
        window = default_window(taus)
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise ValueError(f"window [{lo}, {hi}] is empty")

    sel = (taus >= lo) & (taus <= hi)
    t_win = taus[sel]
    y_win = values[sel]
    if np.any(y_win < 0.0):
        raise NonpositiveValuesError("negative samples in the fitting window")
    keep = y_win > 0.0
    excluded = tuple(float(t) for t in t_win[~keep])
    t_fit = t_win[keep]
    y_fit = y_win[keep]
    if t_fit.size < 5:
        raise InsufficientPointsError(
            f"window [{lo:g}, {hi:g}] leaves {t_fit.size} usable points, need 5"
        )

    line = stats.linregress(np.log1p(t_fit), np.log(y_fit))
    halfwidth = float(stats.t.ppf(0.975, t_fit.size - 2)) * float(line.stderr)
    return DecayFit(
        taus=t_fit,
        values=y_fit,
        window=(lo, hi),
        exponent=float(line.slope),
        intercept=float(line.intercept),
        ci=halfwidth,
        r_squared=float(line.rvalue) ** 2,
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# Dyadic pigeonhole set


@dataclass(frozen=True)
class DyadicBlock:
    """Samples of one dyadic time block [2^j, 2^(j+1))."""

    j: int
    tau_lo: float
    tau_hi: float
    n_points: int
    n_hits: int

    @property
    def density(self) -> float:
        return self.n_hits / self.n_points


@dataclass(frozen=True)
class PigeonholeReport:
    """Membership in the good-time set T and its dyadic statistics.

    T collects the sample times where the series already meets the target
    threshold constant * (1 + tau)^(-1 - beta); an integrated decay bound
    forces such times to appear in every dyadic block.  The companion flag
    records whether each tau1 in T (early enough that the run covers
    4 tau1) has a partner tau2 in T with 2 tau1 <= tau2 <= 4 tau1.
    """

    beta: float
    constant: float
    taus: np.ndarray
    in_set: np.ndarray
    blocks: tuple[DyadicBlock, ...]
    companion_ok: bool
    companion_failures: tuple[float, ...]

    @property
    def min_density(self) -> float:
        return min((b.density for b in self.blocks), default=1.0)

    def as_dict(self) -> dict:
        return {
            "beta": self.beta,
            "constant": self.constant,
            "n_in_set": int(np.count_nonzero(self.in_set)),
            "n_points": int(self.taus.size),
            "blocks": [
                {
                    "tau_lo": b.tau_lo,
                    "tau_hi": b.tau_hi,
                    "n_points": b.n_points,
                    "density": b.density,
                }
                for b in self.blocks
            ],
            "min_density": self.min_density,
            "companion_ok": self.companion_ok,
            "companion_failures": list(self.companion_failures),
        }


def pigeonhole_report(
    taus: np.ndarray,
    values: np.ndarray,
    beta: float,
    constant: float,
) -> PigeonholeReport:
    """Tabulate the threshold set T and its density per dyadic block.

    Membership is the threshold comparison alone.  Blocks are the dyadic
    intervals [2^j, 2^(j+1)) for j >= 0 that contain at least one sample;
    times below tau = 1 sit outside every block but still enter T and the
    companion search.
    """
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=float)
    if taus.shape != values.shape or taus.ndim != 1:
        raise ValueError("need matching one-dimensional tau and value arrays")
    if taus.size == 0:
        raise ValueError("empty series")
    if not np.all(np.diff(taus) > 0):
        raise ValueError("sample times must be strictly increasing")
    if constant <= 0.0:
        raise ValueError("threshold constant must be positive")

    in_set = values <= constant * (1.0 + taus) ** (-1.0 - beta)

    tau_max = float(taus[-1])
    blocks: list[DyadicBlock] = []
    j = 0
    while 2.0**j <= tau_max:
        lo, hi = 2.0**j, 2.0 ** (j + 1)
        mask = (taus >= lo) & (taus < hi)
        n_pts = int(np.count_nonzero(mask))
        if n_pts:
            blocks.append(
                DyadicBlock(
                    j=j,
                    tau_lo=lo,
                    tau_hi=hi,
                    n_points=n_pts,
                    n_hits=int(np.count_nonzero(in_set & mask)),
                )
            )
        j += 1

    good = taus[in_set]
    failures = []
    for t1 in good:
        if 4.0 * t1 > tau_max:
            continue
        partners = (good >= 2.0 * t1) & (good <= 4.0 * t1)
        if not np.any(partners):
            failures.append(float(t1))

    return PigeonholeReport(
        beta=float(beta),
        constant=float(constant),
        taus=taus,
        in_set=in_set,
        blocks=tuple(blocks),
        companion_ok=not failures,
        companion_failures=tuple(failures),
    )


# ---------------------------------------------------------------------------
# Weight-trading identity

#: Denominator floor keeping the relative residual defined when both sides
#: vanish identically.
_RESIDUAL_FLOOR = 1e-300


class LweightCheck(NamedTuple):
    lhs: float
    rhs: float
    residual: float


def _quad(fn: Callable[[float], float], a: float, b: float) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(fn, a, b, epsabs=1e-12, epsrel=1e-12, limit=200)
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(f"quadrature on [{a:g}, {b:g}] did not converge: {exc}") from exc
    if not np.isfinite(val):
        raise QuadratureError(f"quadrature on [{a:g}, {b:g}] returned {val!r}")
    return float(val)


def check_lweight_identity(
    f: Callable[[float], float],
    beta: float,
    window: tuple[float, float],
) -> LweightCheck:
    """Verify the integration-by-parts exchange of a time weight.

    The weighted integral of f over [tau1, tau2] with weight (1 + s)^beta
    equals beta times the (beta - 1)-weighted integral of the running tail
    integral of f, plus the tail weighted by (1 + tau1)^beta.  Both sides
    are evaluated by adaptive quadrature and compared relatively.
    """
    t1, t2 = float(window[0]), float(window[1])
    if not t2 > t1:
        raise ValueError(f"window [{t1}, {t2}] is empty")
    if not np.isfinite(beta):
        raise ValueError("beta must be finite")

    lhs = _quad(lambda s: (1.0 + s) ** beta * f(s), t1, t2)
    tail = _quad(f, t1, t2)

    def weighted_tail(tau: float) -> float:
        return (1.0 + tau) ** (beta - 1.0) * _quad(f, tau, t2)

    rhs = beta * _quad(weighted_tail, t1, t2) + (1.0 + t1) ** beta * tail
    residual = abs(lhs - rhs) / (abs(lhs) + _RESIDUAL_FLOOR)
    return LweightCheck(lhs=lhs, rhs=rhs, residual=residual)
