"""Run configuration for the experiment driver.

Configs are plain text in the sectioned key-value format of configparser:
a [run] section with the scalar knobs, plus optional [grid], [params],
[data], [metric], [nullform], [background], [diagnostics], [audit] and
[convergence] tables.  Unknown sections or keys are rejected, and every
complaint names the offending field.  Omitted keys fall back to the
desk-scale preset: n=192 on half_width 48, R=10, tau_final 36, 4th-order
stencils, causal-domain boundary.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from conewave.evolve import EquationSpec, InitialData, SphericalBackground
from conewave.foliation import GridSpec
from conewave.geometry import (
    PARAMS_DEFAULT,
    DecayParams,
    MetricSpec,
    NullFormTensor,
    make_metric,
    validate_params,
)


class ConfigError(ValueError):
    """Unparseable or inconsistent configuration; names the field."""


MODES = (
    "linear-flat",
    "linear-perturbed",
    "quasilinear-null",
    "quasilinear-interior",
    "stability",
    "convergence",
    "audit",
)

BOUNDARIES = ("causal", "sommerfeld")

NULLFORM_CHOICES = ("none", "wave-symbol", "minkowski-quadratic", "tt-cubic")


def nullform_tensor(choice: str, scale: float = 1.0) -> NullFormTensor | None:
    """Build one of the named constant-coefficient nonlinearities.

    wave-symbol is the classic cubic null form; minkowski-quadratic is the
    semilinear pair A = m0; tt-cubic is the textbook non-null coefficient
    (g^{ttt} only), kept so the failure path of the checker stays covered.
    """
    if choice == "none":
        return None
    if choice == "wave-symbol":
        base = NullFormTensor.wave_symbol_example()
        return NullFormTensor(gcube=scale * base.gcube, aquad=scale * base.aquad)
    if choice == "minkowski-quadratic":
        return NullFormTensor(aquad=scale * np.diag([-1.0, 1.0, 1.0, 1.0]))
    if choice == "tt-cubic":
        g = np.zeros((4, 4, 4))
        g[0, 0, 0] = scale
        return NullFormTensor(gcube=g)
    raise ConfigError(f"[nullform] kind: unknown choice {choice!r}, expected one of {NULLFORM_CHOICES}")


@dataclass
class RunConfig:
    """One experiment, fully specified.

    The defaults are the shipped desk-scale preset; a config file only
    needs the keys it changes.  threads is a scheduling hint recorded for
    reproducibility; results never depend on it.
    """

    mode: str = "linear-flat"
    params: DecayParams = field(default_factory=lambda: dataclasses.replace(PARAMS_DEFAULT))
    grid: GridSpec = field(default_factory=lambda: GridSpec(half_width=48.0, n=192))
    data: InitialData = field(default_factory=InitialData)
    metric_family: str = "flat"
    nullform: str = "none"
    nullform_scale: float = 1.0
    semilinear: bool = False
    interior_quadratic: float = 0.0
    background: InitialData | None = None
    boundary: str = "causal"
    tau_final: float = 36.0
    cadence: float = 0.5
    order: int = 4
    courant: float = 0.25
    seed: int = 0
    threads: int = 1
    output_dir: str = "artifacts"
    # diagnostics
    monitor: bool = True
    monitor_tau_stride: int = 4
    monitor_ring_stride: int = 4
    monitor_shell_step: float = 2.0
    betas: tuple[float, ...] = (1.0,)
    fit_window: tuple[float, float] | None = None
    pigeonhole_beta: float = 1.0
    pigeonhole_constant: float | None = None
    checkpoint_stride: int | None = None
    # audit mode
    audit_multiplier: str = "dt"
    audit_alpha: float | None = None
    audit_p: float | None = None
    audit_tau_lo: float | None = None
    audit_tau_hi: float | None = None
    audit_v_cap: float | None = None
    audit_levels: int = 2
    audit_tolerance: float = 1e-3
    # convergence mode
    convergence_levels: int = 3
    convergence_time: float = 10.0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"[run] mode: unknown mode {self.mode!r}, expected one of {MODES}")
        if self.boundary not in BOUNDARIES:
            raise ConfigError(f"[run] boundary: expected one of {BOUNDARIES}, got {self.boundary!r}")
        if self.order not in (2, 4):
            raise ConfigError(f"[run] order: stencil order must be 2 or 4, got {self.order}")
        if self.cadence <= 0:
            raise ConfigError("[run] cadence: must be positive")
        if self.tau_final <= 0:
            raise ConfigError("[run] tau_final: must be positive")
        n_snaps = self.tau_final / self.cadence
        if abs(n_snaps - round(n_snaps)) > 1e-9:
            raise ConfigError("[run] tau_final: must be an integer multiple of the cadence")
        if not 0 < self.courant <= 1:
            raise ConfigError("[run] courant: must lie in (0, 1]")
        if self.threads < 1:
            raise ConfigError("[run] threads: must be at least 1")
        if self.seed < 0:
            raise ConfigError("[run] seed: must be nonnegative")

        bad = validate_params(self.params)
        if bad:
            raise ConfigError("[params] violated: " + "; ".join(bad))
        try:
            self.data.validate(self.params.R)
        except ValueError as exc:
            raise ConfigError(f"[data] {exc}") from exc

        if self.boundary == "causal" and self.mode not in ("convergence",):
            need = self.tau_final + self.params.R + 2.0
            if self.grid.half_width < need - 1e-9:
                raise ConfigError(
                    f"[grid] half_width: causal-domain run needs half_width >= "
                    f"tau_final + R + 2 = {need}, got {self.grid.half_width}"
                )

        if self.nullform not in NULLFORM_CHOICES:
            raise ConfigError(
                f"[nullform] kind: unknown choice {self.nullform!r}, expected one of {NULLFORM_CHOICES}"
            )
        if self.mode == "quasilinear-null" and self.nullform == "none":
            raise ConfigError("[nullform] kind: quasilinear-null mode needs a nonlinearity")
        if self.mode == "quasilinear-interior" and self.interior_quadratic == 0.0:
            raise ConfigError(
                "[run] interior_quadratic: quasilinear-interior mode needs a nonzero coefficient"
            )
        if self.semilinear and self.nullform == "none":
            raise ConfigError("[run] semilinear: semilinear terms need a nullform choice")
        if self.mode == "stability":
            if self.background is None:
                raise ConfigError("[background] stability mode needs a background profile")
            if self.nullform == "none":
                raise ConfigError("[nullform] kind: stability mode needs the cubic coefficients")
            try:
                self.background.validate(self.params.R)
            except ValueError as exc:
                raise ConfigError(f"[background] {exc}") from exc
            if self.background.support < 5.0 * self.background.width:
                raise ConfigError(
                    "[background] support: the analytic profile needs support >= 5 width"
                )

        if self.mode == "audit":
            if self.audit_tau_lo is None or self.audit_tau_hi is None:
                raise ConfigError("[audit] tau_lo/tau_hi: audit mode needs the slab endpoints")
            if not self.audit_tau_hi > self.audit_tau_lo:
                raise ConfigError("[audit] tau_hi: must exceed tau_lo")
            if self.audit_multiplier not in ("dt", "morawetz", "pweight"):
                raise ConfigError(
                    f"[audit] multiplier: expected dt, morawetz or pweight, got {self.audit_multiplier!r}"
                )
            if self.audit_levels < 1:
                raise ConfigError("[audit] levels: must be at least 1")
        if self.mode == "convergence":
            if self.metric_family != "flat" or self.nullform != "none":
                raise ConfigError("[run] mode: convergence mode compares against the flat oracle")
            if self.data.family != "spherical-pulse":
                raise ConfigError("[data] family: convergence mode needs the spherical pulse")
            if self.data.support < 5.0 * self.data.width:
                raise ConfigError("[data] support: the oracle profile needs support >= 5 width")
            if self.convergence_levels < 2:
                raise ConfigError("[convergence] levels: need at least two resolutions")
            if self.convergence_time <= 0:
                raise ConfigError("[convergence] time: must be positive")

        for knob, name in (
            (self.monitor_tau_stride, "tau_stride"),
            (self.monitor_ring_stride, "ring_stride"),
        ):
            if knob < 1:
                raise ConfigError(f"[diagnostics] {name}: must be at least 1")
        if self.fit_window is not None and not self.fit_window[1] > self.fit_window[0]:
            raise ConfigError("[diagnostics] fit_window: upper end must exceed the lower")

    def build_metric(self) -> MetricSpec:
        try:
            return make_metric(self.metric_family, self.params)
        except ValueError as exc:
            raise ConfigError(f"[metric] family: {exc}") from exc

    def build_equation(self) -> EquationSpec:
        bg = None
        if self.mode == "stability":
            bg = SphericalBackground(self.background.profile())
        return EquationSpec(
            metric=self.build_metric(),
            nullform=nullform_tensor(self.nullform, self.nullform_scale),
            semilinear=self.semilinear,
            background=bg,
            interior_quadratic=self.interior_quadratic,
            interior_radius=self.params.R - 1.0,
        )


# ---------------------------------------------------------------------------
# Parsing

def _as_float(raw: str) -> float:
    return float(raw)


def _as_int(raw: str) -> int:
    v = float(raw)
    if abs(v - round(v)) > 0:
        raise ValueError("not an integer")
    return int(round(v))


def _as_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError("not a boolean")


def _as_str(raw: str) -> str:
    return raw.strip()


def _as_floats(raw: str) -> tuple[float, ...]:
    parts = [p for p in raw.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


# section -> key -> (caster, config attribute); None attribute means the
# value is routed by hand in parse_config_text.
_SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "mode": (_as_str, "mode"),
        "boundary": (_as_str, "boundary"),
        "tau_final": (_as_float, "tau_final"),
        "cadence": (_as_float, "cadence"),
        "order": (_as_int, "order"),
        "courant": (_as_float, "courant"),
        "seed": (_as_int, "seed"),
        "threads": (_as_int, "threads"),
        "output_dir": (_as_str, "output_dir"),
        "semilinear": (_as_bool, "semilinear"),
        "interior_quadratic": (_as_float, "interior_quadratic"),
        "checkpoint_stride": (_as_int, "checkpoint_stride"),
    },
    "grid": {
        "n": (_as_int, None),
        "half_width": (_as_float, None),
    },
    "params": {
        "delta0": (_as_float, None),
        "alpha": (_as_float, None),
        "epsilon": (_as_float, None),
        "alpha1": (_as_float, None),
        "alpha2": (_as_float, None),
        "R": (_as_float, None),
    },
    "data": {
        "family": (_as_str, None),
        "amplitude": (_as_float, None),
        "width": (_as_float, None),
        "support": (_as_float, None),
        "center": (_as_floats, None),
    },
    "metric": {
        "family": (_as_str, "metric_family"),
    },
    "nullform": {
        "kind": (_as_str, "nullform"),
        "scale": (_as_float, "nullform_scale"),
    },
    "background": {
        "amplitude": (_as_float, None),
        "width": (_as_float, None),
        "support": (_as_float, None),
    },
    "diagnostics": {
        "monitor": (_as_bool, "monitor"),
        "tau_stride": (_as_int, "monitor_tau_stride"),
        "ring_stride": (_as_int, "monitor_ring_stride"),
        "shell_step": (_as_float, "monitor_shell_step"),
        "betas": (_as_floats, "betas"),
        "fit_window": (_as_floats, None),
        "pigeonhole_beta": (_as_float, "pigeonhole_beta"),
        "pigeonhole_constant": (_as_float, "pigeonhole_constant"),
    },
    "audit": {
        "multiplier": (_as_str, "audit_multiplier"),
        "alpha": (_as_float, "audit_alpha"),
        "p": (_as_float, "audit_p"),
        "tau_lo": (_as_float, "audit_tau_lo"),
        "tau_hi": (_as_float, "audit_tau_hi"),
        "v_cap": (_as_float, "audit_v_cap"),
        "levels": (_as_int, "audit_levels"),
        "tolerance": (_as_float, "audit_tolerance"),
    },
    "convergence": {
        "levels": (_as_int, "convergence_levels"),
        "time": (_as_float, "convergence_time"),
    },
}


def parse_config_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc

    cfg = RunConfig()
    grid_kw: dict = {}
    params_kw: dict = {}
    data_kw: dict = {}
    background_kw: dict = {}

    for sec in cp.sections():
        if sec not in _SCHEMA:
            raise ConfigError(f"[{sec}] unknown section, expected one of {sorted(_SCHEMA)}")
        for key, raw in cp[sec].items():
            entry = _SCHEMA[sec].get(key)
            if entry is None:
                raise ConfigError(f"[{sec}] {key}: unknown key")
            caster, attr = entry
            try:
                value = caster(raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: cannot parse {raw!r} ({exc})") from exc
            if attr is not None:
                setattr(cfg, attr, value)
            elif sec == "grid":
                grid_kw[key] = value
            elif sec == "params":
                params_kw[key] = value
            elif sec == "data":
                data_kw["center" if key == "center" else key] = value
            elif sec == "background":
                background_kw[key] = value
            elif sec == "diagnostics" and key == "fit_window":
                if len(value) != 2:
                    raise ConfigError("[diagnostics] fit_window: need exactly two numbers")
                cfg.fit_window = (value[0], value[1])

    if grid_kw:
        try:
            cfg.grid = dataclasses.replace(cfg.grid, **grid_kw)
        except ValueError as exc:
            raise ConfigError(f"[grid] {exc}") from exc
    if params_kw:
        cfg.params = dataclasses.replace(cfg.params, **params_kw)
    if data_kw:
        if "center" in data_kw:
            c = data_kw["center"]
            if len(c) != 3:
                raise ConfigError("[data] center: need exactly three coordinates")
            data_kw["center"] = (c[0], c[1], c[2])
        cfg.data = dataclasses.replace(cfg.data, **data_kw)
    if background_kw:
        cfg.background = InitialData(family="spherical-pulse", **background_kw)

    cfg.validate()
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file: {p} does not exist")
    return parse_config_text(p.read_text())


# ---------------------------------------------------------------------------
# Canonical echo

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def config_text(cfg: RunConfig) -> str:
    """Serialize a config so that parsing the text reproduces it exactly.

    Every knob is written out, including ones still at their defaults, so
    the echo stored with a run is self-contained.
    """
    out = ["[run]"]
    out.append(f"mode = {cfg.mode}")
    out.append(f"boundary = {cfg.boundary}")
    out.append(f"tau_final = {_fmt(cfg.tau_final)}")
    out.append(f"cadence = {_fmt(cfg.cadence)}")
    out.append(f"order = {cfg.order}")
    out.append(f"courant = {_fmt(cfg.courant)}")
    out.append(f"seed = {cfg.seed}")
    out.append(f"threads = {cfg.threads}")
    out.append(f"output_dir = {cfg.output_dir}")
    out.append(f"semilinear = {_fmt(cfg.semilinear)}")
    out.append(f"interior_quadratic = {_fmt(cfg.interior_quadratic)}")
    if cfg.checkpoint_stride is not None:
        out.append(f"checkpoint_stride = {cfg.checkpoint_stride}")

    out += ["", "[grid]", f"n = {cfg.grid.n}", f"half_width = {_fmt(cfg.grid.half_width)}"]

    p = cfg.params
    out += ["", "[params]"]
    for name in ("delta0", "alpha", "epsilon", "alpha1", "alpha2", "R"):
        out.append(f"{name} = {_fmt(getattr(p, name))}")

    d = cfg.data
    out += [
        "",
        "[data]",
        f"family = {d.family}",
        f"amplitude = {_fmt(d.amplitude)}",
        f"width = {_fmt(d.width)}",
        f"support = {_fmt(d.support)}",
        f"center = {_fmt(d.center[0])}, {_fmt(d.center[1])}, {_fmt(d.center[2])}",
    ]

    out += ["", "[metric]", f"family = {cfg.metric_family}"]
    out += ["", "[nullform]", f"kind = {cfg.nullform}", f"scale = {_fmt(cfg.nullform_scale)}"]

    if cfg.background is not None:
        b = cfg.background
        out += [
            "",
            "[background]",
            f"amplitude = {_fmt(b.amplitude)}",
            f"width = {_fmt(b.width)}",
            f"support = {_fmt(b.support)}",
        ]

    out += [
        "",
        "[diagnostics]",
        f"monitor = {_fmt(cfg.monitor)}",
        f"tau_stride = {cfg.monitor_tau_stride}",
        f"ring_stride = {cfg.monitor_ring_stride}",
        f"shell_step = {_fmt(cfg.monitor_shell_step)}",
        "betas = " + ", ".join(_fmt(b) for b in cfg.betas),
        f"pigeonhole_beta = {_fmt(cfg.pigeonhole_beta)}",
    ]
    if cfg.fit_window is not None:
        out.append(f"fit_window = {_fmt(cfg.fit_window[0])}, {_fmt(cfg.fit_window[1])}")
    if cfg.pigeonhole_constant is not None:
        out.append(f"pigeonhole_constant = {_fmt(cfg.pigeonhole_constant)}")

    if cfg.mode == "audit":
        out += ["", "[audit]", f"multiplier = {cfg.audit_multiplier}"]
        for name, val in (
            ("alpha", cfg.audit_alpha),
            ("p", cfg.audit_p),
            ("tau_lo", cfg.audit_tau_lo),
            ("tau_hi", cfg.audit_tau_hi),
            ("v_cap", cfg.audit_v_cap),
        ):
            if val is not None:
                out.append(f"{name} = {_fmt(val)}")
        out.append(f"levels = {cfg.audit_levels}")
        out.append(f"tolerance = {_fmt(cfg.audit_tolerance)}")

    if cfg.mode == "convergence":
        out += [
            "",
            "[convergence]",
            f"levels = {cfg.convergence_levels}",
            f"time = {_fmt(cfg.convergence_time)}",
        ]

    return "\n".join(out) + "\n"
