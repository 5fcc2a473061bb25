import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from conewave import DecayParams, EnvelopeH
from conewave.diagnostics import (
    CommutedFamily,
    EnergyLedger,
    InsufficientTimeLevelsError,
    LeafStreamer,
    LedgerKey,
    bulk_good_leaf,
    canonical_word,
    commuted,
    decay_weighted_sum,
    energy_flux,
    envelope_monitor,
    lemma_checks,
    pointwise_probe,
    slab_accumulate,
    source_weighted_leaf,
    weighted_cone,
)
from conewave.evolve import (
    EquationSpec,
    InitialData,
    RadialProfile,
    exact_spherical,
    exact_spherical_dphi,
    prepare,
    rhs,
    run,
    second_derivative,
    step_rk4,
)
from conewave.foliation import (
    FieldState,
    GridSpec,
    OutOfDomainError,
    SnapshotSeries,
    SphereQuadrature,
    cone_integral,
    interp,
    make_leaf,
)
from conewave.geometry import make_metric

PARAMS = DecayParams(delta0=0.01, alpha=0.1, epsilon=0.002, alpha1=0.107, alpha2=0.12, R=5.0)


def manufactured_history(grid, times, phi_fn, pi_fn, pidot_fn=None):
    hist = SnapshotSeries()
    x, y, z = grid.meshes()
    r = grid.radius_grid()
    for t in times:
        phi = np.asarray(phi_fn(t, x, y, z, r), dtype=float) + np.zeros(grid.shape)
        pi = np.asarray(pi_fn(t, x, y, z, r), dtype=float) + np.zeros(grid.shape)
        pidot = None
        if pidot_fn is not None:
            pidot = np.asarray(pidot_fn(t, x, y, z, r), dtype=float) + np.zeros(grid.shape)
        hist.append(FieldState(t=float(t), phi=phi, pi=pi, grid=grid, pidot=pidot))
    return hist


def evolve_history(grid, amplitude, t_final, cadence=0.5, width=0.8, support=4.0):
    eq = EquationSpec(metric=make_metric("flat"))
    data = InitialData(amplitude=amplitude, width=width, support=support)
    hist = SnapshotSeries()
    run(eq, data, grid, t_final=t_final, cadence=cadence, on_snapshot=hist.append)
    return hist


@pytest.fixture(scope="module")
def flat_pulse():
    grid = GridSpec(n=64, half_width=16.0)
    quad_ = SphereQuadrature.build()
    hist = evolve_history(grid, amplitude=0.05, t_final=8.0)
    taus = [0.5 * i for i in range(9)]
    leaves = [make_leaf(t, PARAMS, grid, quad_, dv=0.5, t_available=8.0) for t in taus]
    return {"grid": grid, "hist": hist, "leaves": leaves, "quad": quad_}


@pytest.fixture(scope="module")
def flat_pulse_double():
    grid = GridSpec(n=64, half_width=16.0)
    quad_ = SphereQuadrature.build()
    hist = evolve_history(grid, amplitude=0.10, t_final=8.0)
    taus = [0.5 * i for i in range(9)]
    leaves = [make_leaf(t, PARAMS, grid, quad_, dv=0.5, t_available=8.0) for t in taus]
    return {"grid": grid, "hist": hist, "leaves": leaves, "quad": quad_}


@pytest.fixture(scope="module")
def zero_history():
    grid = GridSpec(n=24, half_width=16.0)
    z = lambda t, x, y, z_, r: 0.0 * r
    return grid, manufactured_history(grid, [0.5 * i for i in range(7)], z, z, z)


class TestLedger:
    def test_rows_and_csv(self):
        led = EnergyLedger()
        led.record(LedgerKey("phi", "energy"), 0.0, 1.0 / 3.0)
        led.record(LedgerKey("phi", "energy"), 1.0, 0.25)
        led.record(LedgerKey("phi", "cone_out", (1.5,)), 0.0, 2.0)
        led.record_slab(LedgerKey("phi", "energy_decay", (2.0,)), 0.0, 1.0, 0.5)
        text = led.to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == "field,weight,exponents,tau_lo,tau_hi,value"
        assert len(lines) == 5
        assert "0.33333333333333331" in text
        taus, vals = led.series(LedgerKey("phi", "energy"))
        assert taus.tolist() == [0.0, 1.0]
        assert vals.tolist() == [1.0 / 3.0, 0.25]
        assert led.slab(LedgerKey("phi", "energy_decay", (2.0,)), 0.0, 1.0) == 0.5

    def test_rejects_bad_values(self):
        led = EnergyLedger()
        key = LedgerKey("phi", "energy")
        with pytest.raises(ValueError, match=">= 0"):
            led.record(key, 0.0, -1e-30)
        with pytest.raises(ValueError, match="finite"):
            led.record(key, 0.0, math.nan)
        led.record(key, 0.0, 1.0)
        with pytest.raises(ValueError, match="duplicate"):
            led.record(key, 0.0, 1.0)
        led.record_slab(key, 0.0, 1.0, 1.0)
        with pytest.raises(ValueError, match="duplicate"):
            led.record_slab(key, 0.0, 1.0, 2.0)
        with pytest.raises(ValueError, match="tau_hi"):
            led.record_slab(key, 1.0, 1.0, 0.0)

    def test_serialization_is_order_invariant(self):
        entries = [
            (LedgerKey("phi", "energy"), 0.0, 0.7),
            (LedgerKey("phi", "energy"), 1.0, 0.6),
            (LedgerKey("phi", "cone_all", (0.1,)), 0.0, 0.2),
            (LedgerKey("dphi", "energy"), 0.0, 0.3),
        ]
        fwd, rev = EnergyLedger(), EnergyLedger()
        for key, tau, val in entries:
            fwd.record(key, tau, val)
        for key, tau, val in reversed(entries):
            rev.record(key, tau, val)
        assert fwd.to_csv() == rev.to_csv()
        assert fwd.to_json() == rev.to_json()

    def test_merge(self):
        a, b = EnergyLedger(), EnergyLedger()
        a.record(LedgerKey("phi", "energy"), 0.0, 1.0)
        b.record(LedgerKey("phi", "energy"), 1.0, 2.0)
        b.record_slab(LedgerKey("phi", "bulk_good", (0.1,)), 0.0, 1.0, 3.0)
        assert a.merge(b).to_csv() == b.merge(a).to_csv()
        dup = EnergyLedger()
        dup.record(LedgerKey("phi", "energy"), 0.0, 9.0)
        with pytest.raises(ValueError, match="duplicate"):
            a.merge(dup)

    def test_json_structure(self):
        led = EnergyLedger()
        led.record(LedgerKey("phi", "cone_out", (1.0,)), 2.0, 5.0)
        tree = json.loads(led.to_json())
        assert tree == {"cone_out": {"phi": {"1": [[2.0, 2.0, 5.0]]}}}


@pytest.fixture(scope="module")
def exact_history():
    profile = RadialProfile(1.0, 0.8, 4.0)
    grid = GridSpec(n=64, half_width=8.0)
    x, y, z = grid.meshes()
    r = grid.radius_grid()
    pts = np.stack([x, y, z], axis=-1)
    hist = SnapshotSeries()
    for i in range(9):
        t = 0.5 * i
        phi = exact_spherical(profile, t, r)
        pi = exact_spherical_dphi(profile, t, pts)[..., 0]
        hist.append(FieldState(t=t, phi=phi, pi=pi, grid=grid))
    return profile, grid, hist


class TestEnergyFlux:
    def test_zero_field(self, zero_history):
        grid, hist = zero_history
        leaf = make_leaf(1.0, PARAMS, grid, dv=0.5, t_available=3.0)
        assert energy_flux(leaf, hist) == 0.0
        for sel in ("all", "outgoing", "good"):
            assert weighted_cone(leaf, hist, 1.0, sel) == 0.0
        assert bulk_good_leaf(leaf, hist, 0.1) == 0.0

    def _oracle(self, profile, leaf):
        def disc_density(r):
            d = exact_spherical_dphi(profile, leaf.tau, np.array([r, 0.0, 0.0]))
            return 4.0 * math.pi * r * r * (d[0] ** 2 + d[1] ** 2)

        disc, _ = quad(disc_density, 0.0, leaf.R, limit=200)

        def cone_density(s):
            r = leaf.R + s
            d = exact_spherical_dphi(profile, leaf.tau + s, np.array([r, 0.0, 0.0]))
            return 4.0 * math.pi * r * r * (d[0] + d[1]) ** 2

        cone, _ = quad(cone_density, 0.0, leaf.r_max - leaf.R, limit=200)
        return disc + cone

    def test_pulse_inside_disc_matches_quadrature(self, exact_history):
        profile, grid, hist = exact_history
        leaf = make_leaf(0.0, PARAMS, grid, dv=0.25, t_available=2.0)
        got = energy_flux(leaf, hist)
        want = self._oracle(profile, leaf)
        assert got == pytest.approx(want, rel=2e-3)

    def test_pulse_straddling_matches_quadrature(self, exact_history):
        profile, grid, hist = exact_history
        leaf = make_leaf(2.0, PARAMS, grid, dv=0.25, t_available=4.0)
        got = energy_flux(leaf, hist)
        want = self._oracle(profile, leaf)
        assert want > 0.1
        assert got == pytest.approx(want, rel=1e-2)

    def test_commuted_series_feeds_same_pipeline(self, flat_pulse):
        hist, grid = flat_pulse["hist"], flat_pulse["grid"]
        series = SnapshotSeries()
        for t in (0.5, 1.0, 1.5):
            series.append(commuted(hist, ("T",), t=t))
        leaf = make_leaf(1.0, PARAMS, grid, flat_pulse["quad"], dv=0.5, t_available=1.5)
        e = energy_flux(leaf, series)
        assert math.isfinite(e) and e > 0.0


@pytest.fixture(scope="module")
def constant_history():
    grid = GridSpec(n=32, half_width=16.0)
    c = 0.75
    hist = manufactured_history(
        grid,
        [0.5 * i for i in range(13)],
        lambda t, x, y, z, r: c + 0.0 * r,
        lambda t, x, y, z, r: 0.0 * r,
    )
    return grid, c, hist


class TestWeightedCone:
    def test_constant_field_linear_weight_is_exact(self, constant_history):
        grid, c, hist = constant_history
        leaf = make_leaf(1.0, PARAMS, grid, dv=0.5, t_available=6.0)
        got = weighted_cone(leaf, hist, 1.0, "outgoing")
        want = 4.0 * math.pi * c * c * 0.5 * (leaf.r_max**2 - leaf.R**2)
        assert got == pytest.approx(want, rel=1e-10)
        good = weighted_cone(leaf, hist, 1.0, "good")
        assert good == pytest.approx(got, rel=1e-12)

    def test_bad_selector(self, constant_history):
        grid, _, hist = constant_history
        leaf = make_leaf(1.0, PARAMS, grid, dv=0.5, t_available=6.0)
        with pytest.raises(ValueError, match="selector"):
            weighted_cone(leaf, hist, 1.0, "sideways")

    def _parts_by_hand(self, leaf, hist):
        vals = np.zeros((leaf.n_rings, leaf.quad.weights.size))
        lphi = np.zeros_like(vals)
        for j in range(leaf.n_rings):
            v, dphi = interp(hist, float(leaf.cone_t[j]), leaf.cone_r[j] * leaf.quad.nodes)
            vals[j] = v
            lphi[j] = dphi[..., 0] + np.einsum("kj,kj->k", leaf.quad.nodes, dphi[..., 1:])
        sphere = (vals**2) @ leaf.quad.weights
        boundary = leaf.cone_r[-1] * sphere[-1] - leaf.cone_r[0] * sphere[0]
        return cone_integral(leaf, lphi**2), boundary

    def _ibp_residual(self, grid, hist, dv):
        leaf = make_leaf(1.0, PARAMS, grid, dv=dv, t_available=10.0)
        lhs = weighted_cone(leaf, hist, 0.0, "outgoing")
        term, boundary = self._parts_by_hand(leaf, hist)
        return abs(lhs - term - boundary), lhs

    def test_parts_integration_identity(self):
        grid = GridSpec(n=32, half_width=16.0)
        hist = manufactured_history(
            grid,
            [0.25 * i for i in range(45)],
            lambda t, x, y, z, r: math.cos(t) / (1.0 + r * r / 64.0),
            lambda t, x, y, z, r: -math.sin(t) / (1.0 + r * r / 64.0),
        )
        coarse, scale = self._ibp_residual(grid, hist, dv=1.0)
        fine, _ = self._ibp_residual(grid, hist, dv=0.25)
        assert fine <= 1e-3 * scale
        assert coarse / fine > 6.0

    def test_uniform_weight_ordering(self, flat_pulse):
        leaf = flat_pulse["leaves"][2]
        hist = flat_pulse["hist"]
        s_alpha = weighted_cone(leaf, hist, 0.1, "all")
        s_eps = weighted_cone(leaf, hist, 0.002, "all")
        assert s_alpha <= s_eps

    @settings(max_examples=15, deadline=None)
    @given(
        e1=st.floats(min_value=0.001, max_value=1.0),
        e2=st.floats(min_value=0.001, max_value=1.0),
    )
    def test_uniform_weight_monotone_in_exponent(self, flat_pulse, e1, e2):
        lo, hi = sorted((e1, e2))
        leaf = flat_pulse["leaves"][2]
        hist = flat_pulse["hist"]
        assert weighted_cone(leaf, hist, hi, "all") <= weighted_cone(leaf, hist, lo, "all") * (1 + 1e-12)

    def test_outgoing_exponent_comparison(self, flat_pulse):
        leaf = flat_pulse["leaves"][2]
        hist = flat_pulse["hist"]
        lo = weighted_cone(leaf, hist, 1.0 - PARAMS.epsilon, "outgoing")
        hi = weighted_cone(leaf, hist, 1.0 + PARAMS.alpha1, "outgoing")
        bound = leaf.R ** (-PARAMS.alpha1 - PARAMS.epsilon) * hi
        assert lo <= bound * (1 + 1e-12)


class TestSlab:
    def test_decay_weight_matches_closed_form(self):
        T = 4.0

        def err(m):
            taus = np.linspace(0.0, T, m)
            return abs(decay_weighted_sum(taus, np.ones(m), 2.0) - T / (1.0 + T))

        assert err(257) <= 1e-3
        assert err(65) / err(129) == pytest.approx(4.0, rel=0.15)

    def test_slab_values_are_additive(self, flat_pulse):
        hist, leaves = flat_pulse["hist"], flat_pulse["leaves"]
        src = lambda t, x, y, z: 0.01 * np.exp(-(x * x + y * y + z * z)) / (1.0 + t)
        kwargs = dict(source=src, betas=(1.0, 2.0))
        led_a, led_b, led_u = EnergyLedger(), EnergyLedger(), EnergyLedger()
        slab_accumulate(led_a, leaves[:5], hist, PARAMS, **kwargs)
        slab_accumulate(led_b, leaves[4:], hist, PARAMS, **kwargs)
        slab_accumulate(led_u, leaves, hist, PARAMS, **kwargs)
        checked = 0
        for key in led_u.keys():
            try:
                total = led_u.slab(key, 0.0, 4.0)
            except KeyError:
                continue
            parts = led_a.slab(key, 0.0, 2.0) + led_b.slab(key, 2.0, 4.0)
            assert abs(total - parts) <= 1e-12 * max(1.0, abs(total))
            checked += 1
        assert checked >= 8

    def test_per_leaf_rows_do_not_depend_on_slab(self, flat_pulse):
        hist, leaves = flat_pulse["hist"], flat_pulse["leaves"]
        led_a, led_u = EnergyLedger(), EnergyLedger()
        slab_accumulate(led_a, leaves[:5], hist, PARAMS)
        slab_accumulate(led_u, leaves, hist, PARAMS)
        key = LedgerKey("phi", "energy")
        taus_a, vals_a = led_a.series(key)
        taus_u, vals_u = led_u.series(key)
        assert vals_a.tolist() == vals_u[: len(vals_a)].tolist()

    def test_slab_input_validation(self, flat_pulse):
        hist, leaves = flat_pulse["hist"], flat_pulse["leaves"]
        with pytest.raises(ValueError, match="two leaves"):
            slab_accumulate(EnergyLedger(), leaves[:1], hist, PARAMS)
        with pytest.raises(ValueError, match="increasing"):
            slab_accumulate(EnergyLedger(), [leaves[1], leaves[0]], hist, PARAMS)

    def test_zero_source_weighted_integral(self, zero_history):
        grid, hist = zero_history
        leaf = make_leaf(1.0, PARAMS, grid, dv=0.5, t_available=3.0)
        assert source_weighted_leaf(leaf, lambda t, x, y, z: 0.0 * x, 0.1) == 0.0

    def test_every_entry_scales_quadratically(self, flat_pulse, flat_pulse_double):
        led_1, led_2 = EnergyLedger(), EnergyLedger()
        slab_accumulate(led_1, flat_pulse["leaves"], flat_pulse["hist"], PARAMS, betas=(1.0,))
        slab_accumulate(
            led_2, flat_pulse_double["leaves"], flat_pulse_double["hist"], PARAMS, betas=(1.0,)
        )
        rows_1, rows_2 = led_1.rows(), led_2.rows()
        assert len(rows_1) == len(rows_2) and len(rows_1) > 40
        for r1, r2 in zip(rows_1, rows_2):
            assert r1[:5] == r2[:5]
            if r1[5] == 0.0:
                assert r2[5] == 0.0
            else:
                assert r2[5] / r1[5] == pytest.approx(4.0, rel=1e-10)


class TestCommuted:
    def test_canonical_word(self):
        assert canonical_word(("O12", "T", "O13", "T")) == ("T", "T", "O12", "O13")
        assert canonical_word(()) == ()
        with pytest.raises(ValueError, match="letter"):
            canonical_word(("Q",))

    def test_rotation_of_coordinate_is_exact(self):
        grid = GridSpec(n=24, half_width=6.0)
        x, y, _ = grid.meshes()
        hist = SnapshotSeries()
        hist.append(FieldState(t=0.0, phi=y.copy(), pi=np.zeros(grid.shape), grid=grid))
        out = commuted(hist, ("O12",), t=0.0)
        inner = (slice(3, -3),) * 3
        assert np.max(np.abs(out.phi[inner] - x[inner])) < 1e-12
        assert np.max(np.abs(out.pi[inner])) == 0.0

    def test_rotation_annihilates_radial_profile(self):
        grid = GridSpec(n=64, half_width=8.0)
        r = grid.radius_grid()
        phi = 1e-4 * np.exp(-(r * r) / 32.0)
        hist = SnapshotSeries()
        hist.append(FieldState(t=0.0, phi=phi, pi=np.zeros(grid.shape), grid=grid))
        out = commuted(hist, ("O13",), t=0.0)
        assert np.max(np.abs(out.phi[r <= 2.0])) <= 1e-10

    def test_rotation_residual_scales_at_stencil_order(self):
        def residual(n):
            grid = GridSpec(n=n, half_width=6.0)
            r = grid.radius_grid()
            phi = np.exp(-(r * r) / 4.5)
            hist = SnapshotSeries()
            hist.append(FieldState(t=0.0, phi=phi, pi=np.zeros(grid.shape), grid=grid))
            out = commuted(hist, ("O23",), t=0.0, fd_order=2)
            return float(np.max(np.abs(out.phi[r <= 3.0])))

        ratio = residual(48) / residual(96)
        assert ratio > 3.4

    def test_time_word_matches_shifted_evolution(self):
        grid = GridSpec(n=32, half_width=12.0)
        eq = EquationSpec(metric=make_metric("flat"))
        prep = prepare(eq, grid, order=4, boundary="causal")
        phi0, pi0 = InitialData(amplitude=0.05, width=0.8, support=4.0).fields(grid)
        lap0 = sum(second_derivative(phi0, ax, grid.dx, 4) for ax in range(3))
        a = FieldState(t=0.0, phi=phi0, pi=pi0, grid=grid)
        b = FieldState(t=0.0, phi=pi0.copy(), pi=lap0, grid=grid)
        dt = 0.1875
        for _ in range(8):
            a = step_rk4(a, eq, dt, prep=prep)
            b = step_rk4(b, eq, dt, prep=prep)
        hist = SnapshotSeries()
        a.pidot = rhs(a, eq)[1]
        hist.append(a)
        out = commuted(hist, ("T",), t=a.t)
        scale = float(np.max(np.abs(a.pi)))
        assert np.max(np.abs(out.phi - b.phi)) <= 1e-12 * scale
        assert np.max(np.abs(out.pi - b.pi)) <= 1e-11 * scale

    @staticmethod
    def _evolved_rotation_mismatch(n, family):
        grid = GridSpec(n=n, half_width=8.0)
        eq = EquationSpec(metric=make_metric(family))
        prep = prepare(eq, grid, order=2, boundary="causal")
        x, y, z = grid.meshes()
        rr2 = (x - 1.2) ** 2 + y * y + z * z
        phi0 = 0.1 * np.exp(-rr2 / 1.28)
        a = FieldState(t=0.0, phi=phi0, pi=np.zeros(grid.shape), grid=grid)
        start = SnapshotSeries()
        start.append(FieldState(t=0.0, phi=phi0.copy(), pi=np.zeros(grid.shape), grid=grid))
        rot0 = commuted(start, ("O12",), t=0.0, fd_order=2)
        b = FieldState(t=0.0, phi=rot0.phi, pi=rot0.pi, grid=grid)
        dt = grid.dx / 4.0
        for _ in range(round(1.0 / dt)):
            a = step_rk4(a, eq, dt, order=2, prep=prep)
            b = step_rk4(b, eq, dt, order=2, prep=prep)
        hist = SnapshotSeries()
        hist.append(a)
        out = commuted(hist, ("O12",), t=a.t, fd_order=2)
        inner = (slice(4, -4),) * 3
        return float(np.max(np.abs(out.phi[inner] - b.phi[inner]))), float(
            np.max(np.abs(b.phi))
        )

    def test_rotation_commutes_exactly_through_flat_evolution(self):
        # the centered rotation stencil commutes with the constant-coefficient
        # scheme identically, so the two routes agree to rounding
        diff, scale = self._evolved_rotation_mismatch(48, "flat")
        assert diff <= 1e-13 * scale

    def test_rotation_commutes_at_stencil_order_on_radial_background(self):
        coarse, _ = self._evolved_rotation_mismatch(48, "interior-oscillator")
        fine, _ = self._evolved_rotation_mismatch(96, "interior-oscillator")
        order = math.log2(coarse / fine)
        assert order > 1.7

    def test_missing_time_levels(self):
        grid = GridSpec(n=16, half_width=4.0)
        hist = SnapshotSeries()
        hist.append(FieldState(t=0.0, phi=np.zeros(grid.shape), pi=np.zeros(grid.shape), grid=grid))
        with pytest.raises(InsufficientTimeLevelsError, match="acceleration"):
            commuted(hist, ("T", "T"), t=0.0)
        hist2 = SnapshotSeries()
        hist2.append(
            FieldState(
                t=0.0,
                phi=np.zeros(grid.shape),
                pi=np.zeros(grid.shape),
                grid=grid,
                pidot=np.zeros(grid.shape),
            )
        )
        with pytest.raises(InsufficientTimeLevelsError, match="neighbor"):
            commuted(hist2, ("T", "T", "T"), t=0.0)
        with pytest.raises(ValueError, match="k_max"):
            commuted(hist2, ("T", "T"), t=0.0, k_max=1)
        with pytest.raises(OutOfDomainError, match="snapshot"):
            commuted(hist2, ("T",), t=0.37)

    def test_family_members(self, flat_pulse):
        hist = flat_pulse["hist"]
        fam = CommutedFamily.build(hist, t=1.0, k_max=2)
        assert len(fam.fields) == 18
        base = next(s for s in hist.states if s.t == 1.0)
        assert np.array_equal(fam.fields[()].phi, base.phi)
        assert np.array_equal(fam.fields[("T",)].phi, base.pi)
        assert np.array_equal(fam.fields[("T",)].pi, base.pidot)


class TestLemma:
    def test_zero_field_reports_zero(self, zero_history):
        grid, hist = zero_history
        leaf = make_leaf(1.0, PARAMS, grid, dv=0.5, t_available=3.0)
        rep = lemma_checks(leaf, hist, PARAMS)
        assert rep.energy == 0.0 and rep.energy_exact
        assert rep.ring_trace == 0.0
        assert rep.weighted_mass == 0.0
        assert rep.disc_mass == 0.0
        assert rep.outgoing_mass == 0.0

    def test_flat_pulse_within_sharp_constants(self, flat_pulse):
        hist = flat_pulse["hist"]
        for leaf in (flat_pulse["leaves"][2], flat_pulse["leaves"][6]):
            rep = lemma_checks(leaf, hist, PARAMS)
            assert rep.energy > 0.0 and rep.energy_exact
            assert 0.0 <= rep.ring_trace <= 1.05
            assert 0.0 <= rep.weighted_mass <= 1.05
            assert 0.0 <= rep.disc_mass <= 1.05
            assert math.isfinite(rep.outgoing_mass)

    def test_supplied_reference_energy(self, flat_pulse):
        leaf, hist = flat_pulse["leaves"][2], flat_pulse["hist"]
        base = lemma_checks(leaf, hist, PARAMS)
        doubled = lemma_checks(leaf, hist, PARAMS, e_tilde=2.0 * base.energy)
        assert not doubled.energy_exact
        assert doubled.ring_trace == pytest.approx(base.ring_trace / 2.0, rel=1e-12)
        assert doubled.weighted_mass == pytest.approx(base.weighted_mass / 2.0, rel=1e-12)


ENV = EnvelopeH(delta0=0.05, alpha=0.1)


class TestMonitor:
    def test_zero_field(self, zero_history):
        grid, hist = zero_history
        leaf = make_leaf(1.0, PARAMS, grid, dv=0.5, t_available=3.0)
        rep = envelope_monitor(leaf, hist, ENV, ring_stride=2, shell_step=2.0)
        assert rep.cone_incoming == 0.0
        assert rep.cone_good == 0.0
        assert rep.shell == 0.0
        assert rep.core == 0.0
        assert rep.k_max == 2

    def test_ratios_scale_with_squared_amplitude(self, flat_pulse, flat_pulse_double):
        leaf = flat_pulse["leaves"][2]
        rep1 = envelope_monitor(leaf, flat_pulse["hist"], ENV, ring_stride=3, shell_step=2.0)
        rep2 = envelope_monitor(
            flat_pulse_double["leaves"][2], flat_pulse_double["hist"], ENV, ring_stride=3, shell_step=2.0
        )
        assert rep2.cone_incoming == pytest.approx(4.0 * rep1.cone_incoming, rel=1e-12)
        assert rep2.cone_good == pytest.approx(4.0 * rep1.cone_good, rel=1e-12)
        assert rep2.shell == pytest.approx(4.0 * rep1.shell, rel=1e-12)
        assert rep2.core == pytest.approx(4.0 * rep1.core, rel=1e-12)
        assert rep1.rings_sampled == rep2.rings_sampled

    def test_ring_stride_counts(self, flat_pulse):
        leaf = flat_pulse["leaves"][2]
        rep = envelope_monitor(leaf, flat_pulse["hist"], ENV, ring_stride=4, shell_step=4.0)
        assert rep.rings_sampled == math.ceil(leaf.n_rings / 4)


class TestProbe:
    def test_zero_field(self, zero_history):
        grid, hist = zero_history
        leaf = make_leaf(1.0, PARAMS, grid, dv=0.5, t_available=3.0)
        table = pointwise_probe([leaf], hist, PARAMS, ring_stride=2)
        assert len(table.rows) > 0
        for row in table.rows:
            assert row.field_sup == 0.0
            assert row.incoming_sup == 0.0
            assert row.good_sup == 0.0
            assert row.field_ratio == 0.0

    def test_outgoing_pulse_shape(self, flat_pulse):
        # by tau = 4 the support has cleared the origin, so the cone sees a
        # purely outgoing profile and the normalized sup must fall with r
        leaf = next(lf for lf in flat_pulse["leaves"] if lf.tau == 4.0)
        table = pointwise_probe([leaf], flat_pulse["hist"], PARAMS, ring_stride=2)
        ratios = [row.field_ratio for row in table.rows]
        assert len(ratios) >= 3
        assert all(a > b for a, b in zip(ratios, ratios[1:]))
        last = table.rows[-1]
        assert last.good_sup < 0.5 * last.incoming_sup

    def test_csv_shape(self, flat_pulse):
        leaf = flat_pulse["leaves"][2]
        table = pointwise_probe([leaf], flat_pulse["hist"], PARAMS, ring_stride=4)
        text = table.to_csv()
        lines = text.strip().split("\n")
        assert lines[0].startswith("tau,r,field_sup")
        assert len(lines) == 1 + len(table.rows)


class TestStreamer:
    def test_stream_matches_direct_computation(self):
        params = PARAMS
        grid = GridSpec(n=32, half_width=16.0)
        quad_ = SphereQuadrature.build()
        eq = EquationSpec(metric=make_metric("flat"))
        data = InitialData(amplitude=0.05, width=0.8, support=4.0)
        src = lambda t, x, y, z: 0.01 * np.exp(-(x * x + y * y + z * z))
        taus = (0.0, 1.0, 2.0)

        streamer = LeafStreamer(
            taus,
            params,
            grid,
            cadence=0.5,
            t_final=4.0,
            quad=quad_,
            dv=0.5,
            source=src,
            betas=(1.0, 2.0),
            env=ENV,
            monitor_tau_stride=2,
            monitor_ring_stride=4,
            probe=True,
            shell_step=2.0,
        )
        run(eq, data, grid, t_final=4.0, cadence=0.5, on_snapshot=streamer.on_snapshot)
        got = streamer.finalize()

        hist = SnapshotSeries()
        run(eq, data, grid, t_final=4.0, cadence=0.5, on_snapshot=hist.append)
        leaves = [make_leaf(t, params, grid, quad_, dv=0.5, t_available=4.0) for t in taus]
        led = EnergyLedger()
        slab_accumulate(led, leaves, hist, params, source=src, betas=(1.0, 2.0))

        assert got.ledger.to_csv() == led.to_csv()
        assert got.ledger.to_json() == led.to_json()
        assert got.lemma == [lemma_checks(leaf, hist, params) for leaf in leaves]
        direct = [
            envelope_monitor(leaves[i], hist, ENV, ring_stride=4, shell_step=2.0)
            for i in (0, 2)
        ]
        assert got.monitors == direct
        assert got.probe is not None and len(got.probe.rows) > 0

    def test_rejects_off_cadence_inputs(self):
        grid = GridSpec(n=32, half_width=16.0)
        with pytest.raises(ValueError, match="snapshot time"):
            LeafStreamer((0.3,), PARAMS, grid, cadence=0.5, t_final=4.0, dv=0.5)
        with pytest.raises(ValueError, match="multiple"):
            LeafStreamer((0.0,), PARAMS, grid, cadence=0.5, t_final=4.0, dv=0.7)

    def test_finalize_requires_full_coverage(self):
        grid = GridSpec(n=32, half_width=16.0)
        streamer = LeafStreamer((0.0,), PARAMS, grid, cadence=0.5, t_final=4.0, dv=0.5)
        z = np.zeros(grid.shape)
        streamer.on_snapshot(FieldState(t=0.0, phi=z, pi=z.copy(), grid=grid, pidot=z.copy()))
        with pytest.raises(OutOfDomainError, match="before covering"):
            streamer.finalize()
