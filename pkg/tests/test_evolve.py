import math

import numpy as np
import pytest

from conewave import DecayParams, NullFormTensor, PARAMS_DEFAULT, make_metric
from conewave.evolve import (
    EquationSpec,
    EvolutionBlowupError,
    HyperbolicityLostError,
    InitialData,
    MirrorBackground,
    RadialProfile,
    SphericalBackground,
    cfl_dt,
    effective_principal,
    exact_spherical,
    exact_spherical_dphi,
    first_derivative,
    gradient3,
    hyperbolicity_check,
    read_checkpoint,
    rhs,
    run,
    second_derivative,
    step_rk4,
    write_checkpoint,
)
from conewave.foliation import FieldState, GridSpec
from conewave.geometry import MetricSpec


def flat_eq(**kw):
    return EquationSpec(metric=make_metric("flat"), **kw)


def grid_state(grid, phi=None, pi=None, t=0.0):
    z = np.zeros(grid.shape)
    return FieldState(
        t=t,
        phi=z.copy() if phi is None else phi,
        pi=z.copy() if pi is None else pi,
        grid=grid,
    )


class StretchX(MetricSpec):
    """Constant h^{xx} = 3, so G^{xx} = 4; exercises custom families."""

    family = "stretch-x"
    support_radius = math.inf

    def components(self, t, x):
        x = np.asarray(x, dtype=float)
        base = x.shape[:-1]
        h = np.zeros(base + (4, 4))
        h[..., 1, 1] = 3.0
        return h, np.zeros(base + (4, 4, 4))


class TestRadialProfile:
    def test_odd_and_supported(self):
        p = RadialProfile(2.0, 1.0, 6.0)
        s = np.linspace(-7, 7, 101)
        assert np.allclose(p(s), -p(-s), atol=1e-300)
        assert np.all(p(s[np.abs(s) > 6.0]) == 0.0)

    def test_derivative_recurrence_matches_fd(self):
        p = RadialProfile(1.3, 0.9, 5.0)
        s = np.linspace(-3, 3, 41)
        h = 1e-5
        for k in range(4):
            fd = (p.derivative(k, s + h) - p.derivative(k, s - h)) / (2 * h)
            assert np.max(np.abs(fd - p.derivative(k + 1, s))) < 1e-6

    def test_support_floor(self):
        with pytest.raises(ValueError):
            RadialProfile(1.0, 2.0, 8.0)


class TestExactSpherical:
    def test_initial_slice(self):
        p = RadialProfile(0.7, 1.0, 6.0)
        r = np.linspace(0.2, 7.0, 40)
        got = exact_spherical(p, 0.0, r)
        want = np.where(r <= 6.0, 0.7 * np.exp(-(r**2) / 2.0), 0.0)
        assert np.max(np.abs(got - want)) < 1e-14

    def test_origin_limit_matches_quotient(self):
        p = RadialProfile(1.0, 4.0 / 3.0, 8.0)
        for t in (0.5, 1.7, 3.0):
            lim = exact_spherical(p, t, 0.0)
            quo = exact_spherical(p, t, 1e-4)
            assert abs(lim - quo) <= 1e-8

    def test_purely_outgoing_after_support_clears(self):
        p = RadialProfile(1.0, 1.0, 5.0)
        t = 9.0
        r = np.linspace(5.0, 13.0, 50)
        got = exact_spherical(p, t, r)
        want = p(r - t) / (2.0 * r)
        assert np.max(np.abs(got - want)) < 1e-14

    def test_gradient_consistency(self):
        p = RadialProfile(1.0, 1.0, 5.0)
        pts = np.array([[1.2, -0.3, 0.4], [0.0, 2.0, -1.0]])
        d = exact_spherical_dphi(p, 1.1, pts)
        h = 1e-6
        for comp, delta in ((1, [h, 0, 0]), (2, [0, h, 0]), (3, [0, 0, h])):
            fd = (
                exact_spherical(p, 1.1, np.linalg.norm(pts + delta, axis=1))
                - exact_spherical(p, 1.1, np.linalg.norm(pts - delta, axis=1))
            ) / (2 * h)
            assert np.max(np.abs(fd - d[:, comp])) < 1e-5
        fd_t = (
            exact_spherical(p, 1.1 + h, np.linalg.norm(pts, axis=1))
            - exact_spherical(p, 1.1 - h, np.linalg.norm(pts, axis=1))
        ) / (2 * h)
        assert np.max(np.abs(fd_t - d[:, 0])) < 1e-5


class TestInitialData:
    def test_support_validation(self):
        data = InitialData(family="offset-gaussian", width=1.0, support=6.0, center=(5.0, 0, 0))
        with pytest.raises(ValueError, match="support"):
            data.validate(10.0)

    def test_unknown_family(self):
        with pytest.raises(ValueError, match="family"):
            InitialData(family="ringdown").validate(10.0)

    def test_pulse_fields_match_oracle(self):
        grid = GridSpec(half_width=12.0, n=48)
        data = InitialData()
        phi0, pi0 = data.fields(grid)
        r = grid.radius_grid()
        want = exact_spherical(data.profile(), 0.0, r)
        assert np.max(np.abs(phi0 - want)) < 1e-12
        assert np.all(pi0 == 0.0)
        assert np.all(phi0[r > data.support] == 0.0)


class TestFiniteDifferences:
    def test_second_derivative_exact_on_quadratic(self):
        grid = GridSpec(half_width=2.0, n=16)
        x, _, _ = grid.meshes()
        for order in (2, 4):
            d2 = second_derivative(x * x, 0, grid.dx, order)
            inner = (slice(2, -2),) * 3
            assert np.max(np.abs(d2[inner] - 2.0)) < 1e-10

    def test_first_derivative_orders(self):
        grid = GridSpec(half_width=2.0, n=32)
        x, _, _ = grid.meshes()
        f = np.sin(2.0 * x)
        inner = (slice(4, -4),) * 3
        e2 = np.max(np.abs(first_derivative(f, 0, grid.dx, 2) - 2 * np.cos(2 * x))[inner])
        e4 = np.max(np.abs(first_derivative(f, 0, grid.dx, 4) - 2 * np.cos(2 * x))[inner])
        assert e4 < e2 / 10.0


class TestPrincipal:
    def test_flat_is_minkowski(self):
        grid = GridSpec(half_width=4.0, n=16)
        G = effective_principal(flat_eq(), grid_state(grid))
        want = np.diag([-1.0, 1.0, 1.0, 1.0])
        assert np.max(np.abs(G - want)) == 0.0

    def test_cubic_shift_example(self):
        grid = GridSpec(half_width=4.0, n=16)
        st = grid_state(grid, pi=np.full(grid.shape, 0.1))
        eq = flat_eq(nullform=NullFormTensor.wave_symbol_example())
        G = effective_principal(eq, st)
        assert np.allclose(G[..., 0, 0], -0.9, atol=1e-14)
        assert np.allclose(G[..., 1, 1], 0.9, atol=1e-14)

    def test_mirror_background_doubles_shift(self):
        grid = GridSpec(half_width=4.0, n=16)
        st = grid_state(grid, pi=np.full(grid.shape, 0.1))
        eq = flat_eq(nullform=NullFormTensor.wave_symbol_example(), background=MirrorBackground())
        G = effective_principal(eq, st)
        assert np.allclose(G[..., 0, 0], -0.8, atol=1e-14)

    def test_hyperbolicity_margins(self):
        grid = GridSpec(half_width=4.0, n=16)
        rep = hyperbolicity_check(flat_eq(), grid_state(grid))
        assert rep.ok and rep.margin == 1.0
        params = DecayParams(0.1, 0.1, 0.002, 0.107, 0.12, 10.0)
        eq = EquationSpec(metric=make_metric("constant-tt", params))
        rep = hyperbolicity_check(eq, grid_state(grid))
        assert rep.ok
        assert rep.margin == pytest.approx(0.9, abs=1e-14)

    def test_degenerate_state_raises(self):
        grid = GridSpec(half_width=4.0, n=16)
        st = grid_state(grid, pi=np.full(grid.shape, 2.0))
        eq = flat_eq(nullform=NullFormTensor.wave_symbol_example())
        with pytest.raises(HyperbolicityLostError) as err:
            rhs(st, eq)
        assert err.value.margin <= 0.0
        assert err.value.state is not None


class TestCfl:
    def test_flat_example(self):
        grid = GridSpec(half_width=4.0, n=32)
        assert cfl_dt(flat_eq(), grid_state(grid)) == pytest.approx(0.0625, abs=1e-15)

    def test_stretched_axis_halves_step(self):
        grid = GridSpec(half_width=4.0, n=32)
        eq = EquationSpec(metric=StretchX())
        assert cfl_dt(eq, grid_state(grid)) == pytest.approx(0.03125, rel=1e-12)

    def test_small_data_within_one_percent(self):
        grid = GridSpec(half_width=12.0, n=48)
        data = InitialData(amplitude=1e-3)
        phi0, pi0 = data.fields(grid)
        st = FieldState(t=0.0, phi=phi0, pi=pi0, grid=grid)
        eq = flat_eq(nullform=NullFormTensor.wave_symbol_example())
        dt = cfl_dt(eq, st)
        assert abs(dt - 0.25 * grid.dx) <= 0.01 * 0.25 * grid.dx


class TestRhs:
    def test_unit_source_offset(self):
        grid = GridSpec(half_width=4.0, n=16)
        eq = flat_eq(source=lambda t, x, y, z: 1.0)
        _, pidot = rhs(grid_state(grid), eq)
        assert np.all(pidot == -1.0)

    def test_manufactured_uniform_acceleration(self):
        # phi = -t^2/2 solves the flat equation with unit source.
        grid = GridSpec(half_width=4.0, n=16)
        t = 1.7
        st = grid_state(grid, phi=np.full(grid.shape, -t * t / 2.0), pi=np.full(grid.shape, -t), t=t)
        eq = flat_eq(source=lambda tt, x, y, z: 1.0)
        _, pidot = rhs(st, eq)
        inner = (slice(3, -3),) * 3
        assert np.max(np.abs(pidot[inner] + 1.0)) < 1e-12

    def test_semilinear_term_sign(self):
        grid = GridSpec(half_width=4.0, n=16)
        st = grid_state(grid, pi=np.full(grid.shape, 0.5))
        sym = NullFormTensor.wave_symbol_example()
        nf = NullFormTensor(gcube=sym.gcube, aquad=np.diag([-1.0, 1.0, 1.0, 1.0]))
        eq_on = flat_eq(nullform=nf, semilinear=True)
        eq_off = flat_eq(nullform=nf, semilinear=False)
        _, on = rhs(st, eq_on)
        _, off = rhs(st, eq_off)
        inner = (slice(3, -3),) * 3
        # aquad = Minkowski: A(d phi, d phi) = -pi^2 = -0.25, and the
        # whole bracket divides by -G^{tt} = 1 - pi = 0.5.
        assert np.allclose((on - off)[inner], 0.25 / 0.5, atol=1e-12)


class TestStepping:
    def test_time_reversal_returns_state(self):
        grid = GridSpec(half_width=4.0, n=32)
        data = InitialData(family="offset-gaussian", width=0.8, support=3.6)
        phi0, pi0 = data.fields(grid)
        eq = flat_eq()
        errs = []
        for dt in (0.1, 0.05):
            st = FieldState(t=0.0, phi=phi0.copy(), pi=pi0.copy(), grid=grid)
            fwd = step_rk4(st, eq, dt)
            back = step_rk4(fwd, eq, -dt)
            errs.append(
                max(np.max(np.abs(back.phi - phi0)), np.max(np.abs(back.pi - pi0)))
            )
        assert errs[0] / errs[1] > 30.0
        assert errs[1] < 1e-6

    def test_nan_detection(self):
        grid = GridSpec(half_width=4.0, n=16)
        st = grid_state(grid)
        st.phi[8, 8, 8] = np.nan
        with pytest.raises(EvolutionBlowupError):
            step_rk4(st, flat_eq(), 0.05)

    def test_causal_clamp_clears_far_field(self):
        params = DecayParams(0.01, 0.1, 0.002, 0.107, 0.12, 5.0)
        grid = GridSpec(half_width=10.0, n=40)
        st = grid_state(grid)
        r = grid.radius_grid()
        st.phi[r >= 8.0] = 1.0
        eq = EquationSpec(metric=make_metric("flat", params))
        out = step_rk4(st, eq, 0.05)
        horizon = 0.05 + 5.0 + 2.0 * grid.dx
        assert np.all(out.phi[r >= horizon + grid.dx] == 0.0)

    def test_rotational_equivariance(self):
        grid = GridSpec(half_width=4.0, n=32)
        d1 = InitialData(family="offset-gaussian", width=0.6, support=2.0, center=(1.5, 0.75, 0.0))
        d2 = InitialData(family="offset-gaussian", width=0.6, support=2.0, center=(-0.75, 1.5, 0.0))
        s1 = FieldState(0.0, *d1.fields(grid), grid=grid)
        s2 = FieldState(0.0, *d2.fields(grid), grid=grid)

        def rot(a):
            return np.ascontiguousarray(a[:, ::-1, :].transpose(1, 0, 2))

        assert np.array_equal(rot(s1.phi), s2.phi)
        eq = flat_eq()
        for _ in range(8):
            s1 = step_rk4(s1, eq, 0.05)
            s2 = step_rk4(s2, eq, 0.05)
        assert np.array_equal(rot(s1.phi), s2.phi)
        assert np.array_equal(rot(s1.pi), s2.pi)


class TestConvergence:
    def test_oracle_convergence_both_orders(self):
        data = InitialData(amplitude=1.0, width=0.8, support=4.0)
        profile = data.profile()
        t_end = 2.0
        results = {}
        for order in (2, 4):
            errs = []
            for n in (32, 64, 128):
                grid = GridSpec(half_width=8.0, n=n)
                phi0, pi0 = data.fields(grid)
                st = FieldState(t=0.0, phi=phi0, pi=pi0, grid=grid)
                dt = 0.25 * grid.dx
                eq = flat_eq()
                for _ in range(int(round(t_end / dt))):
                    st = step_rk4(st, eq, dt, order=order)
                want = exact_spherical(profile, t_end, grid.radius_grid())
                errs.append(math.sqrt(float(np.sum((st.phi - want) ** 2)) * grid.dx**3))
            results[order] = errs
        rate2 = math.log2(results[2][1] / results[2][2])
        rate4 = math.log2(results[4][1] / results[4][2])
        assert rate2 >= 1.9
        assert rate4 >= 3.5

    def test_energy_conservation(self):
        grid = GridSpec(half_width=6.0, n=48)
        data = InitialData(amplitude=1.0, width=0.7, support=3.5)
        phi0, pi0 = data.fields(grid)
        st = FieldState(t=0.0, phi=phi0, pi=pi0, grid=grid)
        eq = flat_eq()

        def energy(s):
            # The invariant of the semi-discrete system uses the scheme's
            # own Laplacian, quadratic form sum phi (-Lap_h phi).
            lap = sum(second_derivative(s.phi, ax, grid.dx, 4) for ax in range(3))
            return float(np.sum(s.pi**2 - s.phi * lap)) * grid.dx**3

        e0 = energy(st)
        for _ in range(32):
            st = step_rk4(st, eq, 0.0625)
        e1 = energy(st)
        # RK4 is strictly dissipative on this system; no growth allowed.
        assert e1 <= e0 * (1.0 + 1e-12)
        assert (e0 - e1) / e0 < 1e-4


class TestRun:
    def test_snapshot_schedule_and_determinism(self):
        grid = GridSpec(half_width=12.0, n=24)
        data = InitialData(amplitude=0.5)
        seen = []
        res1 = run(flat_eq(), data, grid, t_final=2.0, cadence=0.5,
                   on_snapshot=lambda s: seen.append((s.t, s.pidot is not None)))
        res2 = run(flat_eq(), data, grid, t_final=2.0, cadence=0.5)
        assert [t for t, _ in seen] == [0.0, 0.5, 1.0, 1.5, 2.0]
        assert all(flag for _, flag in seen)
        assert np.array_equal(res1.final.phi, res2.final.phi)
        assert np.array_equal(res1.final.pi, res2.final.pi)
        assert res1.final.t == 2.0

    def test_checkpoints_roundtrip(self, tmp_path):
        grid = GridSpec(half_width=12.0, n=24)
        data = InitialData(amplitude=0.5)
        res = run(flat_eq(), data, grid, t_final=1.0, cadence=0.5,
                  checkpoint_dir=str(tmp_path), checkpoint_stride=1)
        assert res.checkpoint_index is not None
        import json

        with open(res.checkpoint_index) as f:
            index = json.load(f)
        assert len(index["checkpoints"]) == 3
        last = read_checkpoint(str(tmp_path / index["checkpoints"][-1]["path"]))
        assert last.t == 1.0
        assert np.array_equal(last.phi, res.final.phi)

    def test_checkpoint_header_validation(self, tmp_path):
        grid = GridSpec(half_width=4.0, n=16)
        st = grid_state(grid)
        p = tmp_path / "cp.bin"
        write_checkpoint(st, str(p))
        again = read_checkpoint(str(p))
        assert np.array_equal(again.phi, st.phi)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"XXXX"
        bad = tmp_path / "bad.bin"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checkpoint"):
            read_checkpoint(str(bad))

    def test_radiating_boundary_drains_energy(self):
        # By t = 16 the outgoing pulse has cleared even the cube corners
        # (corner radius 6 sqrt(3) < 12.5, the trailing edge), so whatever
        # energy remains is spurious boundary reflection.
        grid = GridSpec(half_width=6.0, n=48)
        data = InitialData(amplitude=1.0, width=0.7, support=3.5)
        res = run(flat_eq(), data, grid, t_final=16.0, cadence=2.0, boundary="sommerfeld")

        def energy(s):
            g = gradient3(s.phi, grid.dx, 4)
            return float(np.sum(s.pi**2 + g[0] ** 2 + g[1] ** 2 + g[2] ** 2)) * grid.dx**3

        phi0, pi0 = data.fields(grid)
        e0 = energy(FieldState(0.0, phi0, pi0, grid))
        assert energy(res.final) < 0.05 * e0

    def test_huygens_vacates_disc(self):
        grid = GridSpec(half_width=32.0, n=128)
        data = InitialData()
        res = run(flat_eq(), data, grid, t_final=20.0, cadence=5.0)
        r = grid.radius_grid()
        disc = r <= 10.0
        g = gradient3(res.final.phi, grid.dx, 4)
        dens = res.final.pi**2 + g[0] ** 2 + g[1] ** 2 + g[2] ** 2
        phi0, pi0 = data.fields(grid)
        g0 = gradient3(phi0, grid.dx, 4)
        e0 = float(np.sum(g0[0] ** 2 + g0[1] ** 2 + g0[2] ** 2)) * grid.dx**3
        e_disc = float(np.sum(dens[disc])) * grid.dx**3
        assert e_disc <= 1e-6 * e0


class TestStabilityPieces:
    def test_background_hessian_consistency(self):
        p = RadialProfile(1.0, 1.0, 5.0)
        bg = SphericalBackground(p)
        x = np.array([1.1])
        y = np.array([-0.7])
        z = np.array([0.4])
        t = 0.9
        h = 1e-5
        d0 = bg.dphi(t, x, y, z)
        dd = bg.ddphi(t, x, y, z)
        dt_fd = [(a - b) / (2 * h) for a, b in zip(bg.dphi(t + h, x, y, z), bg.dphi(t - h, x, y, z))]
        assert abs(dt_fd[0] - dd[(0, 0)]) < 1e-5
        assert abs(dt_fd[1] - dd[(0, 1)]) < 1e-5
        dx_fd = [(a - b) / (2 * h) for a, b in zip(bg.dphi(t, x + h, y, z), bg.dphi(t, x - h, y, z))]
        assert abs(dx_fd[0] - dd[(0, 1)]) < 1e-5
        assert abs(dx_fd[1] - dd[(1, 1)]) < 1e-5
        assert abs(dx_fd[2] - dd[(1, 2)]) < 1e-5

    def test_stability_run_completes(self):
        grid = GridSpec(half_width=12.0, n=32)
        bg = SphericalBackground(RadialProfile(0.05, 4.0 / 3.0, 8.0))
        eq = flat_eq(nullform=NullFormTensor.wave_symbol_example(), background=bg)
        data = InitialData(amplitude=0.01)
        res = run(eq, data, grid, t_final=1.5, cadence=0.5)
        assert res.final.t == 1.5
        assert res.min_margin is not None and res.min_margin > 0.9
