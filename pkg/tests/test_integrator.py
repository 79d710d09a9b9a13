"""Closed-loop integration: guarding, equilibria, failure modes, storage."""

import numpy as np
import pytest

from funnelsim import (
    ClosedLoopState,
    ControllerParams,
    DomainExit,
    FunnelSpec,
    InfeasibleStart,
    IntegratorConfig,
    ReferenceSpec,
    StepUnderflow,
    ValidationError,
    benchmark_nonlinear,
    chain_integrator,
    closed_loop_rhs,
    control_input,
    filter_rhs,
    plant_rhs,
    simulate,
    theta_chain,
)


def _zero_loop(r=3):
    sys_ = chain_integrator(r=r, n=1)
    params = ControllerParams(gain=1.0, theta_hat=np.ones(r - 1), xi0=np.zeros((r - 1, 1)))
    funnel = FunnelSpec(kind="exponential", a=0.0, b=1.0, c=1.0)
    ref = ReferenceSpec(kind="constant", value=[0.0])
    return sys_, params, funnel, ref


class TestClosedLoopRhs:
    def test_equilibrium_derivative(self):
        sys_, params, funnel, ref = _zero_loop()
        state = ClosedLoopState(t=0.0, x=np.zeros(3), xi=np.zeros((2, 1)), eta=np.empty(0))
        dz = closed_loop_rhs(state, sys_, params, funnel, ref)
        assert np.array_equal(dz, np.zeros(5))

    def test_matches_modular_composition_on_stored_states(self, bench, bench_run):
        # the fused integrator path and the individual controller/plant
        # operations must produce identical derivatives; stored run states
        # are guaranteed admissible
        sys_, params, funnel, ref = bench
        sim, _ = bench_run
        rng = np.random.default_rng(17)
        for row in rng.integers(0, sim.t.size, size=25):
            t = float(sim.t[row])
            x = sim.x[row]
            xi = sim.xi[row]
            eta = sim.eta[row]
            state = ClosedLoopState(t=t, x=x, xi=xi, eta=eta)

            phi, _ = funnel.eval(t)
            yref, _ = ref.eval(t)
            e = x[:2] - yref
            chain = theta_chain(t, e, xi, phi, params)
            u = control_input(chain, params)
            xdot, etadot = plant_rhs(sys_, t, x, u, eta)
            expected = np.concatenate([xdot, filter_rhs(xi, u, sys_.r).ravel(), etadot])

            dz = closed_loop_rhs(state, sys_, params, funnel, ref)
            assert np.allclose(dz, expected, rtol=1e-12, atol=1e-12)

    def test_matches_modular_composition_random_states(self):
        # loose radii keep random states admissible for a chain plant
        sys_ = chain_integrator(r=4, n=2)
        params = ControllerParams(gain=1.5, theta_hat=np.array([5.0, 5.0, 5.0]), xi0=np.zeros((3, 2)))
        funnel = FunnelSpec(kind="exponential", a=1.0, b=1.0, c=0.5)
        ref = ReferenceSpec(kind="sinusoid", amplitude=[0.2, 0.1], frequency=[1.0, 0.5], phase=[0.0, 0.4])
        rng = np.random.default_rng(23)
        for _ in range(25):
            t = rng.uniform(0.0, 10.0)
            x = 0.1 * rng.standard_normal(8)
            xi = 0.2 * rng.standard_normal((3, 2))
            state = ClosedLoopState(t=t, x=x, xi=xi, eta=np.empty(0))

            phi, _ = funnel.eval(t)
            yref, _ = ref.eval(t)
            chain = theta_chain(t, x[:2] - yref, xi, phi, params)
            u = control_input(chain, params)
            xdot, etadot = plant_rhs(sys_, t, x, u, np.empty(0))
            expected = np.concatenate([xdot, filter_rhs(xi, u, sys_.r).ravel(), etadot])

            dz = closed_loop_rhs(state, sys_, params, funnel, ref)
            assert np.allclose(dz, expected, rtol=1e-12, atol=1e-12)

    def test_domain_exit_outside_funnel(self):
        sys_, params, funnel, ref = _zero_loop()
        state = ClosedLoopState(t=0.0, x=np.array([1.5, 0.0, 0.0]), xi=np.zeros((2, 1)), eta=np.empty(0))
        with pytest.raises(DomainExit) as exc:
            closed_loop_rhs(state, sys_, params, funnel, ref)
        assert exc.value.level == 0

    def test_benchmark_initial_input_is_tiny(self, bench, bench_run):
        sim, _ = bench_run
        assert np.linalg.norm(sim.u[0]) < 1e-3
        # top-derivative block at t=0: nonlinearity drift plus a tiny input term
        sys_, params, funnel, ref = bench
        state = ClosedLoopState(t=0.0, x=np.zeros(6), xi=np.zeros((2, 2)), eta=np.zeros(1))
        dz = closed_loop_rhs(state, sys_, params, funnel, ref)
        assert np.allclose(dz[4:6], [1.2, 0.2], atol=1e-3)
        assert np.allclose(dz[:4], 0.0)


class TestEquilibriumPreservation:
    def test_identically_zero_for_thousand_steps(self):
        sys_, params, funnel, ref = _zero_loop()
        cfg = IntegratorConfig(t_end=30.0, h_max=0.02)
        sim = simulate(sys_, params, funnel, ref, cfg)
        assert sim.stats.accepted >= 1000
        assert np.all(sim.x == 0.0)
        assert np.all(sim.xi == 0.0)
        assert np.all(sim.u == 0.0)
        assert np.all(sim.funnel_ratio == 0.0)


class TestSimulateContracts:
    def test_grid_strictly_increasing(self, bench_run):
        sim, _ = bench_run
        assert np.all(np.diff(sim.t) > 0.0)
        assert sim.t[0] == 0.0
        assert sim.t[-1] == pytest.approx(10.0, abs=1e-12)
        assert sim.h[0] == 0.0
        assert np.all(sim.h[1:] > 0.0)

    def test_stored_steps_inside_domain(self, bench_run):
        sim, _ = bench_run
        assert np.all(sim.funnel_ratio < 1.0)
        hats = np.array(sim.feasibility.theta_hat)
        assert np.all(sim.theta_norms() < hats[None, :])

    def test_stats_and_config_echo(self, bench_run):
        sim, _ = bench_run
        assert sim.stats.accepted == sim.t.size - 1
        assert sim.stats.min_h > 0.0
        assert sim.stats.wall_time > 0.0
        assert sim.config.rel_tol == 1e-8
        assert sim.feasibility.feasible

    def test_derivative_accessor(self, bench_run):
        sim, _ = bench_run
        assert np.array_equal(sim.derivative(0), sim.y)
        assert sim.derivative(2).shape == (sim.t.size, 2)
        with pytest.raises(ValueError):
            sim.derivative(3)

    def test_state_pack_unpack_roundtrip(self):
        sys_ = benchmark_nonlinear()
        state = ClosedLoopState(
            t=1.0, x=np.arange(6.0), xi=np.arange(4.0).reshape(2, 2), eta=np.array([7.0])
        )
        z = state.pack()
        back = ClosedLoopState.unpack(sys_, 1.0, z)
        assert np.array_equal(back.x, state.x)
        assert np.array_equal(back.xi, state.xi)
        assert np.array_equal(back.eta, state.eta)


class TestAgainstReferenceIntegrator:
    def test_terminal_state_matches_scipy(self, linear4):
        # on a gentle trajectory (no guard activity) the stepper must agree
        # with an independent embedded RK implementation
        from scipy.integrate import solve_ivp

        from funnelsim.integrator import ClosedLoop

        sys_, params, funnel, ref = linear4
        loop = ClosedLoop(sys_, params, funnel, ref, guard_factor=1e-12)
        z0 = np.concatenate([sys_.y0_stack.ravel(), params.xi0.ravel()])
        ref_sol = solve_ivp(
            lambda t, z: loop.rhs(t, z, clamp=True)[0],
            (0.0, 5.0),
            z0,
            method="RK45",
            rtol=1e-11,
            atol=1e-12,
        )
        assert ref_sol.success

        cfg = IntegratorConfig(t_end=5.0, rel_tol=1e-11, abs_tol=1e-12)
        sim = simulate(sys_, params, funnel, ref, cfg)
        z_end = np.concatenate([sim.x[-1], sim.xi[-1].ravel()])
        assert np.allclose(z_end, ref_sol.y[:, -1], rtol=1e-8, atol=1e-10)


class TestGuardMachinery:
    def test_clamped_evaluation_marks_taint(self):
        # outside the funnel, the clamped path floors the denominator and
        # flags the result instead of raising
        from funnelsim.integrator import ClosedLoop

        sys_, params, funnel, ref = _zero_loop()
        loop = ClosedLoop(sys_, params, funnel, ref, guard_factor=1e-12)
        z = np.array([1.5, 0.0, 0.0, 0.0, 0.0])  # phi*||e|| = 1.5
        dz, tainted = loop.rhs(0.0, z, clamp=True)
        assert tainted
        assert np.all(np.isfinite(dz))
        # the floored funnel denominator produces an enormous chain value
        assert np.abs(dz).max() > 1e6
        with pytest.raises(DomainExit):
            loop.rhs(0.0, z, clamp=False)

    def test_relative_margins(self):
        from funnelsim.integrator import ClosedLoop

        sys_, params, funnel, ref = _zero_loop()
        loop = ClosedLoop(sys_, params, funnel, ref, guard_factor=1e-12)
        inside = loop.relative_margins(0.0, np.zeros(5))
        assert np.allclose(inside, [1.0, 1.0, 1.0])
        outside = loop.relative_margins(0.0, np.array([1.5, 0.0, 0.0, 0.0, 0.0]))
        assert outside[0] < 0.0
        assert outside[1] == -np.inf  # chain undefined past a dead level

    def test_delayed_start_with_history(self):
        # t0 > 0: the operator state is seeded by integrating over the
        # historical output, and the run starts at t0
        from funnelsim import benchmark_nonlinear

        sys_ = benchmark_nonlinear(integral_arg="t", t0=0.5)
        sys_.history = lambda t: np.zeros((3, 2))
        params = ControllerParams(gain=1.0, theta_hat=np.array([2.0, 2.0]), xi0=np.zeros((2, 2)))
        funnel = FunnelSpec(kind="benchmark")
        ref = ReferenceSpec(kind="benchmark")
        sim = simulate(sys_, params, funnel, ref, IntegratorConfig(t_end=1.0))
        assert sim.t[0] == 0.5
        assert sim.t[-1] == pytest.approx(1.0, abs=1e-12)
        assert sim.eta[0, 0] == pytest.approx(1.0 - np.exp(-0.5), rel=1e-8)
        assert np.all(sim.funnel_ratio < 1.0)

    def test_outer_time_operator_reading_integrates(self):
        # the alternate integral reading runs end to end and stays feasible
        from funnelsim import benchmark_nonlinear

        sys_ = benchmark_nonlinear(integral_arg="t")
        params = ControllerParams(gain=1.0, theta_hat=np.array([0.25, 0.01]), xi0=np.zeros((2, 2)))
        funnel = FunnelSpec(kind="benchmark")
        ref = ReferenceSpec(kind="benchmark")
        sim = simulate(sys_, params, funnel, ref, IntegratorConfig(t_end=0.3))
        assert sim.t[-1] == pytest.approx(0.3, abs=1e-12)
        assert np.all(sim.funnel_ratio < 1.0)
        # the kernel-weight state follows 1 - exp(-t) exactly
        assert np.allclose(sim.eta[:, 0], 1.0 - np.exp(-sim.t), rtol=1e-7, atol=1e-9)


class TestFailureModes:
    def test_infeasible_start_refused(self, bench):
        sys_, _, funnel, ref = bench
        params = ControllerParams(
            gain=1.0, theta_hat=np.array([0.25, 1e-10]), xi0=np.zeros((2, 2))
        )
        with pytest.raises(InfeasibleStart) as exc:
            simulate(sys_, params, funnel, ref, IntegratorConfig(t_end=1.0))
        assert not exc.value.report.feasible

    def test_step_underflow_names_constraint(self, bench):
        sys_, params, funnel, ref = bench
        cfg = IntegratorConfig(t_end=10.0, h_init=0.25, h_min=0.25, h_max=0.26)
        with pytest.raises(StepUnderflow) as exc:
            simulate(sys_, params, funnel, ref, cfg)
        assert exc.value.constraint in {"funnel", "theta_1", "theta_2"}
        assert "nearest violated constraint" in str(exc.value)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            IntegratorConfig(t_end=-1.0).validate(0.0)
        with pytest.raises(ValidationError):
            IntegratorConfig(t_end=1.0, rel_tol=0.0).validate(0.0)
        with pytest.raises(ValidationError):
            IntegratorConfig(t_end=1.0, h_min=0.5, h_max=0.1).validate(0.0)
        with pytest.raises(ValidationError):
            IntegratorConfig(t_end=1.0, guard_factor=2.0).validate(0.0)
