"""Acceptance suite.

Each test prints one PASS/FAIL line (run with -s to see them on success)
and pins the tolerance stated for that criterion:

  1. benchmark reproduction: full horizon, funnel and radius invariants,
     quoted initial margins, finite input, wall time
  2. integer recurrence of the falling coefficients, exact, orders 3..10
  3. kernel moment conditions and combined-coefficient cancellations,
     orders 3..8, 1e-10 relative
  4. trajectory identities (dual-form aggregates, first-derivative
     identity, derivative reconstructions) on the benchmark run and a
     stable order-4 linear run, 1e-8 relative
  5. finite-difference spot-check of the aggregate-signal derivative at
     100 interior samples, first order in the local step
  6. chain-integrator sweep over orders 2..5 on [0, 20] with the funnel
     and every radius bound holding
  7. solver consistency: peak tracking error agrees to 1e-4 relative
     when rel_tol tightens by a decade
  8. negative paths: infeasible start (exit 3), indefinite gain matrix
     rejected, step underflow names the nearest violated constraint
"""

import math
import os

import numpy as np
import pytest

from funnelsim import (
    IntegratorConfig,
    StepUnderflow,
    ValidationError,
    chain_integrator,
    simulate,
    validate_system,
)
from funnelsim.analysis import (
    aggregate_derivative_check,
    aggregate_signals,
    coefficient_residuals,
    derivative_identity_residual,
    elimination_polynomials,
    falling_coeff,
    moment_kernels,
    reconstruct_derivative,
)
from funnelsim.cli import main

from conftest import BENCHMARK_CONFIG, chain_setup


def report(name: str, ok: bool, detail: str = ""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


class TestCriterion1Benchmark:
    def test_benchmark_reproduction(self, bench_run):
        sim, wall = bench_run
        tn = sim.theta_norms()
        max_ratio = float(sim.funnel_ratio.max())
        max_u = float(np.linalg.norm(sim.u, axis=1).max())
        ok = (
            sim.t[-1] == pytest.approx(10.0, abs=1e-12)
            and max_ratio < 1.0
            and np.all(tn[:, 0] < 0.25)
            and np.all(tn[:, 1] < 0.01)
            and math.isfinite(max_u)
        )
        report(
            "1a benchmark horizon + funnel + radius invariants",
            bool(ok),
            f"max phi||e||={max_ratio:.4f}, max theta=({tn[:,0].max():.4f}, {tn[:,1].max():.5f}), "
            f"max ||u||={max_u:.3f}",
        )
        margins_ok = (
            sim.feasibility.theta_norms[0] < 1e-10 and sim.feasibility.theta_norms[1] < 1e-8
        )
        report(
            "1b benchmark initial chain norms below 1e-10 / 1e-8",
            bool(margins_ok),
            f"norms={sim.feasibility.theta_norms}",
        )
        report("1c benchmark wall time < 10 s", wall < 10.0, f"{wall:.2f} s")


class TestCriterion2ExactRecurrence:
    def test_integer_recurrence_exact(self):
        worst = None
        for r in range(3, 11):
            for i in range(1, r):
                for j in range(r - i + 1, r):
                    lhs = falling_coeff(i, j - 1, r) + falling_coeff(i, j, r) * (r - j)
                    rhs = i * falling_coeff(i, j, r)
                    if lhs != rhs:
                        worst = (r, i, j, lhs, rhs)
        report(
            "2 falling-coefficient recurrence exact for orders 3..10",
            worst is None,
            "zero tolerance" if worst is None else f"violated at {worst}",
        )


class TestCriterion3Kernels:
    def test_moment_and_coefficient_suite(self):
        worst_moment = 0.0
        worst_coeff = 0.0
        lead_ok = True
        rng = np.random.default_rng(2027)
        for r in range(3, 9):
            kerns = moment_kernels(r)
            nodes = np.arange(1, r, dtype=float)
            for k, kern in {1: kerns.primary, **kerns.higher}.items():
                for p in range(0, r - 1 - k):
                    worst_moment = max(
                        worst_moment, abs(kern.weights @ nodes**p) / (r**p)
                    )
                if abs(kern.weights @ nodes ** (r - 1 - k)) <= 1e-6:
                    lead_ok = False
            polys = elimination_polynomials(rng.standard_normal((r - 1, 2, 2)))
            worst_coeff = max(worst_coeff, max(coefficient_residuals(polys, kerns).values()))
        ok = worst_moment < 1e-10 and worst_coeff < 1e-10 and lead_ok
        report(
            "3 kernel moments + combined-coefficient cancellation (orders 3..8)",
            bool(ok),
            f"worst moment={worst_moment:.2e}, worst coeff={worst_coeff:.2e}",
        )


class TestCriterion4TrajectoryIdentities:
    @pytest.mark.parametrize("which", ["benchmark", "linear4"])
    def test_identities_on_run(self, which, bench, bench_run, linear4, linear4_run):
        if which == "benchmark":
            sys_ = bench[0]
            sim = bench_run[0]
        else:
            sys_ = linear4[0]
            sim = linear4_run
        polys = elimination_polynomials(sys_.R)
        kerns = moment_kernels(sys_.r)
        traces = aggregate_signals(sim, sys_, polys)
        dual = float(traces.dual_residual.max())
        ident = derivative_identity_residual(sim, sys_, kerns, polys, traces)
        recon = max(
            reconstruct_derivative(sim, sys_, kerns, polys, k, traces)[1]
            for k in range(2, sys_.r)
        )
        ok = dual < 1e-8 and ident < 1e-8 and recon < 1e-8
        report(
            f"4 trajectory identities on {which} run",
            bool(ok),
            f"dual={dual:.2e}, identity={ident:.2e}, reconstruction={recon:.2e}",
        )


class TestCriterion5DerivativeSpotCheck:
    def test_aggregate_ode_check(self, bench, bench_run):
        sys_ = bench[0]
        sim = bench_run[0]
        check = aggregate_derivative_check(sim, sys_, elimination_polynomials(sys_.R))
        report(
            "5 aggregate-signal derivative matches closed form at 100 samples",
            check.passed and check.points == 100,
            f"max err/tol={check.max_ratio:.3f} over {check.points} points",
        )


class TestCriterion6RelativeDegreeSweep:
    @pytest.mark.parametrize("r", [2, 3, 4, 5])
    def test_chain_completes_with_invariants(self, r):
        sys_, params, funnel, ref = chain_setup(r)
        sim = simulate(sys_, params, funnel, ref, IntegratorConfig(t_end=20.0))
        tn = sim.theta_norms()
        hats = np.asarray(params.theta_hat)
        ok = (
            sim.t[-1] == pytest.approx(20.0, abs=1e-12)
            and np.all(sim.funnel_ratio < 1.0)
            and np.all(tn < hats[None, :])
        )
        report(
            f"6 chain integrator order r={r} completes [0, 20]",
            bool(ok),
            f"max phi||e||={sim.funnel_ratio.max():.4f}, "
            f"max theta ratio={float((tn / hats[None, :]).max()):.4f}",
        )


class TestCriterion7SolverConsistency:
    def test_peak_error_agreement(self, bench_run, bench_run_tight):
        sim, _ = bench_run
        m1 = float(np.linalg.norm(sim.e, axis=1).max())
        m2 = float(np.linalg.norm(bench_run_tight.e, axis=1).max())
        rel = abs(m1 - m2) / m1
        report("7 peak error agrees across a decade of rel_tol", rel < 1e-4, f"rel diff={rel:.2e}")


class TestCriterion8NegativePaths:
    def test_infeasible_exit_code(self, tmp_path):
        text = open(BENCHMARK_CONFIG).read()
        bad = tmp_path / "infeasible.toml"
        bad.write_text(
            text.replace("theta_hat = [0.25, 0.01]", "theta_hat = [0.25, 1e-10]").replace(
                'directory = "runs"', f'directory = "{(tmp_path / "out").as_posix()}"'
            )
        )
        code = main(["simulate", str(bad)])
        no_csv = not (tmp_path / "out" / "benchmark.csv").exists()
        report("8a infeasible radii exit with code 3 and no trace", code == 3 and no_csv, f"exit={code}")

    def test_skew_gain_rejected(self):
        sys_ = chain_integrator(r=2, n=2, gamma=[[0.0, 1.0], [-1.0, 0.0]])
        try:
            validate_system(sys_)
            ok = False
            detail = "skew gain accepted"
        except ValidationError as exc:
            ok = "positive definite" in str(exc)
            detail = str(exc).splitlines()[0]
        report("8b gain matrix with zero symmetric part rejected", ok, detail)

    def test_underflow_names_constraint(self, bench):
        sys_, params, funnel, ref = bench
        cfg = IntegratorConfig(t_end=10.0, h_init=0.25, h_min=0.25, h_max=0.26)
        try:
            simulate(sys_, params, funnel, ref, cfg)
            ok, detail = False, "no underflow raised"
        except StepUnderflow as exc:
            ok = exc.constraint in {"funnel", "theta_1", "theta_2"}
            detail = f"constraint={exc.constraint} at t={exc.t:.3f}"
        report("8c forced step underflow names the nearest constraint", ok, detail)
