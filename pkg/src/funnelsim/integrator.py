"""Joint integration of plant, filter and operator state with domain guards.

The closed loop is integrated with an explicit embedded Runge-Kutta 5(4)
pair (Dormand-Prince coefficients, first-same-as-last) under PI step
control.  A trial step is accepted only if the embedded error estimate
passes AND every controller denominator at the trial endpoint exceeds
its guard threshold; denominator violations reject the step and retry
at half the size.  Intermediate stages evaluated outside the admissible
region use a clamped denominator and mark the step as tainted; a
tainted step that would otherwise be accepted is retried once at half
size.  Stored samples are exactly the accepted step endpoints.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .controller import (
    ControllerParams,
    FeasibilityReport,
    ThetaChain,
    control_input,
    filter_rhs,
    initial_feasibility,
    theta_chain,
)
from .errors import (
    DomainExit,
    InfeasibleStart,
    OperatorError,
    StepUnderflow,
    constraint_name,
)
from .plant import SystemSpec, initial_operator_state
from .signals import FunnelSpec, ReferenceSpec

__all__ = [
    "IntegratorConfig",
    "ClosedLoopState",
    "SimResult",
    "ClosedLoop",
    "closed_loop_rhs",
    "simulate",
]

# Dormand-Prince 5(4) tableau
_C = (0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0)
_A = (
    np.array([]),
    np.array([1.0 / 5.0]),
    np.array([3.0 / 40.0, 9.0 / 40.0]),
    np.array([44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0]),
    np.array([19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0]),
    np.array([9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0]),
    np.array([35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0]),
)
_ERR = np.array(
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0]
)

_ORDER = 5
_SAFETY = 0.9
_ALPHA = 0.7 / _ORDER   # PI proportional exponent
_BETA = 0.4 / _ORDER    # PI integral exponent
_FAC_MIN = 0.2
_FAC_MAX = 5.0

# Stage-evaluation failures that mean "reject and shrink", not "crash":
# transient excursions can overflow user nonlinearities.
_STAGE_ERRORS = (OperatorError, OverflowError, ValueError, FloatingPointError)


@dataclass
class IntegratorConfig:
    """Step-control settings.

    Tolerance defaults mirror a stiff reference setup (rel 1e-8,
    abs 1e-6).  guard_factor scales the denominator floor: a step is
    rejected when any denominator drops to or below guard_factor times
    its nominal scale (1 for the funnel, theta_hat_i^2 otherwise).
    """

    t_end: float
    rel_tol: float = 1e-8
    abs_tol: float = 1e-6
    h_init: Optional[float] = None
    h_min: float = 1e-10
    h_max: Optional[float] = None
    guard_factor: float = 1e-12

    def validate(self, t0: float) -> None:
        from .errors import ValidationError

        errors = []
        if not self.t_end > t0:
            errors.append(f"[integrator] t_end={self.t_end} must exceed t0={t0}")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            errors.append("[integrator] tolerances must be positive")
        if not self.h_min > 0:
            errors.append("[integrator] h_min must be positive")
        h_max = self.h_max if self.h_max is not None else (self.t_end - t0)
        if not self.h_min < h_max:
            errors.append(f"[integrator] need 0 < h_min < h_max, got {self.h_min} vs {h_max}")
        if self.h_init is not None and not (self.h_min <= self.h_init <= h_max):
            errors.append(f"[integrator] h_init={self.h_init} outside [h_min, h_max]")
        if not 0 < self.guard_factor < 1:
            errors.append("[integrator] guard_factor must be in (0, 1)")
        if errors:
            raise ValidationError(errors)


@dataclass
class ClosedLoopState:
    """Combined state (t, plant stack x, filter states xi, operator state eta)."""

    t: float
    x: np.ndarray
    xi: np.ndarray
    eta: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.x), np.ravel(self.xi), np.ravel(self.eta)])

    @classmethod
    def unpack(cls, sys: SystemSpec, t: float, z: np.ndarray) -> "ClosedLoopState":
        r, n, m = sys.r, sys.n, sys.operator.m
        rn = r * n
        nxi = (r - 1) * n
        return cls(t=t, x=z[:rn].copy(), xi=z[rn : rn + nxi].reshape(r - 1, n).copy(), eta=z[rn + nxi :].copy())


@dataclass
class IntegratorStats:
    accepted: int = 0
    rejected_error: int = 0
    rejected_domain: int = 0
    taint_retries: int = 0
    rhs_evals: int = 0
    min_h: float = math.inf
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "rejected_error": self.rejected_error,
            "rejected_domain": self.rejected_domain,
            "taint_retries": self.taint_retries,
            "rhs_evals": self.rhs_evals,
            "min_h": self.min_h,
            "wall_time": self.wall_time,
        }


@dataclass
class SimResult:
    """Traces at accepted step endpoints plus run bookkeeping.

    x keeps the full plant stack, so y^(j) is available exactly as
    x[:, j*n:(j+1)*n] and diagnostics never differentiate numerically.
    """

    r: int
    n: int
    m: int
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    y_ref: np.ndarray
    e: np.ndarray
    phi: np.ndarray
    funnel_ratio: np.ndarray
    thetas: np.ndarray
    u: np.ndarray
    h: np.ndarray
    stats: IntegratorStats
    feasibility: FeasibilityReport
    config: IntegratorConfig

    @property
    def y(self) -> np.ndarray:
        return self.x[:, : self.n]

    def derivative(self, j: int) -> np.ndarray:
        """Trace of y^(j), read from the stored plant stack."""
        if not 0 <= j <= self.r - 1:
            raise ValueError(f"derivative order {j} outside [0, {self.r - 1}]")
        return self.x[:, j * self.n : (j + 1) * self.n]

    def theta_norms(self) -> np.ndarray:
        return np.linalg.norm(self.thetas, axis=2)

    def summary(self) -> dict:
        tn = self.theta_norms()
        hats = np.asarray(self.feasibility.theta_hat)
        return {
            "samples": int(self.t.size),
            "t_final": float(self.t[-1]),
            "max_funnel_ratio": float(self.funnel_ratio.max()),
            "max_theta_ratio": [float(v) for v in (tn.max(axis=0) / hats)],
            "max_u_norm": float(np.linalg.norm(self.u, axis=1).max()),
        }


class ClosedLoop:
    """Right-hand side of the closed loop with optional denominator clamping.

    One object holds both the fast fused evaluation used inside the
    stepper and the modular evaluation (theta_chain / control_input /
    filter_rhs / plant_rhs) used for endpoint guarding and stored
    outputs; tests cross-check the two against each other.
    """

    def __init__(
        self,
        sys: SystemSpec,
        params: ControllerParams,
        funnel: FunnelSpec,
        ref: ReferenceSpec,
        guard_factor: float = 0.0,
    ):
        self.sys = sys
        self.params = params
        self.funnel = funnel
        self.ref = ref
        self.guard = guard_factor
        self.dim = sys.r * sys.n + (sys.r - 1) * sys.n + sys.operator.m
        self.linear_part = self._build_linear_part()
        self._rhs = self._build_rhs()

    def _build_linear_part(self) -> np.ndarray:
        """Constant matrix covering stack shift, R-terms and filter cascade.

        d(z)/dt = linear_part @ z plus the nonlinear contributions:
        f(w) + Gamma u on the top-derivative block, u on the last filter
        block, and the operator state derivative on the eta block.
        """
        sys = self.sys
        r, n, m = sys.r, sys.n, sys.operator.m
        rn, kmax = r * n, r - 1
        M = np.zeros((self.dim, self.dim))
        for i in range(rn - n):
            M[i, i + n] = 1.0
        for i in range(kmax):
            M[rn - n : rn, (i + 1) * n : (i + 2) * n] += sys.R[i]
        for i in range(kmax - 1):
            blk = rn + i * n
            for a in range(n):
                M[blk + a, blk + a] = -(kmax - i)
                M[blk + a, blk + n + a] = 1.0
        blk = rn + (kmax - 1) * n
        for a in range(n):
            M[blk + a, blk + a] = -1.0
        return M

    def _build_rhs(self):
        sys, params = self.sys, self.params
        r, n, m = sys.r, sys.n, sys.operator.m
        rn, nxi, kmax = r * n, (r - 1) * n, r - 1
        xe = rn + nxi
        gamma = np.ascontiguousarray(sys.gamma)
        f = sys.f
        op_name = sys.operator.name
        readout = sys.operator.readout
        state_rhs = sys.operator.state_rhs
        th2 = params.theta_hat**2
        neg_gain = -params.gain
        fval = self.funnel._value
        rval = self.ref._value
        guard = self.guard
        floors = guard * th2
        M = self.linear_part
        isfinite = math.isfinite
        dim = self.dim
        # scratch vectors reused across calls; a single simulation is
        # strictly sequential, so this is safe
        th = np.empty(n)
        u = np.empty(n)
        gu = np.empty(n)

        def rhs(t, z, clamp, out=None):
            tainted = False
            stack = z[:rn].reshape(r, n)
            phi = fval(t)
            e = stack[0] - rval(t)
            d = 1.0 - phi * phi * float(e @ e)
            if d <= guard:
                if not clamp:
                    raise DomainExit(0, t, d)
                d = guard
                tainted = True
            np.multiply(e, 1.0 / d, out=th)
            np.add(th, z[rn : rn + n], out=th)
            for i in range(1, kmax):
                d = th2[i - 1] - float(th @ th)
                if d <= floors[i - 1]:
                    if not clamp:
                        raise DomainExit(i, t, d)
                    d = floors[i - 1]
                    tainted = True
                np.multiply(th, 1.0 / d, out=th)
                base = rn + i * n
                np.add(th, z[base : base + n], out=th)
            d = th2[kmax - 1] - float(th @ th)
            if d <= floors[kmax - 1]:
                if not clamp:
                    raise DomainExit(kmax, t, d)
                d = floors[kmax - 1]
                tainted = True
            np.multiply(th, neg_gain / d, out=u)

            eta = z[xe:]
            w = readout(t, eta, stack)
            if not isfinite(float(w @ w)):
                raise OperatorError(op_name, t)

            dz = out if out is not None else np.empty(dim)
            np.dot(M, z, out=dz)
            acc = dz[rn - n : rn]
            acc += f(w)
            np.dot(gamma, u, out=gu)
            acc += gu
            dz[xe - n : xe] += u
            if m:
                dz[xe:] = state_rhs(t, eta, stack)
            return dz, tainted

        return rhs

    def rhs(self, t: float, z: np.ndarray, clamp: bool = False, out=None) -> Tuple[np.ndarray, bool]:
        return self._rhs(t, z, clamp, out)

    def outputs(self, t: float, z: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray, ThetaChain, np.ndarray]:
        """(phi, y_ref, e, chain, u) at a point, via the modular controller ops.

        Raises DomainExit if any denominator is at or below its guard
        threshold, which doubles as the acceptance check for trial
        endpoints.
        """
        sys = self.sys
        phi = self.funnel._fn(t)[0]
        yref = self.ref._fn(t)[0]
        e = z[: sys.n] - yref
        xi = z[sys.r * sys.n : sys.r * sys.n + (sys.r - 1) * sys.n].reshape(sys.r - 1, sys.n)
        chain = theta_chain(t, e, xi, phi, self.params, guard_scale=self.guard)
        u = control_input(chain, self.params)
        return phi, yref, e, chain, u

    def relative_margins(self, t: float, z: np.ndarray) -> np.ndarray:
        """Denominators over their nominal scales; no exception on violation.

        Entries past a nonpositive denominator are -inf, since the chain
        is undefined beyond that level.
        """
        sys, params = self.sys, self.params
        kmax = sys.r - 1
        th2 = params.theta_hat**2
        out = np.full(kmax + 1, -math.inf)
        try:
            phi = self.funnel._fn(t)[0]
            yref = self.ref._fn(t)[0]
        except Exception:
            return out
        e = z[: sys.n] - yref
        xi = z[sys.r * sys.n : sys.r * sys.n + kmax * sys.n].reshape(kmax, sys.n)
        d = 1.0 - phi * phi * float(e @ e)
        if not math.isfinite(d):
            return out
        out[0] = d
        if d <= 0:
            return out
        th = xi[0] + e / d
        for i in range(1, kmax + 1):
            d = th2[i - 1] - float(th @ th)
            if not math.isfinite(d):
                return out
            out[i] = d / th2[i - 1]
            if d <= 0:
                return out
            if i < kmax:
                th = xi[i] + th / d
        return out


def closed_loop_rhs(
    state: ClosedLoopState,
    sys: SystemSpec,
    params: ControllerParams,
    funnel: FunnelSpec,
    ref: ReferenceSpec,
) -> np.ndarray:
    """Strict closed-loop derivative at a state; raises DomainExit outside."""
    loop = ClosedLoop(sys, params, funnel, ref, guard_factor=0.0)
    dz, _ = loop.rhs(state.t, state.pack(), clamp=False)
    return dz


def _scaled_rms(v: np.ndarray, scale: np.ndarray) -> float:
    q = v / scale
    return math.sqrt(float(q @ q) / q.size)


def _initial_step(loop, t0, z0, k1, t_end, rtol, atol, h_max):
    scale = atol + rtol * np.abs(z0)
    d0 = _scaled_rms(z0, scale)
    d1 = _scaled_rms(k1, scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, h_max, t_end - t0)
    try:
        f1, _ = loop.rhs(t0 + h0, z0 + h0 * k1, clamp=True)
        d2 = _scaled_rms(f1 - k1, scale) / h0
    except _STAGE_ERRORS + (DomainExit,):
        d2 = math.inf
    dmax = max(d1, d2)
    if dmax <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / dmax) ** (1.0 / _ORDER)
    return min(100.0 * h0, h1, h_max, t_end - t0)


def simulate(
    sys: SystemSpec,
    params: ControllerParams,
    funnel: FunnelSpec,
    ref: ReferenceSpec,
    cfg: IntegratorConfig,
) -> SimResult:
    """Integrate the closed loop over [t0, t_end].

    Refuses to start when the initial data is infeasible.  Raises
    StepUnderflow when step control cannot make progress at h_min; the
    exception names the constraint closest to (or in) violation.
    """
    params.validate(sys.r, sys.n)
    cfg.validate(sys.t0)
    report = initial_feasibility(sys, params, funnel, ref)
    if not report.feasible:
        raise InfeasibleStart(report)

    r, n, m = sys.r, sys.n, sys.operator.m
    t0, t_end = float(sys.t0), float(cfg.t_end)
    h_max = cfg.h_max if cfg.h_max is not None else (t_end - t0)
    loop = ClosedLoop(sys, params, funnel, ref, guard_factor=cfg.guard_factor)

    z = np.concatenate([sys.y0_stack.ravel(), params.xi0.ravel(), initial_operator_state(sys)])
    t = t0

    stats = IntegratorStats()
    wall_start = time.perf_counter()

    ts, zs, phis, yrefs, ratios, thetas_l, us, hs = [], [], [], [], [], [], [], []

    def store(t_s, z_s, phi_s, yref_s, e_s, chain_s, u_s, h_s):
        ts.append(t_s)
        zs.append(z_s.copy())
        phis.append(phi_s)
        yrefs.append(yref_s.copy())
        ratios.append(phi_s * math.sqrt(float(e_s @ e_s)))
        thetas_l.append(chain_s.thetas.copy())
        us.append(u_s.copy())
        hs.append(h_s)

    phi0, yref0, e0, chain0, u0 = loop.outputs(t, z)
    store(t, z, phi0, yref0, e0, chain0, u0, 0.0)

    k1, _ = loop.rhs(t, z, clamp=True)
    stats.rhs_evals += 1
    h = cfg.h_init if cfg.h_init is not None else _initial_step(
        loop, t, z, k1, t_end, cfg.rel_tol, cfg.abs_tol, h_max
    )
    h = min(max(h, cfg.h_min), h_max)

    dim = z.size
    K = np.empty((7, dim))
    work = np.empty(dim)
    zstage = np.empty(dim)
    k1 = np.array(k1)
    fac_old = 1e-4
    just_rejected = False
    taint_retried = False
    span = t_end - t0

    def underflow(h_bad, level, t_trial, z_trial):
        if level is None:
            margins = loop.relative_margins(t_trial, z_trial)
            if not np.all(np.isfinite(margins)):
                margins = loop.relative_margins(t, z)
            level = int(np.argmin(margins))
        raise StepUnderflow(t, constraint_name(level), h_bad, cfg.h_min)

    while t < t_end - 1e-14 * span:
        h = min(h, t_end - t)
        np.copyto(K[0], k1)
        tainted = False
        failed_stage = False
        try:
            for i in range(1, 6):
                np.dot(_A[i], K[:i], out=work)
                np.multiply(work, h, out=work)
                np.add(z, work, out=zstage)
                stats.rhs_evals += 1
                _, ti = loop.rhs(t + _C[i] * h, zstage, clamp=True, out=K[i])
                tainted = tainted or ti
        except _STAGE_ERRORS:
            failed_stage = True

        if not failed_stage:
            np.dot(_A[6], K[:6], out=work)
            np.multiply(work, h, out=work)
            y1 = z + work
            # domain guard at the trial endpoint comes before the error test
            try:
                phi1, yref1, e1, chain1, u1 = loop.outputs(t + h, y1)
            except DomainExit as exc:
                stats.rejected_domain += 1
                just_rejected = True
                h_new = 0.5 * h
                if h_new < cfg.h_min:
                    underflow(h_new, exc.level, t + h, y1)
                h = h_new
                continue
            stats.rhs_evals += 1
            try:
                _, t7 = loop.rhs(t + h, y1, clamp=True, out=K[6])
                tainted = tainted or t7
            except _STAGE_ERRORS:
                failed_stage = True

        if failed_stage:
            err = math.inf
        else:
            np.dot(_ERR, K, out=work)
            np.multiply(work, h, out=work)
            scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(z), np.abs(y1))
            err = _scaled_rms(work, scale)
            if not math.isfinite(err):
                err = math.inf

        if err > 1.0:
            stats.rejected_error += 1
            just_rejected = True
            shrink = _SAFETY * err ** (-_ALPHA) if math.isfinite(err) else _FAC_MIN
            h_new = h * min(1.0, max(_FAC_MIN, shrink))
            if h_new < cfg.h_min:
                underflow(h_new, None, t + h, y1 if not failed_stage else z)
            h = h_new
            continue

        if tainted and not taint_retried:
            stats.taint_retries += 1
            taint_retried = True
            h_new = 0.5 * h
            if h_new < cfg.h_min:
                underflow(h_new, None, t + h, y1)
            h = h_new
            continue

        # accept
        t = t + h
        z = y1
        np.copyto(k1, K[6])  # first-same-as-last
        stats.accepted += 1
        stats.min_h = min(stats.min_h, h)
        store(t, z, phi1, yref1, e1, chain1, u1, h)

        err_floor = max(err, 1e-16)
        fac = _SAFETY * err_floor ** (-_ALPHA) * fac_old**_BETA
        fac = min(_FAC_MAX, max(_FAC_MIN, fac))
        if just_rejected:
            fac = min(fac, 1.0)
        h = min(h * fac, h_max)
        fac_old = max(err, 1e-4)
        just_rejected = False
        taint_retried = False

    stats.wall_time = time.perf_counter() - wall_start

    N = len(ts)
    Z = np.vstack(zs)
    rn, nxi = r * n, (r - 1) * n
    x_tr = Z[:, :rn]
    y_tr = x_tr[:, :n]
    yref_tr = np.vstack(yrefs)
    return SimResult(
        r=r,
        n=n,
        m=m,
        t=np.asarray(ts),
        x=x_tr,
        xi=Z[:, rn : rn + nxi].reshape(N, r - 1, n),
        eta=Z[:, rn + nxi :],
        y_ref=yref_tr,
        e=y_tr - yref_tr,
        phi=np.asarray(phis),
        funnel_ratio=np.asarray(ratios),
        thetas=np.stack(thetas_l),
        u=np.vstack(us),
        h=np.asarray(hs),
        stats=stats,
        feasibility=report,
        config=cfg,
    )
