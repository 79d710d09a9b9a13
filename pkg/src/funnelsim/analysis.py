"""Diagnostics that mechanize the closed-loop algebraic identities.

For the system class simulated here, weighted combinations of the output
derivatives and filter states form signals with two provably equal
representations, and suitable moment-annihilating weight vectors isolate
individual output derivatives from those combinations.  Everything below
is computable from a stored trajectory: the plant stack gives y^(j)
exactly (no numerical differentiation), so any residual in these
identities measures rounding, integration storage, or an implementation
bug -- never model error.

Contents:
  * falling_coeff        -- exact integer weights with a two-term recurrence
  * elimination_polynomials -- recursive matrix polynomial family that
                            collapses the plant's linear derivative terms
  * moment_kernels       -- weight vectors annihilating low power moments
                            (computed in exact rational arithmetic)
  * aggregate_signals    -- both forms of the bounded combinations, with
                            their pointwise discrepancy
  * derivative_identity_residual / reconstruct_derivative -- the
                            first-derivative identity and y^(k) recovery
  * aggregate_derivative_check -- finite-difference check of the closed
                            form for the combinations' time derivative
  * funnel_margin_bound  -- a-posteriori gain/margin certificate
  * run_diagnostics      -- one report aggregating all of the above
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Optional, Tuple

import numpy as np

from .controller import ControllerParams
from .integrator import SimResult
from .plant import SystemSpec, operator_eval
from .signals import FunnelSpec, ReferenceSpec

DUAL_FORM_TOL = 1e-10
IDENTITY_TOL = 1e-8
COEFF_TOL = 1e-10
ODE_CHECK_SLOPE_FACTOR = 10.0


# ---------------------------------------------------------------------------
# Exact integer coefficients
# ---------------------------------------------------------------------------

def falling_coeff(i: int, j: int, order: int) -> int:
    """Integer weight prod_{k=1}^{order-1-j} (i - k), evaluated exactly.

    Defined for 1 <= i <= order-1 and order-i <= j <= order-1 (the
    product is empty, hence 1, at j = order-1).  These weights satisfy
    the recurrence

        falling_coeff(i, j-1) + (order-j) * falling_coeff(i, j)
            = i * falling_coeff(i, j)

    for j >= order-i+1, which is what makes the filter-state terms of
    the aggregate signals telescope.
    """
    r = order
    if not (1 <= i <= r - 1):
        raise ValueError(f"i={i} outside [1, {r - 1}]")
    if not (r - i <= j <= r - 1):
        raise ValueError(f"j={j} outside [{r - i}, {r - 1}] for i={i}, order={r}")
    p = 1
    for k in range(1, r - 1 - j + 1):
        p *= i - k
    return p


def filter_weight(order: int, j: int, s: float) -> float:
    """Scalar polynomial (-1)^(order-j) * prod_{k=1}^{order-1-j} (s - k).

    Weight of the j-th filter-state term in the polynomial form of the
    aggregate signals; vanishes automatically at integer s = i whenever
    i <= order-1-j.
    """
    p = 1.0
    for k in range(1, order - 1 - j + 1):
        p *= s - k
    return p if (order - j) % 2 == 0 else -p


# ---------------------------------------------------------------------------
# Matrix polynomial family
# ---------------------------------------------------------------------------

@dataclass
class MatrixPolynomialFamily:
    """Recursively defined matrix polynomials P_0..P_{order-2} (plus P_{order-1}=0).

    P_{order-2}(s) = -R_{order-1} and P_{j-1}(s) = -R_j - s P_j(s), so
    deg P_j = order-2-j.  coeffs[j] has shape (order-1-j, n, n), lowest
    power first; coeffs[order-1] is empty.
    """

    order: int
    n: int
    coeffs: list

    def eval(self, j: int, s: float) -> np.ndarray:
        """P_j(s) as an (n, n) matrix."""
        out = np.zeros((self.n, self.n))
        power = 1.0
        for C in self.coeffs[j]:
            out += power * C
            power *= s
        return out

    def output_weight(self, j: int, s: float) -> np.ndarray:
        """(-s)^(order-1-j) I + P_j(s): weight of y^(j) in the aggregates."""
        return ((-s) ** (self.order - 1 - j)) * np.eye(self.n) + self.eval(j, s)


def elimination_polynomials(R: np.ndarray) -> MatrixPolynomialFamily:
    """Build the family from the plant's derivative matrices.

    R has shape (order-1, n, n) with R[i-1] multiplying y^(i).
    """
    R = np.asarray(R, dtype=float)
    r = R.shape[0] + 1
    n = R.shape[1]
    coeffs: list = [None] * r
    coeffs[r - 1] = np.zeros((0, n, n))
    coeffs[r - 2] = -R[r - 2][None, :, :]
    for j in range(r - 2, 0, -1):
        prev = np.empty((coeffs[j].shape[0] + 1, n, n))
        prev[0] = -R[j - 1]
        prev[1:] = -coeffs[j]
        coeffs[j - 1] = prev
    return MatrixPolynomialFamily(order=r, n=n, coeffs=coeffs)


# ---------------------------------------------------------------------------
# Moment-annihilating kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DerivativeKernel:
    """Weights w over nodes 1..order-1 with vanishing low power moments.

    sum_i w_i i^p = 0 for 0 <= p <= order-2-k, while the next moment
    lead = sum_i w_i i^(order-1-k) is nonzero; combining the aggregate
    signals with these weights isolates y^(k).
    """

    k: int
    weights: np.ndarray
    lead: float


@dataclass(frozen=True)
class MomentKernels:
    """Kernel family for all recoverable derivative orders.

    primary is the k=1 kernel (annihilates moments up to order-3); the
    scalar front_factor = (-1)^order * primary.lead multiplies
    (y' - Gamma xi_1) in the first-derivative identity.
    """

    order: int
    primary: DerivativeKernel
    higher: Dict[int, DerivativeKernel]

    @property
    def front_factor(self) -> float:
        return self.primary.lead * (1.0 if self.order % 2 == 0 else -1.0)


def _solve_vandermonde_exact(nodes, rhs):
    """Gaussian elimination over Fractions for sum_i c_i nodes_i^p = rhs_p."""
    m = len(nodes)
    A = [[Fraction(node) ** p for node in nodes] for p in range(m)]
    b = [Fraction(v) for v in rhs]
    for col in range(m):
        piv = next(row for row in range(col, m) if A[row][col] != 0)
        A[col], A[piv] = A[piv], A[col]
        b[col], b[piv] = b[piv], b[col]
        inv = 1 / A[col][col]
        A[col] = [a * inv for a in A[col]]
        b[col] *= inv
        for row in range(m):
            if row != col and A[row][col] != 0:
                factor = A[row][col]
                A[row] = [a - factor * p for a, p in zip(A[row], A[col])]
                b[row] -= factor * b[col]
    return b


def derivative_kernel(order: int, k: int) -> DerivativeKernel:
    """Kernel isolating y^(k), built by the fixed-tail construction.

    The leading order-1-k entries are solved from the square Vandermonde
    system on nodes 1..order-1-k with the last entry pinned to 1 and the
    remaining entries zero; the result is normalized to unit length with
    a positive first nonzero entry.  The construction guarantees a
    nonzero lead moment: if it vanished, the weights would annihilate
    one moment row too many on order-k distinct nodes, forcing them to
    be zero.
    """
    r = order
    if not 1 <= k <= r - 1:
        raise ValueError(f"k={k} outside [1, {r - 1}]")
    m = r - 1 - k
    w = [Fraction(0)] * (r - 1)
    w[r - 2] = Fraction(1)
    if m > 0:
        rhs = [-Fraction(r - 1) ** p for p in range(m)]
        sol = _solve_vandermonde_exact(list(range(1, m + 1)), rhs)
        for i in range(m):
            w[i] = sol[i]
    lead = sum(wi * Fraction(i + 1) ** (r - 1 - k) for i, wi in enumerate(w))
    assert lead != 0, "lead moment cannot vanish for this construction"
    v = np.array([float(wi) for wi in w])
    first = v[np.nonzero(v)[0][0]]
    sign = 1.0 if first > 0 else -1.0
    norm = float(np.linalg.norm(v))
    return DerivativeKernel(k=k, weights=sign * v / norm, lead=sign * float(lead) / norm)


def moment_kernels(order: int) -> MomentKernels:
    """All kernels for one plant order.

    For order 2 the moment matrix is empty and the primary kernel
    degenerates to weights (1,) with lead 1; there are no higher
    kernels.
    """
    primary = derivative_kernel(order, 1)
    higher = {k: derivative_kernel(order, k) for k in range(2, order)}
    return MomentKernels(order=order, primary=primary, higher=higher)


@dataclass(frozen=True)
class IdentityConstants:
    """Bundle of the exact constants entering the trajectory identities."""

    order: int
    falling: Dict[Tuple[int, int], int]
    kernels: MomentKernels


def identity_constants(order: int) -> IdentityConstants:
    falling = {
        (i, j): falling_coeff(i, j, order)
        for i in range(1, order)
        for j in range(order - i, order)
    }
    return IdentityConstants(order=order, falling=falling, kernels=moment_kernels(order))


def output_coeff(kern: DerivativeKernel, polys: MatrixPolynomialFamily, j: int) -> np.ndarray:
    """Matrix weight of y^(j) in the kernel-combined signal."""
    out = np.zeros((polys.n, polys.n))
    for idx, w in enumerate(kern.weights):
        out += w * polys.output_weight(j, idx + 1)
    return out


def filter_coeff(kern: DerivativeKernel, order: int, j: int) -> float:
    """Scalar weight of Gamma xi_j in the kernel-combined signal."""
    return float(sum(w * filter_weight(order, j, idx + 1) for idx, w in enumerate(kern.weights)))


def coefficient_residuals(
    polys: MatrixPolynomialFamily, kernels: MomentKernels
) -> Dict[str, float]:
    """Relative deviations of the combined coefficients from their closed forms.

    For every kernel of order k: the y^(j) and filter weights must vanish
    for j >= k+1, the y^(k) weight must equal (-1)^(order-1-k) * lead * I
    and the filter weight at j = k must equal (-1)^(order-k) * lead.
    Residuals are relative to the absolute-sum scale of each combination.
    """
    r = polys.order
    out: Dict[str, float] = {}
    kerns = {1: kernels.primary, **kernels.higher}
    for k, kern in kerns.items():
        worst_vanish = 0.0
        for j in range(k + 1, r):
            scale_a = sum(
                abs(w) * np.abs(polys.output_weight(j, idx + 1)).sum()
                for idx, w in enumerate(kern.weights)
            )
            a_res = np.abs(output_coeff(kern, polys, j)).sum() / (scale_a + 1e-300)
            scale_b = sum(
                abs(w) * abs(filter_weight(r, j, idx + 1)) for idx, w in enumerate(kern.weights)
            )
            b_res = abs(filter_coeff(kern, r, j)) / (scale_b + 1e-300)
            worst_vanish = max(worst_vanish, float(a_res), float(b_res))
        out[f"vanish_k{k}"] = worst_vanish
        sgn_a = (-1.0) ** (r - 1 - k)
        target_a = sgn_a * kern.lead * np.eye(polys.n)
        a_diag = output_coeff(kern, polys, k)
        out[f"diag_k{k}"] = float(
            np.abs(a_diag - target_a).max() / (abs(kern.lead) + 1e-300)
        )
        sgn_b = (-1.0) ** (r - k)
        out[f"filter_k{k}"] = abs(
            filter_coeff(kern, r, k) - sgn_b * kern.lead
        ) / (abs(kern.lead) + 1e-300)
    return out


# ---------------------------------------------------------------------------
# Trajectory identities
# ---------------------------------------------------------------------------

@dataclass
class AggregateTraces:
    """Both forms of the bounded combinations along a stored trajectory.

    direct[i-1] follows the stacked-sum definition; weighted[i-1] the
    polynomial-weight representation.  They are algebraically equal, so
    dual_residual is pure rounding.
    """

    direct: np.ndarray      # (order-1, N, n)
    weighted: np.ndarray    # (order-1, N, n)
    dual_residual: np.ndarray  # (order-1,) max relative discrepancy
    sup_norm: np.ndarray    # (order-1,) boundedness witness


def _gamma_filters(sim: SimResult, sys: SystemSpec) -> np.ndarray:
    """Gamma @ xi_j traces, shape (order-1, N, n)."""
    return np.einsum("ab,tkb->kta", sys.gamma, sim.xi)


def aggregate_signals(
    sim: SimResult, sys: SystemSpec, polys: MatrixPolynomialFamily
) -> AggregateTraces:
    r, n = sys.r, sys.n
    N = sim.t.size
    ys = [sim.derivative(j) for j in range(r)]
    gxi = _gamma_filters(sim, sys)
    direct = np.zeros((r - 1, N, n))
    weighted = np.zeros((r - 1, N, n))
    for i in range(1, r):
        acc = np.zeros((N, n))
        for j in range(r - i, r):
            sgn = (-1.0) ** (r - 1 - j)
            acc += sgn * (float(i) ** (r - 1 - j)) * ys[j]
            acc -= sgn * falling_coeff(i, j, r) * gxi[j - 1]
        for j in range(r - 1):
            acc += ys[j] @ polys.eval(j, i).T
        for j in range(i + 1, r + 1):
            acc += ((-float(i)) ** (j - 1)) * ys[r - j]
        direct[i - 1] = acc

        acc = np.zeros((N, n))
        for j in range(r):
            acc += ys[j] @ polys.output_weight(j, i).T
        for j in range(1, r):
            acc += filter_weight(r, j, i) * gxi[j - 1]
        weighted[i - 1] = acc

    diff = np.linalg.norm(direct - weighted, axis=2)
    mag = np.linalg.norm(direct, axis=2)
    return AggregateTraces(
        direct=direct,
        weighted=weighted,
        dual_residual=(diff / (1.0 + mag)).max(axis=1),
        sup_norm=mag.max(axis=1),
    )


def _combine(traces: AggregateTraces, weights: np.ndarray) -> np.ndarray:
    return np.einsum("i,itn->tn", weights, traces.direct)


def derivative_identity_residual(
    sim: SimResult,
    sys: SystemSpec,
    kernels: MomentKernels,
    polys: MatrixPolynomialFamily,
    traces: Optional[AggregateTraces] = None,
) -> float:
    """Max relative residual of the first-derivative identity.

    The primary-kernel combination Z of the aggregate signals satisfies
    Z = front_factor * (y' - Gamma xi_1) + A0 y with A0 the combined
    weight of y; both sides are evaluated from stored state.
    """
    traces = traces if traces is not None else aggregate_signals(sim, sys, polys)
    Z = _combine(traces, kernels.primary.weights)
    A0 = output_coeff(kernels.primary, polys, 0)
    rhs = kernels.front_factor * (sim.derivative(1) - sim.xi[:, 0] @ sys.gamma.T)
    rhs = rhs + sim.y @ A0.T
    res = np.linalg.norm(Z - rhs, axis=1) / (1.0 + np.linalg.norm(Z, axis=1))
    return float(res.max())


def reconstruct_derivative(
    sim: SimResult,
    sys: SystemSpec,
    kernels: MomentKernels,
    polys: MatrixPolynomialFamily,
    k: int,
    traces: Optional[AggregateTraces] = None,
) -> Tuple[np.ndarray, float]:
    """Recover y^(k) from the order-k kernel combination; residual vs stored.

    y^(k) = (Z_k - sum_{j=1..k} B_j Gamma xi_j - sum_{j=0..k-1} A_j y^(j))
            / ((-1)^(order-1-k) * lead_k),
    with A_j, B_j the combined output/filter weights of the k-kernel.
    """
    r = sys.r
    if not 2 <= k <= r - 1:
        raise ValueError(f"k={k} outside [2, {r - 1}]")
    kern = kernels.higher[k]
    traces = traces if traces is not None else aggregate_signals(sim, sys, polys)
    Zk = _combine(traces, kern.weights)
    gxi = _gamma_filters(sim, sys)
    acc = Zk.copy()
    for j in range(1, k + 1):
        acc -= filter_coeff(kern, r, j) * gxi[j - 1]
    for j in range(k):
        acc -= sim.derivative(j) @ output_coeff(kern, polys, j).T
    lead_signed = kern.lead * ((-1.0) ** (r - 1 - k))
    recon = acc / lead_signed
    target = sim.derivative(k)
    res = np.linalg.norm(recon - target, axis=1) / (1.0 + np.linalg.norm(target, axis=1))
    return recon, float(res.max())


# ---------------------------------------------------------------------------
# Differential spot-check of the aggregate signals
# ---------------------------------------------------------------------------

@dataclass
class OdeCheckResult:
    points: int
    max_ratio: float        # worst error / tolerance over all samples
    passed: bool


def aggregate_derivative_check(
    sim: SimResult,
    sys: SystemSpec,
    polys: MatrixPolynomialFamily,
    traces: Optional[AggregateTraces] = None,
    n_points: int = 100,
) -> OdeCheckResult:
    """Finite-difference check of d/dt of each aggregate signal.

    The closed form is f(w) + i * P_0(i) y - i * zeta_i - (-i)^order y,
    with f(w) re-evaluated from the stored plant stack and operator
    state.  A two-point difference across each sampled interior node is
    compared at tolerance ODE_CHECK_SLOPE_FACTOR * h_local * slope,
    where slope is the measured local variation of the closed form (a
    first-order bound; a tiny rounding floor guards equilibria).
    """
    r, n = sys.r, sys.n
    traces = traces if traces is not None else aggregate_signals(sim, sys, polys)
    N = sim.t.size
    if N < 3:
        return OdeCheckResult(points=0, max_ratio=0.0, passed=True)
    idx = np.unique(np.linspace(1, N - 2, min(n_points, N - 2)).astype(int))

    fw = {}

    def f_of_w(row: int) -> np.ndarray:
        if row not in fw:
            stack = sim.x[row].reshape(r, n)
            w, _ = operator_eval(sys.operator, sim.t[row], sim.eta[row], stack)
            fw[row] = np.asarray(sys.f(w), dtype=float)
        return fw[row]

    def closed_form(i: int, row: int) -> np.ndarray:
        y = sim.y[row]
        zeta = traces.direct[i - 1, row]
        out = f_of_w(row) + i * (polys.eval(0, i) @ y) - i * zeta
        return out - ((-float(i)) ** r) * y

    max_ratio = 0.0
    for i in range(1, r):
        sup = traces.sup_norm[i - 1]
        floor = 1e-12 * (1.0 + sup)
        for row in idx:
            dt = sim.t[row + 1] - sim.t[row - 1]
            num = (traces.direct[i - 1, row + 1] - traces.direct[i - 1, row - 1]) / dt
            g_prev = closed_form(i, row - 1)
            g_next = closed_form(i, row + 1)
            slope = float(np.linalg.norm(g_next - g_prev)) / dt
            h_loc = max(sim.t[row + 1] - sim.t[row], sim.t[row] - sim.t[row - 1])
            tol = ODE_CHECK_SLOPE_FACTOR * h_loc * slope + floor
            err = float(np.linalg.norm(num - closed_form(i, row)))
            max_ratio = max(max_ratio, float(err / tol))
    return OdeCheckResult(points=int(len(idx)), max_ratio=max_ratio, passed=bool(max_ratio <= 1.0))


# ---------------------------------------------------------------------------
# A-posteriori margin bound
# ---------------------------------------------------------------------------

@dataclass
class MarginBound:
    """A-posteriori certificate for the uniform funnel margin.

    sigma collects the observed sup-norms; any funnel ratio epsilon with
    epsilon^2/(1-epsilon^2) > sigma is self-sustaining, and eps_min is
    the smallest such value, sqrt(sigma/(1+sigma)).  The check is
    strictly a-posteriori: sigma depends on closed-loop sup-norms, so it
    certifies the observed run rather than predicting one.  Note the
    denominator uses the smallest eigenvalue of the symmetric part of
    the gain matrix (the quantity that is positive by assumption).
    """

    sigma: float
    eps_min: float
    max_funnel_ratio: float
    margin: float
    holds: bool
    sup_dyref: float
    sup_phi: float
    sup_log_slope: float
    sup_mismatch: float
    lam_min_sym: float
    lam_max_abs: float
    note: str = (
        "a-posteriori certificate from observed sup-norms (it reports the "
        "run, it does not predict one); the denominator uses the smallest "
        "eigenvalue of the symmetric part of the gain matrix, while the "
        "pointwise decay estimate is often written with the matrix itself"
    )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def funnel_margin_bound(
    sim: SimResult,
    sys: SystemSpec,
    params: ControllerParams,
    funnel: FunnelSpec,
    ref: ReferenceSpec,
    samples: int = 10_001,
) -> MarginBound:
    ts = np.linspace(sim.t[0], sim.t[-1], samples)
    sup_dyref = 0.0
    sup_phi = 0.0
    sup_log_slope = 0.0
    for t in ts:
        phi, dphi = funnel.eval(t)
        _, dy = ref.eval(t)
        sup_phi = max(sup_phi, phi)
        sup_log_slope = max(sup_log_slope, abs(dphi / phi))
        sup_dyref = max(sup_dyref, float(np.linalg.norm(dy)))
    lam_min_sym = float(np.linalg.eigvalsh(0.5 * (sys.gamma + sys.gamma.T)).min())
    lam_max_abs = float(np.abs(np.linalg.eigvals(sys.gamma)).max())
    mismatch = sim.derivative(1) - sim.xi[:, 0] @ sys.gamma.T
    sup_mismatch = float(np.linalg.norm(mismatch, axis=1).max())
    sigma = (
        sup_dyref * sup_phi
        + sup_log_slope
        + sup_phi * (lam_max_abs * float(params.theta_hat[0]) + sup_mismatch)
    ) / lam_min_sym
    eps_min = math.sqrt(sigma / (1.0 + sigma))
    max_ratio = float(sim.funnel_ratio.max())
    return MarginBound(
        sigma=sigma,
        eps_min=eps_min,
        max_funnel_ratio=max_ratio,
        margin=1.0 - max_ratio,
        holds=max_ratio < 1.0,
        sup_dyref=sup_dyref,
        sup_phi=sup_phi,
        sup_log_slope=sup_log_slope,
        sup_mismatch=sup_mismatch,
        lam_min_sym=lam_min_sym,
        lam_max_abs=lam_max_abs,
    )


def eps_from_sigma(sigma: float) -> float:
    """Smallest eps in (0,1) with eps^2/(1-eps^2) > sigma (limit value)."""
    return math.sqrt(sigma / (1.0 + sigma))


# ---------------------------------------------------------------------------
# Aggregated report
# ---------------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    order: int
    n: int
    dual_residuals: list
    aggregate_sup: list
    identity_residual: float
    reconstruction_residuals: Dict[int, float]
    coefficient_residuals: Dict[str, float]
    ode_check: OdeCheckResult
    bound: MarginBound
    theta_bounds_hold: bool
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(
            max(self.dual_residuals) < DUAL_FORM_TOL
            and self.identity_residual < IDENTITY_TOL
            and all(v < IDENTITY_TOL for v in self.reconstruction_residuals.values())
            and all(v < COEFF_TOL for v in self.coefficient_residuals.values())
            and self.ode_check.passed
            and self.bound.holds
            and self.theta_bounds_hold
        )

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "n": self.n,
            "dual_residuals": list(map(float, self.dual_residuals)),
            "aggregate_sup": list(map(float, self.aggregate_sup)),
            "identity_residual": self.identity_residual,
            "reconstruction_residuals": {str(k): v for k, v in self.reconstruction_residuals.items()},
            "coefficient_residuals": self.coefficient_residuals,
            "ode_check": {
                "points": self.ode_check.points,
                "max_ratio": self.ode_check.max_ratio,
                "passed": self.ode_check.passed,
            },
            "bound": self.bound.to_dict(),
            "theta_bounds_hold": self.theta_bounds_hold,
            "passed": self.passed,
            "tolerances": {
                "dual_form": DUAL_FORM_TOL,
                "identity": IDENTITY_TOL,
                "coefficient": COEFF_TOL,
            },
        }

    def render(self) -> str:
        lines = [
            f"diagnostics for order r={self.order}, n={self.n}",
            f"  dual-form residuals      : {', '.join(f'{v:.3e}' for v in self.dual_residuals)}"
            f"  (tol {DUAL_FORM_TOL:.0e})",
            f"  aggregate sup norms      : {', '.join(f'{v:.4g}' for v in self.aggregate_sup)}",
            f"  derivative identity      : {self.identity_residual:.3e}  (tol {IDENTITY_TOL:.0e})",
        ]
        for k, v in sorted(self.reconstruction_residuals.items()):
            lines.append(f"  y^({k}) reconstruction    : {v:.3e}  (tol {IDENTITY_TOL:.0e})")
        worst_coeff = max(self.coefficient_residuals.values()) if self.coefficient_residuals else 0.0
        lines.append(f"  coefficient residuals    : worst {worst_coeff:.3e}  (tol {COEFF_TOL:.0e})")
        lines.append(
            f"  aggregate d/dt check     : max err/tol {self.ode_check.max_ratio:.3f} "
            f"over {self.ode_check.points} points -> {'ok' if self.ode_check.passed else 'FAIL'}"
        )
        lines.append(
            f"  margin certificate       : sigma={self.bound.sigma:.4g}, "
            f"eps_min={self.bound.eps_min:.6f}, max phi||e||={self.bound.max_funnel_ratio:.6f}, "
            f"margin={self.bound.margin:.6f}"
        )
        lines.append(f"  theta bounds hold        : {self.theta_bounds_hold}")
        lines.append(f"  overall                  : {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def run_diagnostics(
    sim: SimResult,
    sys: SystemSpec,
    params: ControllerParams,
    funnel: FunnelSpec,
    ref: ReferenceSpec,
) -> DiagnosticsReport:
    polys = elimination_polynomials(sys.R)
    kernels = moment_kernels(sys.r)
    traces = aggregate_signals(sim, sys, polys)
    recon = {
        k: reconstruct_derivative(sim, sys, kernels, polys, k, traces)[1]
        for k in range(2, sys.r)
    }
    theta_ok = bool(
        np.all(sim.theta_norms() < np.asarray(params.theta_hat)[None, :])
        and np.all(sim.funnel_ratio < 1.0)
    )
    return DiagnosticsReport(
        order=sys.r,
        n=sys.n,
        dual_residuals=[float(v) for v in traces.dual_residual],
        aggregate_sup=[float(v) for v in traces.sup_norm],
        identity_residual=derivative_identity_residual(sim, sys, kernels, polys, traces),
        reconstruction_residuals=recon,
        coefficient_residuals=coefficient_residuals(polys, kernels),
        ode_check=aggregate_derivative_check(sim, sys, polys, traces),
        bound=funnel_margin_bound(sim, sys, params, funnel, ref),
        theta_bounds_hold=theta_ok,
    )
