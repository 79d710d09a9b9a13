"""Derivative-free funnel controller: filter cascade, chain variables, input.

The controller sees only the tracking error e(t), the filter states
xi_1..xi_{r-1} and the funnel weight phi(t).  No output or reference
derivative enters any operation.  Each chain variable theta_i lives in a
constant ball of radius theta_hat_i; the feedback gain of every stage
grows without bound as its variable approaches the ball boundary, which
is what keeps the closed loop inside the admissible region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import DomainExit, ValidationError
from .signals import FunnelSpec, ReferenceSpec

__all__ = [
    "ControllerParams",
    "ThetaChain",
    "FeasibilityReport",
    "theta_chain",
    "control_input",
    "filter_rhs",
    "initial_feasibility",
    "render_feasibility",
]


@dataclass(frozen=True)
class ControllerParams:
    """Tuning data: final-stage gain, chain radii, filter initial values.

    theta_hat has length r-1 and xi0 shape (r-1, n).
    """

    gain: float
    theta_hat: np.ndarray
    xi0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta_hat", np.atleast_1d(np.asarray(self.theta_hat, dtype=float)))
        object.__setattr__(self, "xi0", np.atleast_2d(np.asarray(self.xi0, dtype=float)))

    def validate(self, r: int, n: int) -> None:
        errors = []
        if not self.gain > 0:
            errors.append(f"[controller] gain must be > 0, got {self.gain}")
        if self.theta_hat.shape != (r - 1,):
            errors.append(f"[controller] theta_hat shape {self.theta_hat.shape} != ({r - 1},)")
        elif not np.all(self.theta_hat > 0):
            errors.append("[controller] every theta_hat entry must be > 0")
        if self.xi0.shape != (r - 1, n):
            errors.append(f"[controller] xi0 shape {self.xi0.shape} != ({r - 1}, {n})")
        if errors:
            raise ValidationError(errors)


@dataclass
class ThetaChain:
    """Chain variables theta_1..theta_{r-1} and all domain denominators.

    dens[0] = 1 - phi^2 ||e||^2 and dens[i] = theta_hat_i^2 - ||theta_i||^2.
    All entries are strictly positive whenever the state is admissible.
    """

    thetas: np.ndarray  # (r-1, n)
    dens: np.ndarray    # (r,)


def theta_chain(
    t: float,
    e: np.ndarray,
    xi: np.ndarray,
    phi: float,
    params: ControllerParams,
    guard_scale: float = 0.0,
) -> ThetaChain:
    """Evaluate the chain of surrogate errors.

    theta_1 = xi_1 + e / (1 - phi^2 ||e||^2) and
    theta_i = xi_i + theta_{i-1} / (theta_hat_{i-1}^2 - ||theta_{i-1}||^2).

    Raises DomainExit(level) when a denominator falls to or below
    guard_scale times its nominal scale (1 for the funnel denominator,
    theta_hat_i^2 for the others); with the default guard_scale=0 this
    means a sign change or exact zero.
    """
    kmax = params.theta_hat.shape[0]
    th2 = params.theta_hat**2
    thetas = np.empty((kmax, e.shape[0]))
    dens = np.empty(kmax + 1)
    d = 1.0 - phi * phi * float(e @ e)
    dens[0] = d
    if d <= guard_scale:
        raise DomainExit(0, t, d)
    prev = xi[0] + e * (1.0 / d)
    thetas[0] = prev
    for i in range(1, kmax):
        d = th2[i - 1] - float(prev @ prev)
        dens[i] = d
        if d <= guard_scale * th2[i - 1]:
            raise DomainExit(i, t, d)
        prev = xi[i] + prev * (1.0 / d)
        thetas[i] = prev
    d = th2[kmax - 1] - float(prev @ prev)
    dens[kmax] = d
    if d <= guard_scale * th2[kmax - 1]:
        raise DomainExit(kmax, t, d)
    return ThetaChain(thetas=thetas, dens=dens)


def control_input(chain: ThetaChain, params: ControllerParams) -> np.ndarray:
    """u = -gain * theta_{r-1} / (theta_hat_{r-1}^2 - ||theta_{r-1}||^2)."""
    return chain.thetas[-1] * (-params.gain / chain.dens[-1])


def filter_rhs(xi: np.ndarray, u: np.ndarray, r: int) -> np.ndarray:
    """Filter cascade derivatives.

    d(xi_i)/dt = -(r-i) xi_i + xi_{i+1} for i < r-1 and
    d(xi_{r-1})/dt = -xi_{r-1} + u; stage time constants are 1/(r-i).
    """
    dxi = np.empty_like(xi)
    kmax = r - 1
    for i in range(kmax - 1):
        dxi[i] = xi[i + 1] - (kmax - i) * xi[i]
    dxi[kmax - 1] = u - xi[kmax - 1]
    return dxi


# ---------------------------------------------------------------------------
# Feasibility of the initial data
# ---------------------------------------------------------------------------

@dataclass
class FeasibilityReport:
    """Outcome of the start-condition checks with per-condition margins.

    Margins are ratios (phi(t0)*||e0|| against 1, and ||theta_i^0||
    against theta_hat_i), so values must be strictly below 1.
    """

    feasible: bool
    t0: float
    funnel_ratio: float
    theta_norms: List[float]
    theta_hat: List[float]
    margins: List[float]
    failed: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "t0": self.t0,
            "funnel_ratio": self.funnel_ratio,
            "theta_norms": list(self.theta_norms),
            "theta_hat": list(self.theta_hat),
            "margins": list(self.margins),
            "failed": list(self.failed),
        }


def render_feasibility(report: FeasibilityReport) -> str:
    """Canonical serialization, shared verbatim by CLI output and metadata."""
    return json.dumps(report.to_dict(), sort_keys=True, indent=2)


def initial_feasibility(
    sys,
    params: ControllerParams,
    funnel: FunnelSpec,
    ref: ReferenceSpec,
) -> FeasibilityReport:
    """Check the start conditions; infeasibility is a report, not an error.

    Conditions: phi(t0)*||e(t0)|| < 1, and the chain built from e(t0)
    and the filter initial values satisfies ||theta_i^0|| < theta_hat_i
    for every stage.
    """
    kmax = params.theta_hat.shape[0]
    phi0, _ = funnel.eval(sys.t0)
    yref0, _ = ref.eval(sys.t0)
    e0 = sys.y0_stack[0] - yref0
    ratio = phi0 * float(np.linalg.norm(e0))
    failed = []
    norms = [float("nan")] * kmax
    margins = [float("nan")] * kmax
    if ratio >= 1.0:
        failed.append(f"funnel: phi(t0)*||e(t0)|| = {ratio:.6g} >= 1")
    else:
        th2 = params.theta_hat**2
        prev = params.xi0[0] + e0 / (1.0 - ratio * ratio)
        for i in range(kmax):
            norms[i] = float(np.linalg.norm(prev))
            margins[i] = norms[i] / float(params.theta_hat[i])
            if margins[i] >= 1.0:
                failed.append(
                    f"theta_{i + 1}: ||theta_{i + 1}^0|| = {norms[i]:.6g} "
                    f">= theta_hat_{i + 1} = {params.theta_hat[i]:.6g}"
                )
                break
            if i + 1 < kmax:
                prev = params.xi0[i + 1] + prev / (th2[i] - float(prev @ prev))
    return FeasibilityReport(
        feasible=not failed,
        t0=float(sys.t0),
        funnel_ratio=float(ratio),
        theta_norms=[float(v) for v in norms],
        theta_hat=[float(v) for v in params.theta_hat],
        margins=[float(v) for v in margins],
        failed=failed,
    )
