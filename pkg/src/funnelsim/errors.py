"""Exception types shared across the package."""

from __future__ import annotations


def constraint_name(level: int) -> str:
    """Human-readable name of a closed-loop domain constraint.

    Level 0 is the funnel constraint (denominator 1 - phi^2 ||e||^2);
    level i >= 1 is the radius constraint of the i-th chain variable
    (denominator theta_hat_i^2 - ||theta_i||^2).
    """
    return "funnel" if level == 0 else f"theta_{level}"


class ValidationError(ValueError):
    """A spec or configuration failed validation.

    Carries the full list of messages so callers can report every problem
    at once instead of the first one found.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


class OperatorError(RuntimeError):
    """An operator readout produced a non-finite value."""

    def __init__(self, name: str, t: float):
        self.name = name
        self.t = t
        super().__init__(f"operator '{name}' produced a non-finite readout at t={t:.6g}")


class DomainExit(RuntimeError):
    """The state left the open region where the control law is defined.

    Recoverable inside the integrator: the step is rejected and retried
    with a smaller step size.
    """

    def __init__(self, level: int, t: float, value: float):
        self.level = level
        self.t = t
        self.value = value
        super().__init__(
            f"{constraint_name(level)} denominator {value:.6e} at t={t:.6g}"
        )


class InfeasibleStart(RuntimeError):
    """Initial data violates the controller's feasibility conditions."""

    def __init__(self, report):
        self.report = report
        super().__init__(
            "initial data infeasible: " + "; ".join(report.failed)
        )


class StepUnderflow(RuntimeError):
    """Step control drove h below h_min while still rejecting steps."""

    def __init__(self, t: float, constraint: str, h: float, h_min: float):
        self.t = t
        self.constraint = constraint
        self.h = h
        self.h_min = h_min
        super().__init__(
            f"step size underflow at t={t:.6g} (h={h:.3e} < h_min={h_min:.3e}); "
            f"nearest violated constraint: {constraint}"
        )
