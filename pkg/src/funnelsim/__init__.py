"""funnelsim: derivative-free funnel-controller simulation and diagnostics.

The package simulates output-feedback tracking for r-th order nonlinear
MIMO plants where the controller only measures the output: a cascade of
first-order filters stands in for the unavailable output derivatives,
and each surrogate error is confined to a constant-radius ball by the
next stage's gain.  The integrator guards the region where all
controller denominators stay positive, and the analysis module checks
the algebraic identities that underpin the boundedness guarantees along
every stored trajectory.
"""

__version__ = "0.1.0"

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
    ValidationError,
)
from .integrator import (
    ClosedLoopState,
    IntegratorConfig,
    SimResult,
    closed_loop_rhs,
    simulate,
)
from .plant import (
    OperatorSpec,
    SystemSpec,
    benchmark_nonlinear,
    chain_integrator,
    linear_test,
    make_plant,
    operator_eval,
    plant_rhs,
    validate_system,
)
from .signals import (
    FunnelSpec,
    ReferenceSpec,
    funnel_eval,
    reference_eval,
    validate_funnel,
    validate_reference,
)

__all__ = [
    "__version__",
    "ControllerParams",
    "FeasibilityReport",
    "ThetaChain",
    "control_input",
    "filter_rhs",
    "initial_feasibility",
    "theta_chain",
    "DomainExit",
    "InfeasibleStart",
    "OperatorError",
    "StepUnderflow",
    "ValidationError",
    "ClosedLoopState",
    "IntegratorConfig",
    "SimResult",
    "closed_loop_rhs",
    "simulate",
    "OperatorSpec",
    "SystemSpec",
    "benchmark_nonlinear",
    "chain_integrator",
    "linear_test",
    "make_plant",
    "operator_eval",
    "plant_rhs",
    "validate_system",
    "FunnelSpec",
    "ReferenceSpec",
    "funnel_eval",
    "reference_eval",
    "validate_funnel",
    "validate_reference",
]
