"""Model-reference inertia emulation toolkit for diesel-wind systems."""

__version__ = "0.1.0"

from .models import (
    DieselModel,
    ReferenceModel,
    DfigModel,
    DfigState,
    DfigAlgebraic,
    DfigInputs,
    PowerCurve,
    LinearStateSpace,
    diesel_state_space,
    reference_state_space,
    dfig_residual,
    mppt_speed,
)
from .equilibrium import (
    EquilibriumTargets,
    DfigOperatingPoint,
    ModalAnalysis,
    solve_equilibrium,
    linearize,
    modal_analysis,
)
from .sma import PartitionedSystem, ReducedModel, partition, select_relevant_mode, reduce

__all__ = [
    "DieselModel", "ReferenceModel", "DfigModel", "DfigState", "DfigAlgebraic",
    "DfigInputs", "PowerCurve", "LinearStateSpace",
    "diesel_state_space", "reference_state_space", "dfig_residual", "mppt_speed",
    "EquilibriumTargets", "DfigOperatingPoint", "ModalAnalysis",
    "solve_equilibrium", "linearize", "modal_analysis",
    "PartitionedSystem", "ReducedModel", "partition", "select_relevant_mode", "reduce",
]
