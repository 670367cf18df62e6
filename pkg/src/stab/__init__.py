"""Sample-and-hold feedback stabilization of mean-field particle systems.

Modules: ``measures`` (empirical measures, exact W2), ``lyapunov`` (CLP
moduli and constants), ``proximal`` (inf-convolution and certificates),
``dynamics`` (fields and particle flow), ``stabilize`` (feedback,
parameter selection, trajectories, shells) and the harness
(``config``, ``runner``, ``report``, ``plots``, ``cli``).
"""

from .dynamics import ControlSet, VectorField, flow_segment, make_field
from .lyapunov import ControlLyapunovPair, builtin_quadratic_clp
from .measures import EmpiricalMeasure, TransportPlan, optimal_plan, w2_distance, w2_squared
from .proximal import InfConvOptions, inf_convolution
from .stabilize import (
    build_shells,
    global_feedback,
    local_feedback,
    make_partition,
    run_theta_trajectory,
    s_stabilization_check,
    select_parameters,
)

__version__ = "0.1.0"

__all__ = [
    "ControlLyapunovPair",
    "ControlSet",
    "EmpiricalMeasure",
    "InfConvOptions",
    "TransportPlan",
    "VectorField",
    "build_shells",
    "builtin_quadratic_clp",
    "flow_segment",
    "global_feedback",
    "inf_convolution",
    "local_feedback",
    "make_field",
    "make_partition",
    "optimal_plan",
    "run_theta_trajectory",
    "s_stabilization_check",
    "select_parameters",
    "w2_distance",
    "w2_squared",
]
