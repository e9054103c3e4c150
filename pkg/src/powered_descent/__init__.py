"""Free-final-time 6-DoF minimum-fuel powered descent guidance.

Successive convexification with an exact-penalty trust-region loop, plus a
warm-started variant that shrinks each convex subproblem to a predicted
tight-constraint set.  See the README for the CLI (`pdg`) and library
entry points.
"""

from .problem import (ProblemConstants, ProblemInstance, nominal_instance,
                      instance_from_json, instance_to_json)
from .scvx import ScvxReport, scvx
from .tscvx import tscvx

__all__ = [
    "ProblemConstants", "ProblemInstance", "nominal_instance",
    "instance_from_json", "instance_to_json",
    "ScvxReport", "scvx", "tscvx",
]
