"""Constrained stochastic optimization that checks few constraints per step.

The solvers minimize ``f(w) + gamma * max(0, g(w))`` with ``g = max_i g_i``
and project onto the feasible set once, at the end. FullTouch checks every
constraint per iteration; the LightTouch family samples constraints from a
learned distribution and needs far fewer checks.
"""

from .core import (
    Ball,
    Box,
    BoxFace,
    BoxFamily,
    CheckCounter,
    ConstraintSet,
    AggregatedConstraintSet,
    GammaEstimate,
    HingeRankingObjective,
    LeastSquaresObjective,
    LinearObjective,
    LinearRow,
    LinearRowsFamily,
    Ordering,
    OrderingFamily,
    Problem,
    ProblemMetadata,
    QuadraticObjective,
    aggregate,
    eval_max_constraint,
    gamma_for_known_family,
    gamma_from_interior_point,
    penalized_objective,
    rho_from_interior_point,
)
from .projections import (
    oracle_project,
    project_domain,
    project_feasible,
    project_ordering,
    project_ordering_general,
)
from .solvers import (
    SolverConfig,
    SolverResult,
    TraceRecord,
    recommended_eta_full,
    recommended_eta_light,
    recommended_k,
    schedule_from_tau,
    solve,
    solve_full,
    solve_light,
    solve_mid,
    solve_practical,
    solve_projected_sgd,
)

__version__ = "0.1.0"
