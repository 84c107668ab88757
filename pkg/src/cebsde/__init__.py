"""Numerical solver for BSDEs whose driver depends on conditional expectations
of the solution with respect to a smaller filtration.

Backends are binomial scenario trees (exact conditional expectations) and
simulated path ensembles (regression estimates).  On top of the solver sit
a penalization scheme for the reflected problem and harnesses checking the
comparison properties on concrete instances.
"""

__version__ = "0.1.0"

from .drivers import (  # noqa: E402
    BarrierSpec,
    DriverSpec,
    TerminalSpec,
    check_h1,
    check_h2,
    check_lipschitz,
    constant_barrier,
    ito_barrier,
    linear_driver,
    mean_field_driver,
    smooth_driver,
    walk_terminal,
    zero_driver,
)
from .montecarlo import InfoSelector, MonteCarloBackend, RegressionEstimator, sample_paths  # noqa: E402
from .penalization import (  # noqa: E402
    PenaltySchedule,
    audit_reflected_solution,
    run_penalization_sweep,
    solve_penalized,
)
from .solver import SolutionTriple, SolverConfig, apriori_probe, solve_cebsde  # noqa: E402
from .tree import Partition, ScenarioTree, TimeGrid, build_tree, cond_exp_f, cond_exp_g  # noqa: E402
from .verification import (  # noqa: E402
    classical_reflected_oracle,
    linear_closed_form_oracle,
    run_comparison,
    run_conditional_comparison,
    run_converse_comparison,
)
