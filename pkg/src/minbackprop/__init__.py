"""Minimal-problem solvers with implicit-differentiation backward passes.

The package is organized as:

* ``numerics``    -- small dense SVD / pseudoinverse / rank / eigen kernel
* ``ift``         -- implicit-function-theorem engine and KKT assembly
* ``systems``     -- constraint systems, losses, analytic Jacobians
* ``solvers``     -- forward minimal solvers (absolute pose depths,
                     weighted rotation alignment, weighted 8-point,
                     5-point essential)
* ``backward``    -- interchangeable backward passes and the
                     finite-difference oracle
* ``synthetic``   -- seeded scene generation
* ``experiments`` -- desk-scale runs behind the ``minbackprop`` CLI
"""

from . import backward, experiments, ift, numerics, report, solvers, synthetic, systems
from .backward import (
    APPLICABLE_METHODS,
    DegenerateSpectrum,
    GradientReport,
    TrackingFailure,
    backward_essential,
    backward_fundamental_kkt,
    backward_fundamental_svd,
    backward_p3p,
    backward_registration_kkt,
    backward_registration_svd,
    fd_oracle,
)
from .ift import (
    ConstraintSystem,
    DimensionMismatch,
    KktSystem,
    NotARoot,
    RankDeficient,
    SolutionJacobian,
    build_kkt,
    ift_jacobian,
    recover_multipliers,
    self_check_system,
)
from .numerics import (
    ConvergenceFailure,
    SvdResult,
    numerical_rank,
    pseudoinverse,
    real_eigenpairs,
    svd,
)
from .solvers import (
    DegenerateConfiguration,
    EmptyCandidates,
    EpipolarInstance,
    ModelCandidateSet,
    NoRealSolution,
    P3pInstance,
    RegistrationInstance,
    select_closest,
    solve_essential_5pt,
    solve_fundamental_8pt,
    solve_kabsch,
    solve_p3p,
)
from .synthetic import SceneConfig, make_registration_toy, make_two_view, random_rotation
from .systems import (
    epipolar_upper_loss,
    essential_system,
    fundamental_losses,
    p3p_system,
    reduce_essential_jacobian,
    registration_losses,
)

__version__ = "0.1.0"
