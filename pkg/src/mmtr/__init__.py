"""Mixed-model trace regression: sparse matrix-coefficient means with
low-rank separable random-effect covariances, fitted by a three-cycle
alternating ECM algorithm."""

from .aecm import FitConfig, FitReport, TuneGrid, default_grid, ebic, fit, init_params, postprocess, tune
from .model import (
    CycleSystem,
    GroupData,
    ModelParams,
    PosteriorMoments,
    TraceDataset,
    UnknownGroup,
    build_cycle_system,
    dataset_from_stacked,
    make_group,
    marginal_cov,
    neg_log_lik,
    objective,
    posterior_moments,
    predict,
    whiten,
)
from .numerics import (
    NotPsd,
    NotSymmetric,
    PsdSqrt,
    ZeroRow,
    householder_normalize,
    kron,
    nearest_kron,
    pinv_factor,
    psd_sqrt,
    unvec,
    vec,
    vec_transpose_perm,
)
from .sim import (
    EquicorrScenario,
    MmtrScenario,
    ReplicationTable,
    TruthBundle,
    ZeroTruth,
    cov_err,
    gen_equicorr,
    gen_mmtr,
    lambda_err,
    mspe,
    r2,
    rel_err,
    run_replications,
)
from .solvers import (
    DegenerateResidual,
    GroupLassoProblem,
    LassoProblem,
    SolverOptions,
    group_lasso,
    group_lasso_objective,
    lasso_cd,
    lasso_objective,
    scaled_lasso,
)

__version__ = "0.1.0"
