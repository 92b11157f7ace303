import pytest

from mmtr.aecm import FitConfig, default_grid
from mmtr.sim import MmtrScenario, run_replications

CASE1_REPS = 20


@pytest.fixture(scope="session")
def case1_replications():
    """Twenty tuned replications of the 5x5 design at n=81, m=6.

    Shared between the headline-accuracy acceptance check and the
    rank-recovery check so the expensive grid search runs only once.
    """
    scenario = MmtrScenario(dims=(5, 5, 5, 5, 2, 2), n=81, m=6, seed=0)
    cfg = FitConfig(lambda_b=0.0, lambda_l=0.0, max_iter=100, tol=1e-5, seed=0)
    return run_replications(scenario, default_grid(), reps=CASE1_REPS, seed=0, cfg=cfg)
