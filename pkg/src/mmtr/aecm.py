"""Three-cycle alternating ECM fit for the grouped trace-regression model.

Each iteration runs:
  cycle 1 — whiten every group with the current marginal covariance and
            update (B, tau2) by a scaled lasso on the stacked system;
  cycle 2 — E-step over vec(C_i'), then a column-group-lasso CM update of L1;
  cycle 3 — the mirror image for L2;
then prunes numerically-zero factor columns.  The penalized objective

  f(theta) = nll(theta) + N * lambda_b * ||vec(B)||_1 / tau_hat
           + lambda_l * (sum of column norms of L1 and L2)

is recorded after every cycle with tau_hat pinned at the first cycle-1
noise estimate, so a single fixed function is tracked across the whole
fit.  A candidate update is kept only if it does not increase f, which
makes the recorded trace non-increasing by construction (rejections are
not expected in practice; they guard floating-point corner cases).
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .model import ModelParams, TraceDataset, build_cycle_system, neg_log_lik
from .model import _whiten_all
from .numerics import pinv_factor, psd_sqrt, unvec, vec, householder_normalize
from .solvers import GroupLassoProblem, LassoProblem, SolverOptions, group_lasso, scaled_lasso

PRUNE_TOL = 1e-10


@dataclass
class FitConfig:
    lambda_b: float
    lambda_l: float
    init_rank_factor: float = 1.0
    max_iter: int = 200
    tol: float = 1e-6
    seed: int = 0
    rank_prune: bool = True
    normalize_each_iter: bool = False

    def __post_init__(self):
        if self.lambda_b < 0 or self.lambda_l < 0:
            raise ValueError("penalties must be >= 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not (self.tol > 0):
            raise ValueError("tol must be > 0")


@dataclass
class FitReport:
    params: ModelParams
    objective_trace: list
    loglik_trace: list
    selected_ranks: tuple
    ebic: float
    iterations: int
    converged: bool
    per_cycle_timings: dict
    trace_rows: list  # (iteration, cycle, objective, loglik, rank1, rank2)
    loglik_final: float


@dataclass
class TuneGrid:
    lambda_b_grid: list
    lambda_l_grid: list
    selection: str = "ebic"
    cv_k: int = 10
    fold_seed: int = 0

    def __post_init__(self):
        self.lambda_b_grid = [float(v) for v in self.lambda_b_grid]
        self.lambda_l_grid = [float(v) for v in self.lambda_l_grid]
        if not self.lambda_b_grid or not self.lambda_l_grid:
            raise ValueError("tuning grids must be nonempty")
        if any(v < 0 for v in self.lambda_b_grid + self.lambda_l_grid):
            raise ValueError("grid values must be >= 0")
        if self.selection not in ("ebic", "kfold_cv"):
            raise ValueError("selection must be 'ebic' or 'kfold_cv'")
        if self.selection == "kfold_cv" and self.cv_k < 2:
            raise ValueError("cv_k must be >= 2")


def default_grid(selection="ebic", cv_k=10, fold_seed=0):
    """The 10x10 log-spaced default grid: lambda_b in [1e-4, 0.04], lambda_l in [1e-4, 1]."""
    return TuneGrid(
        lambda_b_grid=list(np.geomspace(1e-4, 0.04, 10)),
        lambda_l_grid=list(np.geomspace(1e-4, 1.0, 10)),
        selection=selection,
        cv_k=cv_k,
        fold_seed=fold_seed,
    )


def _inner_opts(cfg):
    return SolverOptions(max_iter=500, tol=1e-9, seed=cfg.seed)


def init_params(d, cfg):
    """Seeded start: B = 0, tau2 = var(y), L_k uniform(-1,1) with
    S_k = min(Q_k, max(1, ceil(factor * log Q_k))), then normalized."""
    _, _, q1, q2 = d.dims
    rng = np.random.default_rng(cfg.seed)
    s1 = min(q1, max(1, math.ceil(cfg.init_rank_factor * math.log(q1)))) if q1 > 0 else 0
    s2 = min(q2, max(1, math.ceil(cfg.init_rank_factor * math.log(q2)))) if q2 > 0 else 0
    l1 = rng.uniform(-1.0, 1.0, size=(q1, s1))
    l2 = rng.uniform(-1.0, 1.0, size=(q2, s2))
    tau2 = max(float(np.var(d.y_all)), 1e-12)
    p1, p2 = d.dims[0], d.dims[1]
    p = ModelParams(b_mat=np.zeros((p1, p2)), l1=l1, l2=l2, tau2=tau2)
    return postprocess(p)


def cycle1_update(d, p, cfg, opts=None):
    """Whitened scaled lasso for the mean: returns (vec B, tau2)."""
    yw, xw, _ = _whiten_all(d, p)
    prob = LassoProblem(design=xw, response=yw, penalty=cfg.lambda_b)
    b, tau, _ = scaled_lasso(prob, opts or _inner_opts(cfg))
    return b, tau * tau


def _factor_update(d, p, cfg, orientation, opts):
    lk = p.l1 if orientation == 1 else p.l2
    qk, sk = lk.shape
    if sk == 0:
        return lk.copy()
    sys = build_cycle_system(d, p, p.b_vec, orientation)
    sq = psd_sqrt(sys.h)
    if sq.rank == 0:
        return np.zeros((qk, sk))
    design = np.ascontiguousarray(sq.factor.T)
    target = pinv_factor(sq) @ sys.g
    # weight 2 * tau2 * lambda_l makes this CM step descend the recorded
    # objective: the quadratic (H, g) omits the 1/(2 tau2) likelihood scale
    prob = GroupLassoProblem(
        sqrt_factor=design,
        target=target,
        group_size=qk,
        n_groups=sk,
        penalty=2.0 * p.tau2 * cfg.lambda_l,
    )
    lnew, _ = group_lasso(prob, opts or _inner_opts(cfg), init=vec(lk))
    return unvec(lnew, qk, sk)


def cycle2_update(d, p, cfg, opts=None):
    """Group-lasso CM update of L1 (uses posterior moments of vec(C'))."""
    return _factor_update(d, p, cfg, 1, opts)


def cycle3_update(d, p, cfg, opts=None):
    """Group-lasso CM update of L2 (uses posterior moments of vec(C))."""
    return _factor_update(d, p, cfg, 2, opts)


def _prune(p):
    l1 = p.l1[:, np.linalg.norm(p.l1, axis=0) >= PRUNE_TOL]
    l2 = p.l2[:, np.linalg.norm(p.l2, axis=0) >= PRUNE_TOL]
    return ModelParams(b_mat=p.b_mat, l1=l1, l2=l2, tau2=p.tau2)


def postprocess(p, prune=True):
    """Drop zero columns, balance the factor scales, rotate L2 to reporting form.

    The balance step rescales L1 by (d2/d1)^(1/4) and L2 by (d1/d2)^(1/4)
    (d_k the largest diagonal of L_k L_k'), equalizing the two Gram maxima
    while leaving their Kronecker product -- and hence the likelihood --
    unchanged.  The rotation is a pure Householder reflection sending the
    max-diagonal row of L2 onto a multiple of e1.  If every column of a
    factor is pruned the model degenerates to fixed effects only and the
    remaining steps are skipped.
    """
    if prune:
        p = _prune(p)
    l1, l2 = p.l1, p.l2
    if l1.shape[1] == 0 or l2.shape[1] == 0:
        return p
    r1 = np.einsum("ij,ij->i", l1, l1)
    r2 = np.einsum("ij,ij->i", l2, l2)
    d1, d2 = float(r1.max()), float(r2.max())
    if d1 > 0 and d2 > 0:
        a = (d2 / d1) ** 0.25
        l1 = l1 * a
        l2 = l2 / a
    if np.einsum("ij,ij->i", l2, l2).max() > 0:
        j = int(np.argmax(np.einsum("ij,ij->i", l2, l2)))
        rotated, scale = householder_normalize(l2, j)
        l2 = rotated / scale
    return ModelParams(b_mat=p.b_mat, l1=l1, l2=l2, tau2=p.tau2)


def _penalties(p, cfg, n_obs, tau_hat):
    pen_b = n_obs * cfg.lambda_b * float(np.sum(np.abs(p.b_mat))) / tau_hat
    pen_l = cfg.lambda_l * (
        float(np.sum(np.linalg.norm(p.l1, axis=0))) + float(np.sum(np.linalg.norm(p.l2, axis=0)))
    )
    return pen_b + pen_l


def _score(d, p, cfg, tau_hat):
    nll = neg_log_lik(d, p)
    return nll + _penalties(p, cfg, d.n_obs, tau_hat), -nll


def fit(d, cfg, init=None):
    """Run the AECM loop to convergence; deterministic given (d, cfg, init)."""
    p = init if init is not None else init_params(d, cfg)
    opts = _inner_opts(cfg)
    timings = {"cycle1": 0.0, "cycle2": 0.0, "cycle3": 0.0}
    trace_rows = []
    tau_hat = None
    f_last = None
    ll_last = None
    converged = False
    iterations = 0

    def record(it, cycle, f, ll, params):
        r1, r2 = params.ranks
        trace_rows.append((it, cycle, f, ll, r1, r2))

    for it in range(cfg.max_iter):
        f_iter_start = f_last

        t0 = time.perf_counter()
        b_new, tau2_new = cycle1_update(d, p, cfg, opts)
        cand = ModelParams(
            b_mat=unvec(b_new, d.dims[0], d.dims[1]), l1=p.l1, l2=p.l2, tau2=tau2_new
        )
        if tau_hat is None:
            tau_hat = math.sqrt(tau2_new)
        f_cand, ll_cand = _score(d, cand, cfg, tau_hat)
        if f_last is None or f_cand <= f_last:
            p, f_last, ll_last = cand, f_cand, ll_cand
        timings["cycle1"] += time.perf_counter() - t0
        record(it, 1, f_last, ll_last, p)

        t0 = time.perf_counter()
        l1_new = cycle2_update(d, p, cfg, opts)
        cand = ModelParams(b_mat=p.b_mat, l1=l1_new, l2=p.l2, tau2=p.tau2)
        f_cand, ll_cand = _score(d, cand, cfg, tau_hat)
        if f_cand <= f_last:
            p, f_last, ll_last = cand, f_cand, ll_cand
        timings["cycle2"] += time.perf_counter() - t0
        record(it, 2, f_last, ll_last, p)

        t0 = time.perf_counter()
        l2_new = cycle3_update(d, p, cfg, opts)
        cand = ModelParams(b_mat=p.b_mat, l1=p.l1, l2=l2_new, tau2=p.tau2)
        f_cand, ll_cand = _score(d, cand, cfg, tau_hat)
        if f_cand <= f_last:
            p, f_last, ll_last = cand, f_cand, ll_cand
        if cfg.normalize_each_iter:
            p2 = postprocess(p, prune=cfg.rank_prune)
        elif cfg.rank_prune:
            p2 = _prune(p)
        else:
            p2 = p
        if p2.l1.shape[1] != p.l1.shape[1] or p2.l2.shape[1] != p.l2.shape[1] or cfg.normalize_each_iter:
            p = p2
            f_last, ll_last = _score(d, p, cfg, tau_hat)
        timings["cycle3"] += time.perf_counter() - t0
        record(it, 3, f_last, ll_last, p)

        iterations = it + 1
        if f_iter_start is not None and abs(f_iter_start - f_last) <= cfg.tol * max(1.0, abs(f_iter_start)):
            converged = True
            break

    p = postprocess(p, prune=cfg.rank_prune)
    loglik_final = -neg_log_lik(d, p)
    report = FitReport(
        params=p,
        objective_trace=[row[2] for row in trace_rows],
        loglik_trace=[row[3] for row in trace_rows],
        selected_ranks=p.ranks,
        ebic=0.0,
        iterations=iterations,
        converged=converged,
        per_cycle_timings=timings,
        trace_rows=trace_rows,
        loglik_final=loglik_final,
    )
    report.ebic = ebic(d, report, 0.5)
    return report


def _df(p):
    return (
        int(np.count_nonzero(p.b_mat))
        + int(np.count_nonzero(p.l1))
        + int(np.count_nonzero(p.l2))
        + 1
    )


def ebic(d, report, gamma=0.5):
    """-2 loglik + df log N + 2 gamma df log(model-space size)."""
    p = report.params
    p1, p2, q1, q2 = d.dims
    s1, s2 = report.selected_ranks
    df = _df(p)
    n = d.n_obs
    space = p1 * p2 + q1 * s1 + q2 * s2
    loglik = report.loglik_final
    return -2.0 * loglik + df * math.log(n) + 2.0 * gamma * df * math.log(max(space, 1))


def _cv_score(d, cfg, k, fold_seed):
    """k-fold CV over groups; held-out groups are predicted marginally."""
    k = min(k, d.n_groups)
    if k < 2:
        raise ValueError("need at least 2 groups for cross-validation")
    rng = np.random.default_rng(fold_seed)
    perm = rng.permutation(d.n_groups)
    sse = 0.0
    for fold in np.array_split(perm, k):
        held = set(int(i) for i in fold)
        train = TraceDataset([g for i, g in enumerate(d.groups) if i not in held], d.dims)
        rep = fit(train, cfg)
        b = rep.params.b_vec
        for i in held:
            g = d.groups[i]
            r = g.y - g.x_rows @ b
            sse += float(r @ r)
    return sse / d.n_groups


def _tune_cell(args):
    d, cfg, grid = args
    try:
        rep = fit(d, cfg)
        score = rep.ebic
        if grid.selection == "kfold_cv":
            score = _cv_score(d, cfg, grid.cv_k, grid.fold_seed)
        row = {
            "lambda_b": cfg.lambda_b,
            "lambda_l": cfg.lambda_l,
            "ebic": rep.ebic,
            "loglik": rep.loglik_final,
            "df": _df(rep.params),
            "rank1": rep.selected_ranks[0],
            "rank2": rep.selected_ranks[1],
            "status": "ok",
            "score": score,
        }
        return row, rep
    except Exception as exc:  # failed cells score +inf, tuning continues
        row = {
            "lambda_b": cfg.lambda_b,
            "lambda_l": cfg.lambda_l,
            "ebic": float("inf"),
            "loglik": float("nan"),
            "df": 0,
            "rank1": 0,
            "rank2": 0,
            "status": "failed: %s" % type(exc).__name__,
            "score": float("inf"),
        }
        return row, None


def tune(d, grid, cfg, jobs=1):
    """Fit every grid cell, score by EBIC or k-fold CV, return (best report, table).

    Ties break toward the larger (lambda_b, lambda_l) pair, i.e. the sparser
    model.  Cells are independent; `jobs > 1` fans them out across processes
    without changing the result.
    """
    cells = []
    for lb in sorted(grid.lambda_b_grid):
        for ll in sorted(grid.lambda_l_grid):
            cells.append((d, replace(cfg, lambda_b=lb, lambda_l=ll), grid))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_tune_cell, cells, chunksize=1))
    else:
        results = [_tune_cell(c) for c in cells]
    best = None
    best_score = float("inf")
    table = []
    for row, rep in results:
        table.append(row)
        if rep is not None and row["score"] <= best_score:
            best, best_score = rep, row["score"]
    if best is None:
        raise RuntimeError("every tuning cell failed")
    return best, table
