"""Seeded data generators for the two simulation designs, scoring metrics,
and a replication harness that tunes + fits each replication and tabulates
the errors.

Draw order is part of the determinism contract.  For the trace-regression
design (one seeded stream per replication): B values, zero positions, L1,
L2, then X, Z, latent C, noise e.  For the equicorrelation design: alpha,
B values, zero positions, X, noise.  A replication's test set is drawn
from the same stream immediately after its training set, sharing the truth.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .aecm import FitConfig, tune
from .model import ModelParams, TraceDataset, make_group, marginal_cov
from .numerics import vec


class ZeroTruth(ValueError):
    """A relative error against an exactly-zero truth is undefined."""


@dataclass
class MmtrScenario:
    dims: tuple  # (P1, P2, Q1, Q2, S1, S2)
    n: int
    m: int
    tau2: float = 0.5
    sparsity_frac: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 6:
            raise ValueError("dims must be (P1, P2, Q1, Q2, S1, S2)")
        if not (0.0 <= self.sparsity_frac <= 1.0):
            raise ValueError("sparsity_frac must lie in [0, 1]")
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be >= 1")
        if not (self.tau2 > 0):
            raise ValueError("tau2 must be > 0")


@dataclass
class EquicorrScenario:
    dims: tuple  # (P1, P2)
    n: int
    m: int
    alpha_range: tuple = (0.2, 0.8)
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 2:
            raise ValueError("dims must be (P1, P2)")
        lo, hi = self.alpha_range
        if not (0.0 <= lo <= hi < 1.0):
            raise ValueError("alpha_range must lie within [0, 1)")
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be >= 1")


@dataclass
class TruthBundle:
    b_mat: np.ndarray
    params: ModelParams | None  # full generative parameters (when applicable)
    lambda_block: np.ndarray | None  # per-group m x m marginal covariance
    alpha: float | None
    tau2: float


_B_GRID = np.concatenate([np.arange(-20, 0), np.arange(1, 21)]) * 0.5  # no 0


def _draw_b(p1, p2, sparsity_frac, rng):
    nflat = p1 * p2
    flat = rng.choice(_B_GRID, size=nflat, replace=True)
    n_zero = int(math.floor(sparsity_frac * nflat))
    if n_zero:
        idx = rng.choice(nflat, size=n_zero, replace=False)
        flat[idx] = 0.0
    return flat.reshape((p1, p2), order="F")


def _draw_factor(q, s, rng):
    """Uniform(-1,1) factor scaled so its Gram's nonzero singular values multiply to 1."""
    l = rng.uniform(-1.0, 1.0, size=(q, s))
    sv = np.linalg.svd(l, compute_uv=False)
    nz = sv[sv > 1e-12 * max(sv.max(initial=0.0), 1.0)]
    if nz.size:
        gamma = float(np.prod(nz * nz)) ** (-1.0 / nz.size)
        l = l * math.sqrt(gamma)
    return l


def _mmtr_truth(s, rng):
    p1, p2, q1, q2, s1, s2 = s.dims
    b = _draw_b(p1, p2, s.sparsity_frac, rng)
    l1 = _draw_factor(q1, s1, rng)
    l2 = _draw_factor(q2, s2, rng)
    params = ModelParams(b_mat=b, l1=l1, l2=l2, tau2=s.tau2)
    return TruthBundle(b_mat=params.b_mat, params=params, lambda_block=None, alpha=None, tau2=s.tau2)


def _mmtr_dataset(s, truth, rng):
    p1, p2, q1, q2, s1, s2 = s.dims
    n, m = s.n, s.m
    tp = truth.params
    x = rng.standard_normal((n, m, p1, p2))
    z = rng.standard_normal((n, m, q1, q2))
    c = rng.standard_normal((n, s1, s2)) * math.sqrt(s.tau2)
    e = rng.standard_normal((n, m)) * math.sqrt(s.tau2)
    a = np.einsum("qa,nab,rb->nqr", tp.l1, c, tp.l2)  # L1 C_i L2'
    x_rows = x.transpose(0, 1, 3, 2).reshape(n, m, p1 * p2)  # rows vec(X_ij)
    z_rows = z.transpose(0, 1, 3, 2).reshape(n, m, q1 * q2)
    y = x_rows @ vec(tp.b_mat) + np.einsum("nmk,nk->nm", z_rows, a.transpose(0, 2, 1).reshape(n, -1)) + e
    groups = [make_group("g%05d" % i, y[i], x_rows[i], z_rows[i], q1, q2) for i in range(n)]
    return TraceDataset(groups, (p1, p2, q1, q2))


def gen_mmtr(s):
    """Generate one trace-regression dataset plus its generating truth."""
    rng = np.random.default_rng(s.seed)
    truth = _mmtr_truth(s, rng)
    return _mmtr_dataset(s, truth, rng), truth


def _equicorr_truth(s, rng):
    p1, p2 = s.dims
    lo, hi = s.alpha_range
    alpha = float(rng.uniform(lo, hi))
    b = _draw_b(p1, p2, 0.4, rng)
    block = np.full((s.m, s.m), alpha)
    np.fill_diagonal(block, 1.0)
    return TruthBundle(b_mat=b, params=None, lambda_block=block, alpha=alpha, tau2=1.0)


def _equicorr_dataset(s, truth, rng):
    p1, p2 = s.dims
    n, m = s.n, s.m
    x = rng.standard_normal((n, m, p1, p2))
    eps = rng.standard_normal((n, m)) @ np.linalg.cholesky(truth.lambda_block).T
    x_rows = x.transpose(0, 1, 3, 2).reshape(n, m, p1 * p2)
    y = x_rows @ vec(truth.b_mat) + eps
    # the fitting covariates reuse X: deliberately misspecified, Q = P
    groups = [make_group("g%05d" % i, y[i], x_rows[i], x_rows[i], p1, p2) for i in range(n)]
    return TraceDataset(groups, (p1, p2, p1, p2))


def gen_equicorr(s):
    """Equicorrelated-noise design: y_i ~ N(X_i b, Lambda_alpha), Z := X."""
    rng = np.random.default_rng(s.seed)
    truth = _equicorr_truth(s, rng)
    return _equicorr_dataset(s, truth, rng), truth


def rel_err(est, truth):
    """Relative Frobenius error ||est - truth||_F / ||truth||_F."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValueError("shape mismatch: %r vs %r" % (est.shape, truth.shape))
    denom = float(np.linalg.norm(truth))
    if denom == 0.0:
        raise ZeroTruth("truth has zero Frobenius norm")
    return float(np.linalg.norm(est - truth)) / denom


def _normalized_gram(l, q):
    if l is None or l.shape[1] == 0:
        return np.zeros((q, q))
    s = l @ l.T
    dmax = float(np.max(np.diag(s)))
    if dmax <= 0:
        return np.zeros((q, q))
    return s / dmax


def cov_err(fit_params, truth_params):
    """(err_Sigma1, err_Sigma2) between Grams normalized to unit max diagonal."""
    q1, q2 = truth_params.l1.shape[0], truth_params.l2.shape[0]
    if fit_params.l1.shape[0] != q1 or fit_params.l2.shape[0] != q2:
        raise ValueError("factor row dimensions differ between fit and truth")
    e1 = rel_err(_normalized_gram(fit_params.l1, q1), _normalized_gram(truth_params.l1, q1))
    e2 = rel_err(_normalized_gram(fit_params.l2, q2), _normalized_gram(truth_params.l2, q2))
    return e1, e2


def mspe(y_true, y_pred):
    """Sum of per-group squared prediction errors divided by the group count."""
    if len(y_true) != len(y_pred):
        raise ValueError("group count mismatch")
    if not y_true:
        raise ValueError("no groups")
    sse = 0.0
    for yt, yp in zip(y_true, y_pred):
        yt = np.asarray(yt, dtype=float)
        yp = np.asarray(yp, dtype=float)
        if yt.shape != yp.shape:
            raise ValueError("group shape mismatch")
        r = yt - yp
        sse += float(r @ r)
    return sse / len(y_true)


def r2(y_true, y_pred):
    """Pooled 1 - SSE/SST over all test observations."""
    if len(y_true) != len(y_pred):
        raise ValueError("group count mismatch")
    yt = np.concatenate([np.asarray(v, dtype=float).ravel() for v in y_true])
    yp = np.concatenate([np.asarray(v, dtype=float).ravel() for v in y_pred])
    if yt.shape != yp.shape:
        raise ValueError("pooled shape mismatch")
    sst = float(np.sum((yt - yt.mean()) ** 2))
    if sst == 0.0:
        raise ZeroTruth("test responses are constant")
    sse = float(np.sum((yt - yp) ** 2))
    return 1.0 - sse / sst


def lambda_err(d, fit_params, truth):
    """Mean per-group relative error between fitted and true marginal covariances."""
    errs = []
    for g in d.groups:
        est = fit_params.tau2 * marginal_cov(g, fit_params)
        if truth.params is not None:
            true_block = truth.tau2 * marginal_cov(g, truth.params)
        else:
            true_block = truth.lambda_block
        errs.append(rel_err(est, true_block))
    return float(np.mean(errs))


COLUMNS = [
    "case", "p1", "p2", "q1", "q2", "s1", "s2", "n", "m", "tau2",
    "sparsity_frac", "alpha_lo", "alpha_hi", "base_seed", "rep", "alpha",
    "err_B", "err_Sigma1", "err_Sigma2", "err_Lambda", "mspe", "r2",
    "rank1", "rank2", "runtime_ms", "status",
]

_METRIC_COLUMNS = ["err_B", "err_Sigma1", "err_Sigma2", "err_Lambda", "mspe", "r2"]


@dataclass
class ReplicationTable:
    columns: list
    rows: list  # dicts keyed by column name

    def summary(self):
        """Mean and MC standard deviation of each metric over successful reps."""
        out = {}
        ok = [r for r in self.rows if r["status"] == "ok"]
        for col in _METRIC_COLUMNS:
            vals = np.array([r[col] for r in ok if r[col] != ""], dtype=float)
            if vals.size == 0:
                out[col] = (float("nan"), float("nan"))
            elif vals.size == 1:
                out[col] = (float(vals[0]), float("nan"))
            else:
                out[col] = (float(vals.mean()), float(vals.std(ddof=1)))
        return out

    def to_csv_text(self):
        lines = [",".join(self.columns)]
        for r in self.rows:
            cells = []
            for col in self.columns:
                v = r.get(col, "")
                if isinstance(v, float):
                    cells.append(repr(v))
                else:
                    cells.append(str(v))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _scenario_cells(scenario, base_seed):
    if isinstance(scenario, MmtrScenario):
        p1, p2, q1, q2, s1, s2 = scenario.dims
        return {
            "case": "mmtr", "p1": p1, "p2": p2, "q1": q1, "q2": q2,
            "s1": s1, "s2": s2, "n": scenario.n, "m": scenario.m,
            "tau2": repr(float(scenario.tau2)),
            "sparsity_frac": repr(float(scenario.sparsity_frac)),
            "alpha_lo": "", "alpha_hi": "", "base_seed": base_seed,
        }
    p1, p2 = scenario.dims
    lo, hi = scenario.alpha_range
    return {
        "case": "equicorr", "p1": p1, "p2": p2, "q1": p1, "q2": p2,
        "s1": "", "s2": "", "n": scenario.n, "m": scenario.m,
        "tau2": "", "sparsity_frac": "",
        "alpha_lo": repr(float(lo)), "alpha_hi": repr(float(hi)),
        "base_seed": base_seed,
    }


def _run_one_rep(payload):
    scenario, grid, cfg, base_seed, rep, collect_timings = payload
    row = dict(_scenario_cells(scenario, base_seed))
    row["rep"] = rep
    for col in COLUMNS:
        row.setdefault(col, "")
    rep_seed = base_seed + rep
    rng = np.random.default_rng(rep_seed)
    t0 = time.perf_counter()
    try:
        if isinstance(scenario, MmtrScenario):
            truth = _mmtr_truth(scenario, rng)
            d_train = _mmtr_dataset(scenario, truth, rng)
            d_test = _mmtr_dataset(scenario, truth, rng)
        else:
            truth = _equicorr_truth(scenario, rng)
            d_train = _equicorr_dataset(scenario, truth, rng)
            d_test = _equicorr_dataset(scenario, truth, rng)
            row["alpha"] = repr(float(truth.alpha))
        best, _ = tune(d_train, grid, replace(cfg, seed=rep_seed))
        p = best.params
        row["err_B"] = rel_err(p.b_mat, truth.b_mat)
        if truth.params is not None:
            e1, e2 = cov_err(p, truth.params)
            row["err_Sigma1"], row["err_Sigma2"] = e1, e2
        row["err_Lambda"] = lambda_err(d_train, p, truth)
        y_true = [g.y for g in d_test.groups]
        y_pred = [g.x_rows @ p.b_vec for g in d_test.groups]
        row["mspe"] = mspe(y_true, y_pred)
        row["r2"] = r2(y_true, y_pred)
        row["rank1"], row["rank2"] = best.selected_ranks
        row["status"] = "ok"
    except Exception as exc:
        row["status"] = "failed: %s" % type(exc).__name__
    row["runtime_ms"] = (time.perf_counter() - t0) * 1000.0 if collect_timings else 0.0
    return row


def run_replications(scenario, grid, reps, seed, cfg=None, jobs=1, collect_timings=False):
    """Tune + fit `reps` seeded replications; failures are recorded per row."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if cfg is None:
        cfg = FitConfig(lambda_b=0.0, lambda_l=0.0)
    payloads = [(scenario, grid, cfg, seed, r, collect_timings) for r in range(reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_one_rep, payloads, chunksize=1))
    else:
        rows = [_run_one_rep(p) for p in payloads]
    return ReplicationTable(columns=list(COLUMNS), rows=rows)
