"""Penalized least-squares engines: lasso, scaled lasso, and column-group lasso.

All three solvers are deterministic: fixed ascending sweep order, no
randomized pivoting.  Each accepts an optional ``trace`` list that receives
the objective value after every outer iteration (used by monotonicity tests)
and an optional warm-start ``init`` vector.
"""

import numpy as np
from dataclasses import dataclass


class DegenerateResidual(ValueError):
    """Scaled lasso residual collapsed: response is interpolated exactly."""


@dataclass
class LassoProblem:
    design: np.ndarray  # (N, P)
    response: np.ndarray  # (N,)
    penalty: float  # lambda >= 0

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=float)
        self.response = np.asarray(self.response, dtype=float)
        if self.design.ndim != 2 or self.design.shape[0] != self.response.size:
            raise ValueError("design rows must match response length")
        if self.penalty < 0:
            raise ValueError("penalty must be >= 0")


@dataclass
class GroupLassoProblem:
    sqrt_factor: np.ndarray  # (r, d) design; d = group_size * n_groups
    target: np.ndarray  # (r,)
    group_size: int
    n_groups: int
    penalty: float  # lambda >= 0

    def __post_init__(self):
        self.sqrt_factor = np.asarray(self.sqrt_factor, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        if self.sqrt_factor.shape[1] != self.group_size * self.n_groups:
            raise ValueError("sqrt_factor columns must equal group_size * n_groups")
        if self.sqrt_factor.shape[0] != self.target.size:
            raise ValueError("target length must equal sqrt_factor rows")
        if self.penalty < 0:
            raise ValueError("penalty must be >= 0")


@dataclass
class SolverOptions:
    max_iter: int = 1000
    tol: float = 1e-10  # relative objective change
    seed: int = 0  # interface stability; current solvers are deterministic

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


def _soft(x, t):
    return np.sign(x) * max(abs(x) - t, 0.0)


def lasso_objective(p, b):
    r = p.response - p.design @ b
    n = max(p.response.size, 1)
    return 0.5 * float(r @ r) / n + p.penalty * float(np.sum(np.abs(b)))


def lasso_cd(p, opts=None, init=None, trace=None):
    """Cyclic coordinate descent for ||y - X b||^2 / (2N) + lambda ||b||_1.

    Returns (b, converged).  Zero-variance design columns keep coefficient 0.
    """
    if opts is None:
        opts = SolverOptions()
    n, nf = p.design.shape
    n = max(n, 1)
    gram = p.design.T @ p.design / n
    cvec = p.design.T @ p.response / n
    diag = np.diag(gram).copy()
    active = diag > 0.0
    b = np.zeros(nf) if init is None else np.asarray(init, dtype=float).copy()
    b[~active] = 0.0
    yy = 0.5 * float(p.response @ p.response) / n
    lam = p.penalty
    gb = gram @ b  # maintained incrementally across coordinate updates

    def obj(bv, gbv):
        return (
            0.5 * float(bv @ gbv) - float(cvec @ bv) + yy + lam * float(np.sum(np.abs(bv)))
        )

    def kkt_violation(bv, gbv):
        grad = gbv - cvec
        nz = active & (bv != 0.0)
        z = active & (bv == 0.0)
        viol = 0.0
        if np.any(z):
            viol = max(viol, float(np.max(np.abs(grad[z]))) - lam)
        if np.any(nz):
            viol = max(viol, float(np.max(np.abs(grad[nz] + lam * np.sign(bv[nz])))))
        return viol

    prev = obj(b, gb)
    if trace is not None:
        trace.append(prev)
    converged = False
    idx = [int(j) for j in np.flatnonzero(active)]
    for _ in range(opts.max_iter):
        for j in idx:
            bj = b[j]
            gj = cvec[j] - gb[j] + diag[j] * bj
            new = _soft(gj, lam) / diag[j]
            if new != bj:
                b[j] = new
                gb += (new - bj) * gram[j]
        cur = obj(b, gb)
        if trace is not None:
            trace.append(cur)
        if abs(prev - cur) <= opts.tol * max(1.0, abs(cur)):
            gb = gram @ b  # refresh accumulated roundoff before the KKT check
            if kkt_violation(b, gb) <= 10.0 * opts.tol:
                converged = True
                break
        prev = cur
    return b, converged


def scaled_lasso(p, opts=None, trace=None):
    """Alternating minimization of ||y - X b||^2 / (2 N tau) + tau/2 + lambda ||b||_1.

    Starts at b = 0, tau = SD(response); alternates a lasso solve with
    effective penalty lambda * tau and the residual update
    tau <- ||y - X b|| / sqrt(N).  Returns (b, tau, converged).
    """
    if opts is None:
        opts = SolverOptions()
    y = p.response
    n = max(y.size, 1)
    tau = float(np.std(y))
    if tau <= 1e-12:
        raise DegenerateResidual("response has (numerically) zero variance")
    b = np.zeros(p.design.shape[1])

    def obj(bv, tv):
        r = y - p.design @ bv
        return float(r @ r) / (2.0 * n * tv) + 0.5 * tv + p.penalty * float(
            np.sum(np.abs(bv))
        )

    if trace is not None:
        trace.append(obj(b, tau))
    converged = False
    inner = SolverOptions(max_iter=opts.max_iter, tol=min(opts.tol, 1e-9))
    for _ in range(opts.max_iter):
        sub = LassoProblem(p.design, y, p.penalty * tau)
        b, _ = lasso_cd(sub, inner, init=b)
        r = y - p.design @ b
        tau_new = float(np.linalg.norm(r)) / np.sqrt(n)
        if tau_new < 1e-12:
            raise DegenerateResidual("residual collapsed below 1e-12")
        if trace is not None:
            trace.append(obj(b, tau_new))
        if abs(tau_new - tau) <= opts.tol * tau:
            tau = tau_new
            converged = True
            break
        tau = tau_new
    return b, tau, converged


def group_lasso_objective(p, l):
    r = p.target - p.sqrt_factor @ l
    pen = 0.0
    for g in range(p.n_groups):
        seg = l[g * p.group_size : (g + 1) * p.group_size]
        pen += float(np.linalg.norm(seg))
    return float(r @ r) + p.penalty * pen


def group_lasso(p, opts=None, init=None, trace=None):
    """Block coordinate descent for ||t - A l||^2 + lambda sum_g ||l_g||_2.

    Groups are contiguous slices of size group_size.  Each block update is the
    exact minimizer when the block Gram is a scaled identity, otherwise one
    Lipschitz-majorized proximal step.  Returns (l, converged).
    """
    if opts is None:
        opts = SolverOptions()
    a = p.sqrt_factor
    d = p.group_size * p.n_groups
    if p.penalty == 0.0:
        # unpenalized: minimum-norm least squares
        l, *_ = np.linalg.lstsq(a, p.target, rcond=None)
        if trace is not None:
            trace.append(group_lasso_objective(p, l))
        return l, True
    gram = a.T @ a
    h = a.T @ p.target
    q = p.group_size
    lam = p.penalty
    l = np.zeros(d) if init is None else np.asarray(init, dtype=float).copy()
    # per-block step sizes: Lipschitz constant of the block gradient 2*G_gg
    lips = np.empty(p.n_groups)
    scaled_id = np.empty(p.n_groups, dtype=bool)
    for g in range(p.n_groups):
        blk = gram[g * q : (g + 1) * q, g * q : (g + 1) * q]
        alpha = float(np.trace(blk)) / q
        off = float(np.max(np.abs(blk - alpha * np.eye(q)))) if q > 0 else 0.0
        scaled_id[g] = off <= 1e-12 * max(1.0, abs(alpha))
        lips[g] = 2.0 * (alpha if scaled_id[g] else float(np.linalg.eigvalsh(blk)[-1]))

    def obj(lv):
        pen = sum(
            float(np.linalg.norm(lv[g * q : (g + 1) * q])) for g in range(p.n_groups)
        )
        return float(lv @ gram @ lv) - 2.0 * float(h @ lv) + float(
            p.target @ p.target
        ) + lam * pen

    prev = obj(l)
    if trace is not None:
        trace.append(prev)
    converged = False
    for _ in range(opts.max_iter):
        for g in range(p.n_groups):
            sl = slice(g * q, (g + 1) * q)
            if lips[g] <= 0.0:
                l[sl] = 0.0
                continue
            grad = 2.0 * (gram[sl] @ l - h[sl])
            if scaled_id[g]:
                # exact block minimizer: shrink the unconstrained block solution
                w = grad - lips[g] * l[sl]  # = 2*(coupling - h), block part removed
                wn = float(np.linalg.norm(w))
                shrink = max(0.0, 1.0 - lam / wn) if wn > 0 else 0.0
                l[sl] = -(shrink / lips[g]) * w
            else:
                u = l[sl] - grad / lips[g]
                un = float(np.linalg.norm(u))
                shrink = max(0.0, 1.0 - lam / (lips[g] * un)) if un > 0 else 0.0
                l[sl] = shrink * u
        cur = obj(l)
        if trace is not None:
            trace.append(cur)
        if abs(prev - cur) <= opts.tol * max(1.0, abs(cur)):
            if _group_kkt_violation(gram, h, l, q, p.n_groups, lam) <= 10.0 * opts.tol:
                converged = True
                break
        prev = cur
    return l, converged


def _group_kkt_violation(gram, h, l, q, n_groups, lam):
    viol = 0.0
    grad = 2.0 * (gram @ l - h)
    for g in range(n_groups):
        seg = l[g * q : (g + 1) * q]
        gseg = grad[g * q : (g + 1) * q]
        nrm = float(np.linalg.norm(seg))
        if nrm == 0.0:
            viol = max(viol, float(np.linalg.norm(gseg)) - lam)
        else:
            viol = max(viol, float(np.linalg.norm(gseg + lam * seg / nrm)))
    return viol
