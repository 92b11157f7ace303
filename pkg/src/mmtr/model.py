"""Grouped trace-regression data model and its likelihood machinery.

The model: for group i and observation j,

    y_ij = tr(X_ij' B) + tr(Z_ij' L1 C_i L2') + e_ij,

with C_i a latent S1 x S2 matrix whose entries are iid N(0, tau2) and
e_ij ~ N(0, tau2).  Marginally Cov(y_i) = tau2 * Lambda_i with
Lambda_i = Z_i(1) K K' Z_i(1)' + I and K = kron(L2, L1).

Vectorized forms use column-stacking vec; the latent vector orientation is
vec(C_i) ("orientation 1", pairs with kron(L2, L1)) or vec(C_i')
("orientation 2", pairs with kron(L1, L2)).
"""

import numpy as np
from dataclasses import dataclass, field

from .numerics import kron, vec, vec_transpose_perm


class UnknownGroup(KeyError):
    """Conditional prediction asked for a group absent from the training data."""


@dataclass
class GroupData:
    """One group's responses and row-vectorized covariates."""

    group_id: str
    y: np.ndarray  # (m,)
    x_rows: np.ndarray  # (m, P1*P2), row j = vec(X_ij)
    z_rows_1: np.ndarray  # (m, Q1*Q2), row j = vec(Z_ij)
    z_rows_2: np.ndarray  # (m, Q1*Q2), row j = vec(Z_ij')

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.x_rows = np.asarray(self.x_rows, dtype=float)
        self.z_rows_1 = np.asarray(self.z_rows_1, dtype=float)
        self.z_rows_2 = np.asarray(self.z_rows_2, dtype=float)
        m = self.y.size
        if m == 0:
            raise ValueError("group %r is empty" % self.group_id)
        for name in ("x_rows", "z_rows_1", "z_rows_2"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != m:
                raise ValueError("%s of group %r has %r rows, want %d" % (name, self.group_id, arr.shape, m))


def make_group(group_id, y, x_rows, z_rows_1, q1, q2):
    """Build a GroupData, deriving the transposed-covariate rows from z_rows_1."""
    z1 = np.asarray(z_rows_1, dtype=float)
    perm = vec_transpose_perm(q1, q2)
    return GroupData(str(group_id), y, x_rows, z1, z1[:, perm])


@dataclass
class TraceDataset:
    """All groups plus cached stacked views used by the batched computations."""

    groups: list
    dims: tuple  # (P1, P2, Q1, Q2)

    def __post_init__(self):
        p1, p2, q1, q2 = self.dims
        if not self.groups:
            raise ValueError("dataset has no groups")
        perm = vec_transpose_perm(q1, q2)
        for g in self.groups:
            if g.x_rows.shape[1] != p1 * p2:
                raise ValueError("x_rows width %d != P1*P2=%d" % (g.x_rows.shape[1], p1 * p2))
            if g.z_rows_1.shape[1] != q1 * q2 or g.z_rows_2.shape[1] != q1 * q2:
                raise ValueError("z_rows width mismatch with Q1*Q2=%d" % (q1 * q2))
            if not np.array_equal(g.z_rows_1[:, perm], g.z_rows_2):
                raise ValueError("z_rows_2 of group %r is not the transpose-vectorization of z_rows_1" % g.group_id)
        self.sizes = np.array([g.y.size for g in self.groups], dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.n_groups = len(self.groups)
        self.n_obs = int(self.offsets[-1])
        self.y_all = np.concatenate([g.y for g in self.groups])
        self.x_all = np.vstack([g.x_rows for g in self.groups])
        z1_all = np.vstack([g.z_rows_1 for g in self.groups])
        # z3d[n] is the Q1 x Q2 matrix Z_n (undoing the column-stacking)
        self.z3d = np.ascontiguousarray(
            z1_all.reshape(self.n_obs, q2, q1).transpose(0, 2, 1)
        )
        # groups bucketed by size m: (m, group indices, (nb, m) row-index array)
        self.m_buckets = []
        for m in np.unique(self.sizes):
            gidx = np.flatnonzero(self.sizes == m)
            rows = self.offsets[gidx][:, None] + np.arange(m)[None, :]
            self.m_buckets.append((int(m), gidx, rows))


def dataset_from_stacked(group_ids, y, x, z, dims):
    """Assemble a TraceDataset from per-observation rows (any group order)."""
    p1, p2, q1, q2 = dims
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    order = {}
    for gid in group_ids:
        order.setdefault(str(gid), len(order))
    rows_by_gid = {gid: [] for gid in order}
    for i, gid in enumerate(group_ids):
        rows_by_gid[str(gid)].append(i)
    groups = []
    for gid in order:
        idx = np.array(rows_by_gid[gid], dtype=int)
        groups.append(make_group(gid, y[idx], x[idx], z[idx], q1, q2))
    return TraceDataset(groups, (p1, p2, q1, q2))


@dataclass
class ModelParams:
    """theta = (B, L1, L2, tau2); Sigma_k = L_k L_k'."""

    b_mat: np.ndarray  # (P1, P2)
    l1: np.ndarray  # (Q1, S1)
    l2: np.ndarray  # (Q2, S2)
    tau2: float

    def __post_init__(self):
        self.b_mat = np.atleast_2d(np.asarray(self.b_mat, dtype=float))
        self.l1 = np.asarray(self.l1, dtype=float).reshape(self.l1.shape[0], -1)
        self.l2 = np.asarray(self.l2, dtype=float).reshape(self.l2.shape[0], -1)
        if not (self.tau2 > 0):
            raise ValueError("tau2 must be > 0")
        for l in (self.l1, self.l2):
            if l.shape[1] > l.shape[0]:
                raise ValueError("factor has more columns than rows: %r" % (l.shape,))
        for arr in (self.b_mat, self.l1, self.l2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite parameter entries")

    @property
    def b_vec(self):
        return vec(self.b_mat)

    @property
    def ranks(self):
        r1 = int(np.count_nonzero(np.linalg.norm(self.l1, axis=0) > 0))
        r2 = int(np.count_nonzero(np.linalg.norm(self.l2, axis=0) > 0))
        return r1, r2


@dataclass
class PosteriorMoments:
    """Conditional mean/covariance of the vectorized latent matrix given y."""

    mu: np.ndarray  # (S1*S2,)
    sigma: np.ndarray  # (S1*S2, S1*S2)
    gamma: np.ndarray  # sigma + mu mu'
    orientation: int


@dataclass
class CycleSystem:
    """Quadratic pair (H, g): -Q(l) = l'Hl - 2g'l + const for one CM step."""

    h: np.ndarray
    g: np.ndarray
    orientation: int


def _w_stack(d, p, orientation):
    """Rows of Z_(k) kron-factor products: W[n] = vec(L1' Z_n L2) (orientation 1)
    or vec(L2' Z_n' L1) (orientation 2), without materializing the Kronecker
    factor."""
    if orientation == 1:
        t = np.einsum("nqr,qa,rb->nab", d.z3d, p.l1, p.l2)
    elif orientation == 2:
        t = np.einsum("nqr,ra,qb->nab", d.z3d, p.l2, p.l1)
    else:
        raise ValueError("orientation must be 1 or 2")
    nn, arows, bcols = t.shape
    return t.transpose(0, 2, 1).reshape(nn, arows * bcols)


def marginal_cov(g, p):
    """Lambda_i = Z_i(1) (Sigma2 kron Sigma1) Z_i(1)' + I (noise variance factored out)."""
    q1, q2 = p.l1.shape[0], p.l2.shape[0]
    m = g.y.size
    z3 = g.z_rows_1.reshape(m, q2, q1).transpose(0, 2, 1)
    t = np.einsum("mqr,qa,rb->mab", z3, p.l1, p.l2)
    w = t.transpose(0, 2, 1).reshape(m, -1)
    return w @ w.T + np.eye(m)


def whiten(g, p):
    """Return (Lambda^{-1/2} y, Lambda^{-1/2} X) using the symmetric square root."""
    lam = marginal_cov(g, p)
    evals, evecs = np.linalg.eigh(lam)
    isq = (evecs * evals**-0.5) @ evecs.T
    return isq @ g.y, isq @ g.x_rows


def _whiten_all(d, p):
    """Whiten every group; returns stacked (y_w, x_w) plus per-group logdet(Lambda_i)."""
    w = _w_stack(d, p, 1)
    yw = np.empty(d.n_obs)
    xw = np.empty_like(d.x_all)
    logdets = np.empty(d.n_groups)
    pwidth = d.x_all.shape[1]
    for m, gidx, rows in d.m_buckets:
        wb = w[rows]  # (nb, m, S)
        lam = wb @ wb.transpose(0, 2, 1) + np.eye(m)
        evals, evecs = np.linalg.eigh(lam)
        isq = (evecs * (evals**-0.5)[:, None, :]) @ evecs.transpose(0, 2, 1)
        yw[rows] = (isq @ d.y_all[rows][..., None])[..., 0]
        xw[rows.reshape(-1)] = (isq @ d.x_all[rows]).reshape(-1, pwidth)
        logdets[gidx] = np.sum(np.log(evals), axis=1)
    return yw, xw, logdets


def _segment_sum(arr, d):
    return np.add.reduceat(arr, d.offsets[:-1], axis=0)


def neg_log_lik(d, p):
    """-log N(y; Xb, tau2 * Lambda) summed over groups, with constants."""
    w = _w_stack(d, p, 1)
    resid = d.y_all - d.x_all @ p.b_vec
    rss_per_group = _segment_sum(resid * resid, d)
    s = w.shape[1]
    if s == 0:
        quad = rss_per_group
        logdets = np.zeros(d.n_groups)
    else:
        wtw = _segment_sum(np.einsum("np,nq->npq", w, w), d)
        a = wtw + np.eye(s)
        v = _segment_sum(w * resid[:, None], d)
        sol = np.linalg.solve(a, v[..., None])[..., 0]
        quad = rss_per_group - np.einsum("ip,ip->i", v, sol)
        logdets = np.linalg.slogdet(a)[1]
    n = d.n_obs
    return float(
        0.5 * n * np.log(2.0 * np.pi)
        + 0.5 * n * np.log(p.tau2)
        + 0.5 * np.sum(logdets)
        + np.sum(quad) / (2.0 * p.tau2)
    )


def posterior_moments(g, p, b_vec, orientation):
    """E-step moments of vec(C_i) (orientation 1) or vec(C_i') (orientation 2)."""
    lk = kron(p.l2, p.l1) if orientation == 1 else kron(p.l1, p.l2)
    zr = g.z_rows_1 if orientation == 1 else g.z_rows_2
    w = zr @ lk
    resid = g.y - g.x_rows @ b_vec
    s = w.shape[1]
    a = np.eye(s) + w.T @ w
    ainv = np.linalg.inv(a)
    ainv = 0.5 * (ainv + ainv.T)
    mu = ainv @ (w.T @ resid)
    sigma = p.tau2 * ainv
    gamma = sigma + np.outer(mu, mu)
    return PosteriorMoments(mu=mu, sigma=sigma, gamma=gamma, orientation=orientation)


def _moments_all(d, p, b_vec, orientation):
    """Batched posterior moments for every group: (mu, gamma, resid) stacks."""
    w = _w_stack(d, p, orientation)
    resid = d.y_all - d.x_all @ b_vec
    s = w.shape[1]
    if s == 0:
        return np.zeros((d.n_groups, 0)), np.zeros((d.n_groups, 0, 0)), resid
    wtw = _segment_sum(np.einsum("np,nq->npq", w, w), d)
    a = wtw + np.eye(s)
    v = _segment_sum(w * resid[:, None], d)
    ainv = np.linalg.inv(a)
    ainv = 0.5 * (ainv + ainv.transpose(0, 2, 1))
    mu = np.einsum("ipq,iq->ip", ainv, v)
    gamma = p.tau2 * ainv + mu[:, :, None] * mu[:, None, :]
    return mu, gamma, resid


def build_cycle_system(d, p, b_vec, orientation):
    """Assemble (H, g) for the CM update of L1 (orientation 1) or L2 (orientation 2).

    Uses the posterior moments of the opposite orientation, so that the
    latent blocks line up with the columns of the factor being updated.
    """
    if orientation == 1:
        u = d.z3d @ p.l2  # (N, Q1, S2)
        sk = p.l1.shape[1]
    elif orientation == 2:
        u = np.ascontiguousarray(d.z3d.transpose(0, 2, 1)) @ p.l1  # (N, Q2, S1)
        sk = p.l2.shape[1]
    else:
        raise ValueError("orientation must be 1 or 2")
    qk, s_oth = u.shape[1], u.shape[2]
    dsize = qk * sk
    mu, gamma, resid = _moments_all(d, p, b_vec, 3 - orientation)
    if sk == 0 or s_oth == 0:
        return CycleSystem(h=np.zeros((dsize, dsize)), g=np.zeros(dsize), orientation=orientation)
    ksum = _segment_sum(np.einsum("nqs,nrt->nqsrt", u, u), d)
    gam5 = gamma.reshape(d.n_groups, sk, s_oth, sk, s_oth)
    h = np.einsum("iqsrt,iasbt->aqbr", ksum, gam5).reshape(dsize, dsize)
    h = 0.5 * (h + h.T)
    msum = _segment_sum(resid[:, None, None] * d.z3d, d)
    if orientation == 1:
        vz = msum @ p.l2  # (n, Q1, S2)
    else:
        vz = msum.transpose(0, 2, 1) @ p.l1  # (n, Q2, S1)
    g = np.einsum("iqs,ias->aq", vz, mu.reshape(d.n_groups, sk, s_oth)).reshape(dsize)
    return CycleSystem(h=h, g=g, orientation=orientation)


def objective(d, p, lambda_b, lambda_l, tau_hat=None):
    """Penalized negative log-likelihood.

    The mean penalty is N * lambda_b * ||vec(B)||_1 / tau_hat (the scaling
    under which the whitened lasso step and the likelihood agree); tau_hat
    defaults to the current noise SD and can be pinned by the caller so one
    fixed function is tracked across a whole fit.
    """
    if tau_hat is None:
        tau_hat = float(np.sqrt(p.tau2))
    pen_b = d.n_obs * lambda_b * float(np.sum(np.abs(p.b_mat))) / tau_hat
    pen_l = lambda_l * (
        float(np.sum(np.linalg.norm(p.l1, axis=0))) + float(np.sum(np.linalg.norm(p.l2, axis=0)))
    )
    return neg_log_lik(d, p) + pen_b + pen_l


def predict(d, p, mode, train=None):
    """Per-group predictions: marginal X b, or conditional X b + Z K mu (BLUP).

    Conditional moments are computed from ``train`` (defaults to ``d``
    itself); unknown group ids raise UnknownGroup.
    """
    b = p.b_vec
    if mode == "marginal":
        return [g.x_rows @ b for g in d.groups]
    if mode != "conditional":
        raise ValueError("mode must be 'marginal' or 'conditional'")
    src = train if train is not None else d
    lookup = {g.group_id: g for g in src.groups}
    lk1 = kron(p.l2, p.l1)
    out = []
    for g in d.groups:
        tg = lookup.get(g.group_id)
        if tg is None:
            raise UnknownGroup(g.group_id)
        mom = posterior_moments(tg, p, b, 1)
        out.append(g.x_rows @ b + g.z_rows_1 @ (lk1 @ mom.mu))
    return out
