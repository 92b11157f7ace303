"""Independent reference implementations used to check the package.

Everything here is written directly from the probability/optimization
definitions using dense linear algebra (explicit Kronecker products,
full covariance assembly, proximal-gradient iterations), deliberately
avoiding the package's own computational shortcuts.
"""

import numpy as np


# ------------------------------------------------------------------ lasso


def lasso_objective(x, y, lam, b):
    r = y - x @ b
    n = max(x.shape[0], 1)
    return 0.5 * float(r @ r) / n + lam * float(np.sum(np.abs(b)))


def ista_lasso(x, y, lam, n_iter=50000, tol=1e-15):
    """Proximal gradient on ||y - Xb||^2/(2N) + lam * ||b||_1."""
    n, p = x.shape
    b = np.zeros(p)
    if p == 0:
        return b
    lips = np.linalg.eigvalsh(x.T @ x / n)[-1]
    if lips <= 0:
        return b
    step = 1.0 / lips
    prev = lasso_objective(x, y, lam, b)
    for _ in range(n_iter):
        grad = x.T @ (x @ b - y) / n
        v = b - step * grad
        b = np.sign(v) * np.maximum(np.abs(v) - step * lam, 0.0)
        cur = lasso_objective(x, y, lam, b)
        if abs(prev - cur) <= tol * max(1.0, abs(cur)):
            break
        prev = cur
    return b


def scaled_lasso_objective(x, y, lam, b, tau):
    r = y - x @ b
    n = max(x.shape[0], 1)
    return float(r @ r) / (2.0 * n * tau) + tau / 2.0 + lam * float(np.sum(np.abs(b)))


def golden_scaled_lasso(x, y, lam, lo=None, hi=None, n_iter=200):
    """Golden-section search on the profiled scaled-lasso objective
    h(tau) = min_b ||y-Xb||^2/(2 N tau) + tau/2 + lam ||b||_1."""
    sd = float(np.std(y))

    def h(tau):
        b = ista_lasso(x, y, lam * tau, n_iter=20000)
        return scaled_lasso_objective(x, y, lam, b, tau)

    a = lo if lo is not None else sd * 1e-3
    d = hi if hi is not None else sd * 4.0 + 1.0
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = d - invphi * (d - a)
    e = a + invphi * (d - a)
    fc, fe = h(c), h(e)
    for _ in range(n_iter):
        if d - a < 1e-12 * max(1.0, d):
            break
        if fc < fe:
            d, e, fe = e, c, fc
            c = d - invphi * (d - a)
            fc = h(c)
        else:
            a, c, fc = c, e, fe
            e = a + invphi * (d - a)
            fe = h(e)
    tau = 0.5 * (a + d)
    return tau, h(tau)


# ------------------------------------------------------------ group lasso


def group_objective(a, t, q, n_groups, lam, l):
    r = t - a @ l
    pen = sum(float(np.linalg.norm(l[g * q : (g + 1) * q])) for g in range(n_groups))
    return float(r @ r) + lam * pen


def ista_group(a, t, q, n_groups, lam, n_iter=50000, tol=1e-15):
    """Proximal gradient on ||t - A l||^2 + lam * sum_g ||l_g||."""
    d = a.shape[1]
    l = np.zeros(d)
    if d == 0:
        return l
    lips = 2.0 * np.linalg.eigvalsh(a.T @ a)[-1]
    if lips <= 0:
        return l
    step = 1.0 / lips
    prev = group_objective(a, t, q, n_groups, lam, l)
    for _ in range(n_iter):
        grad = 2.0 * (a.T @ (a @ l - t))
        v = l - step * grad
        for g in range(n_groups):
            sl = slice(g * q, (g + 1) * q)
            nrm = float(np.linalg.norm(v[sl]))
            if nrm <= step * lam:
                v[sl] = 0.0
            else:
                v[sl] *= 1.0 - step * lam / nrm
        l = v
        cur = group_objective(a, t, q, n_groups, lam, l)
        if abs(prev - cur) <= tol * max(1.0, abs(cur)):
            break
        prev = cur
    return l


# ------------------------------------------------- dense likelihood oracle


def dense_group_cov(z_rows_1, l1, l2, tau2):
    """tau2 * (Z_(1) (Sigma2 kron Sigma1) Z_(1)' + I) by explicit assembly."""
    s1 = l1 @ l1.T
    s2 = l2 @ l2.T
    k = np.kron(s2, s1)
    m = z_rows_1.shape[0]
    return tau2 * (z_rows_1 @ k @ z_rows_1.T + np.eye(m))


def dense_nll(groups, b_vec, l1, l2, tau2):
    """-log density of y under the marginal Gaussian, assembled densely.

    `groups` is a list of (y, x_rows, z_rows_1) triples.
    """
    total = 0.0
    for y, x_rows, z_rows_1 in groups:
        cov = dense_group_cov(z_rows_1, l1, l2, tau2)
        r = y - x_rows @ b_vec
        m = y.size
        sign, logdet = np.linalg.slogdet(cov)
        assert sign > 0
        total += 0.5 * (m * np.log(2.0 * np.pi) + logdet + float(r @ np.linalg.solve(cov, r)))
    return total


# -------------------------------------------------- conditioning oracle


def conditional_moments(y, x_rows, z_rows, b_vec, l1, l2, tau2, orientation):
    """Posterior mean/covariance of the vectorized latent matrix via the
    explicit joint-Gaussian block covariance of (c, y)."""
    lk = np.kron(l2, l1) if orientation == 1 else np.kron(l1, l2)
    w = z_rows @ lk  # (m, S)
    m, s = w.shape
    cov_y = tau2 * (w @ w.T + np.eye(m))
    cross = tau2 * w.T  # Cov(c, y), S x m
    r = y - x_rows @ b_vec
    sol = np.linalg.solve(cov_y, np.eye(m))
    mu = cross @ sol @ r
    sigma = tau2 * np.eye(s) - cross @ sol @ cross.T
    return mu, sigma


# ------------------------------------------------------ CM quadratic oracle


def dense_cycle_quad(groups, b_vec, l1, l2, tau2, orientation, l_test):
    """E[sum residual-squared] terms that depend on the factor being updated.

    For orientation 1 the varying factor is L1 and the latent vector is
    vec(C') with rows of Z supplied transposed; orientation 2 mirrors it.
    Returns sum_ij (-2 ytilde_ij w_ij' mu_i + w_ij' Gamma_i w_ij) with
    w rows built from the *test* factor, moments from the current one.
    `groups` is a list of (y, x_rows, z_rows_1, z_rows_2).
    """
    total = 0.0
    for y, x_rows, z_rows_1, z_rows_2 in groups:
        if orientation == 1:
            zr = z_rows_2
            mu, sigma = conditional_moments(y, x_rows, zr, b_vec, l1, l2, tau2, 2)
            w_test = zr @ np.kron(l_test, l2)
        else:
            zr = z_rows_1
            mu, sigma = conditional_moments(y, x_rows, zr, b_vec, l1, l2, tau2, 1)
            w_test = zr @ np.kron(l_test, l1)
        gamma = sigma + np.outer(mu, mu)
        r = y - x_rows @ b_vec
        total += -2.0 * float(r @ (w_test @ mu)) + float(np.trace(w_test @ gamma @ w_test.T))
    return total
