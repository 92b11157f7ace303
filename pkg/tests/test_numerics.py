import numpy as np
import pytest

from mmtr.numerics import (
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


def test_vec_column_stacking():
    assert list(vec(np.array([[1.0, 3.0], [2.0, 4.0]]))) == [1.0, 2.0, 3.0, 4.0]


def test_unvec_round_trip():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((3, 4))
    assert np.array_equal(unvec(vec(m), 3, 4), m)


def test_unvec_size_mismatch():
    with pytest.raises(ValueError):
        unvec(np.zeros(5), 2, 3)


def test_trace_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3))
    b = rng.standard_normal((4, 3))
    assert np.trace(x.T @ b) == pytest.approx(float(vec(x) @ vec(b)), abs=1e-12)


def test_vec_transpose_perm():
    rng = np.random.default_rng(2)
    for rows, cols in [(3, 2), (1, 4), (5, 5), (2, 6)]:
        m = rng.standard_normal((rows, cols))
        p = vec_transpose_perm(rows, cols)
        assert np.array_equal(vec(m.T), vec(m)[p])


def test_kron_identity_and_scalar():
    assert np.array_equal(kron(np.eye(2), np.eye(3)), np.eye(6))
    b = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(kron(np.array([[2.0]]), b), 2.0 * b)


def test_kron_vec_identity():
    rng = np.random.default_rng(3)
    l1 = rng.standard_normal((4, 2))
    c = rng.standard_normal((2, 3))
    l2 = rng.standard_normal((5, 3))
    lhs = vec(l1 @ c @ l2.T)
    rhs = kron(l2, l1) @ vec(c)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_kron_bilinearity():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal((2, 4))
        alpha = float(rng.standard_normal())
        assert np.allclose(kron(alpha * a, b), alpha * kron(a, b), rtol=1e-12, atol=1e-12)


def test_kron_vec_identity_many_shapes():
    rng = np.random.default_rng(5)
    for _ in range(100):
        p, q, r = rng.integers(1, 5, size=3)
        pmat = rng.standard_normal((p, q))
        qmat = rng.standard_normal((q, r))
        rmat = rng.standard_normal((p + 1, r))
        lhs = vec(pmat @ qmat @ rmat.T)
        rhs = kron(rmat, pmat) @ vec(qmat)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_psd_sqrt_identity():
    s = psd_sqrt(np.eye(3))
    assert isinstance(s, PsdSqrt)
    assert s.rank == 3
    assert np.allclose(s.factor @ s.factor.T, np.eye(3), atol=1e-12)


def test_psd_sqrt_low_rank():
    rng = np.random.default_rng(6)
    l = rng.standard_normal((5, 2))
    a = l @ l.T
    s = psd_sqrt(a)
    assert s.rank == 2
    assert np.allclose(s.factor @ s.factor.T, a, atol=s.tolerance_used + 1e-12)


def test_psd_sqrt_diagonal():
    s = psd_sqrt(np.diag([4.0, 0.0, 1.0]))
    assert s.rank == 2
    assert np.allclose(s.factor @ s.factor.T, np.diag([4.0, 0.0, 1.0]), atol=1e-12)


def test_psd_sqrt_reconstruction_property():
    rng = np.random.default_rng(7)
    for _ in range(25):
        d = int(rng.integers(1, 7))
        r = int(rng.integers(0, d + 1))
        l = rng.standard_normal((d, r))
        a = l @ l.T
        s = psd_sqrt(a)
        err = np.linalg.norm(s.factor @ s.factor.T - a)
        assert err <= max(s.tolerance_used, 1e-10) * max(1.0, np.linalg.norm(a)) + 1e-12


def test_psd_sqrt_rejects_asymmetric():
    with pytest.raises(NotSymmetric):
        psd_sqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_psd_sqrt_rejects_negative():
    with pytest.raises(NotPsd):
        psd_sqrt(np.diag([1.0, -0.5]))


def test_pinv_factor_identity():
    s = psd_sqrt(np.eye(4))
    assert np.allclose(pinv_factor(s), np.eye(4), atol=1e-12)


def test_pinv_factor_moore_penrose():
    rng = np.random.default_rng(8)
    l = rng.standard_normal((6, 3))
    s = psd_sqrt(l @ l.T)
    f, g = s.factor, pinv_factor(s)
    assert np.allclose(f @ g @ f, f, atol=1e-10)
    assert np.allclose(g @ f @ g, g, atol=1e-10)
    proj = g @ f
    assert np.allclose(proj, proj.T, atol=1e-10)
    assert np.allclose(proj @ proj, proj, atol=1e-10)
    v = f @ rng.standard_normal(s.rank)  # in the column space
    assert np.allclose(f @ (g @ v), v, atol=1e-10)


def test_householder_row_already_e1():
    l = np.array([[1.0, 0.0], [0.3, -0.7], [0.2, 0.5]])
    out, scale = householder_normalize(l, 0)
    assert scale == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(out[0], [1.0, 0.0], atol=1e-14)
    assert np.allclose(out @ out.T, l @ l.T, atol=1e-12)


def test_householder_random_row():
    rng = np.random.default_rng(9)
    l = rng.standard_normal((4, 2))
    out, scale = householder_normalize(l, 1)
    assert np.array_equal(out[1], np.array([1.0, 0.0]))
    assert scale == pytest.approx(1.0 / np.linalg.norm(l[1]), rel=1e-12)
    gram = l @ l.T / float(l[1] @ l[1])
    assert np.allclose(out @ out.T, gram, atol=1e-12)


def test_householder_kron_block():
    # after normalizing row j, (Sigma2)_jj = 1 and the (j, j) block of
    # Sigma2 kron Sigma1 equals Sigma1
    rng = np.random.default_rng(10)
    l1 = rng.standard_normal((3, 2))
    l2 = rng.standard_normal((4, 2))
    j = 2
    l2n, _ = householder_normalize(l2, j)
    s1 = l1 @ l1.T
    s2 = l2n @ l2n.T
    assert s2[j, j] == pytest.approx(1.0, abs=1e-12)
    big = kron(s2, s1)
    q1 = 3
    block = big[j * q1 : (j + 1) * q1, j * q1 : (j + 1) * q1]
    assert np.allclose(block, s1, atol=1e-12)


def test_householder_zero_row():
    l = np.array([[0.0, 0.0], [1.0, 2.0]])
    with pytest.raises(ZeroRow):
        householder_normalize(l, 0)


def test_nearest_kron_exact_recovery():
    rng = np.random.default_rng(11)
    a1 = rng.standard_normal((3, 3))
    a2 = rng.standard_normal((2, 2))
    s1 = a1 @ a1.T
    s2 = a2 @ a2.T
    sigma = kron(s2, s1)
    o1, o2 = nearest_kron(sigma, 3, 2)
    assert np.linalg.norm(sigma - kron(o2, o1)) < 1e-10 * np.linalg.norm(sigma)


def test_nearest_kron_identity():
    o1, o2 = nearest_kron(np.eye(6), 3, 2)
    assert np.allclose(kron(o2, o1), np.eye(6), atol=1e-10)


def test_nearest_kron_perturbed():
    rng = np.random.default_rng(12)
    a1 = rng.standard_normal((3, 3))
    a2 = rng.standard_normal((2, 2))
    s1, s2 = a1 @ a1.T, a2 @ a2.T
    noise = rng.standard_normal((6, 6)) * 0.01
    sigma = kron(s2, s1) + noise @ noise.T
    o1, o2 = nearest_kron(sigma, 3, 2)
    err_fit = np.linalg.norm(sigma - kron(o2, o1))
    err_true = np.linalg.norm(sigma - kron(s2, s1))
    assert err_fit <= err_true + 1e-12


def test_nearest_kron_dimension_mismatch():
    with pytest.raises(ValueError):
        nearest_kron(np.eye(5), 2, 2)
