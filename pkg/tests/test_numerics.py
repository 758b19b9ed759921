import numpy as np
import pytest

from minbackprop import numerics


def test_svd_identity():
    res = numerics.svd(np.eye(3))
    assert np.allclose(res.u, np.eye(3))
    assert np.allclose(res.sigma, [1, 1, 1])
    assert np.allclose(res.v, np.eye(3))


def test_svd_diagonal_sorted():
    res = numerics.svd(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(res.sigma, [3, 2, 1])
    assert np.all(np.diff(res.sigma) <= 0)


def test_svd_reconstruction_random():
    rng = np.random.default_rng(7)
    m = rng.normal(size=(9, 9))
    res = numerics.svd(m)
    err = np.linalg.norm(res.reconstruct() - m) / np.linalg.norm(m)
    assert err < 1e-12


def test_svd_sign_convention():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m = rng.normal(size=(4, 6))
        res = numerics.svd(m)
        for j in range(res.u.shape[1]):
            col = res.u[:, j]
            assert col[np.argmax(np.abs(col))] > 0
        assert np.linalg.norm(res.reconstruct() - m) < 1e-12 * max(1, np.linalg.norm(m))


def test_svd_reconstruction_many_shapes():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        rows = int(rng.integers(1, 16))
        cols = int(rng.integers(1, 19))
        m = rng.normal(size=(rows, cols))
        res = numerics.svd(m)
        denom = max(np.linalg.norm(m), 1e-300)
        assert np.linalg.norm(res.reconstruct() - m) / denom < 1e-10


def test_svd_rejects_non_finite():
    with pytest.raises(ValueError):
        numerics.svd(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_pseudoinverse_identity():
    assert np.allclose(numerics.pseudoinverse(np.eye(3)), np.eye(3))


def test_pseudoinverse_rank_one_diagonal():
    m = np.array([[2.0, 0.0], [0.0, 0.0]])
    assert np.allclose(numerics.pseudoinverse(m), [[0.5, 0.0], [0.0, 0.0]])


def test_pseudoinverse_inverts_full_rank():
    rng = np.random.default_rng(11)
    m = rng.normal(size=(3, 3))
    assert np.linalg.norm(m @ numerics.pseudoinverse(m) - np.eye(3)) < 1e-10


def test_moore_penrose_identities():
    rng = np.random.default_rng(99)
    for _ in range(200):
        rows = int(rng.integers(2, 16))
        cols = int(rng.integers(2, 19))
        m = rng.normal(size=(rows, cols))
        if rng.random() < 0.3:  # make some rank-deficient
            k = int(rng.integers(1, min(rows, cols)))
            m = rng.normal(size=(rows, k)) @ rng.normal(size=(k, cols))
        p = numerics.pseudoinverse(m)
        scale = np.linalg.norm(m)
        assert np.linalg.norm(m @ p @ m - m) / scale < 1e-9
        assert np.linalg.norm(p @ m @ p - p) / max(np.linalg.norm(p), 1e-300) < 1e-9
        assert np.linalg.norm(m @ p - (m @ p).T) < 1e-9
        assert np.linalg.norm(p @ m - (p @ m).T) < 1e-9


def test_numerical_rank_basics():
    assert numerics.numerical_rank(np.eye(3)) == 3
    u = np.array([1.0, -2.0, 0.5])
    v = np.array([0.3, 1.0, -1.0])
    assert numerics.numerical_rank(np.outer(u, v)) == 1


def test_numerical_rank_invariances():
    rng = np.random.default_rng(17)
    m = rng.normal(size=(4, 6))
    m[3] = m[0] + m[1]  # rank 3
    base = numerics.numerical_rank(m)
    assert base == 3
    perm = m[[2, 0, 3, 1]]
    assert numerics.numerical_rank(perm) == base
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    assert numerics.numerical_rank(q @ m) == base


def test_real_eigenpairs_diagonal():
    pairs = numerics.real_eigenpairs(np.diag([1.0, 2.0, 3.0]))
    assert [round(v) for v, _ in pairs] == [1, 2, 3]
    for k, (_, vec) in enumerate(pairs):
        expected = np.zeros(3)
        expected[k] = 1.0
        assert np.allclose(np.abs(vec), expected)
        assert vec[np.nonzero(np.abs(vec) > 1e-12)[0][0]] > 0


def test_real_eigenpairs_rotation_has_none():
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    assert numerics.real_eigenpairs(rot) == []


def test_real_eigenpairs_companion_cubic():
    # companion matrix of (x - 1)(x - 2)(x + 3) = x^3 - 7x + 6
    comp = np.array([
        [0.0, 0.0, -6.0],
        [1.0, 0.0, 7.0],
        [0.0, 1.0, 0.0],
    ])
    vals = sorted(v for v, _ in numerics.real_eigenpairs(comp))
    assert np.allclose(vals, [-3.0, 1.0, 2.0], atol=1e-10)


def test_determinism_bit_identical():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(8, 11))
    a = numerics.svd(m)
    b = numerics.svd(m.copy())
    assert np.array_equal(a.u, b.u)
    assert np.array_equal(a.sigma, b.sigma)
    assert np.array_equal(a.v, b.v)
    assert np.array_equal(numerics.pseudoinverse(m), numerics.pseudoinverse(m.copy()))
