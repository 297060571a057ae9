import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from iqcmhe.numkit import (
    NotPositiveDefinite,
    NotPsd,
    blockdiag,
    generalized_max_eig,
    is_doubly_hyperdominant,
    kron,
    psd_factor,
    sym,
    sym_eigvalsh,
)


def random_spd(rng, n, cond=1e3):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    vals = np.exp(rng.uniform(0, np.log(cond), size=n))
    return (q * vals) @ q.T


def test_sym_and_eigs():
    a = np.array([[1.0, 2.0], [0.0, 3.0]])
    assert np.allclose(sym(a), [[1.0, 1.0], [1.0, 3.0]])
    assert np.allclose(sym_eigvalsh(a), np.linalg.eigvalsh([[1.0, 1.0], [1.0, 3.0]]))
    assert sym_eigvalsh(np.zeros((0, 0))).size == 0
    with pytest.raises(ValueError):
        sym(np.ones((2, 3)))
    with pytest.raises(ValueError):
        sym(np.array([[np.nan]]))


def test_gen_eig_identity_b_is_plain_max_eig():
    a = np.diag([1.0, 4.0, 2.0])
    assert generalized_max_eig(a, np.eye(3)) == pytest.approx(4.0)


def test_gen_eig_matches_two_independent_oracles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = random_spd(rng, 6), random_spd(rng, 6)
        got = generalized_max_eig(a, b)
        brute = float(np.max(np.real(np.linalg.eigvals(np.linalg.solve(b, a)))))
        lapack = float(scipy.linalg.eigh(a, b, eigvals_only=True)[-1])
        assert abs(got - brute) <= 1e-8 * max(1.0, abs(brute))
        assert abs(got - lapack) <= 1e-8 * max(1.0, abs(lapack))


def test_gen_eig_rejects_indefinite_b():
    with pytest.raises(NotPositiveDefinite):
        generalized_max_eig(np.eye(2), np.diag([1.0, -1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_psd_factor_reconstructs(n, seed, rank_drop):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n, max(1, n - rank_drop)))
    a = g @ g.T
    L = psd_factor(a)
    assert L.shape == (n, n)
    assert np.max(np.abs(L.T @ L - a)) <= 1e-10 * max(1.0, np.max(np.abs(a)))


def test_psd_factor_rejects_indefinite():
    with pytest.raises(NotPsd):
        psd_factor(np.diag([1.0, -1e-3]))
    assert psd_factor(np.zeros((0, 0))).shape == (0, 0)


def test_doubly_hyperdominant():
    good = np.array([[2.0, -1.0], [-1.0, 1.0]])
    assert is_doubly_hyperdominant(good)
    assert not is_doubly_hyperdominant(np.array([[1.0, 0.5], [0.0, 1.0]]))  # positive off-diagonal
    assert not is_doubly_hyperdominant(np.array([[1.0, -2.0], [0.0, 3.0]]))  # column sum < 0


def test_blockdiag_and_kron():
    out = blockdiag(np.eye(2), np.zeros((0, 0)), 3 * np.ones((1, 1)))
    assert out.shape == (3, 3) and out[2, 2] == 3.0 and out[0, 2] == 0.0
    assert np.array_equal(kron(np.eye(2), [[1.0, 2.0]]), np.kron(np.eye(2), [[1.0, 2.0]]))
