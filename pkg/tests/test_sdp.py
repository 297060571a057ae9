import numpy as np
import pytest

from iqcmhe import sdp


def unit_trace_problem(dim=3):
    pr = sdp.AffineSdp()
    X = pr.sym_var(dim, "X")
    pr.add_psd(X, margin=True, name="X")
    pr.add_eq(sum(X[i:i + 1, i:i + 1] for i in range(dim)), float(dim))
    return pr, X


@pytest.mark.parametrize("backend", ["clarabel", "cvxopt"])
def test_trace_normalized_margin_is_one(backend):
    # max t s.t. X - t I >= 0, trace X = 3  ->  X = I, t = 1
    pr, X = unit_trace_problem()
    res = sdp.solve_max_margin(pr, sdp.SdpOptions(backend=backend))
    assert res.margin == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(res.value(X), np.eye(3), atol=1e-5)
    assert res.eq_residual <= 1e-8


def test_non_margin_block_and_inequality():
    # max t s.t. x - t >= 0 (margin), 2 - x >= 0 (plain), x <= 1.5  ->  t = 1.5
    pr = sdp.AffineSdp()
    (i,) = pr.scalar_vars(1)
    x = sdp.AffineMatrix(np.zeros((1, 1)), {i: np.ones((1, 1))})
    pr.add_psd(x, margin=True)
    pr.add_psd(2.0 - x, margin=False)
    pr.add_le(x, 1.5)
    res = sdp.solve_max_margin(pr)
    assert res.margin == pytest.approx(1.5, abs=1e-6)


def test_negative_margin_is_returned_not_raised():
    # X - t I >= 0 with X fixed to diag(1, -2) -> t = -2
    pr = sdp.AffineSdp()
    (i,) = pr.scalar_vars(1)
    pr.add_psd(sdp.AffineMatrix(np.diag([1.0, -2.0]), {i: np.zeros((2, 2))}), margin=True)
    pr.add_eq(sdp.AffineMatrix(np.zeros((1, 1)), {i: np.ones((1, 1))}), 0.0)
    res = sdp.solve_max_margin(pr)
    assert res.margin == pytest.approx(-2.0, abs=1e-6)


def test_inconsistent_equalities_raise_infeasible():
    pr, X = unit_trace_problem(2)
    pr.add_eq(X[0:1, 0:1], 5.0)
    pr.add_eq(X[0:1, 0:1], 6.0)
    with pytest.raises(sdp.Infeasible):
        sdp.solve_max_margin(pr)


def test_unbounded_margin_is_a_numerical_failure():
    pr = sdp.AffineSdp()
    X = pr.sym_var(2)
    pr.add_psd(X, margin=True)
    with pytest.raises(sdp.NumericalFailure):
        sdp.solve_max_margin(pr)


def test_needs_a_margin_block():
    pr = sdp.AffineSdp()
    pr.add_psd(pr.sym_var(1), margin=False)
    with pytest.raises(ValueError):
        sdp.solve_max_margin(pr)


def test_affine_matrix_algebra():
    a = sdp.AffineMatrix(np.eye(2), {0: np.ones((2, 2))})
    b = 2.0 * a - np.eye(2)
    assert np.allclose(b.value([1.0]), np.eye(2) + 2 * np.ones((2, 2)))
    o = np.array([[1.0], [1.0]])
    assert np.allclose(a.congruence(o).value([0.5]), o.T @ a.value([0.5]) @ o)
    blk = sdp.AffineMatrix.bmat([[a, None], [None, np.eye(1)]])
    assert blk.shape == (3, 3)


def test_dump_format():
    pr, _ = unit_trace_problem(2)
    text = sdp.dump_problem(pr)
    lines = text.splitlines()
    assert lines[0] == "SDP 3 1 1 0"
    assert lines[1].startswith("BLOCK X 2 1 3")
    assert lines[-1].startswith("EQ ") and lines[-1].endswith("= 2")
