import dataclasses
import math

import numpy as np
import pytest

from iqcmhe import mhe, sim
from iqcmhe.model import BoxSet


@pytest.fixture(scope="module")
def std(nominal_cert):
    return sim.StandardEstimator(nominal_cert, mhe.MheConfig(N=10))


def _synthetic_trace(lam, steps=12):
    # |x_k| and |x_k - xhat_k| sit exactly on the bounds for C_x = 1 and w = 0
    k = np.arange(steps)
    a = 2.0 * lam**k
    b = math.sqrt(2.0) * lam**k
    a[0], b[0] = 1.0, 1.0
    x = np.column_stack([a, np.zeros(steps)])
    xhat = x - np.column_stack([np.zeros(steps), b])
    z = np.zeros((steps, 1))
    return sim.SimulationTrace(x=x, xhat=xhat, w=z, u=np.zeros((steps, 2)), y=z, v=z, d=z, psi=np.zeros((steps, 0)),
                               cost=np.zeros(steps), lambda_residual=np.zeros(steps), iters=np.zeros(steps, int))


def test_bounds_tight_trace_passes_and_halved_constants_fail():
    tr = _synthetic_trace(0.9)
    rep = sim.check_bounds(tr, (0.9, 1.0, 1.0))
    assert rep.ok and rep.max_state_ratio == pytest.approx(1.0) and rep.max_error_ratio == pytest.approx(1.0)
    assert not sim.check_bounds(tr, (0.9, 0.5, 0.5)).ok


def test_zero_over_zero_counts_as_satisfied():
    tr = _synthetic_trace(0.9)
    tr = dataclasses.replace(tr, x=np.zeros_like(tr.x), xhat=np.zeros_like(tr.xhat))
    rep = sim.check_bounds(tr, (0.9, 1.0, 1.0))
    assert rep.ok and rep.max_state_ratio == 0.0
    tr.x[3, 0] = 1e-3
    assert np.isinf(sim.check_bounds(tr, (0.9, 1.0, 1.0)).max_state_ratio)


def test_single_step_run(retuned, std):
    tr = sim.run_closed_loop(retuned, std, 1, 0)
    assert tr.steps == 1 and tr.cost[0] == 0.0 and tr.iters[0] == 0
    assert np.array_equal(tr.xhat[0], retuned.xhat0)
    with pytest.raises(ValueError):
        sim.run_closed_loop(retuned, std, 0, 0)


def test_initial_state_must_lie_in_x(retuned, std):
    boxed = retuned.with_overrides(X=BoxSet([-10.0, -10.0], [10.0, 10.0]))
    with pytest.raises(ValueError):
        sim.run_closed_loop(boxed, std, 3, 0, x0=[100.0, 0.0])


def test_zero_equilibrium_stays_put(retuned, std, cert):
    zeros = np.zeros((6, retuned.plant.n_w))
    for est in (std, sim.ProposedEstimator(cert, mhe.MheConfig(N=22))):
        tr = sim.run_closed_loop(retuned, est, 6, 0, x0=[0.0, 0.0], xhat0=[0.0, 0.0], disturbances=zeros)
        assert np.max(np.abs(tr.x)) == 0.0
        assert np.max(np.abs(tr.xhat)) <= 1e-9


def test_runs_are_deterministic(retuned, std):
    a = sim.trace_to_csv(sim.run_closed_loop(retuned, std, 12, 4))
    b = sim.trace_to_csv(sim.run_closed_loop(retuned, std, 12, 4))
    assert a == b
    c = sim.trace_to_csv(sim.run_closed_loop(retuned, std, 12, 5))
    assert a != c


def test_disturbances_stay_in_w(retuned, std):
    tr = sim.run_closed_loop(retuned, std, 20, 2)
    assert all(retuned.W.contains(w) for w in tr.w)


def test_compare_identical_estimators(retuned, nominal_cert):
    a = sim.StandardEstimator(nominal_cert, mhe.MheConfig(N=10), name="a")
    b = sim.StandardEstimator(nominal_cert, mhe.MheConfig(N=10), name="b")
    s = sim.compare(retuned, [a, b], 10, [0, 1])
    assert s.median_err["a"] == s.median_err["b"]
    for seed in (0, 1):
        ra = next(r for r in s.rows if r["est"] == "a" and r["seed"] == seed)
        rb = next(r for r in s.rows if r["est"] == "b" and r["seed"] == seed)
        assert ra["mean_err_tail"] - rb["mean_err_tail"] == 0.0
    assert s.to_csv().splitlines()[0] == "seed,est,mean_err_tail,mean_state_tail"
    one = sim.compare(retuned, [a], 1, [3])
    assert len(one.rows) == 1
    with pytest.raises(ValueError):
        sim.compare(retuned, [a], 1, [])


def test_csv_header_and_round_trip(retuned, std):
    tr = sim.run_closed_loop(retuned, std, 5, 0)
    text = sim.trace_to_csv(tr)
    header = text.splitlines()[0]
    assert header == "k,x1,x2,xhat1,xhat2,w,u1,u2,y,v,d,cost,lambda_residual,iters"
    tab = sim.read_csv(text)
    assert np.array_equal(tab["x1"], tr.x[:, 0]) and np.array_equal(tab["cost"], tr.cost)


def test_svg_rerender_is_identical(retuned, std, tmp_path):
    text = sim.trace_to_csv(sim.run_closed_loop(retuned, std, 8, 0))
    (tmp_path / "t.csv").write_text(text)
    a = sim.svg_from_csv(text)
    b = sim.svg_from_csv((tmp_path / "t.csv").read_text())
    assert a == b and a.startswith("<svg") and a.count("<polyline") == 2
    assert sim.svg_from_csv(text, log=False) != a
