import math

import numpy as np
import pytest
import scipy.linalg as sla

from iqcmhe import mhe, sim
from iqcmhe.detect import Dims, InvalidCertificate, verify_nominal, z_embed
from iqcmhe.model import plant_step

from conftest import RHO2, linear_scenario

N_TEST = 22


@pytest.fixture(scope="module")
def short_run(cert, retuned):
    """Eight steps of the proposed estimator with disturbances from a fixed seed."""
    cfg = mhe.MheConfig(N=N_TEST)
    state = mhe.MheState.initial(retuned.xhat0, cert.multiplier.filter.n_psi, cfg.N)
    rng = np.random.default_rng(5)
    x = np.array(retuned.x0, dtype=float)
    sols = []
    for _ in range(8):
        theta, sol = mhe.estimate(state, cert, cfg, retuned)
        sols.append(sol)
        u = retuned.controller(theta[:2])
        x, y, _, _ = plant_step(retuned, x, retuned.W.sample(rng), u)
        state.record(u, y)
    return state, cfg, sols


def test_min_horizon_from_values():
    assert mhe.min_horizon_from(5.0, 0.86) == 11
    assert mhe.min_horizon_from(1.0 + 1e-12, 0.86) == 1
    assert mhe.min_horizon_from(1.0, 0.86) == 1
    with pytest.raises(ValueError):
        mhe.min_horizon_from(0.5, 0.86)


def test_min_horizon_is_first_contracting_length(cert):
    n_min, lam_bar = mhe.min_horizon(cert, 0.1)
    assert cert.rho2 ** n_min * lam_bar < 1.0
    assert cert.rho2 ** (n_min - 1) * lam_bar >= 1.0


def test_horizon_matrices_against_block_formula(cert):
    eps = 0.1
    P1, P2 = mhe.horizon_matrices(cert, eps)
    d = Dims(**cert.dims)
    k = d.n + d.n_psi
    P = 0.5 * (cert.P + cert.P.T)
    # P1: P with Z / rho^2 removed from the model-side filter block
    ref1 = P - z_embed(d, cert.multiplier.Z) / cert.rho2
    assert np.allclose(P1, ref1, atol=1e-9 * np.abs(P).max())
    P11, P12 = P[:k, :k], P[:k, k:]
    c = sla.cho_factor(P11)
    ref2 = ref1.copy()
    ref2[:k, :k] += P11 + (2.0 + eps) * cert.P0
    ref2[:k, k:] += P12
    ref2[k:, :k] += P12.T
    ref2[k:, k:] += P12.T @ sla.cho_solve(c, P12)
    assert np.allclose(P2, ref2, rtol=1e-8, atol=1e-8 * np.abs(ref2).max())
    lam_bar = sla.eigh(P2, P1, eigvals_only=True)[-1]
    assert mhe.min_horizon(cert, eps)[1] == pytest.approx(lam_bar, rel=1e-8)


def test_iss_constants_monotone_in_horizon_and_xi(cert):
    n_min, _ = mhe.min_horizon(cert, 0.1)
    lam1, cx1, cw1 = mhe.iss_constants(cert, 0.1, 500.0, n_min)
    lam2, cx2, cw2 = mhe.iss_constants(cert, 0.1, 500.0, n_min + 10)
    assert cert.rho <= lam2 < lam1 < 1.0
    assert cx1 == cx2 and cw1 == cw2
    _, _, cw3 = mhe.iss_constants(cert, 0.1, 1000.0, n_min)
    assert cw3 > cw1
    with pytest.raises(ValueError):
        mhe.iss_constants(cert, 0.1, 500.0, n_min - 1)


def test_iss_constants_large_horizon_limit(cert):
    lam, _, _ = mhe.iss_constants(cert, 0.1, 500.0, 10**6)
    assert lam == pytest.approx(cert.rho, rel=1e-5)


def test_config_validation():
    for bad in ({"N": 0}, {"eps": 0.0}, {"xi": -1.0}, {"max_iter": 0}):
        with pytest.raises(ValueError):
            mhe.MheConfig(**bad)


def test_state_ordering_errors():
    st = mhe.MheState.initial([0.0, 0.0], 0, 3)
    with pytest.raises(RuntimeError):
        st.record([0.0], [0.0])
    st.publish([0.0, 0.0])
    with pytest.raises(RuntimeError):
        st.publish([0.0, 0.0])
    st.record([0.0], [0.0])
    assert st.k == 1 and st.n_k == 1


def test_first_step_returns_prior(cert, retuned):
    cfg = mhe.MheConfig(N=N_TEST)
    st = mhe.MheState.initial(retuned.xhat0, cert.multiplier.filter.n_psi, cfg.N)
    theta, sol = mhe.estimate(st, cert, cfg, retuned)
    assert sol is None
    assert np.array_equal(theta[:2], retuned.xhat0) and not np.any(theta[2:])


def test_nominal_certificate_is_refused_by_robust_estimator(nominal_cert, retuned):
    st = mhe.MheState.initial(retuned.xhat0, 0, 5)
    with pytest.raises(InvalidCertificate):
        mhe.estimate(st, nominal_cert, mhe.MheConfig(N=5), retuned)


def test_short_run_constraint_and_dynamics(short_run):
    _, cfg, sols = short_run
    for sol in sols[1:]:
        assert sol.status == "optimal"
        assert sol.lambda_residual <= cfg.lambda_tol
        assert sol.dynamics_residual <= 1e-9
        assert sol.thetas.shape == (sol.n_k + 1, 6)


def test_gradients_match_central_differences(short_run, cert, retuned):
    state, cfg, _ = short_run
    prob = mhe.proposed_problem(state, cert, cfg, retuned)
    rng = np.random.default_rng(0)
    z_ref = mhe._warm_start(state, prob, state.k - 1)
    worst_cost = worst_con = 0.0
    for _ in range(100):
        z = z_ref + rng.normal(scale=0.1, size=prob.nz)
        g = prob.cost_grad(z)
        con, dcon = prob.constraints(z)
        fd = np.zeros_like(g)
        fdc = np.zeros_like(dcon)
        for i in range(z.size):
            h = 1e-6 * max(1.0, abs(z[i]))
            e = np.zeros_like(z)
            e[i] = h
            fd[i] = (prob.cost(z + e) - prob.cost(z - e)) / (2 * h)
            fdc[:, i] = (prob.constraints(z + e, False)[0] - prob.constraints(z - e, False)[0]) / (2 * h)
        worst_cost = max(worst_cost, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1.0))
        worst_con = max(worst_con, np.linalg.norm(dcon - fdc) / max(np.linalg.norm(fdc), 1.0))
    assert worst_cost <= 1e-5
    assert worst_con <= 1e-5


def test_standard_argmin_invariant_under_weight_scaling(short_run, nominal_cert, retuned):
    state, cfg, _ = short_run
    base = mhe.standard_problem(state, nominal_cert, cfg, retuned)
    n = retuned.plant.n
    weights = {"prior": 2.0 * nominal_cert.P0[:n, :n], "w": 2.0 * nominal_cert.Q, "y": nominal_cert.R,
               "z": np.zeros((0, 0))}
    scaled = mhe.WindowProblem(retuned, base.filt, False, base.rho, base.prior, base.us, base.ys, base.xpub,
                               {k: 37.0 * v for k, v in weights.items()})
    z0 = np.zeros(base.nz)
    z0[:n] = base.prior
    za, _, sa = mhe._solve_window(base, z0, cfg)
    zb, _, sb = mhe._solve_window(scaled, z0, cfg)
    assert sa == sb == "optimal"
    assert np.allclose(za, zb, atol=1e-6)
    assert scaled.cost(zb) == pytest.approx(37.0 * base.cost(za), rel=1e-8)


def test_standard_exact_fit_on_noiseless_data():
    # without uncertainty and disturbances the true trajectory has zero cost
    sc = linear_scenario([[0.5, 1.0], [0.0, 0.5]], [[1.0, 0.0]])
    cert = verify_nominal(sc, math.sqrt(RHO2))
    est = sim.StandardEstimator(cert, mhe.MheConfig(N=10))
    tr = sim.run_closed_loop(sc, est, 15, 0, xhat0=sc.x0, disturbances=np.zeros((15, 2)))
    assert np.max(tr.cost) <= 1e-12
    assert np.max(tr.err_norm()) <= 1e-6
