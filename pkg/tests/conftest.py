import math
import sys

import numpy as np
import pytest

from iqcmhe import detect, iqc
from iqcmhe.model import BoxSet, IntervalMatrix, LipschitzEnvelope, PlantModel, Scenario, get_scenario

RHO2 = 0.86


def combined_template(p=1, rho2=RHO2, nu=2):
    rho = math.sqrt(rho2)
    return iqc.combine([
        iqc.build_zames_falb_template(nu, 0.0, 0.25, p, rho),
        iqc.build_static_polytopic_template(0.0, 0.25, p),
    ])


def linear_scenario(A, C, name="linear", w_bound=0.1):
    """Uncertainty-free linear plant ``x+ = A x + w``, ``y = C x`` with an inert d channel."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n, m = A.shape[0], C.shape[0]
    plant = PlantModel(
        n=n, n_w=n, p=1, q=1, m=m, l=n,
        f=lambda x, w, d, u: A @ x + w + u,
        h=lambda x, w, d, u: C @ x,
        g=lambda x, w: np.array([x[0]]),
        f_jac=lambda x, w, d, u: (A, np.eye(n), np.zeros((n, 1))),
        h_jac=lambda x, w, d, u: (C, np.zeros((m, n)), np.zeros((m, 1))),
        g_jac=lambda x, w: (np.eye(1, n), np.zeros((1, n))),
    )
    pt = IntervalMatrix.point
    e1 = np.eye(1, n)
    env = LipschitzEnvelope(
        A=pt(A), B_w=pt(np.eye(n)), B_d=IntervalMatrix.zeros(n, 1),
        C=pt(C), D_w=IntervalMatrix.zeros(m, n), D_d=IntervalMatrix.zeros(m, 1),
        C_v=pt(e1), E_w=IntervalMatrix.zeros(1, n),
        A_abs=pt(A), B_w_abs=pt(np.eye(n)), B_u=IntervalMatrix.zeros(n, n), B_d_abs=IntervalMatrix.zeros(n, 1),
        C_v_abs=pt(e1), E_w_abs=IntervalMatrix.zeros(1, n),
    )
    return Scenario(
        name=name, plant=plant, controller=lambda xh: np.zeros(n), uncertainty=lambda v: np.zeros(1),
        X=BoxSet.unbounded(n), W=BoxSet(-w_bound * np.ones(n), w_bound * np.ones(n)), U=BoxSet.unbounded(n),
        Y=BoxSet.unbounded(m), envelope=env, x0=np.ones(n), xhat0=np.zeros(n),
    )


@pytest.fixture(scope="session")
def example():
    return get_scenario("example1")


@pytest.fixture(scope="session")
def retuned():
    return get_scenario("example1-retuned")


@pytest.fixture(scope="session")
def cert(retuned):
    return detect.verify_detectability(retuned, combined_template(), math.sqrt(RHO2))


@pytest.fixture(scope="session")
def nominal_cert(retuned):
    return detect.verify_nominal(retuned, math.sqrt(RHO2))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
