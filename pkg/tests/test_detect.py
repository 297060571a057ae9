import dataclasses
import math

import numpy as np
import pytest

from iqcmhe import detect, iqc

from conftest import RHO2, combined_template, linear_scenario


def test_contractive_scalar_system_is_certified():
    sc = linear_scenario(0.5, 1.0)
    cert = detect.verify_nominal(sc, math.sqrt(RHO2))
    assert cert.margin > 0
    assert cert.vertex_count == 1
    assert detect.recheck_certificate(cert, sc)["ok"]


def test_unobservable_unstable_mode_is_infeasible():
    sc = linear_scenario(np.diag([2.0, 2.0]), [[1.0, 0.0]])
    with pytest.raises(detect.Infeasible):
        detect.verify_nominal(sc, math.sqrt(RHO2))


def test_stable_jordan_block_is_certified():
    sc = linear_scenario([[0.5, 1.0], [0.0, 0.5]], [[1.0, 0.0]])
    assert detect.verify_nominal(sc, math.sqrt(RHO2)).margin > 0


def test_open_loop_unstable_plant_is_not_certified():
    # the certificate also bounds the true state, which the zero controller cannot
    with pytest.raises(detect.Infeasible):
        detect.verify_nominal(linear_scenario(1.5, 1.0), math.sqrt(RHO2))


def test_vertex_counts(example):
    filt = combined_template().filter
    pl = example.plant
    ext = detect.assemble_extended_vertices(example.envelope, filt, (pl.n, pl.n_w, pl.q, pl.m))
    assert len(ext.vertices) == 4
    point = linear_scenario(0.5, 1.0)
    ext1 = detect.assemble_extended_vertices(point.envelope, iqc.build_zames_falb_template(1, 0.0, 0.25, 1, 0.9).filter)
    assert len(ext1.vertices) == 1


def test_too_many_vertices(example, monkeypatch):
    monkeypatch.setattr(detect, "MAX_FREE_INTERVALS", 1)
    with pytest.raises(detect.TooManyVertices):
        detect.assemble_extended_vertices(example.envelope, combined_template().filter)


def test_static_only_multiplier_is_infeasible_on_example(example):
    rho = math.sqrt(RHO2)
    with pytest.raises(detect.Infeasible):
        detect.verify_detectability(example, iqc.build_static_polytopic_template(0.0, 0.25, 1), rho)


def test_certificate_recheck_and_dissipation(cert, retuned):
    rep = detect.recheck_certificate(cert, retuned)
    assert rep["ok"], rep
    assert cert.interior_max_eig <= 1e-6
    diss = detect.validate_certificate(cert, retuned, pairs=30, length=20, seed=1)
    assert diss.steps > 0
    assert diss.worst_relative <= 1e-7


def test_corrupted_certificate_is_detected(cert, retuned):
    bad = dataclasses.replace(cert, P=-cert.P)
    assert not detect.recheck_certificate(bad, retuned)["ok"]


def test_nominal_certificate(nominal_cert, retuned):
    assert nominal_cert.nominal and nominal_cert.dims["n_psi"] == 0
    assert detect.recheck_certificate(nominal_cert, retuned)["ok"]
