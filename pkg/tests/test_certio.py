import dataclasses
import json

import numpy as np
import pytest

from iqcmhe import certio


def test_round_trip_is_byte_identical(cert, tmp_path):
    text = certio.save(cert, tmp_path / "c.json")
    back = certio.load(tmp_path / "c.json")
    assert certio.dumps(back) == text
    for name in ("P", "Q", "Q0", "R", "R0", "Mhat", "P0"):
        assert np.array_equal(getattr(back, name), getattr(cert, name))
    assert np.array_equal(back.multiplier.M, cert.multiplier.M)
    assert back.margin == cert.margin


def test_hash_mismatch_is_rejected(cert):
    raw = json.loads(certio.dumps(cert))
    raw["margin"] = raw["margin"] * 2
    text = json.dumps(raw)
    with pytest.raises(certio.CertificateFormatError):
        certio.loads(text)
    assert certio.loads(text, verify_hash=False).margin == pytest.approx(2 * cert.margin)


def test_unknown_format_and_bad_json(cert):
    with pytest.raises(certio.CertificateFormatError):
        certio.loads("{not json")
    raw = json.loads(certio.dumps(cert))
    raw["format"] = "other/9"
    with pytest.raises(certio.CertificateFormatError):
        certio.loads(json.dumps(raw))


def test_non_finite_values_are_refused(cert):
    P = cert.P.copy()
    P[0, 0] = np.nan
    with pytest.raises(certio.CertificateFormatError):
        certio.dumps(dataclasses.replace(cert, P=P))
