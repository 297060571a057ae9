"""JSON round trip for detectability certificates.

Floats are written with 17 significant digits, which is enough to recover
every double exactly, so ``dumps(loads(text)) == text`` byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from .detect import DetectabilityCertificate
from .iqc import FilterRealization, MultiplierInstance

FORMAT = "iqcmhe-certificate/1"


class CertificateFormatError(ValueError):
    pass


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise CertificateFormatError(f"non-finite value {x!r} cannot be stored")
    s = format(x, ".17g")
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def _encode(obj, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (float, int)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_encode(v) for v in obj) + "]"
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + _encode(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    raise CertificateFormatError(f"cannot encode {type(obj).__name__}")


def _mat(a) -> dict:
    a = np.asarray(a, dtype=float)
    if a.ndim < 2:
        a = a.reshape(1, -1) if a.size else a.reshape(0, 0)
    return {"shape": [int(a.shape[0]), int(a.shape[1])], "data": [float(v) for v in a.ravel()]}


def _unmat(d) -> np.ndarray:
    rows, cols = d["shape"]
    return np.array(d["data"], dtype=float).reshape(rows, cols)


def _body(cert: DetectabilityCertificate) -> dict:
    f = cert.multiplier.filter
    return {
        "format": FORMAT,
        "rho": float(cert.rho),
        "margin": float(cert.margin),
        "nominal": bool(cert.nominal),
        "dims": {k: int(v) for k, v in cert.dims.items()},
        "vertex_count": int(cert.vertex_count),
        "interior_max_eig": float(cert.interior_max_eig) if math.isfinite(cert.interior_max_eig) else None,
        "P": _mat(cert.P),
        "Q": _mat(cert.Q),
        "Q0": _mat(cert.Q0),
        "R": _mat(cert.R),
        "R0": _mat(cert.R0),
        "Mhat": _mat(cert.Mhat),
        "P0": _mat(cert.P0),
        "multiplier": {
            "rho": float(cert.multiplier.rho),
            "families": [dict(fam) for fam in cert.multiplier.families],
            "values": [float(v) for v in np.asarray(cert.multiplier_values, dtype=float)],
            "M": _mat(cert.multiplier.M),
            "Z": _mat(cert.multiplier.Z),
            "filter": {
                "q": int(f.q), "p": int(f.p),
                "A": _mat(f.A), "B": _mat(f.B), "C": _mat(f.C), "D": _mat(f.D),
            },
        },
    }


def content_hash(body: dict) -> str:
    return hashlib.sha256(_encode(body).encode("utf-8")).hexdigest()


def dumps(cert: DetectabilityCertificate) -> str:
    body = _body(cert)
    body["sha256"] = content_hash(body)
    return _encode(body) + "\n"


def loads(text: str, verify_hash: bool = True) -> DetectabilityCertificate:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CertificateFormatError(f"not valid JSON: {exc}") from exc
    if raw.get("format") != FORMAT:
        raise CertificateFormatError(f"unknown format {raw.get('format')!r}")
    stored = raw.pop("sha256", None)
    if verify_hash and stored != content_hash(raw):
        raise CertificateFormatError("content hash mismatch")
    mult = raw["multiplier"]
    fd = mult["filter"]
    filt = FilterRealization(_unmat(fd["A"]), _unmat(fd["B"]), _unmat(fd["C"]), _unmat(fd["D"]), q=fd["q"], p=fd["p"])
    inst = MultiplierInstance(filt, mult["rho"], _unmat(mult["M"]), _unmat(mult["Z"]), tuple(mult["families"]))
    iem = raw.get("interior_max_eig")
    return DetectabilityCertificate(
        rho=raw["rho"], P=_unmat(raw["P"]), Q=_unmat(raw["Q"]), Q0=_unmat(raw["Q0"]), R=_unmat(raw["R"]),
        R0=_unmat(raw["R0"]), Mhat=_unmat(raw["Mhat"]), P0=_unmat(raw["P0"]), multiplier=inst,
        margin=raw["margin"], dims=dict(raw["dims"]), multiplier_values=np.array(mult["values"], dtype=float),
        interior_max_eig=float("nan") if iem is None else iem, vertex_count=raw["vertex_count"],
        nominal=raw["nominal"],
    )


def save(cert: DetectabilityCertificate, path) -> str:
    text = dumps(cert)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return text


def load(path, verify_hash: bool = True) -> DetectabilityCertificate:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), verify_hash)
