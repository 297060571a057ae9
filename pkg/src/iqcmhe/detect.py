"""Robust detectability: extended parameter-dependent system, the LMI
feasibility problem over the envelope vertices, and trajectory validation."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import sdp
from .iqc import FilterRealization, MultiplierInstance, MultiplierTemplate, filter_step
from .model import IntervalMatrix, LipschitzEnvelope, Scenario
from .numkit import sym

log = logging.getLogger(__name__)

__all__ = [
    "TooManyVertices",
    "InvalidCertificate",
    "Infeasible",
    "ExtendedVertexSystem",
    "DetectabilityCertificate",
    "assemble_extended_vertices",
    "vertex_form",
    "verify_detectability",
    "verify_nominal",
    "validate_certificate",
    "recheck_certificate",
    "nominal_filter",
]

MAX_FREE_INTERVALS = 20

# parameter groups: (group name, envelope fields sharing that parameter vector)
_GROUPS = (
    ("theta1", ("A", "B_w", "B_d")),
    ("theta2", ("C", "D_w", "D_d")),
    ("theta3", ("C_v", "E_w")),
    ("theta4", ("A_abs", "B_w_abs", "B_u", "B_d_abs")),
    ("theta5", ("C_v_abs", "E_w_abs")),
    ("theta6", ("C_v_abs", "E_w_abs")),
)


class TooManyVertices(ValueError):
    pass


class InvalidCertificate(ValueError):
    pass


class Infeasible(RuntimeError):
    def __init__(self, message: str, margin: float = float("-inf")):
        super().__init__(message)
        self.margin = margin


@dataclass
class Dims:
    n: int
    n_w: int
    p: int
    q: int
    m: int
    n_psi: int
    n_z: int

    @property
    def n_chi(self) -> int:
        return 2 * self.n + 2 * self.n_psi

    @property
    def n_nu(self) -> int:
        return 2 * self.n_w + 2 * self.p + self.n

    @property
    def n_zeta(self) -> int:
        return 2 * self.n_w + self.m + self.n + 2 * self.n_z


@dataclass
class ExtendedVertexSystem:
    dims: Dims
    vertices: list  # list of (A, B, C, D)
    is_midpoint: list  # parallel flags
    free_slots: list  # (group, field, i, j)


def _slice_p(mat: IntervalMatrix, p: int) -> IntervalMatrix:
    return IntervalMatrix(mat.lo[:, :p], mat.hi[:, :p])


def _envelope_for(envelope: LipschitzEnvelope, p: int) -> dict:
    env = {k: getattr(envelope, k) for k in LipschitzEnvelope.FIELDS}
    for k in ("B_d", "D_d", "B_d_abs"):
        env[k] = _slice_p(env[k], p)
    return env


def _free_slots(env: dict) -> list:
    slots = []
    for group, fields in _GROUPS:
        for name in fields:
            for i, j in env[name].free_entries():
                slots.append((group, name, int(i), int(j)))
    return slots


def _theta_at(env: dict, slots: list, choice) -> dict:
    """Matrices per group; ``choice`` gives, per free slot, 0 (lo), 1 (hi) or a fraction."""
    mats = {g: {name: env[name].center.copy() for name in fields} for g, fields in _GROUPS}
    for (g, name, i, j), c in zip(slots, choice):
        lo, hi = env[name].lo[i, j], env[name].hi[i, j]
        mats[g][name][i, j] = lo + c * (hi - lo)
    return mats


def extended_matrices(th: dict, filt: FilterRealization, dims: Dims):
    """``(A, B, C, D)`` of the extended system at one parameter value."""
    n, nw, p, m, npsi, nz = dims.n, dims.n_w, dims.p, dims.m, dims.n_psi, dims.n_z
    t1, t2, t3, t4, t5, t6 = (th[g] for g, _ in _GROUPS)
    Av, Ad = filt.A, filt.B_d
    Bv = filt.B_v
    Cp, Dv, Dd = filt.C, filt.D_v, filt.D_d
    Z = np.zeros
    In = np.eye(n)

    A = np.block([
        [t1["A"], Z((n, npsi)), Z((n, n)), Z((n, npsi))],
        [Bv @ t3["C_v"], Av, Z((npsi, n)), Z((npsi, npsi))],
        [Z((n, n)), Z((n, npsi)), t4["A_abs"], Z((n, npsi))],
        [Z((npsi, n)), Z((npsi, npsi)), Bv @ t5["C_v_abs"], Av],
    ])
    B = np.block([
        [t1["B_w"], t1["B_d"], -t1["B_d"], Z((n, nw)), Z((n, n))],
        [Bv @ t3["E_w"], Ad, -Ad, Z((npsi, nw)), Z((npsi, n))],
        [Z((n, nw)), t4["B_d_abs"], Z((n, p)), t4["B_w_abs"], t4["B_u"]],
        [Z((npsi, nw)), Ad, Z((npsi, p)), Bv @ t5["E_w_abs"], Z((npsi, n))],
    ])
    C = np.block([
        [Z((nw, n)), Z((nw, npsi)), Z((nw, n)), Z((nw, npsi))],
        [Z((nw, n)), Z((nw, npsi)), Z((nw, n)), Z((nw, npsi))],
        [t2["C"], Z((m, npsi)), Z((m, n)), Z((m, npsi))],
        [In, Z((n, npsi)), -In, Z((n, npsi))],
        [Z((nz, n)), Z((nz, npsi)), Dv @ t5["C_v_abs"], Cp],
        [-Dv @ t6["C_v_abs"], -Cp, Dv @ t6["C_v_abs"], Cp],
    ])
    D = np.block([
        [np.eye(nw), Z((nw, p)), Z((nw, p)), Z((nw, nw)), Z((nw, n))],
        [Z((nw, nw)), Z((nw, p)), Z((nw, p)), np.eye(nw), Z((nw, n))],
        [t2["D_w"], t2["D_d"], -t2["D_d"], Z((m, nw)), Z((m, n))],
        [Z((n, nw)), Z((n, p)), Z((n, p)), Z((n, nw)), In],
        [Z((nz, nw)), Dd, Z((nz, p)), Dv @ t5["E_w_abs"], Z((nz, n))],
        [-Dv @ t6["E_w_abs"], Z((nz, p)), Dd, Dv @ t6["E_w_abs"], Z((nz, n))],
    ])
    return A, B, C, D


def _dims(scenario: Scenario, filt: FilterRealization) -> Dims:
    pl = scenario.plant
    return Dims(pl.n, pl.n_w, filt.p, pl.q, pl.m, filt.n_psi, filt.n_z)


def assemble_extended_vertices(envelope: LipschitzEnvelope, filt: FilterRealization, scenario_dims: Optional[tuple] = None,
                               include_midpoint: bool = False) -> ExtendedVertexSystem:
    """Enumerate the corners of the joint parameter box (point intervals collapsed).

    ``scenario_dims`` is ``(n, n_w, q, m)``; it defaults to what the envelope implies.
    """
    if scenario_dims is None:
        n = envelope.A.shape[0]
        n_w = envelope.B_w.shape[1]
        q = envelope.C_v.shape[0]
        m = envelope.C.shape[0]
    else:
        n, n_w, q, m = scenario_dims
    if filt.q != q:
        raise ValueError(f"filter input dimension {filt.q} does not match q={q}")
    dims = Dims(n, n_w, filt.p, q, m, filt.n_psi, filt.n_z)
    env = _envelope_for(envelope, filt.p)
    slots = _free_slots(env)
    if len(slots) > MAX_FREE_INTERVALS:
        raise TooManyVertices(f"{len(slots)} free scalar intervals (limit {MAX_FREE_INTERVALS})")
    verts, mids = [], []
    for choice in itertools.product((0.0, 1.0), repeat=len(slots)):
        verts.append(extended_matrices(_theta_at(env, slots, choice), filt, dims))
        mids.append(False)
    if include_midpoint and slots:
        verts.append(extended_matrices(_theta_at(env, slots, [0.5] * len(slots)), filt, dims))
        mids.append(True)
    return ExtendedVertexSystem(dims, verts, mids, slots)


def _selector(dim_total: int, start: int, size: int) -> np.ndarray:
    s = np.zeros((size, dim_total))
    s[:, start:start + size] = np.eye(size)
    return s


def _pp_layout(d: Dims):
    """Offsets of (Q, Q0, R, R0, z, z~) inside the performance output."""
    sizes = [d.n_w, d.n_w, d.m, d.n, d.n_z, d.n_z]
    offs = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
    return list(zip(offs.tolist(), sizes))


def build_pp(d: Dims, Q, Q0, R, R0, M, Mhat):
    """``diag(Q, Q0, R, R0, -M - Mhat, Mhat)``; works for arrays and affine expressions."""
    parts = [Q, Q0, R, R0, -1.0 * (M + Mhat) if d.n_z else None, Mhat if d.n_z else None]
    out = None
    for (off, size), part in zip(_pp_layout(d), parts):
        if size == 0 or part is None:
            continue
        s = _selector(d.n_zeta, off, size)
        term = part.congruence(s) if isinstance(part, sdp.AffineMatrix) else s.T @ np.asarray(part) @ s
        out = term if out is None else out + term
    return out


def vertex_form(vertex, rho: float, P, Pp):
    """Quadratic form whose negative semidefiniteness is the detectability LMI."""
    A, B, C, D = vertex
    n_chi = A.shape[0]
    e1 = np.hstack([np.eye(n_chi), np.zeros((n_chi, B.shape[1]))])
    ab = np.hstack([A, B])
    cd = np.hstack([C, D])
    if isinstance(P, sdp.AffineMatrix):
        return P.congruence(e1) * (-rho**2) + P.congruence(ab) - Pp.congruence(cd)
    return -rho**2 * e1.T @ P @ e1 + ab.T @ P @ ab - cd.T @ Pp @ cd


def z_embed(d: Dims, Z):
    """``diag(0, Z)`` acting on the last filter-state block of the extended state."""
    s = _selector(d.n_chi, d.n_chi - d.n_psi, d.n_psi)
    if isinstance(Z, sdp.AffineMatrix):
        return Z.congruence(s)
    return s.T @ np.asarray(Z) @ s


@dataclass
class DetectabilityCertificate:
    rho: float
    P: np.ndarray
    Q: np.ndarray
    Q0: np.ndarray
    R: np.ndarray
    R0: np.ndarray
    Mhat: np.ndarray
    P0: np.ndarray
    multiplier: MultiplierInstance
    margin: float
    dims: dict
    multiplier_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    interior_max_eig: float = float("nan")
    vertex_count: int = 0
    nominal: bool = False

    @property
    def rho2(self) -> float:
        return self.rho**2

    @property
    def n_theta(self) -> int:
        return self.dims["n"] + self.dims["n_psi"]

    @property
    def P11(self) -> np.ndarray:
        k = self.n_theta
        return self.P[:k, :k]

    @property
    def P1(self) -> np.ndarray:
        d = Dims(**self.dims)
        return sym(self.P - z_embed(d, self.multiplier.Z) / self.rho**2)


def _check_template_rho(template: MultiplierTemplate, rho: float):
    if template.rho is not None and abs(template.rho - rho) > 1e-12:
        raise ValueError(f"template rho {template.rho} differs from requested rho {rho}")


def verify_detectability(
    scenario: Scenario,
    template: MultiplierTemplate,
    rho: float,
    scale: Optional[float] = None,
    margin_tol: float = 1e-6,
    interior_samples: int = 1000,
    interior_tol: float = 1e-6,
    multiplier_bound: float = 1e5,
    seed: int = 0,
    opts: Optional[sdp.SdpOptions] = None,
    P0: Optional[np.ndarray] = None,
) -> DetectabilityCertificate:
    """Search for a detectability certificate by maximizing the LMI margin.

    Raises :class:`Infeasible` when the best margin is not above ``margin_tol``
    or when interior sampling of the parameter box finds a violation.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    _check_template_rho(template, rho)
    filt = template.filter
    pl = scenario.plant
    ext = assemble_extended_vertices(scenario.envelope, filt, (pl.n, pl.n_w, pl.q, pl.m), include_midpoint=True)
    d = ext.dims
    scale = 1e3 * d.n_chi if scale is None else scale

    prob = sdp.AffineSdp()
    P = prob.sym_var(d.n_chi, "P")
    Q = prob.sym_var(d.n_w, "Q")
    Q0 = prob.sym_var(d.n_w, "Q0")
    R = prob.sym_var(d.m, "R")
    R0 = prob.sym_var(d.n, "R0")
    Mhat = prob.sym_var(d.n_z, "Mhat") if d.n_z else None
    if template.n_vars:
        Mm, mvars = prob.basis_var(template.m_basis, "mult")
        Zm = sdp.AffineMatrix(np.zeros(template.z_basis.shape[1:]), {v: template.z_basis[k] for k, v in enumerate(mvars)})
    else:
        Mm, mvars = sdp.AffineMatrix(np.zeros((d.n_z, d.n_z))), []
        Zm = sdp.AffineMatrix(np.zeros((d.n_psi, d.n_psi)))
    Pp = build_pp(d, Q, Q0, R, R0, Mm, Mhat)

    for k, (vert, mid) in enumerate(zip(ext.vertices, ext.is_midpoint)):
        prob.add_psd(-1.0 * vertex_form(vert, rho, P, Pp), margin=True, name="midpoint" if mid else f"vertex{k}")
    if d.n_psi:
        prob.add_psd(P - z_embed(d, Zm) * rho**-2, margin=True, name="P_minus_Z")
    else:
        prob.add_psd(P, margin=True, name="P_minus_Z")
    for name, X in (("Q", Q), ("Q0", Q0), ("R", R), ("R0", R0), ("Mhat", Mhat)):
        if X is not None and X.shape[0]:
            prob.add_psd(X, margin=False, name=name)

    # template constraints on the multiplier scalars
    nv = template.n_vars
    for row, rhs in zip(template.eq_a, template.eq_b):
        prob.eq_rows.append(({mvars[k]: float(c) for k, c in enumerate(row) if c != 0.0}, float(rhs)))
    for row, rhs in zip(template.le_g, template.le_h):
        prob.le_rows.append(({mvars[k]: float(c) for k, c in enumerate(row) if c != 0.0}, float(rhs)))
    for k, (f0, fk) in enumerate(template.lmis):
        expr = sdp.AffineMatrix(f0, {mvars[i]: fk[i] for i in range(nv) if np.any(fk[i])})
        prob.add_psd(expr, margin=False, name=f"multiplier_lmi{k}")
    for v in mvars:
        prob.le_rows.append(({v: 1.0}, multiplier_bound))
        prob.le_rows.append(({v: -1.0}, multiplier_bound))

    # normalization on P alone: the LMIs are homogeneous, and pinning the
    # trace of P (rather than bounding a sum with the weights) keeps the
    # trivial point P = 0, t = 0 out of reach so infeasible cases report a
    # negative margin instead of degenerating at zero
    prob.eq_rows.append(({i: float(np.trace(c)) for i, c in P.terms.items() if np.trace(c) != 0.0}, float(scale)))

    log.info("detectability SDP: %d variables, %d blocks, %d vertices", prob.n_vars, len(prob.blocks), len(ext.vertices))
    res = sdp.solve_max_margin(prob, opts)
    t_star = res.margin
    log.info("detectability margin t* = %.6g (status %s)", t_star, res.status)
    if not t_star > margin_tol:
        raise Infeasible(f"best LMI margin {t_star:.3e} does not exceed {margin_tol:g}", t_star)

    vals = np.array([res.x[v] for v in mvars])
    inst = template.instantiate(vals, rho)
    Pv = sym(res.value(P))
    P11 = Pv[:d.n + d.n_psi, :d.n + d.n_psi]
    if P0 is None:
        P0v = P11.copy()
    else:
        P0v = sym(P0)
        if np.linalg.eigvalsh(P0v - P11)[0] < -1e-8:
            raise InvalidCertificate("supplied P0 does not dominate P11")

    def val(X, k):
        return sym(res.value(X)) if X is not None else np.zeros((k, k))

    cert = DetectabilityCertificate(
        rho=float(rho), P=Pv, Q=val(Q, d.n_w), Q0=val(Q0, d.n_w), R=val(R, d.m), R0=val(R0, d.n),
        Mhat=val(Mhat, d.n_z), P0=P0v, multiplier=inst, margin=float(t_star),
        dims={"n": d.n, "n_w": d.n_w, "p": d.p, "q": d.q, "m": d.m, "n_psi": d.n_psi, "n_z": d.n_z},
        multiplier_values=vals, vertex_count=sum(1 for mid in ext.is_midpoint if not mid),
    )
    worst = interior_check(cert, scenario, interior_samples, seed)
    cert.interior_max_eig = worst
    if worst > interior_tol:
        raise Infeasible(f"interior parameter sample violates the LMI (max eigenvalue {worst:.3e})", t_star)
    return cert


def _cert_filter_and_env(cert: DetectabilityCertificate, scenario: Scenario):
    filt = cert.multiplier.filter
    env = _envelope_for(scenario.envelope, filt.p)
    return filt, env


def _cert_pp(cert: DetectabilityCertificate, d: Dims):
    return build_pp(d, cert.Q, cert.Q0, cert.R, cert.R0, cert.multiplier.M, cert.Mhat)


def interior_check(cert: DetectabilityCertificate, scenario: Scenario, samples: int, seed: int = 0) -> float:
    """Largest eigenvalue of the LMI form over uniformly sampled interior parameters."""
    filt, env = _cert_filter_and_env(cert, scenario)
    d = Dims(**cert.dims)
    slots = _free_slots(env)
    Pp = _cert_pp(cert, d)
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(max(samples, 1) if slots else 1):
        th = _theta_at(env, slots, rng.uniform(size=len(slots)))
        form = vertex_form(extended_matrices(th, filt, d), cert.rho, cert.P, Pp)
        worst = max(worst, float(np.linalg.eigvalsh(sym(form))[-1]))
    return worst


def recheck_certificate(cert: DetectabilityCertificate, scenario: Scenario, tol: float = 1e-7) -> dict:
    """Re-evaluate every stored constraint of a certificate from scratch."""
    filt, env = _cert_filter_and_env(cert, scenario)
    d = Dims(**cert.dims)
    pl = scenario.plant
    ext = assemble_extended_vertices(scenario.envelope, filt, (pl.n, pl.n_w, pl.q, pl.m))
    Pp = _cert_pp(cert, d)
    vertex_max = max(float(np.linalg.eigvalsh(sym(vertex_form(v, cert.rho, cert.P, Pp)))[-1]) for v in ext.vertices)
    p1_min = float(np.linalg.eigvalsh(cert.P1)[0])
    p11_min = float(np.linalg.eigvalsh(sym(cert.P11))[0])
    weights = [float(np.linalg.eigvalsh(sym(X))[0]) for X in (cert.Q, cert.Q0, cert.R, cert.R0, cert.Mhat) if X.size]
    weights_min = min(weights) if weights else 0.0
    p0_gap = float(np.linalg.eigvalsh(sym(cert.P0 - cert.P11))[0])
    out = {
        "vertex_max_eig": vertex_max,
        "P1_min_eig": p1_min,
        "P11_min_eig": p11_min,
        "weights_min_eig": weights_min,
        "P0_minus_P11_min_eig": p0_gap,
    }
    out["ok"] = bool(vertex_max <= tol and p1_min > 1e-8 and p11_min > 0 and weights_min >= -1e-8 and p0_gap >= -1e-8)
    return out


def nominal_filter(q: int) -> FilterRealization:
    return FilterRealization(np.zeros((0, 0)), np.zeros((0, q)), np.zeros((0, 0)), np.zeros((0, q)), q=q, p=0)


def verify_nominal(scenario: Scenario, rho: float, **kw) -> DetectabilityCertificate:
    """Certificate for the model with the uncertainty channel removed (``d = 0``)."""
    filt = nominal_filter(scenario.plant.q)
    template = MultiplierTemplate(
        filter=filt, rho=float(rho),
        m_basis=np.zeros((0, 0, 0)), z_basis=np.zeros((0, 0, 0)),
        eq_a=np.zeros((0, 0)), eq_b=np.zeros(0), le_g=np.zeros((0, 0)), le_h=np.zeros(0),
        families=({"family": "none"},),
    )
    cert = verify_detectability(scenario, template, rho, **kw)
    cert.nominal = True
    return cert


@dataclass
class DissipationReport:
    pairs: int
    length: int
    steps: int
    truncated: int
    worst_violation: float
    worst_relative: float


def validate_certificate(cert: DetectabilityCertificate, scenario: Scenario, pairs: int, length: int, seed: int = 0,
                         probe: Optional[float] = None) -> DissipationReport:
    """Check the per-step dissipation inequality along sampled trajectory pairs.

    The true loop runs the actual uncertainty through the multiplier filter;
    the model copy uses freely sampled ``d~``, ``w~`` and an arbitrary initial
    filter state.  A pair stops early once either state leaves the probe box
    on which the envelope was validated.
    """
    pl = scenario.plant
    d = Dims(**cert.dims)
    if d.n != pl.n or d.n_w != pl.n_w or d.m != pl.m:
        raise InvalidCertificate("certificate dimensions do not match the scenario")
    filt = cert.multiplier.filter
    M, Mhat = cert.multiplier.M, cert.Mhat
    rho2 = cert.rho**2
    probe = scenario.x_probe if probe is None else probe
    xbox = scenario.X.probe(probe)
    wbox = scenario.W.probe(probe)
    seeds = np.random.SeedSequence(seed).spawn(max(pairs, 0))

    worst = -np.inf
    worst_rel = -np.inf
    steps = truncated = 0

    def wq(a, W):
        return float(a @ W @ a) if a.size else 0.0

    for ss in seeds:
        rng = np.random.default_rng(ss)
        # free: unrelated model copy; tracking: model copy near the truth;
        # identical: model copy equal to the truth, estimate equal to the state
        mode = ("free", "tracking", "identical")[rng.integers(3)]
        x = xbox.sample(rng) * 0.5
        psi = np.zeros(d.n_psi)
        if mode == "identical":
            xt, psit = x.copy(), psi.copy()
        else:
            xt = x + rng.uniform(-1, 1, size=pl.n) if mode == "tracking" else xbox.sample(rng) * 0.5
            psit = rng.normal(scale=0.5, size=d.n_psi)
        for _ in range(length):
            xhat = x.copy() if mode == "identical" else x + rng.uniform(-1, 1, size=pl.n)
            u = np.asarray(scenario.controller(xhat), dtype=float)
            w = wbox.sample(rng)
            wt = w.copy() if mode == "identical" else wbox.sample(rng)
            v = np.atleast_1d(pl.g(x, w))
            vt = np.atleast_1d(pl.g(xt, wt))
            if cert.nominal:
                dd = dt = np.zeros(0)
                dfull = dtfull = np.zeros(pl.p)
            else:
                dd = np.atleast_1d(scenario.uncertainty(v))
                if mode == "identical":
                    dt = dd.copy()
                elif mode == "tracking":
                    dt = np.atleast_1d(scenario.uncertainty(vt)) + rng.uniform(-0.1, 0.1, size=d.p)
                else:
                    dt = rng.uniform(-scenario.d_probe, scenario.d_probe, size=d.p)
                dfull, dtfull = dd, dt
            xn = np.atleast_1d(pl.f(x, w, dfull, u))
            y = np.atleast_1d(pl.h(x, w, dfull, u))
            xtn = np.atleast_1d(pl.f(xt, wt, dtfull, u))
            yt = np.atleast_1d(pl.h(xt, wt, dtfull, u))
            psin, z = filter_step(filt, psi, v, dd)
            psitn, zt = filter_step(filt, psit, vt, dt)
            chi = np.concatenate([x - xt, psi - psit, x, psi])
            chin = np.concatenate([xn - xtn, psin - psitn, xn, psin])
            lhs = float(chin @ cert.P @ chin)
            rhs = (rho2 * float(chi @ cert.P @ chi) + wq(w, cert.Q0) + wq(w - wt, cert.Q)
                   + wq(xhat - xt, cert.R0) + wq(zt, Mhat) + wq(y - yt, cert.R) - wq(z, M + Mhat))
            gap = lhs - rhs
            scale_ = 1.0 + float(chi @ chi + w @ w + xhat @ xhat + dd @ dd + dt @ dt)
            worst = max(worst, gap)
            worst_rel = max(worst_rel, gap / scale_)
            steps += 1
            x, xt, psi, psit = xn, xtn, psin, psitn
            if not (xbox.contains(x) and xbox.contains(xt)):
                truncated += 1
                break
    return DissipationReport(pairs, length, steps, truncated, float(worst), float(worst_rel))
