"""Point-wise rho-IQC multiplier families.

A multiplier is a linear filter ``psi+ = A psi + B col(v, d)``,
``z = C psi + D col(v, d)`` with ``psi_0 = 0`` together with ``(M, Z)`` such that

    z' M z - psi' Z psi + rho^-2 psi+' Z psi+ >= 0

along every trajectory driven by ``d = Delta(v)``.  Templates keep ``(M, Z)``
as affine functions of free scalars plus the affine and LMI constraints that
make any feasible point a valid multiplier.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .numkit import blockdiag, kron, sym

__all__ = [
    "BadParams",
    "DimMismatch",
    "FilterRealization",
    "MultiplierTemplate",
    "MultiplierInstance",
    "IqcReport",
    "build_zames_falb_template",
    "build_static_polytopic_template",
    "build_parametric_template",
    "combine",
    "filter_step",
    "iqc_value",
    "check_pointwise_iqc_empirical",
    "sector_instance",
]


class BadParams(ValueError):
    pass


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FilterRealization:
    """State-space filter driven by ``col(v, d)`` with ``v`` in R^q and ``d`` in R^p."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    q: int
    p: int

    def __post_init__(self):
        n_psi = np.shape(self.A)[0] if np.size(self.A) else 0
        n_z = np.shape(self.D)[0]
        for name, shape in (("A", (n_psi, n_psi)), ("B", (n_psi, self.q + self.p)),
                            ("C", (n_z, n_psi)), ("D", (n_z, self.q + self.p))):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(shape)
            object.__setattr__(self, name, arr)

    @property
    def n_psi(self) -> int:
        return self.A.shape[0]

    @property
    def n_z(self) -> int:
        return self.D.shape[0]

    @property
    def B_v(self):
        return self.B[:, :self.q]

    @property
    def B_d(self):
        return self.B[:, self.q:]

    @property
    def D_v(self):
        return self.D[:, :self.q]

    @property
    def D_d(self):
        return self.D[:, self.q:]


def filter_step(f: FilterRealization, psi, v, d):
    """One filter step; returns ``(psi_next, z)``."""
    psi = np.asarray(psi, dtype=float).reshape(-1)
    inp = np.concatenate([np.atleast_1d(np.asarray(v, dtype=float)), np.atleast_1d(np.asarray(d, dtype=float))])
    if psi.size != f.n_psi or inp.size != f.q + f.p:
        raise DimMismatch(f"filter expects psi of size {f.n_psi} and input of size {f.q + f.p}")
    return f.A @ psi + f.B @ inp, f.C @ psi + f.D @ inp


@dataclass(frozen=True)
class MultiplierInstance:
    filter: FilterRealization
    rho: float
    M: np.ndarray
    Z: np.ndarray
    families: tuple = ()

    def value(self, psi, psi_next, z) -> float:
        return iqc_value(self.M, self.Z, self.rho, psi, psi_next, z)


def iqc_value(M, Z, rho, psi, psi_next, z) -> float:
    out = float(z @ M @ z)
    if np.size(Z):
        out += float(-psi @ Z @ psi + psi_next @ Z @ psi_next / rho**2)
    return out


@dataclass
class MultiplierTemplate:
    """``M(v) = sum_k v_k m_basis[k]``, ``Z(v) = sum_k v_k z_basis[k]``.

    Constraints on the free scalars ``v``: ``eq_a v = eq_b``, ``le_g v <= le_h``,
    and ``F0 + sum_k v_k F[k] >= 0`` for every ``(F0, F)`` in ``lmis``.
    ``rho`` is ``None`` for static families, which hold for every rate.
    """

    filter: FilterRealization
    rho: Optional[float]
    m_basis: np.ndarray
    z_basis: np.ndarray
    eq_a: np.ndarray
    eq_b: np.ndarray
    le_g: np.ndarray
    le_h: np.ndarray
    lmis: list = field(default_factory=list)
    families: tuple = ()

    @property
    def n_vars(self) -> int:
        return self.m_basis.shape[0]

    @property
    def p(self) -> int:
        return self.filter.p

    def M(self, values) -> np.ndarray:
        return np.tensordot(np.asarray(values, dtype=float), self.m_basis, axes=1) if self.n_vars else np.zeros(self.m_basis.shape[1:])

    def Z(self, values) -> np.ndarray:
        return np.tensordot(np.asarray(values, dtype=float), self.z_basis, axes=1) if self.n_vars else np.zeros(self.z_basis.shape[1:])

    def violation(self, values) -> float:
        """Largest constraint violation at ``values`` (0 when feasible)."""
        v = np.asarray(values, dtype=float)
        worst = 0.0
        if self.eq_a.shape[0]:
            worst = max(worst, float(np.max(np.abs(self.eq_a @ v - self.eq_b))))
        if self.le_g.shape[0]:
            worst = max(worst, float(np.max(self.le_g @ v - self.le_h)))
        for f0, fk in self.lmis:
            mat = f0 + (np.tensordot(v, fk, axes=1) if fk.shape[0] else 0.0)
            worst = max(worst, -float(np.linalg.eigvalsh(sym(mat))[0]))
        return worst

    def instantiate(self, values, rho: Optional[float] = None) -> MultiplierInstance:
        r = self.rho if rho is None else rho
        if r is None:
            raise BadParams("static template needs an explicit rho to instantiate")
        return MultiplierInstance(self.filter, float(r), sym(self.M(values)), sym(self.Z(values)) if self.filter.n_psi else np.zeros((0, 0)), self.families)


def _check_rho(rho):
    if not 0.0 < rho < 1.0:
        raise BadParams(f"rho must lie in (0, 1), got {rho}")


def _sym_basis(dim: int) -> list[np.ndarray]:
    out = []
    for i in range(dim):
        for j in range(i, dim):
            e = np.zeros((dim, dim))
            e[i, j] = e[j, i] = 1.0
            out.append(e)
    return out


def _full_basis(rows: int, cols: int) -> list[np.ndarray]:
    out = []
    for i in range(rows):
        for j in range(cols):
            e = np.zeros((rows, cols))
            e[i, j] = 1.0
            out.append(e)
    return out


def _stack(mats, shape):
    return np.array(mats).reshape((len(mats),) + shape) if mats else np.zeros((0,) + shape)


def build_zames_falb_template(nu: int, alpha: float, beta: float, p: int, rho: float) -> MultiplierTemplate:
    """FIR Zames-Falb multipliers of order ``nu`` for slope-restricted maps in ``[alpha, beta]``."""
    _check_rho(rho)
    if nu < 1:
        raise BadParams("nu must be >= 1")
    if not beta > alpha:
        raise BadParams("need beta > alpha")
    ip = np.eye(p)
    t = np.block([[beta * ip, -ip], [-alpha * ip, ip]])
    jordan = np.eye(nu, k=1)
    last = np.zeros((nu, 1))
    last[-1] = 1.0
    a_psi = kron(np.eye(2), kron(jordan, ip))
    b_psi = kron(np.eye(2), kron(last, ip)) @ t
    c_psi = kron(np.eye(2), kron(np.vstack([np.eye(nu), np.zeros((1, nu))]), ip))
    d_psi = kron(np.eye(2), kron(np.vstack([np.zeros((nu, 1)), [[1.0]]]), ip)) @ t
    filt = FilterRealization(a_psi, b_psi, c_psi, d_psi, q=p, p=p)

    nw = (nu + 1) ** 2
    nq = nu ** 2
    n_z = 2 * (nu + 1) * p
    n_psi = 2 * nu * p
    m_basis, z_basis = [], []
    # W entries (row-major) then Q entries
    for e in _full_basis(nu + 1, nu + 1):
        blk = kron(e, ip)
        m_basis.append(np.block([[np.zeros_like(blk), blk], [blk.T, np.zeros_like(blk)]]))
        z_basis.append(np.zeros((n_psi, n_psi)))
    for e in _full_basis(nu, nu):
        blk = kron(e, ip)
        m_basis.append(np.zeros((n_z, n_z)))
        z_basis.append(np.block([[np.zeros_like(blk), blk], [blk.T, np.zeros_like(blk)]]))

    # What(v) = W - diag(Q, 0) + diag(0, rho^-2 Q), as a linear map of v
    what = np.zeros((nw + nq, nu + 1, nu + 1))
    for k in range(nw):
        what[k, k // (nu + 1), k % (nu + 1)] = 1.0
    for k in range(nq):
        i, j = divmod(k, nu)
        what[nw + k, i, j] -= 1.0
        what[nw + k, i + 1, j + 1] += rho ** -2
    eq, le = [], []
    for i in range(nu + 1):
        for j in range(i + 1, nu + 1):
            eq.append(what[:, i, j] - what[:, j, i])
    for i in range(nu + 1):
        for j in range(nu + 1):
            if i != j:
                le.append(what[:, i, j])
    for i in range(nu + 1):
        le.append(-what[:, i, :].sum(axis=1))
    for j in range(nu + 1):
        le.append(-what[:, :, j].sum(axis=1))
    return MultiplierTemplate(
        filter=filt,
        rho=float(rho),
        m_basis=np.array(m_basis),
        z_basis=np.array(z_basis),
        eq_a=np.array(eq).reshape(-1, nw + nq),
        eq_b=np.zeros(len(eq)),
        le_g=np.array(le),
        le_h=np.zeros(len(le)),
        families=({"family": "zames_falb", "nu": nu, "alpha": alpha, "beta": beta, "p": p},),
    )


def zf_what(template: MultiplierTemplate, values) -> np.ndarray:
    """Recover the matrix that must be doubly hyperdominant for a single ZF template."""
    fam = template.families[0]
    if fam["family"] != "zames_falb" or len(template.families) != 1:
        raise BadParams("not a Zames-Falb template")
    nu, rho = fam["nu"], template.rho
    v = np.asarray(values, dtype=float)
    nw = (nu + 1) ** 2
    w = v[:nw].reshape(nu + 1, nu + 1)
    q = v[nw:].reshape(nu, nu)
    out = w.copy()
    out[:nu, :nu] -= q
    out[1:, 1:] += q / rho**2
    return out


def build_static_polytopic_template(alpha: float, beta: float, p: int) -> MultiplierTemplate:
    """Memoryless multipliers for diagonal maps with each gain in ``[alpha, beta]``.

    Feasibility is checked at the ``2^p`` gain vertices; the added condition
    ``M22 <= 0`` makes the vertex test sufficient for the whole box.
    """
    if not beta > alpha:
        raise BadParams("need beta > alpha")
    filt = FilterRealization(np.zeros((0, 0)), np.zeros((0, 2 * p)), np.zeros((2 * p, 0)), np.eye(2 * p), q=p, p=p)
    basis = _sym_basis(2 * p)
    m_basis = np.array(basis)
    lmis = []
    for delta in itertools.product((alpha, beta), repeat=p):
        outer = np.vstack([np.eye(p), np.diag(delta)])
        lmis.append((np.zeros((p, p)), np.array([outer.T @ b @ outer for b in basis])))
    lmis.append((np.zeros((p, p)), np.array([-b[p:, p:] for b in basis])))
    nv = len(basis)
    return MultiplierTemplate(
        filter=filt,
        rho=None,
        m_basis=m_basis,
        z_basis=np.zeros((nv, 0, 0)),
        eq_a=np.zeros((0, nv)),
        eq_b=np.zeros(0),
        le_g=np.zeros((0, nv)),
        le_h=np.zeros(0),
        lmis=lmis,
        families=({"family": "static_polytopic", "alpha": alpha, "beta": beta, "p": p},),
    )


def build_parametric_template(a: float, b: float, phi: Sequence[np.ndarray], rho: float, p: int | None = None) -> MultiplierTemplate:
    """Multipliers for ``Delta(v) = delta v`` with ``delta`` in ``[a, b]`` through a fixed filter ``phi``.

    ``phi = (A_phi, B_phi, C_phi, D_phi)``; ``A_phi`` may be ``0 x 0`` for a memoryless filter.
    """
    _check_rho(rho)
    if not b > a:
        raise BadParams("need b > a")
    d_phi = np.atleast_2d(np.asarray(phi[3], dtype=float))
    p = d_phi.shape[1] if p is None else p
    n_phi = np.shape(phi[0])[0] if np.size(phi[0]) else 0
    nzp = d_phi.shape[0]
    a_phi = np.asarray(phi[0], dtype=float).reshape(n_phi, n_phi)
    b_phi = np.asarray(phi[1], dtype=float).reshape(n_phi, p)
    c_phi = np.asarray(phi[2], dtype=float).reshape(nzp, n_phi)
    d_phi = d_phi.reshape(nzp, p)
    ip = np.eye(p)
    t = np.block([[b * ip, -ip], [-a * ip, ip]])
    i2 = np.eye(2)
    filt = FilterRealization(kron(i2, a_phi) if n_phi else np.zeros((0, 0)),
                             (kron(i2, b_phi) @ t) if n_phi else np.zeros((0, 2 * p)),
                             kron(i2, c_phi) if n_phi else np.zeros((2 * nzp, 0)),
                             kron(i2, d_phi) @ t, q=p, p=p)
    n_z, n_psi = 2 * nzp, 2 * n_phi

    m_basis, z_basis = [], []
    # slot per variable: which of (M1, W2, M3, Z1, Q2, Z3) and its local basis element
    tags = []

    def put(kind, e):
        mm = np.zeros((n_z, n_z))
        zz = np.zeros((n_psi, n_psi))
        if kind == "M1":
            mm[:nzp, :nzp] = e
        elif kind == "M3":
            mm[nzp:, nzp:] = e
        elif kind == "W2":
            mm[:nzp, nzp:] = e
            mm[nzp:, :nzp] = e.T
        elif kind == "Z1":
            zz[:n_phi, :n_phi] = e
        elif kind == "Z3":
            zz[n_phi:, n_phi:] = e
        elif kind == "Q2":
            zz[:n_phi, n_phi:] = e
            zz[n_phi:, :n_phi] = e.T
        m_basis.append(mm)
        z_basis.append(zz)
        tags.append((kind, e))

    for e in _sym_basis(nzp):
        put("M1", e)
    for e in _full_basis(nzp, nzp):
        put("W2", e)
    for e in _sym_basis(nzp):
        put("M3", e)
    for e in _sym_basis(n_phi):
        put("Z1", e)
    for e in _full_basis(n_phi, n_phi):
        put("Q2", e)
    for e in _sym_basis(n_phi):
        put("Z3", e)

    outer = np.block([[np.eye(n_phi), np.zeros((n_phi, p))], [a_phi, b_phi], [c_phi, d_phi]])
    lmis = []
    for which in (("M1", "Z1"), ("W2", "Q2"), ("M3", "Z3")):
        coeffs = []
        for kind, e in tags:
            mi = np.zeros((nzp, nzp))
            zi = np.zeros((n_phi, n_phi))
            if kind == which[0]:
                mi = e + e.T if kind == "W2" else e
            if kind == which[1]:
                zi = e + e.T if kind == "Q2" else e
            mid = blockdiag(-zi, zi / rho**2, mi)
            coeffs.append(outer.T @ mid @ outer)
        lmis.append((np.zeros((n_phi + p, n_phi + p)), np.array(coeffs)))
    nv = len(tags)
    return MultiplierTemplate(
        filter=filt,
        rho=float(rho),
        m_basis=_stack(m_basis, (n_z, n_z)),
        z_basis=_stack(z_basis, (n_psi, n_psi)),
        eq_a=np.zeros((0, nv)),
        eq_b=np.zeros(0),
        le_g=np.zeros((0, nv)),
        le_h=np.zeros(0),
        lmis=lmis,
        families=({"family": "parametric", "a": a, "b": b, "p": p, "n_phi": n_phi},),
    )


def combine(templates: Sequence[MultiplierTemplate]) -> MultiplierTemplate:
    """Stack filters and block-diagonalize ``(M, Z)``; constraints are the union."""
    templates = list(templates)
    if not templates:
        raise BadParams("nothing to combine")
    if len(templates) == 1:
        return templates[0]
    ps = {t.filter.p for t in templates} | {t.filter.q for t in templates}
    if len(ps) != 1:
        raise DimMismatch(f"templates disagree on the channel dimension: {sorted(ps)}")
    rhos = {t.rho for t in templates if t.rho is not None}
    if len(rhos) > 1:
        raise DimMismatch(f"templates disagree on rho: {sorted(rhos)}")
    rho = rhos.pop() if rhos else None
    filt = FilterRealization(
        blockdiag(*[t.filter.A for t in templates]),
        np.vstack([t.filter.B for t in templates]),
        blockdiag(*[t.filter.C for t in templates]),
        np.vstack([t.filter.D for t in templates]),
        q=templates[0].filter.q, p=templates[0].filter.p,
    )
    nv = sum(t.n_vars for t in templates)
    n_z, n_psi = filt.n_z, filt.n_psi
    m_basis = np.zeros((nv, n_z, n_z))
    z_basis = np.zeros((nv, n_psi, n_psi))
    eq_a, eq_b, le_g, le_h, lmis = [], [], [], [], []
    off = zo = po = 0
    for t in templates:
        k, nz, npsi = t.n_vars, t.filter.n_z, t.filter.n_psi
        m_basis[off:off + k, zo:zo + nz, zo:zo + nz] = t.m_basis
        z_basis[off:off + k, po:po + npsi, po:po + npsi] = t.z_basis
        if t.eq_a.shape[0]:
            a = np.zeros((t.eq_a.shape[0], nv))
            a[:, off:off + k] = t.eq_a
            eq_a.append(a)
            eq_b.append(t.eq_b)
        if t.le_g.shape[0]:
            g = np.zeros((t.le_g.shape[0], nv))
            g[:, off:off + k] = t.le_g
            le_g.append(g)
            le_h.append(t.le_h)
        for f0, fk in t.lmis:
            full = np.zeros((nv,) + f0.shape)
            full[off:off + k] = fk
            lmis.append((f0, full))
        off += k
        zo += nz
        po += npsi
    return MultiplierTemplate(
        filter=filt,
        rho=rho,
        m_basis=m_basis,
        z_basis=z_basis,
        eq_a=np.vstack(eq_a) if eq_a else np.zeros((0, nv)),
        eq_b=np.concatenate(eq_b) if eq_b else np.zeros(0),
        le_g=np.vstack(le_g) if le_g else np.zeros((0, nv)),
        le_h=np.concatenate(le_h) if le_h else np.zeros(0),
        lmis=lmis,
        families=tuple(f for t in templates for f in t.families),
    )


def sector_instance(alpha: float, beta: float, rho: float = 0.5) -> MultiplierInstance:
    """Canonical scalar sector multiplier ``(d - alpha v)(beta v - d) >= 0``."""
    t = build_static_polytopic_template(alpha, beta, 1)
    m = np.array([[-alpha * beta, 0.5 * (alpha + beta)], [0.5 * (alpha + beta), -1.0]])
    return MultiplierInstance(t.filter, rho, m, np.zeros((0, 0)), t.families)


@dataclass
class IqcReport:
    trajectories: int
    length: int
    steps: int
    min_value: float
    worst_trajectory: int = -1
    worst_step: int = -1

    def ok(self, tol: float = 1e-9) -> bool:
        return self.min_value >= -tol


def _probe_inputs(rng: np.random.Generator, kind: str, length: int, q: int, amp: float) -> np.ndarray:
    if kind == "iid":
        return rng.uniform(-amp, amp, size=(length, q))
    k = np.arange(length)[:, None]
    a = rng.uniform(0.2 * amp, amp, size=q)
    om = rng.uniform(0.01, 0.6, size=q)
    ph = rng.uniform(0, 2 * np.pi, size=q)
    return a * np.sin(om * k + ph) + rng.normal(scale=0.05 * amp, size=(length, q))


def check_pointwise_iqc_empirical(
    inst: MultiplierInstance,
    delta: Callable,
    trajectories: int,
    length: int,
    seed: int = 0,
    amplitude: float = 5.0,
) -> IqcReport:
    """Run the filter on probe signals and record the smallest IQC left-hand side.

    Even-numbered trajectories use i.i.d. uniform inputs, odd-numbered ones
    slowly varying sinusoids; each trajectory gets its own spawned seed.
    """
    if trajectories <= 0 or length <= 0:
        return IqcReport(max(trajectories, 0), length, 0, float("inf"))
    filt = inst.filter
    seeds = np.random.SeedSequence(seed).spawn(trajectories)
    best = (float("inf"), -1, -1)
    steps = 0
    for tr, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        vs = _probe_inputs(rng, "iid" if tr % 2 == 0 else "sin", length, filt.q, amplitude)
        psi = np.zeros(filt.n_psi)
        for k in range(length):
            v = vs[k]
            d = np.atleast_1d(delta(v))
            psi_next, z = filter_step(filt, psi, v, d)
            val = inst.value(psi, psi_next, z)
            steps += 1
            if val < best[0]:
                best = (val, tr, k)
            psi = psi_next
    return IqcReport(trajectories, length, steps, best[0], best[1], best[2])
