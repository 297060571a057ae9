"""Affine semidefinite max-margin problems.

A problem is a list of symmetric blocks ``F_b(x) = F_b0 + sum_i x_i F_bi``
plus affine equalities/inequalities on ``x``.  :func:`solve_max_margin`
maximizes a common slack ``t`` with ``F_b(x) - t I >= 0`` for every block
flagged ``margin=True`` (other blocks are plain ``F_b(x) >= 0``).

Equalities are eliminated through a null-space parameterization before the
conic solve, so they hold to machine precision.  The reported margin is
recomputed from eigenvalues of the returned point, never taken from the
solver's internal state.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import scipy.linalg

from .numkit import sym

__all__ = [
    "AffineMatrix",
    "AffineSdp",
    "SdpOptions",
    "SdpResult",
    "SdpError",
    "Infeasible",
    "NumericalFailure",
    "solve_max_margin",
    "dump_problem",
    "register_backend",
]


class SdpError(RuntimeError):
    pass


class Infeasible(SdpError):
    """The variable constraints admit no point, or the margin is not positive."""

    def __init__(self, message: str, margin: float = float("-inf"), result=None):
        super().__init__(message)
        self.margin = margin
        self.result = result


class NumericalFailure(SdpError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AffineMatrix:
    """Matrix-valued affine function ``const + sum_i x_i terms[i]``."""

    __array_priority__ = 1000

    def __init__(self, const, terms: dict[int, np.ndarray] | None = None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.terms = {} if terms is None else dict(terms)

    @property
    def shape(self):
        return self.const.shape

    @property
    def T(self) -> "AffineMatrix":
        return AffineMatrix(self.const.T, {i: c.T for i, c in self.terms.items()})

    @staticmethod
    def lift(other, shape=None) -> "AffineMatrix":
        if isinstance(other, AffineMatrix):
            return other
        arr = np.asarray(other, dtype=float)
        if arr.ndim == 0 and shape is not None:
            arr = np.full(shape, float(arr))
        return AffineMatrix(arr)

    def __add__(self, other):
        other = AffineMatrix.lift(other, self.shape)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} + {other.shape}")
        terms = dict(self.terms)
        for i, c in other.terms.items():
            terms[i] = terms[i] + c if i in terms else c
        return AffineMatrix(self.const + other.const, terms)

    __radd__ = __add__

    def __neg__(self):
        return AffineMatrix(-self.const, {i: -c for i, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-AffineMatrix.lift(other, self.shape))

    def __rsub__(self, other):
        return AffineMatrix.lift(other, self.shape) + (-self)

    def __mul__(self, s):
        s = float(s)
        return AffineMatrix(self.const * s, {i: c * s for i, c in self.terms.items()})

    __rmul__ = __mul__

    def __matmul__(self, a):
        a = np.asarray(a, dtype=float)
        return AffineMatrix(self.const @ a, {i: c @ a for i, c in self.terms.items()})

    def __rmatmul__(self, a):
        a = np.asarray(a, dtype=float)
        return AffineMatrix(a @ self.const, {i: a @ c for i, c in self.terms.items()})

    def __getitem__(self, idx):
        return AffineMatrix(self.const[idx], {i: c[idx] for i, c in self.terms.items()})

    def congruence(self, o) -> "AffineMatrix":
        """``o.T @ self @ o``."""
        o = np.asarray(o, dtype=float)
        return AffineMatrix(o.T @ self.const @ o, {i: o.T @ c @ o for i, c in self.terms.items()})

    def value(self, x) -> np.ndarray:
        out = self.const.copy()
        for i, c in self.terms.items():
            out = out + x[i] * c
        return out

    @staticmethod
    def bmat(rows) -> "AffineMatrix":
        """Block assembly; ``None`` entries are zero blocks sized from their row/column."""
        heights = []
        for row in rows:
            h = [np.shape(b)[0] if not isinstance(b, AffineMatrix) else b.shape[0] for b in row if b is not None]
            if not h:
                raise ValueError("every block row needs at least one sized entry")
            heights.append(h[0])
        widths = []
        for j in range(len(rows[0])):
            w = [np.shape(r[j])[1] if not isinstance(r[j], AffineMatrix) else r[j].shape[1] for r in rows if r[j] is not None]
            if not w:
                raise ValueError("every block column needs at least one sized entry")
            widths.append(w[0])
        out = AffineMatrix(np.zeros((sum(heights), sum(widths))))
        r0 = 0
        for bi, row in enumerate(rows):
            c0 = 0
            for bj, b in enumerate(row):
                if b is not None:
                    b = AffineMatrix.lift(b)
                    if b.shape != (heights[bi], widths[bj]):
                        raise ValueError(f"block ({bi},{bj}) has shape {b.shape}, expected {(heights[bi], widths[bj])}")
                    out.const[r0:r0 + heights[bi], c0:c0 + widths[bj]] += b.const
                    for i, c in b.terms.items():
                        if i not in out.terms:
                            out.terms[i] = np.zeros(out.shape)
                        out.terms[i][r0:r0 + heights[bi], c0:c0 + widths[bj]] += c
                c0 += widths[bj]
            r0 += heights[bi]
        return out


@dataclass
class _Block:
    expr: AffineMatrix
    margin: bool
    name: str


@dataclass
class AffineSdp:
    """Container for variables, PSD blocks and scalar affine constraints."""

    n_vars: int = 0
    blocks: list = field(default_factory=list)
    eq_rows: list = field(default_factory=list)  # (dict var->coef, rhs)
    le_rows: list = field(default_factory=list)  # sum coef*x <= rhs
    objective: dict = field(default_factory=dict)  # extra term added to t
    var_names: list = field(default_factory=list)

    def scalar_vars(self, count: int, name: str = "x") -> list[int]:
        idx = list(range(self.n_vars, self.n_vars + count))
        self.n_vars += count
        self.var_names.extend(f"{name}[{k}]" for k in range(count))
        return idx

    def sym_var(self, dim: int, name: str = "S") -> AffineMatrix:
        """Symmetric ``dim x dim`` matrix variable (upper triangle parameterized)."""
        terms = {}
        pairs = [(i, j) for i in range(dim) for j in range(i, dim)]
        idx = self.scalar_vars(len(pairs), name)
        for v, (i, j) in zip(idx, pairs):
            e = np.zeros((dim, dim))
            e[i, j] = e[j, i] = 1.0
            terms[v] = e
        return AffineMatrix(np.zeros((dim, dim)), terms)

    def basis_var(self, basis: np.ndarray, name: str = "B") -> tuple[AffineMatrix, list[int]]:
        """Matrix ``sum_k x_k basis[k]`` over freshly allocated scalars."""
        basis = np.asarray(basis, dtype=float)
        idx = self.scalar_vars(basis.shape[0], name)
        return AffineMatrix(np.zeros(basis.shape[1:]), {v: basis[k] for k, v in enumerate(idx)}), idx

    def add_psd(self, expr: AffineMatrix, margin: bool = True, name: str = "") -> None:
        expr = AffineMatrix.lift(expr)
        if expr.shape[0] != expr.shape[1] or expr.shape[0] < 1:
            raise ValueError(f"PSD block must be square and nonempty, got {expr.shape}")
        sexpr = AffineMatrix(sym(expr.const), {i: sym(c) for i, c in expr.terms.items()})
        self.blocks.append(_Block(sexpr, margin, name or f"block{len(self.blocks)}"))

    def _rows(self, expr, rhs):
        expr = AffineMatrix.lift(expr)
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), expr.shape) - expr.const
        for a in range(expr.shape[0]):
            for b in range(expr.shape[1]):
                coef = {i: float(c[a, b]) for i, c in expr.terms.items() if c[a, b] != 0.0}
                yield coef, float(rhs[a, b])

    def add_eq(self, expr, rhs=0.0) -> None:
        self.eq_rows.extend(self._rows(expr, rhs))

    def add_le(self, expr, rhs=0.0) -> None:
        self.le_rows.extend(self._rows(expr, rhs))

    def dense_eq(self):
        a = np.zeros((len(self.eq_rows), self.n_vars))
        b = np.zeros(len(self.eq_rows))
        for r, (coef, rhs) in enumerate(self.eq_rows):
            for i, c in coef.items():
                a[r, i] = c
            b[r] = rhs
        return a, b

    def dense_le(self):
        g = np.zeros((len(self.le_rows), self.n_vars))
        h = np.zeros(len(self.le_rows))
        for r, (coef, rhs) in enumerate(self.le_rows):
            for i, c in coef.items():
                g[r, i] = c
            h[r] = rhs
        return g, h


@dataclass
class SdpOptions:
    abstol: float = 1e-9
    reltol: float = 1e-9
    feastol: float = 1e-9
    maxiters: int = 200
    eq_tol: float = 1e-8
    le_tol: float = 1e-8
    block_tol: float = 1e-7
    backend: str = "clarabel"
    verbose: bool = False


@dataclass
class SdpResult:
    x: np.ndarray
    margin: float
    status: str
    iterations: int
    block_min_eigs: dict
    eq_residual: float
    le_violation: float

    def value(self, expr: AffineMatrix) -> np.ndarray:
        return expr.value(self.x)


def _nullspace_param(a: np.ndarray, b: np.ndarray, n: int, tol: float):
    """Return ``(x0, N)`` with ``{x : a x = b} = {x0 + N y}``."""
    if a.shape[0] == 0:
        return np.zeros(n), np.eye(n)
    x0, *_ = np.linalg.lstsq(a, b, rcond=None)
    if np.linalg.norm(a @ x0 - b) > tol * max(1.0, np.linalg.norm(b)):
        raise Infeasible("affine equality constraints are inconsistent")
    return x0, scipy.linalg.null_space(a)


def _backend_cvxopt(c, g_lin, h_lin, g_blocks, h_blocks, opts: SdpOptions):
    import cvxopt
    from cvxopt import solvers

    options = {
        "abstol": opts.abstol,
        "reltol": opts.reltol,
        "feastol": opts.feastol,
        "maxiters": opts.maxiters,
        "show_progress": opts.verbose,
    }
    kw = {}
    if g_lin.shape[0]:
        kw["Gl"] = cvxopt.matrix(g_lin)
        kw["hl"] = cvxopt.matrix(h_lin)
    sol = solvers.sdp(
        cvxopt.matrix(c),
        Gs=[cvxopt.matrix(g) for g in g_blocks],
        hs=[cvxopt.matrix(h) for h in h_blocks],
        options=options,
        **kw,
    )
    x = None if sol["x"] is None else np.array(sol["x"]).ravel()
    return x, sol["status"], int(sol.get("iterations", 0) or 0), {
        "gap": sol.get("gap"),
        "primal infeasibility": sol.get("primal infeasibility"),
        "dual infeasibility": sol.get("dual infeasibility"),
    }


def _svec_rows(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Row selection and scaling taking a column-major vec to the scaled upper triangle."""
    idx, scale = [], []
    for j in range(d):
        for i in range(j + 1):
            idx.append(i + j * d)
            scale.append(1.0 if i == j else np.sqrt(2.0))
    return np.array(idx, dtype=int), np.array(scale)


def _backend_clarabel(c, g_lin, h_lin, g_blocks, h_blocks, opts: SdpOptions):
    import clarabel
    import scipy.sparse as sp

    rows_a, rows_b, cones = [], [], []
    if g_lin.shape[0]:
        rows_a.append(g_lin)
        rows_b.append(h_lin)
        cones.append(clarabel.NonnegativeConeT(g_lin.shape[0]))
    for g, h in zip(g_blocks, h_blocks):
        d = h.shape[0]
        idx, scale = _svec_rows(d)
        rows_a.append(g[idx] * scale[:, None])
        rows_b.append(h.reshape(-1, order="F")[idx] * scale)
        cones.append(clarabel.PSDTriangleConeT(d))
    a = sp.csc_matrix(np.vstack(rows_a))
    b = np.concatenate(rows_b)
    nv = c.size
    settings = clarabel.DefaultSettings()
    settings.verbose = opts.verbose
    settings.max_iter = opts.maxiters
    settings.tol_gap_abs = opts.abstol
    settings.tol_gap_rel = opts.reltol
    settings.tol_feas = opts.feastol
    solver = clarabel.DefaultSolver(sp.csc_matrix((nv, nv)), np.asarray(c, dtype=float), a, b, cones, settings)
    sol = solver.solve()
    name = str(sol.status).split(".")[-1]
    status = {
        "Solved": "optimal",
        "PrimalInfeasible": "primal infeasible",
        "DualInfeasible": "dual infeasible",
    }.get(name, "unknown")
    x = np.array(sol.x, dtype=float) if status != "primal infeasible" else None
    return x, status, int(sol.iterations), {"clarabel_status": name, "solve_time": sol.solve_time}


_BACKENDS: dict[str, Callable] = {"cvxopt": _backend_cvxopt, "clarabel": _backend_clarabel}


def register_backend(name: str, fn: Callable) -> None:
    """Install an alternative conic solver.

    ``fn(c, G_lin, h_lin, G_blocks, h_blocks, opts) -> (x, status, iterations, diag)``
    solves ``min c^T y`` s.t. ``G_lin y <= h_lin`` and ``h_b - G_b y`` PSD, where
    ``G_b`` has one column-major vectorized matrix per column.  ``status`` is one of
    ``optimal``, ``primal infeasible``, ``dual infeasible`` or ``unknown``.
    """
    _BACKENDS[name] = fn


def solve_max_margin(problem: AffineSdp, opts: SdpOptions | None = None) -> SdpResult:
    """Maximize ``t`` such that every margin block satisfies ``F(x) - t I >= 0``.

    Raises :class:`Infeasible` when the non-margin constraints admit no point and
    :class:`NumericalFailure` when the solver stalls or the margin is unbounded.
    A negative optimal margin is returned, not raised; callers decide.
    """
    opts = opts or SdpOptions()
    if not any(b.margin for b in problem.blocks):
        raise ValueError("at least one block must carry the margin")
    n = problem.n_vars
    a_eq, b_eq = problem.dense_eq()
    g_le, h_le = problem.dense_le()
    x0, nbasis = _nullspace_param(a_eq, b_eq, n, 1e-10)

    # reduced variables y (len r) plus t; x = x0 + N y
    block_mats = []
    for blk in problem.blocks:
        d = blk.expr.shape[0]
        f = np.zeros((n, d * d))
        for i, c in blk.expr.terms.items():
            f[i] = c.reshape(-1, order="F")
        const = blk.expr.const.reshape(-1, order="F") + x0 @ f
        block_mats.append((const, nbasis.T @ f, d, blk.margin))

    # drop reduced directions that touch no constraint at all
    touch = [fm.T for _, fm, _, _ in block_mats]
    if g_le.shape[0]:
        touch.append(g_le @ nbasis)
    stacked = np.vstack(touch) if touch else np.zeros((0, nbasis.shape[1]))
    if stacked.size:
        _, sv, vt = np.linalg.svd(stacked, full_matrices=False)
        rank = int(np.sum(sv > 1e-12 * max(1.0, sv[0])))
        red = vt[:rank].T
    else:
        red = np.zeros((nbasis.shape[1], 0))
    basis = nbasis @ red  # x = x0 + basis z
    r = basis.shape[1]

    g_blocks, h_blocks = [], []
    for (const, fm, d, margin), blk in zip(block_mats, problem.blocks):
        fz = red.T @ fm if r else np.zeros((0, d * d))
        g = np.zeros((d * d, r + 1))
        if r:
            g[:, :r] = -fz.T
        if margin:
            g[:, r] = np.eye(d).reshape(-1, order="F")
        g_blocks.append(g)
        h_blocks.append(const.reshape(d, d, order="F"))

    g_lin = np.zeros((g_le.shape[0], r + 1))
    h_lin = h_le - g_le @ x0
    if g_le.shape[0]:
        g_lin[:, :r] = g_le @ basis
        # rows with no remaining dependence are checked directly
        dead = np.all(np.abs(g_lin) < 1e-14, axis=1)
        if np.any(h_lin[dead] < -opts.le_tol):
            raise Infeasible("affine inequalities are inconsistent with the equalities")
        g_lin, h_lin = g_lin[~dead], h_lin[~dead]

    c = np.zeros(r + 1)
    c[r] = -1.0
    for i, coef in problem.objective.items():
        c[:r] -= coef * basis[i]

    backend = _BACKENDS[opts.backend]
    try:
        z, status, iters, diag = backend(c, g_lin, h_lin, g_blocks, h_blocks, opts)
    except (ArithmeticError, ValueError) as exc:
        raise NumericalFailure(f"conic solver aborted: {exc!r}") from exc
    if status == "primal infeasible":
        raise Infeasible("no point satisfies the non-margin constraints")
    if status == "dual infeasible":
        raise NumericalFailure("margin objective is unbounded; add a normalization constraint", diag)
    if z is None or not np.all(np.isfinite(z)):
        raise NumericalFailure(f"solver returned no usable point (status {status})", diag)

    x = x0 + basis @ z[:r]
    return _verify(problem, x, status, iters, opts)


def _verify(problem: AffineSdp, x: np.ndarray, status: str, iters: int, opts: SdpOptions) -> SdpResult:
    eigs = {}
    margin = np.inf
    for blk in problem.blocks:
        lam = float(np.linalg.eigvalsh(sym(blk.expr.value(x)))[0])
        eigs[blk.name] = lam
        if blk.margin:
            margin = min(margin, lam)
    a_eq, b_eq = problem.dense_eq()
    g_le, h_le = problem.dense_le()
    eq_res = float(np.max(np.abs(a_eq @ x - b_eq))) if a_eq.shape[0] else 0.0
    le_vio = float(max(0.0, np.max(g_le @ x - h_le))) if g_le.shape[0] else 0.0
    res = SdpResult(x, float(margin), status, iters, eigs, eq_res, le_vio)
    plain_vio = min([0.0] + [v for b, v in zip(problem.blocks, eigs.values()) if not b.margin])
    if status != "optimal":
        if eq_res > opts.eq_tol or le_vio > opts.le_tol or plain_vio < -opts.block_tol:
            raise NumericalFailure(
                f"solver stopped with status {status!r} at an infeasible point",
                {"iterations": iters, "eq_residual": eq_res, "le_violation": le_vio, "min_plain_eig": plain_vio},
            )
    return res


def dump_problem(problem: AffineSdp, stream: io.TextIOBase | None = None) -> str:
    """Plain-text dump of a problem.

    Format::

        SDP <n_vars> <n_blocks> <n_eq> <n_le>
        BLOCK <name> <dim> <margin 0|1> <n_terms>
        CONST
        <dim rows of dim numbers>
        TERM <var index>
        <dim rows of dim numbers>
        ...
        EQ <k:coef ...> = <rhs>
        LE <k:coef ...> <= <rhs>

    Numbers use 17 significant digits.
    """
    out = io.StringIO()
    w = out.write
    w(f"SDP {problem.n_vars} {len(problem.blocks)} {len(problem.eq_rows)} {len(problem.le_rows)}\n")

    def mat(a):
        for row in a:
            w(" ".join(f"{v:.17g}" for v in row) + "\n")

    for blk in problem.blocks:
        d = blk.expr.shape[0]
        w(f"BLOCK {blk.name} {d} {int(blk.margin)} {len(blk.expr.terms)}\nCONST\n")
        mat(blk.expr.const)
        for i in sorted(blk.expr.terms):
            w(f"TERM {i}\n")
            mat(blk.expr.terms[i])
    for tag, rows, op in (("EQ", problem.eq_rows, "="), ("LE", problem.le_rows, "<=")):
        for coef, rhs in rows:
            body = " ".join(f"{i}:{c:.17g}" for i, c in sorted(coef.items()))
            w(f"{tag} {body} {op} {rhs:.17g}\n")
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def blocks_min_eigs(problem: AffineSdp, x: Iterable[float]) -> dict:
    x = np.asarray(list(x), dtype=float)
    return {b.name: float(np.linalg.eigvalsh(sym(b.expr.value(x)))[0]) for b in problem.blocks}
