"""Robust moving horizon estimation with an uncertainty filter state.

The estimator tracks the augmented state ``theta = col(x, psi)`` where ``psi``
is the state of the multiplier filter driven by ``col(v, d)``. Each step solves
a window problem in single-shooting form: the decision vector holds the
window-initial augmented state and the disturbance/uncertainty sequences, and
all later states are eliminated through the dynamics.

The window is indexed oldest first. Stage ``j`` (0-based) covers time
``k - N_k + j`` and carries the discount ``rho**(2 * (N_k - 1 - j))``, so the
most recent stage is undiscounted and the prior term gets ``rho**(2 * N_k)``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares, minimize

from .detect import DetectabilityCertificate, Dims, InvalidCertificate
from .iqc import FilterRealization
from .model import Scenario
from .numkit import NotPositiveDefinite, generalized_max_eig, psd_factor, sym, sym_eigvalsh

__all__ = [
    "InfeasibleWindow",
    "MheConfig",
    "MheSolution",
    "MheState",
    "SolverFailure",
    "WindowProblem",
    "estimate",
    "estimate_standard",
    "horizon_matrices",
    "iss_constants",
    "min_horizon",
]


class SolverFailure(RuntimeError):
    """Window solver did not meet its stopping test; ``best`` holds the last iterate."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class InfeasibleWindow(RuntimeError):
    """The trust constraint could not be satisfied; never expected for a valid certificate."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class MheConfig:
    N: int = 15
    eps: float = 0.1
    xi: float = 500.0
    d_max: Optional[float] = None  # None: 10x the scenario's uncertainty probe range
    kkt_tol: float = 1e-8
    max_iter: int = 200
    lambda_tol: float = 1e-8

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValueError("N must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not self.xi >= 0:
            raise ValueError("xi must be >= 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class MheState:
    """Per-run estimator memory, aligned by time index.

    ``us``/``ys`` hold applied inputs and measurements for times ``< k``;
    ``thetas`` holds published augmented estimates for times ``<= k - 1``
    (and ``k`` once :func:`estimate` has run for the current step).
    """

    N: int
    k: int = 0
    us: deque = field(default_factory=deque)
    ys: deque = field(default_factory=deque)
    thetas: deque = field(default_factory=deque)
    theta0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    warm: Optional[np.ndarray] = None
    warm_thetas: Optional[np.ndarray] = None
    published: bool = False

    @classmethod
    def initial(cls, xhat0, n_psi: int, N: int) -> "MheState":
        theta0 = np.concatenate([np.asarray(xhat0, dtype=float).reshape(-1), np.zeros(n_psi)])
        return cls(N=int(N), us=deque(maxlen=N), ys=deque(maxlen=N), thetas=deque(maxlen=N + 1), theta0=theta0)

    @property
    def n_k(self) -> int:
        return min(self.k, self.N)

    def publish(self, theta) -> None:
        if self.published:
            raise RuntimeError(f"estimate for time {self.k} already published")
        self.thetas.append(np.array(theta, dtype=float))
        self.published = True

    def record(self, u, y) -> None:
        """Store the input applied and the output measured at the current time, then advance."""
        if not self.published:
            raise RuntimeError(f"no estimate published for time {self.k}")
        self.us.append(np.atleast_1d(np.array(u, dtype=float)))
        self.ys.append(np.atleast_1d(np.array(y, dtype=float)))
        self.k += 1
        self.published = False


@dataclass
class MheSolution:
    k: int
    n_k: int
    theta0: np.ndarray  # window-initial augmented state
    w: np.ndarray  # (n_k, n_w)
    d: np.ndarray  # (n_k, p), zeros for the standard estimator
    thetas: np.ndarray  # (n_k + 1, n + n_psi), propagated
    yhat: np.ndarray  # (n_k, l)
    zhat: np.ndarray  # (n_k, n_z)
    cost: float
    lambda_residual: float
    dynamics_residual: float
    iterations: int
    status: str = "optimal"
    n: int = 0  # plant state size; the rest of each theta is the filter state

    @property
    def xhat(self) -> np.ndarray:
        return self.thetas[:, : self.n]

    @property
    def theta_k(self) -> np.ndarray:
        return self.thetas[-1]


def _empty_filter(q: int) -> FilterRealization:
    return FilterRealization(np.zeros((0, 0)), np.zeros((0, q)), np.zeros((0, 0)), np.zeros((0, q)), q=q, p=0)


class WindowProblem:
    """Single-shooting window problem with weighted residuals and inequality constraints.

    The cost is ``J(z) = ||r(z)||^2``. Inequalities ``g(z) <= 0`` hold the trust
    constraint (when ``lam`` is given) and any bounded state/output boxes.

    Parameters
    ----------
    scenario : Scenario
    filt : FilterRealization
        Filter driving ``psi``; an empty realization gives the plain state.
    use_d : bool
        Whether ``d`` is a decision variable (``False`` pins it to zero).
    weights : dict
        ``prior`` (P0 with its factor), ``w``, ``y``, ``z`` stage weights, before discounting.
    lam : dict or None
        ``R0``, ``P0``, ``Q``, ``R``, ``eps``, ``xi`` for the trust constraint.
    """

    def __init__(self, scenario: Scenario, filt: FilterRealization, use_d: bool, rho: float,
                 prior, us, ys, xpub, weights: dict, lam: Optional[dict] = None,
                 d_max: float = np.inf):
        pl = scenario.plant
        self.sc = scenario
        self.pl = pl
        self.filt = filt
        self.rho = float(rho)
        self.n = pl.n
        self.n_psi = filt.n_psi
        self.n_th = self.n + self.n_psi
        self.nw = pl.n_w
        self.pd = pl.p if use_d else 0
        self.use_d = use_d
        self.prior = np.asarray(prior, dtype=float)
        self.us = [np.atleast_1d(u) for u in us]
        self.ys = [np.atleast_1d(y) for y in ys]
        self.xpub = [np.asarray(x, dtype=float) for x in xpub]
        self.y_data = np.array(self.ys, dtype=float).reshape(len(self.ys), pl.m)
        self.x_pub = np.array(self.xpub, dtype=float).reshape(len(self.xpub), pl.n)
        self.N = len(self.us)
        if not (len(self.ys) == self.N == len(self.xpub)):
            raise ValueError("window buffers are misaligned")
        self.nz = self.n_th + self.N * (self.nw + self.pd)
        self.disc = np.array([self.rho ** (2 * (self.N - 1 - j)) for j in range(self.N)])
        self.disc_prior = self.rho ** (2 * self.N)
        self.L_prior = psd_factor(weights["prior"]) * math.sqrt(self.disc_prior)
        self.L_w = psd_factor(weights["w"])
        self.L_y = psd_factor(weights["y"])
        self.L_z = psd_factor(weights["z"]) if filt.n_z else np.zeros((0, 0))
        self.lam = lam
        self._fmats = (filt.A, filt.B_v, filt.B_d, filt.C, filt.D_v, filt.D_d)
        self._boxes = [b for b in (scenario.X, scenario.Y)
                       if np.isfinite(b.lower).any() or np.isfinite(b.upper).any()]
        self.d_max = float(d_max)
        self._cache_key = None
        self._cache_jac = False

    # layout --------------------------------------------------------------
    def split(self, z):
        z = np.asarray(z, dtype=float)
        th0 = z[: self.n_th]
        w = z[self.n_th: self.n_th + self.N * self.nw].reshape(self.N, self.nw)
        d = z[self.n_th + self.N * self.nw:].reshape(self.N, self.pd)
        return th0, w, d

    def pack(self, th0, w, d) -> np.ndarray:
        return np.concatenate([np.asarray(th0, float).ravel(), np.asarray(w, float).ravel(), np.asarray(d, float).ravel()])

    def _wi(self, j):
        s = self.n_th + j * self.nw
        return slice(s, s + self.nw)

    def _di(self, j):
        s = self.n_th + self.N * self.nw + j * self.pd
        return slice(s, s + self.pd)

    def bounds(self):
        lb = np.full(self.nz, -np.inf)
        ub = np.full(self.nz, np.inf)
        X, W = self.sc.X, self.sc.W
        lb[: self.n], ub[: self.n] = X.lower, X.upper
        for j in range(self.N):
            lb[self._wi(j)], ub[self._wi(j)] = W.lower, W.upper
            if self.pd:
                lb[self._di(j)], ub[self._di(j)] = -self.d_max, self.d_max
        return lb, ub

    # propagation ------------------------------------------------------------
    def simulate(self, z, with_jac: bool = True):
        """Propagate the window; returns states, outputs and their sensitivities."""
        key = np.asarray(z, dtype=float).tobytes()
        if self._cache_key == key and (self._cache_jac or not with_jac):
            return self._cache
        pl = self.pl
        fA, fBv, fBd, fC, fDv, fDd = self._fmats
        th0, W, D = self.split(z)
        n, N = self.n, self.N
        ths = np.empty((N + 1, self.n_th))
        ths[0] = th0
        ys = np.empty((N, pl.m))
        zs = np.empty((N, fC.shape[0]))
        if with_jac:
            Ss = np.zeros((N + 1, self.n_th, self.nz))
            Ss[0, :, : self.n_th] = np.eye(self.n_th)
            Jy = np.zeros((N, pl.m, self.nz))
            Jz = np.zeros((N, fC.shape[0], self.nz))
        else:
            Ss = Jy = Jz = None
        zero_d = np.zeros(pl.p)
        for j in range(N):
            x, psi = ths[j, :n], ths[j, n:]
            w = W[j]
            d = D[j] if self.use_d else zero_d
            u = self.us[j]
            v = pl.g(x, w)
            ths[j + 1, :n] = pl.f(x, w, d, u)
            ys[j] = pl.h(x, w, d, u)
            ths[j + 1, n:] = fA @ psi + fBv @ v
            zs[j] = fC @ psi + fDv @ v
            if self.use_d and fBd.shape[1]:
                ths[j + 1, n:] += fBd @ d
                zs[j] += fDd @ d
            if not with_jac:
                continue
            fx, fw, fd = pl.jac_f(x, w, d, u)
            hx, hw, hd = pl.jac_h(x, w, d, u)
            gx, gw = pl.jac_g(x, w)
            Sx, Sp = Ss[j, :n], Ss[j, n:]
            nxt = Ss[j + 1]
            wi = self._wi(j)
            nxt[:n] = fx @ Sx
            nxt[:n, wi] += fw
            vS = gx @ Sx
            vS[:, wi] += gw
            nxt[n:] = fA @ Sp + fBv @ vS
            Jy[j] = hx @ Sx
            Jy[j][:, wi] += hw
            Jz[j] = fC @ Sp + fDv @ vS
            if self.use_d:
                di = self._di(j)
                nxt[:n, di] += fd
                Jy[j][:, di] += hd
                if fBd.shape[1]:
                    nxt[n:, di] += fBd
                    Jz[j][:, di] += fDd
        out = (ths, ys, zs, Ss, Jy, Jz)
        self._cache_key, self._cache, self._cache_jac = key, out, with_jac
        return out

    # cost -------------------------------------------------------------------
    def residuals(self, z) -> np.ndarray:
        return self._res(z, with_jac=False)[0]

    def jacobian(self, z) -> np.ndarray:
        return self._res(z, with_jac=True)[1]

    def _res(self, z, with_jac: bool):
        # residual blocks: prior, then all w terms, all y terms, all z terms
        ths, yh, zh, Ss, Jy, Jz = self.simulate(z, with_jac)
        _, W, _ = self.split(z)
        sq = np.sqrt(self.disc)
        ey = self.y_data - yh
        r = np.concatenate([
            self.L_prior @ (ths[0] - self.prior),
            (sq[:, None] * (W @ self.L_w.T)).ravel(),
            (sq[:, None] * (ey @ self.L_y.T)).ravel(),
            (sq[:, None] * (zh @ self.L_z.T)).ravel(),
        ])
        if not with_jac:
            return r, None
        N = self.N
        jp = np.zeros((self.L_prior.shape[0], self.nz))
        jp[:, : self.n_th] = self.L_prior
        jw = np.zeros((N, self.L_w.shape[0], self.nz))
        for j in range(N):
            jw[j][:, self._wi(j)] = sq[j] * self.L_w
        jy = -sq[:, None, None] * np.einsum("ab,jbk->jak", self.L_y, Jy)
        jz = sq[:, None, None] * np.einsum("ab,jbk->jak", self.L_z, Jz)
        J = np.vstack([jp, jw.reshape(-1, self.nz), jy.reshape(-1, self.nz), jz.reshape(-1, self.nz)])
        return r, J

    def cost(self, z) -> float:
        r = self.residuals(z)
        return float(r @ r)

    def cost_grad(self, z) -> np.ndarray:
        r, J = self._res(z, with_jac=True)
        return 2.0 * J.T @ r

    # constraints ------------------------------------------------------------
    def constraints(self, z, with_jac: bool = True):
        """Return ``(g, dg)`` with every entry of ``g`` required to be ``<= 0``."""
        ths, yh, zh, Ss, Jy, Jz = self.simulate(z, with_jac)
        _, W, _ = self.split(z)
        gs, dgs = [], []
        n = self.n
        if self.lam is not None:
            lm = self.lam
            R0, P0, Q, R = lm["R0"], lm["P0"], lm["Q"], lm["R"]
            eps, xi = lm["eps"], lm["xi"]
            dth = ths[0] - self.prior
            c = self.disc
            ex = ths[:-1, :n] - self.x_pub
            ey = self.y_data - yh
            exR = ex @ R0
            eyR = ey @ R
            wQ = W @ Q
            val = (-eps * self.disc_prior * float(dth @ P0 @ dth)
                   + float(c @ np.einsum("ja,ja->j", exR, ex))
                   - xi * float(c @ (np.einsum("ja,ja->j", wQ, W) + np.einsum("ja,ja->j", eyR, ey))))
            grad = np.zeros(self.nz)
            if with_jac:
                grad[: self.n_th] -= 2.0 * eps * self.disc_prior * (P0 @ dth)
                grad += 2.0 * np.einsum("j,ja,jak->k", c, exR, Ss[:-1, :n])
                grad += 2.0 * xi * np.einsum("j,ja,jak->k", c, eyR, Jy)
                wblk = grad[self.n_th: self.n_th + self.N * self.nw].reshape(self.N, self.nw)
                wblk -= 2.0 * xi * c[:, None] * wQ
            gs.append(val)
            dgs.append(grad)
        for box in self._boxes:
            if box is self.sc.X:
                val, jac = ths[1:, :n], (Ss[1:, :n] if with_jac else None)
            else:
                val, jac = yh, Jy
            for i in range(box.dim):
                for bound, sign in ((box.upper[i], 1.0), (box.lower[i], -1.0)):
                    if np.isfinite(bound):
                        gs.extend(sign * (val[:, i] - bound))
                        if with_jac:
                            dgs.extend(sign * jac[:, i])
        g = np.array(gs, dtype=float)
        if not with_jac:
            return g, None
        return g, (np.array(dgs, dtype=float).reshape(len(gs), self.nz) if gs else np.zeros((0, self.nz)))

    def lambda_value(self, z) -> float:
        if self.lam is None:
            return 0.0
        return float(self.constraints(z, with_jac=False)[0][0])


def _solve_window(prob: WindowProblem, z0, cfg: MheConfig):
    """Minimize the window cost from ``z0``; returns ``(z, iterations, status)``.

    Without inequalities this is a bounded trust-region Gauss-Newton solve on
    the weighted residuals. With them, an SQP method (SLSQP) runs on the cost
    and constraints, both divided by the starting cost so that the 1e6-sized
    weights produced by the certificate do not swamp the line search.
    """
    lb, ub = prob.bounds()
    z = np.clip(np.asarray(z0, dtype=float), lb, ub)
    g0, _ = prob.constraints(z, with_jac=False)
    if g0.size == 0:
        res = least_squares(prob.residuals, z, jac=prob.jacobian, bounds=(lb, ub), method="trf",
                            x_scale="jac", ftol=1e-15, xtol=1e-15, gtol=cfg.kkt_tol, max_nfev=cfg.max_iter)
        ok = res.status > 0 or res.optimality <= math.sqrt(cfg.kkt_tol) * max(1.0, prob.cost(res.x))
        return res.x, int(res.nfev), "optimal" if ok else "iteration cap"
    # precondition with the Gauss-Newton Hessian at the start point: in the
    # variables s, z = z0 + T s, the quadratic model of the cost is isotropic
    sig = max(1.0, prob.cost(z))
    J = prob.jacobian(z)
    H = J.T @ J / sig
    H += (1e-10 * max(1.0, float(np.max(np.diag(H))))) * np.eye(H.shape[0])
    T = np.linalg.inv(np.linalg.cholesky(H)).T
    zs = z.copy()
    fin_lo, fin_hi = np.isfinite(lb), np.isfinite(ub)
    A_box = np.vstack([T[fin_hi], -T[fin_lo]])
    b_box = np.concatenate([ub[fin_hi] - zs[fin_hi], zs[fin_lo] - lb[fin_lo]])

    def to_z(sv):
        return zs + T @ sv

    def g_all(sv):
        g, _ = prob.constraints(to_z(sv), with_jac=False)
        return np.concatenate([-g / sig, b_box - A_box @ sv])

    def g_jac(sv):
        _, dg = prob.constraints(to_z(sv), with_jac=True)
        return np.vstack([-(dg @ T) / sig, -A_box])

    res = minimize(lambda sv: prob.cost(to_z(sv)) / sig, np.zeros(z.size),
                   jac=lambda sv: T.T @ prob.cost_grad(to_z(sv)) / sig, method="SLSQP",
                   constraints=[{"type": "ineq", "fun": g_all, "jac": g_jac}],
                   options={"maxiter": cfg.max_iter, "ftol": cfg.kkt_tol * 1e-6})
    z = np.clip(to_z(res.x), lb, ub)
    # status 8 means no further descent is possible at working precision
    status = "optimal" if res.status in (0, 8) else ("iteration cap" if res.status == 9 else "failed: " + str(res.message))
    return z, int(res.nit), status


def _restore(prob: WindowProblem, z, target: float):
    """Move the filter part of the window-initial state until the trust constraint holds.

    Only the prior term of the constraint sees ``psi``, and it enters with a
    negative definite quadratic, so the required offset along the top
    eigendirection of the ``psi`` block of ``P0`` has a closed form.
    """
    lm = prob.lam
    val = prob.lambda_value(z)
    if val <= target or prob.n_psi == 0:
        return z
    n, nth = prob.n, prob.n_th
    P0 = lm["P0"]
    Ppp = P0[n:nth, n:nth]
    vals, vecs = np.linalg.eigh(sym(Ppp))
    v = np.zeros(nth)
    v[n:] = vecs[:, -1]
    th0, W, D = prob.split(z)
    dth = th0 - prob.prior
    b = float(v @ P0 @ dth)
    if b < 0:
        v, b = -v, -b
    c = float(v @ P0 @ v)
    scale = lm["eps"] * prob.disc_prior
    # val(tau) = val - scale * (2 b tau + c tau^2); need val(tau) <= target / 2
    need = (val - 0.5 * target) / scale
    tau = (-b + math.sqrt(b * b + c * need)) / c
    for _ in range(60):
        zz = prob.pack(th0 + tau * v, W, D)
        if prob.lambda_value(zz) <= target:
            return zz
        tau = 1.001 * tau + 1e-12
    return prob.pack(th0 + tau * v, W, D)


def _warm_start(state: MheState, prob: WindowProblem, prev_n_k: int) -> np.ndarray:
    th0 = prob.prior.copy()
    W = np.zeros((prob.N, prob.nw))
    D = np.zeros((prob.N, prob.pd))
    if state.warm is not None and state.warm.size == prob.n_th + prev_n_k * (prob.nw + prob.pd):
        old = WindowProblem.__new__(WindowProblem)
        old.n_th, old.N, old.nw, old.pd = prob.n_th, prev_n_k, prob.nw, prob.pd
        oth0, oW, oD = WindowProblem.split(old, state.warm)
        if prob.N == prev_n_k + 1:
            th0 = oth0
            W[:-1], D[:-1] = oW, oD
        elif prob.N == prev_n_k and state.warm_thetas is not None:
            th0 = state.warm_thetas[1]
            W[:-1], D[:-1] = oW[1:], oD[1:]
    return prob.pack(th0, W, D)


def _window_buffers(state: MheState):
    n_k = state.n_k
    us = list(state.us)[-n_k:]
    ys = list(state.ys)[-n_k:]
    ths = list(state.thetas)
    prior = ths[-n_k]
    xpub = ths[-n_k:]
    return n_k, prior, us, ys, xpub


def _default_d_max(cfg: MheConfig, scenario: Scenario) -> float:
    return 10.0 * scenario.d_probe if cfg.d_max is None else float(cfg.d_max)


def _run(state: MheState, prob: WindowProblem, cfg: MheConfig, restore: bool):
    prev_n_k = min(state.k - 1, state.N)
    z0 = _warm_start(state, prob, prev_n_k)
    z, iters, status = _solve_window(prob, z0, cfg)
    lam_val = prob.lambda_value(z)
    if prob.lam is not None and lam_val > cfg.lambda_tol and restore:
        z = _restore(prob, z, cfg.lambda_tol)
        lam_val = prob.lambda_value(z)
    ths, yh, zh, _, _, _ = prob.simulate(z, with_jac=False)
    th0, W, D = prob.split(z)
    sol = MheSolution(
        k=state.k, n_k=prob.N, theta0=th0.copy(), w=W.copy(), d=D.copy() if prob.pd else np.zeros((prob.N, 0)),
        thetas=ths, yhat=yh, zhat=zh, cost=prob.cost(z), lambda_residual=lam_val,
        dynamics_residual=_dynamics_residual(prob, z, ths), iterations=iters, status=status, n=prob.n,
    )
    if prob.lam is not None and lam_val > cfg.lambda_tol:
        raise InfeasibleWindow(f"trust constraint residual {lam_val:.3e} at k={state.k}", lam_val)
    if status != "optimal":
        raise SolverFailure(f"window solver at k={state.k}: {status}", best=sol)
    state.warm = z
    state.warm_thetas = ths
    return sol


def _dynamics_residual(prob: WindowProblem, z, ths) -> float:
    # recompute one step at a time from the stored states: checks the shooting recursion
    pl, f = prob.pl, prob.filt
    _, W, D = prob.split(z)
    worst = 0.0
    for j in range(prob.N):
        x, psi = ths[j][: prob.n], ths[j][prob.n:]
        d = D[j] if prob.use_d else np.zeros(pl.p)
        v = np.atleast_1d(pl.g(x, W[j]))
        nxt = np.concatenate([np.atleast_1d(pl.f(x, W[j], d, prob.us[j])),
                              f.A @ psi + f.B @ np.concatenate([v, d if prob.use_d else np.zeros(0)])])
        worst = max(worst, float(np.max(np.abs(nxt - ths[j + 1]), initial=0.0)))
    return worst


def proposed_problem(state: MheState, cert: DetectabilityCertificate, cfg: MheConfig, scenario: Scenario) -> WindowProblem:
    n_k, prior, us, ys, xpub = _window_buffers(state)
    n = scenario.plant.n
    filt = cert.multiplier.filter
    lam = {"R0": cert.R0, "P0": cert.P0, "Q": cert.Q, "R": cert.R, "eps": cfg.eps, "xi": cfg.xi}
    weights = {
        "prior": (2.0 + cfg.eps) * cert.P0,
        "w": (2.0 + cfg.xi) * cert.Q,
        "y": (1.0 + cfg.xi) * cert.R,
        "z": cert.Mhat,
    }
    return WindowProblem(scenario, filt, True, cert.rho, prior, us, ys, [t[:n] for t in xpub], weights,
                         lam=lam, d_max=_default_d_max(cfg, scenario))


def standard_problem(state: MheState, cert: DetectabilityCertificate, cfg: MheConfig, scenario: Scenario) -> WindowProblem:
    n_k, prior, us, ys, xpub = _window_buffers(state)
    n = scenario.plant.n
    weights = {"prior": 2.0 * cert.P0[:n, :n], "w": 2.0 * cert.Q, "y": cert.R, "z": np.zeros((0, 0))}
    return WindowProblem(scenario, _empty_filter(scenario.plant.q), False, cert.rho, prior[:n], us, ys,
                         [t[:n] for t in xpub], weights, lam=None)


def estimate(state: MheState, cert: DetectabilityCertificate, cfg: MheConfig, scenario: Scenario):
    """Compute and publish the augmented estimate for the current time.

    Returns ``(theta_k, solution)``; the solution is ``None`` at ``k = 0``.
    """
    if cert.nominal:
        raise InvalidCertificate("the robust estimator needs a certificate with an uncertainty multiplier")
    if state.k == 0:
        theta = state.theta0.copy()
        state.publish(theta)
        return theta, None
    prob = proposed_problem(state, cert, cfg, scenario)
    sol = _run(state, prob, cfg, restore=True)
    state.publish(sol.theta_k)
    return sol.theta_k.copy(), sol


def estimate_standard(state: MheState, cert: DetectabilityCertificate, cfg: MheConfig, scenario: Scenario):
    """Standard estimator that ignores the uncertainty channel; ``state`` has no filter part."""
    if state.k == 0:
        x = state.theta0.copy()
        state.publish(x)
        return x, None
    prob = standard_problem(state, cert, cfg, scenario)
    sol = _run(state, prob, cfg, restore=False)
    state.publish(sol.theta_k)
    return sol.theta_k.copy(), sol


# horizon and decay constants ---------------------------------------------------

def horizon_matrices(cert: DetectabilityCertificate, eps: float):
    """Return ``(P1, P2)`` of the horizon condition."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    d = Dims(**cert.dims)
    k = d.n + d.n_psi
    P1 = cert.P1
    if sym_eigvalsh(P1)[0] <= 0:
        raise InvalidCertificate("P - diag(0, Z / rho^2) is not positive definite")
    P = sym(cert.P)
    P11 = P[:k, :k]
    top = P[:k, :]
    try:
        corr = top.T @ np.linalg.solve(P11, top)
    except np.linalg.LinAlgError as exc:
        raise InvalidCertificate("P11 is singular") from exc
    P2 = P1 + sym(corr)
    P2[:k, :k] += (2.0 + eps) * cert.P0
    return P1, sym(P2)


def min_horizon_from(lam_bar: float, rho2: float) -> int:
    if not lam_bar >= 1.0:
        raise ValueError("the eigenvalue bound must be >= 1")
    if lam_bar == 1.0:
        return 1
    return int(math.floor(math.log(lam_bar) / -math.log(rho2))) + 1


def min_horizon(cert: DetectabilityCertificate, eps: float):
    """Return ``(N_min, lam_bar)`` with ``rho**(2 N_min) * lam_bar < 1``."""
    P1, P2 = horizon_matrices(cert, eps)
    try:
        lam_bar = generalized_max_eig(P2, P1)
    except NotPositiveDefinite as exc:
        raise InvalidCertificate(str(exc)) from exc
    return min_horizon_from(lam_bar, cert.rho2), lam_bar


def _chi_permutation(d: Dims) -> np.ndarray:
    n, npsi = d.n, d.n_psi
    ex = np.arange(0, n)
    ep = np.arange(n, n + npsi)
    x = np.arange(n + npsi, 2 * n + npsi)
    ps = np.arange(2 * n + npsi, 2 * n + 2 * npsi)
    return np.concatenate([ex, x, ep, ps])


def iss_constants(cert: DetectabilityCertificate, eps: float, xi: float, N: int):
    """Return ``(lam, C_x, C_w)`` for horizon ``N``."""
    d = Dims(**cert.dims)
    P1, _ = horizon_matrices(cert, eps)
    n_min, lam_m = min_horizon(cert, eps)
    if N < n_min:
        raise ValueError(f"N={N} is below the minimum horizon {n_min}")
    lam = cert.rho * max(lam_m ** (1.0 / (2 * N)), 1.0)
    perm = _chi_permutation(d)
    Ph = P1[np.ix_(perm, perm)]
    m = 2 * d.n
    A, B, C = Ph[:m, :m], Ph[:m, m:], Ph[m:, m:]
    X = A - B @ np.linalg.solve(C, B.T) if C.size else A
    try:
        c_x = generalized_max_eig(np.eye(m), X)
        c_0 = generalized_max_eig(A, np.eye(m))
        Qh = (4.0 + xi) * cert.Q + cert.Q0
        c_w = generalized_max_eig(Qh, np.eye(Qh.shape[0]))
    except NotPositiveDefinite as exc:
        raise InvalidCertificate(str(exc)) from exc
    if not lam < 1.0:
        raise InvalidCertificate(f"decay rate {lam} is not below one")
    return lam, math.sqrt(lam_m * c_x * c_0), math.sqrt(c_x * c_w)
