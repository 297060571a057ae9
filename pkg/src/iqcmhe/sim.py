"""Closed-loop simulation of plant, estimator and controller.

At each step the estimator publishes ``xhat_k`` from data up to ``k - 1``,
the controller applies ``u_k = kappa(xhat_k)``, a disturbance ``w_k`` is drawn
uniformly from ``W`` and the true plant advances.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import mhe
from .detect import DetectabilityCertificate
from .iqc import filter_step
from .model import Scenario, plant_step

__all__ = [
    "BoundReport",
    "CompareSummary",
    "ProposedEstimator",
    "SimulationAborted",
    "SimulationTrace",
    "StandardEstimator",
    "check_bounds",
    "compare",
    "disturbance_rng",
    "read_csv",
    "run_closed_loop",
    "svg_from_csv",
    "trace_to_csv",
]

PRNG = "numpy-PCG64/SeedSequence"
TAIL = 20


class SimulationAborted(RuntimeError):
    """Estimator failure during a run; ``trace`` holds the steps completed so far."""

    def __init__(self, cause: Exception, trace: "SimulationTrace"):
        super().__init__(f"run aborted at k={trace.steps}: {cause}")
        self.cause = cause
        self.trace = trace


@dataclass(frozen=True)
class ProposedEstimator:
    cert: DetectabilityCertificate
    cfg: mhe.MheConfig
    name: str = "proposed"

    def new_state(self, xhat0) -> mhe.MheState:
        return mhe.MheState.initial(xhat0, self.cert.multiplier.filter.n_psi, self.cfg.N)

    def step(self, state, scenario):
        return mhe.estimate(state, self.cert, self.cfg, scenario)


@dataclass(frozen=True)
class StandardEstimator:
    cert: DetectabilityCertificate
    cfg: mhe.MheConfig
    name: str = "standard"

    def new_state(self, xhat0) -> mhe.MheState:
        return mhe.MheState.initial(xhat0, 0, self.cfg.N)

    def step(self, state, scenario):
        return mhe.estimate_standard(state, self.cert, self.cfg, scenario)


@dataclass
class SimulationTrace:
    x: np.ndarray
    xhat: np.ndarray
    w: np.ndarray
    u: np.ndarray
    y: np.ndarray
    v: np.ndarray
    d: np.ndarray
    psi: np.ndarray  # true filter state, for diagnostics
    cost: np.ndarray
    lambda_residual: np.ndarray
    iters: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.x.shape[0]

    def err_norm(self) -> np.ndarray:
        return np.linalg.norm(self.x - self.xhat, axis=1)

    def state_norm(self) -> np.ndarray:
        return np.linalg.norm(self.x, axis=1)


def disturbance_rng(seed: int) -> np.random.Generator:
    """Disturbance stream of a run; stream 0 of the seed, so paired runs share it."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0])))


def _pack(rows: dict, meta: dict) -> SimulationTrace:
    def arr(key, width):
        a = np.array(rows[key], dtype=float)
        return a.reshape(len(rows[key]), width)

    sc_dims = meta["dims"]
    return SimulationTrace(
        x=arr("x", sc_dims["n"]), xhat=arr("xhat", sc_dims["n"]), w=arr("w", sc_dims["n_w"]),
        u=arr("u", sc_dims["l"]), y=arr("y", sc_dims["m"]), v=arr("v", sc_dims["q"]), d=arr("d", sc_dims["p"]),
        psi=arr("psi", sc_dims["n_psi"]), cost=np.array(rows["cost"], dtype=float),
        lambda_residual=np.array(rows["lam"], dtype=float), iters=np.array(rows["iters"], dtype=int), meta=meta,
    )


def run_closed_loop(scenario: Scenario, estimator, steps: int, seed: int, x0=None, xhat0=None,
                    disturbances: Optional[np.ndarray] = None) -> SimulationTrace:
    """Simulate ``steps`` steps; ``disturbances`` (steps x n_w) replaces the random draw."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(scenario.x0 if x0 is None else x0, dtype=float)
    xhat0 = np.array(scenario.xhat0 if xhat0 is None else xhat0, dtype=float)
    if not (scenario.X.contains(x) and scenario.X.contains(xhat0)):
        raise ValueError("initial state and estimate must lie in X")
    pl = scenario.plant
    cert = estimator.cert
    filt = cert.multiplier.filter if isinstance(estimator, ProposedEstimator) else None
    n_psi = filt.n_psi if filt is not None else 0
    psi = np.zeros(n_psi)
    rng = disturbance_rng(seed)
    state = estimator.new_state(xhat0)
    meta = {
        "seed": int(seed), "estimator": estimator.name, "N": estimator.cfg.N, "eps": estimator.cfg.eps,
        "xi": estimator.cfg.xi, "scenario": scenario.name, "prng": PRNG,
        "dims": {"n": pl.n, "n_w": pl.n_w, "l": pl.l, "m": pl.m, "q": pl.q, "p": pl.p, "n_psi": n_psi},
    }
    rows = {key: [] for key in ("x", "xhat", "w", "u", "y", "v", "d", "psi", "cost", "lam", "iters")}
    for k in range(steps):
        try:
            theta, sol = estimator.step(state, scenario)
        except (mhe.SolverFailure, mhe.InfeasibleWindow) as exc:
            raise SimulationAborted(exc, _pack(rows, meta)) from exc
        xhat = theta[: pl.n]
        u = np.atleast_1d(scenario.controller(xhat))
        if disturbances is not None:
            w = np.atleast_1d(np.asarray(disturbances[k], dtype=float))
        else:
            w = scenario.W.sample(rng)
        x_next, y, v, d = plant_step(scenario, x, w, u)
        state.record(u, y)
        for key, val in (("x", x), ("xhat", xhat), ("w", w), ("u", u), ("y", y), ("v", v), ("d", d), ("psi", psi)):
            rows[key].append(np.array(val, dtype=float))
        rows["cost"].append(0.0 if sol is None else sol.cost)
        rows["lam"].append(0.0 if sol is None else sol.lambda_residual)
        rows["iters"].append(0 if sol is None else sol.iterations)
        if filt is not None:
            psi, _ = filter_step(filt, psi, v, d)
        x = x_next
    return _pack(rows, meta)


# bounds -----------------------------------------------------------------------

@dataclass
class BoundReport:
    state_ratio: np.ndarray
    error_ratio: np.ndarray
    tol: float

    @property
    def max_state_ratio(self) -> float:
        return float(np.max(self.state_ratio))

    @property
    def max_error_ratio(self) -> float:
        return float(np.max(self.error_ratio))

    @property
    def ok(self) -> bool:
        return self.max_state_ratio <= 1.0 + self.tol and self.max_error_ratio <= 1.0 + self.tol


def _ratio(obs: np.ndarray, bound: np.ndarray) -> np.ndarray:
    out = np.zeros_like(obs)
    nz = bound > 0
    out[nz] = obs[nz] / bound[nz]
    out[~nz & (obs > 0)] = np.inf
    return out


def error_bound_gain(lam: float, C_w: float) -> float:
    """Disturbance gain of the estimation-error bound, ``C_w / (1 - sqrt(lam))``."""
    return C_w / (1.0 - math.sqrt(lam))


def check_bounds(trace: SimulationTrace, constants, tol: float = 1e-9) -> BoundReport:
    """Compare the trace with the state bound and the estimation-error bound.

    State: ``|x_k| <= lam^k C_x (|x_0 - xhat_0| + |x_0|) + C_w / (1 - lam) max_{i<k} |w_i|``.
    Error: ``|x_k - xhat_k| <= lam^k C_x |col(x_0, x_0 - xhat_0)|
    + C_w / (1 - sqrt(lam)) max_{1<=i<=k} sqrt(lam)^(i-1) |w_{k-i}|``.
    """
    lam, C_x, C_w = constants
    x0, e0 = trace.x[0], trace.x[0] - trace.xhat[0]
    wn = np.linalg.norm(trace.w, axis=1)
    ks = np.arange(trace.steps)
    decay = lam ** ks
    run_max = np.concatenate([[0.0], np.maximum.accumulate(wn)[:-1]])
    state_bound = decay * C_x * (np.linalg.norm(e0) + np.linalg.norm(x0)) + C_w / (1.0 - lam) * run_max
    sl = math.sqrt(lam)
    disc_max = np.zeros(trace.steps)
    for k in range(1, trace.steps):
        i = np.arange(1, k + 1)
        disc_max[k] = float(np.max(sl ** (i - 1) * wn[k - i]))
    err_bound = decay * C_x * np.linalg.norm(np.concatenate([x0, e0])) + error_bound_gain(lam, C_w) * disc_max
    return BoundReport(_ratio(trace.state_norm(), state_bound), _ratio(trace.err_norm(), err_bound), tol)


# comparison -------------------------------------------------------------------

@dataclass
class CompareSummary:
    rows: list  # dicts: seed, est, mean_err_tail, mean_state_tail, max_state
    median_err: dict
    median_state: dict
    traces: dict = field(default_factory=dict)  # (est, seed) -> trace

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["seed", "est", "mean_err_tail", "mean_state_tail"])
        for r in self.rows:
            wr.writerow([r["seed"], r["est"], _fmt(r["mean_err_tail"]), _fmt(r["mean_state_tail"])])
        return buf.getvalue()


def _tail_metrics(tr: SimulationTrace, tail: int = TAIL):
    sl = slice(max(0, tr.steps - tail), tr.steps)
    return float(np.mean(tr.err_norm()[sl])), float(np.mean(tr.state_norm()[sl]))


def _run_job(args):
    scenario, est, steps, seed, x0, xhat0 = args
    return run_closed_loop(scenario, est, steps, seed, x0, xhat0)


def compare(scenario: Scenario, estimators: Sequence, steps: int, seeds: Sequence[int], x0=None, xhat0=None,
            workers: int = 1) -> CompareSummary:
    """Paired runs: every estimator sees the same disturbance sequence for a given seed."""
    if not seeds:
        raise ValueError("seeds must be nonempty")
    jobs = [(scenario, est, steps, seed, x0, xhat0) for seed in seeds for est in estimators]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_run_job, jobs))
    else:
        traces = [_run_job(j) for j in jobs]
    rows, store = [], {}
    for (_, est, _, seed, _, _), tr in zip(jobs, traces):
        store[(est.name, seed)] = tr
        err, st = _tail_metrics(tr)
        rows.append({"seed": seed, "est": est.name, "mean_err_tail": err, "mean_state_tail": st,
                     "max_state": float(np.max(tr.state_norm()))})
    for seed in seeds:
        ws = [store[(est.name, seed)].w for est in estimators]
        assert all(np.array_equal(ws[0], w) for w in ws[1:]), "paired runs saw different disturbances"
    names = list(dict.fromkeys(est.name for est in estimators))
    med_err = {nm: float(np.median([r["mean_err_tail"] for r in rows if r["est"] == nm])) for nm in names}
    med_st = {nm: float(np.median([r["mean_state_tail"] for r in rows if r["est"] == nm])) for nm in names}
    return CompareSummary(rows, med_err, med_st, store)


# CSV and SVG ------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _names(prefix: str, width: int) -> list:
    return [prefix] if width == 1 else [f"{prefix}{i + 1}" for i in range(width)]


def trace_to_csv(trace: SimulationTrace) -> str:
    cols = [("x", trace.x), ("xhat", trace.xhat), ("w", trace.w), ("u", trace.u), ("y", trace.y),
            ("v", trace.v), ("d", trace.d)]
    header = ["k"]
    for name, a in cols:
        header += _names(name, a.shape[1])
    header += ["cost", "lambda_residual", "iters"]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for k in range(trace.steps):
        row = [str(k)]
        for _, a in cols:
            row += [_fmt(v) for v in a[k]]
        row += [_fmt(trace.cost[k]), _fmt(trace.lambda_residual[k]), str(int(trace.iters[k]))]
        wr.writerow(row)
    return buf.getvalue()


def read_csv(text: str) -> dict:
    """Parse a trace CSV into ``{column: float array}``."""
    rdr = csv.reader(io.StringIO(text))
    header = next(rdr)
    data = np.array([[float(v) for v in row] for row in rdr], dtype=float).reshape(-1, len(header))
    return {h: data[:, i] for i, h in enumerate(header)}


def _cols(table: dict, prefix: str) -> np.ndarray:
    if prefix in table:
        return table[prefix][:, None]
    keys = sorted((k for k in table if k.startswith(prefix) and k[len(prefix):].isdigit()),
                  key=lambda k: int(k[len(prefix):]))
    return np.column_stack([table[k] for k in keys])


def _polyline(ks, vals, x_of, y_of, color):
    pts = " ".join(f"{x_of(k):.2f},{y_of(v):.2f}" for k, v in zip(ks, vals))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def svg_from_csv(text: str, log: bool = True) -> str:
    """Two stacked line charts, ``|x|`` and ``|x - xhat|`` against ``k``, from trace CSV text."""
    tab = read_csv(text)
    ks = tab["k"]
    x, xh = _cols(tab, "x"), _cols(tab, "xhat")
    series = [("|x|", np.linalg.norm(x, axis=1), "#1f77b4"), ("|x - xhat|", np.linalg.norm(x - xh, axis=1), "#d62728")]
    width, height, pad = 640, 220, 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{2 * height}" '
             f'viewBox="0 0 {width} {2 * height}">']
    kmax = max(float(ks[-1]), 1.0)
    for row, (label, vals, color) in enumerate(series):
        top = row * height
        if log:
            vals = np.log10(np.maximum(vals, 1e-16))
        lo, hi = float(np.min(vals)), float(np.max(vals))
        if hi - lo < 1e-12:
            lo, hi = lo - 1.0, hi + 1.0

        def x_of(k):
            return pad + (width - 2 * pad) * k / kmax

        def y_of(v, lo=lo, hi=hi, top=top):
            return top + height - pad + (2 * pad - height) * (v - lo) / (hi - lo)

        parts.append(f'<rect x="{pad}" y="{top + pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
                     'fill="none" stroke="#888"/>')
        scale = "log10 " if log else ""
        parts.append(f'<text x="{pad}" y="{top + pad - 8}" font-size="12">{scale}{label} '
                     f'[{lo:.3g}, {hi:.3g}] vs k</text>')
        parts.append(_polyline(ks, vals, x_of, y_of, color))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
