"""Uncertain closed-loop setup: plant maps, controller, true uncertainty,
constraint boxes and the Lipschitz envelope of interval matrices."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "DomainViolation",
    "BoxSet",
    "IntervalMatrix",
    "LipschitzEnvelope",
    "PlantModel",
    "Scenario",
    "EnvelopeReport",
    "build_example_scenario",
    "build_retuned_scenario",
    "LinearFeedback",
    "plant_step",
    "validate_envelope",
    "example_delta",
    "get_scenario",
    "SCENARIOS",
]


class DomainViolation(ValueError):
    pass


@dataclass(frozen=True)
class BoxSet:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("BoxSet needs lower <= upper of equal shape")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, dim: int) -> "BoxSet":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def probe(self, default: float) -> "BoxSet":
        """Finite box for sampling; infinite sides are replaced by ``+-default``."""
        lo = np.where(np.isfinite(self.lower), self.lower, -default)
        hi = np.where(np.isfinite(self.upper), self.upper, default)
        return BoxSet(lo, hi)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        if not self.bounded:
            raise ValueError("cannot sample an unbounded box")
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lower, self.upper, size=shape)


@dataclass(frozen=True)
class IntervalMatrix:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_2d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("lo/hi shape mismatch")
        if np.any(lo > hi):
            raise ValueError("IntervalMatrix needs lo <= hi entry-wise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def point(cls, m) -> "IntervalMatrix":
        m = np.atleast_2d(np.asarray(m, dtype=float))
        return cls(m, m.copy())

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "IntervalMatrix":
        return cls.point(np.zeros((rows, cols)))

    @property
    def shape(self):
        return self.lo.shape

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def free_entries(self) -> list[tuple[int, int]]:
        """Entries whose interval is not a single point."""
        return [tuple(ix) for ix in np.argwhere(self.hi > self.lo)]

    def apply(self, e) -> tuple[np.ndarray, np.ndarray]:
        """Interval hull of ``{A e : lo <= A <= hi}``."""
        e = np.asarray(e, dtype=float)
        a = self.lo * e
        b = self.hi * e
        return np.minimum(a, b).sum(axis=1), np.maximum(a, b).sum(axis=1)

    def inflate(self, frac: float) -> "IntervalMatrix":
        half = 0.5 * (self.hi - self.lo) * (1.0 + frac)
        c = self.center
        return IntervalMatrix(c - half, c + half)


@dataclass(frozen=True)
class LipschitzEnvelope:
    """Slope intervals of the difference maps and of the absolute maps.

    Difference form::

        f(x,w,d,u) - f(x~,w~,d~,u) in A e_x + B_w e_w + B_d e_d
        h(x,w,d,u) - h(x~,w~,d~,u) in C e_x + D_w e_w + D_d e_d
        g(x,w)     - g(x~,w~)      in C_v e_x + E_w e_w

    Absolute form (requires ``f(0,0,0,kappa(0)) = 0`` and ``g(0,0) = 0``)::

        f(x,w,d,kappa(xhat)) in A_abs x + B_w_abs w + B_u xhat + B_d_abs d
        g(x,w)               in C_v_abs x + E_w_abs w
    """

    A: IntervalMatrix
    B_w: IntervalMatrix
    B_d: IntervalMatrix
    C: IntervalMatrix
    D_w: IntervalMatrix
    D_d: IntervalMatrix
    C_v: IntervalMatrix
    E_w: IntervalMatrix
    A_abs: IntervalMatrix
    B_w_abs: IntervalMatrix
    B_u: IntervalMatrix
    B_d_abs: IntervalMatrix
    C_v_abs: IntervalMatrix
    E_w_abs: IntervalMatrix

    FIELDS = ("A", "B_w", "B_d", "C", "D_w", "D_d", "C_v", "E_w",
              "A_abs", "B_w_abs", "B_u", "B_d_abs", "C_v_abs", "E_w_abs")

    def inflate(self, frac: float) -> "LipschitzEnvelope":
        return LipschitzEnvelope(**{k: getattr(self, k).inflate(frac) for k in self.FIELDS})

    def check_dims(self, n: int, n_w: int, p: int, q: int, m: int) -> None:
        want = {
            "A": (n, n), "B_w": (n, n_w), "B_d": (n, p),
            "C": (m, n), "D_w": (m, n_w), "D_d": (m, p),
            "C_v": (q, n), "E_w": (q, n_w),
            "A_abs": (n, n), "B_w_abs": (n, n_w), "B_u": (n, n), "B_d_abs": (n, p),
            "C_v_abs": (q, n), "E_w_abs": (q, n_w),
        }
        for k, shape in want.items():
            got = getattr(self, k).shape
            if got != shape:
                raise ValueError(f"envelope block {k} has shape {got}, expected {shape}")


Jac = Callable[..., tuple]


def _fd_jacobian(fun, args, which, eps=1e-7):
    base = np.asarray(fun(*args), dtype=float)
    outs = []
    for k in which:
        a = np.asarray(args[k], dtype=float)
        jac = np.zeros((base.size, a.size))
        for i in range(a.size):
            step = np.zeros_like(a)
            step[i] = eps * max(1.0, abs(a[i]))
            hi = list(args)
            lo = list(args)
            hi[k] = a + step
            lo[k] = a - step
            jac[:, i] = (np.asarray(fun(*hi)) - np.asarray(fun(*lo))) / (2 * step[i])
        outs.append(jac)
    return tuple(outs)


@dataclass(frozen=True)
class PlantModel:
    """``x+ = f(x,w,d,u)``, ``y = h(x,w,d,u)``, ``v = g(x,w)``.

    The optional Jacobian callables return ``(dx, dw, dd)`` for ``f`` and ``h`` and
    ``(dx, dw)`` for ``g``; missing ones fall back to central differences.
    """

    n: int
    n_w: int
    p: int
    q: int
    m: int
    l: int
    f: Callable
    h: Callable
    g: Callable
    f_jac: Optional[Jac] = None
    h_jac: Optional[Jac] = None
    g_jac: Optional[Jac] = None

    def jac_f(self, x, w, d, u):
        if self.f_jac is not None:
            return self.f_jac(x, w, d, u)
        return _fd_jacobian(self.f, (x, w, d, u), (0, 1, 2))

    def jac_h(self, x, w, d, u):
        if self.h_jac is not None:
            return self.h_jac(x, w, d, u)
        return _fd_jacobian(self.h, (x, w, d, u), (0, 1, 2))

    def jac_g(self, x, w):
        if self.g_jac is not None:
            return self.g_jac(x, w)
        return _fd_jacobian(self.g, (x, w), (0, 1))


@dataclass(frozen=True)
class Scenario:
    name: str
    plant: PlantModel
    controller: Callable
    uncertainty: Callable
    X: BoxSet
    W: BoxSet
    U: BoxSet
    Y: BoxSet
    envelope: LipschitzEnvelope
    x0: np.ndarray
    xhat0: np.ndarray
    d_probe: float = 0.5
    x_probe: float = 5.0
    params: dict = field(default_factory=dict)

    def with_overrides(self, **kw) -> "Scenario":
        return replace(self, **kw)


def plant_step(scenario: Scenario, x, w, u, tol: float = 1e-12):
    """Advance the true uncertain plant one step: returns ``(x_next, y, v, d)``."""
    x = np.asarray(x, dtype=float)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    u = np.asarray(u, dtype=float)
    if not scenario.W.contains(w, tol):
        raise DomainViolation(f"disturbance {w} outside W")
    pl = scenario.plant
    v = np.atleast_1d(pl.g(x, w))
    d = np.atleast_1d(scenario.uncertainty(v))
    return np.atleast_1d(pl.f(x, w, d, u)), np.atleast_1d(pl.h(x, w, d, u)), v, d


def example_delta(v):
    v = np.asarray(v, dtype=float)
    return 0.125 * (np.abs(v + 2.0) - np.abs(v - 2.0))


_K_EXAMPLE = np.array([[0.5, -0.41], [0.4, -0.75]])
# first row retuned so that A + K = [[1.3, -0.5], [1, 0]] (poles of modulus ~0.71);
# with the original gain the true-state loop has a double pole at 0.9 and is
# not certifiable from sector/slope information plus the slope box of A
_K_RETUNED = np.array([[0.0, -0.1], [0.4, -0.75]])
_A_EXAMPLE = np.array([[1.3, -0.4], [0.6, 0.75]])


def _ex_f(x, w, d, u):
    return np.array([
        1.3 * x[0] - 0.4 * x[1] - d[0] - 0.1 * np.sin(0.5 * x[0]) + u[0],
        0.6 * x[0] + 0.75 * x[1] + u[1],
    ])


def _ex_f_jac(x, w, d, u):
    fx = _A_EXAMPLE.copy()
    fx[0, 0] -= 0.05 * np.cos(0.5 * x[0])
    return fx, np.zeros((2, 1)), np.array([[-1.0], [0.0]])


def _ex_h(x, w, d, u):
    return np.array([x[1] + w[0]])


def _ex_h_jac(x, w, d, u):
    return np.array([[0.0, 1.0]]), np.array([[1.0]]), np.zeros((1, 1))


def _ex_g(x, w):
    return np.array([x[0]])


def _ex_g_jac(x, w):
    return np.array([[1.0, 0.0]]), np.zeros((1, 1))


@dataclass(frozen=True)
class LinearFeedback:
    """``u = K xhat``; a class rather than a closure so scenarios stay picklable."""

    K: np.ndarray

    def __call__(self, xhat):
        return self.K @ np.asarray(xhat, dtype=float)


def build_example_scenario(x0=(2.0, -2.0), xhat0=(0.0, 0.0), w_bound: float = 0.1, gain=None,
                           name: str = "example1") -> Scenario:
    """Two-state example with a saturating uncertainty in the first state equation."""
    gain = _K_EXAMPLE if gain is None else np.asarray(gain, dtype=float)
    plant = PlantModel(
        n=2, n_w=1, p=1, q=1, m=1, l=2,
        f=_ex_f, h=_ex_h, g=_ex_g,
        f_jac=_ex_f_jac, h_jac=_ex_h_jac, g_jac=_ex_g_jac,
    )
    a_lo = _A_EXAMPLE.copy()
    a_hi = _A_EXAMPLE.copy()
    a_lo[0, 0], a_hi[0, 0] = 1.25, 1.35
    a = IntervalMatrix(a_lo, a_hi)
    pt = IntervalMatrix.point
    env = LipschitzEnvelope(
        A=a, B_w=IntervalMatrix.zeros(2, 1), B_d=pt([[-1.0], [0.0]]),
        C=pt([[0.0, 1.0]]), D_w=pt([[1.0]]), D_d=pt([[0.0]]),
        C_v=pt([[1.0, 0.0]]), E_w=pt([[0.0]]),
        A_abs=a, B_w_abs=IntervalMatrix.zeros(2, 1), B_u=pt(gain), B_d_abs=pt([[-1.0], [0.0]]),
        C_v_abs=pt([[1.0, 0.0]]), E_w_abs=pt([[0.0]]),
    )
    return Scenario(
        name=name,
        plant=plant,
        controller=LinearFeedback(gain),
        uncertainty=example_delta,
        X=BoxSet.unbounded(2),
        W=BoxSet([-w_bound], [w_bound]),
        U=BoxSet.unbounded(2),
        Y=BoxSet.unbounded(1),
        envelope=env,
        x0=np.asarray(x0, dtype=float),
        xhat0=np.asarray(xhat0, dtype=float),
        params={"slope_alpha": 0.0, "slope_beta": 0.25},
    )


def build_retuned_scenario(x0=(2.0, -2.0), xhat0=(0.0, 0.0), w_bound: float = 0.1) -> Scenario:
    """The two-state example with a faster controller whose loop admits a certificate."""
    return build_example_scenario(x0, xhat0, w_bound, gain=_K_RETUNED, name="example1-retuned")


SCENARIOS: dict[str, Callable[..., Scenario]] = {
    "example1": build_example_scenario,
    "example1-retuned": build_retuned_scenario,
}


def get_scenario(name: str, **overrides) -> Scenario:
    try:
        builder = SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}") from None
    return builder(**overrides)


@dataclass
class EnvelopeReport:
    samples: int
    tol: float
    probe_box: dict
    worst: dict  # block name -> worst violation
    passed: dict  # block name -> bool

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


def _excess(val, lo, hi) -> float:
    return float(np.max(np.concatenate([lo - val, val - hi, [0.0]])))


def validate_envelope(scenario: Scenario, sample_count: int, seed: int = 0, tol: float = 1e-9) -> EnvelopeReport:
    """Sample point pairs and check every map increment against the interval hull.

    Single-channel perturbations (only ``x``, only ``w``, ...) are attributed to
    the matching envelope block; joint perturbations check ``f``, ``h``, ``g``
    and their absolute forms as a whole.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    pl = scenario.plant
    env = scenario.envelope
    env.check_dims(pl.n, pl.n_w, pl.p, pl.q, pl.m)
    xbox = scenario.X.probe(scenario.x_probe)
    wbox = scenario.W.probe(scenario.x_probe)
    dbox = BoxSet(np.full(pl.p, -scenario.d_probe), np.full(pl.p, scenario.d_probe))
    kappa = scenario.controller

    names = list(LipschitzEnvelope.FIELDS) + ["f", "h", "g", "f_abs", "g_abs"]
    worst = {k: 0.0 for k in names}

    def record(key, val, lo, hi):
        scale = 1.0 + float(np.max(np.abs(np.concatenate([val, lo, hi, [0.0]]))))
        worst[key] = max(worst[key], _excess(val, lo, hi) / scale)

    def add(*parts):
        lo = sum(p[0] for p in parts)
        hi = sum(p[1] for p in parts)
        return lo, hi

    z_x = np.zeros(pl.n)
    z_w = np.zeros(pl.n_w)
    z_d = np.zeros(pl.p)
    for _ in range(sample_count):
        x, xt = xbox.sample(rng), xbox.sample(rng)
        w, wt = wbox.sample(rng), wbox.sample(rng)
        d, dt = dbox.sample(rng), dbox.sample(rng)
        xh = xbox.sample(rng)
        u = np.asarray(kappa(xh), dtype=float)
        ex, ew, ed = x - xt, w - wt, d - dt

        # single channels
        record("A", pl.f(x, w, d, u) - pl.f(xt, w, d, u), *env.A.apply(ex))
        record("B_w", pl.f(x, w, d, u) - pl.f(x, wt, d, u), *env.B_w.apply(ew))
        record("B_d", pl.f(x, w, d, u) - pl.f(x, w, dt, u), *env.B_d.apply(ed))
        record("C", pl.h(x, w, d, u) - pl.h(xt, w, d, u), *env.C.apply(ex))
        record("D_w", pl.h(x, w, d, u) - pl.h(x, wt, d, u), *env.D_w.apply(ew))
        record("D_d", pl.h(x, w, d, u) - pl.h(x, w, dt, u), *env.D_d.apply(ed))
        record("C_v", pl.g(x, w) - pl.g(xt, w), *env.C_v.apply(ex))
        record("E_w", pl.g(x, w) - pl.g(x, wt), *env.E_w.apply(ew))
        u0 = np.asarray(kappa(z_x), dtype=float)
        record("A_abs", pl.f(x, z_w, z_d, u0), *env.A_abs.apply(x))
        record("B_w_abs", pl.f(z_x, w, z_d, u0), *env.B_w_abs.apply(w))
        record("B_u", pl.f(z_x, z_w, z_d, u), *env.B_u.apply(xh))
        record("B_d_abs", pl.f(z_x, z_w, d, u0), *env.B_d_abs.apply(d))
        record("C_v_abs", pl.g(x, z_w), *env.C_v_abs.apply(x))
        record("E_w_abs", pl.g(z_x, w), *env.E_w_abs.apply(w))

        # joint
        record("f", pl.f(x, w, d, u) - pl.f(xt, wt, dt, u),
               *add(env.A.apply(ex), env.B_w.apply(ew), env.B_d.apply(ed)))
        record("h", pl.h(x, w, d, u) - pl.h(xt, wt, dt, u),
               *add(env.C.apply(ex), env.D_w.apply(ew), env.D_d.apply(ed)))
        record("g", pl.g(x, w) - pl.g(xt, wt), *add(env.C_v.apply(ex), env.E_w.apply(ew)))
        record("f_abs", pl.f(x, w, d, u),
               *add(env.A_abs.apply(x), env.B_w_abs.apply(w), env.B_u.apply(xh), env.B_d_abs.apply(d)))
        record("g_abs", pl.g(x, w), *add(env.C_v_abs.apply(x), env.E_w_abs.apply(w)))

    return EnvelopeReport(
        samples=sample_count,
        tol=tol,
        probe_box={"x": (xbox.lower.tolist(), xbox.upper.tolist()),
                   "w": (wbox.lower.tolist(), wbox.upper.tolist()),
                   "d": (dbox.lower.tolist(), dbox.upper.tolist())},
        worst=worst,
        passed={k: v <= tol for k, v in worst.items()},
    )
