"""PDE data (drift, diffusion, boundary data), assumption checks and the Hamiltonian.

Evaluators are vectorized: ``b(x)`` maps ``(N, n)`` points to ``(N, n)``,
``a(x, c)`` maps points and levels (scalar or ``(N,)``) to ``(N, n, n)``
matrices (1D scalars are stored as 1x1 matrices), ``g(x)`` maps to ``(N,)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .domain import DomainSpec, Grid


@dataclass(frozen=True)
class DriftField:
    b: Callable
    lipschitz: float
    b0: float
    r0: float

    def __call__(self, x):
        return np.asarray(self.b(np.atleast_2d(x)), dtype=float)


@dataclass(frozen=True)
class DiffusionField:
    a: Callable
    theta0: float

    def __call__(self, x, c):
        x = np.atleast_2d(x)
        c = np.broadcast_to(np.asarray(c, dtype=float), (x.shape[0],))
        return np.asarray(self.a(x, c), dtype=float)

    def frozen(self, c: float) -> Callable:
        """The matrix field ``x -> a(x, c)`` at a fixed level."""
        return lambda x: self(x, c)


@dataclass(frozen=True)
class BoundaryData:
    g: Callable
    g_range: Optional[tuple] = None  # declared I_g, checked against samples

    def __call__(self, x):
        return np.asarray(self.g(np.atleast_2d(x)), dtype=float).reshape(-1)

    def summary(self, grid: Grid) -> dict:
        """Derived scalars from grid samples: g_min, g_max, g1, g2, c0."""
        gn = self(grid.coords)
        gs = self(grid.samples)
        gmin, gmax = float(min(gn.min(), gs.min())), float(max(gn.max(), gs.max()))
        if self.g_range is not None:
            gmin, gmax = float(self.g_range[0]), float(self.g_range[1])
        return dict(g_min=gmin, g_max=gmax, g1=float(gs.min()), g2=float(gs.max()),
                    c0=float(self(np.zeros((1, grid.dim)))[0]))


@dataclass(frozen=True)
class ProblemSpec:
    domain: DomainSpec
    drift: DriftField
    diffusion: DiffusionField
    boundary: BoundaryData

    @property
    def dim(self) -> int:
        return self.domain.dim


# ---------------------------------------------------------------- Hamiltonian

def _pts(x, n):
    return np.asarray(x, dtype=float).reshape(-1, n)


def _single(x, n) -> bool:
    return np.ndim(x) == (0 if n == 1 else 1)


def hamiltonian(spec: ProblemSpec, x, c, p) -> np.ndarray | float:
    """a(x,c)p.p + b(x).p (vectorized over points; scalar in, scalar out)."""
    n = spec.dim
    scalar = _single(x, n)
    X, P = _pts(x, n), _pts(p, n)
    a = spec.diffusion(X, c)
    out = np.einsum("ni,nij,nj->n", P, a, P) + np.einsum("ni,ni->n", spec.drift(X), P)
    return float(out[0]) if scalar else out


def lagrangian(spec: ProblemSpec, x, c, q) -> np.ndarray | float:
    """Legendre dual (q - b).a^{-1}(q - b) / 4."""
    n = spec.dim
    scalar = _single(x, n)
    X, Q = _pts(x, n), _pts(q, n)
    d = Q - spec.drift(X)
    ainv = np.linalg.inv(spec.diffusion(X, c))
    out = 0.25 * np.einsum("ni,nij,nj->n", d, ainv, d)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------- validation

@dataclass
class Check:
    name: str
    passed: Optional[bool]  # None means "assumed"
    margin: float = float("nan")
    worst: Optional[np.ndarray] = None
    note: str = ""

    def line(self) -> str:
        status = {True: "PASS", False: "FAIL", None: "ASSUMED"}[self.passed]
        where = "" if self.worst is None else f" at {np.round(np.atleast_1d(self.worst), 6).tolist()}"
        return f"{status:7s} {self.name}: margin {self.margin:.6g}{where} {self.note}".rstrip()


@dataclass
class AssumptionReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def __getitem__(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> list[str]:
        return [c.line() for c in self.checks]


def level_grid(spec: ProblemSpec, grid: Grid, n: int = 9) -> np.ndarray:
    s = spec.boundary.summary(grid)
    return np.linspace(s["g_min"], s["g_max"], n)


def validate(spec: ProblemSpec, grid: Grid, n_levels: int = 9) -> AssumptionReport:
    """Sample-based checks of the standing assumptions; one entry per assumption."""
    rep = AssumptionReport()
    n = spec.dim
    x = grid.coords
    drift = spec.drift

    b_origin = drift(np.zeros((1, n)))[0]
    rep.checks.append(Check("blip", bool(np.all(b_origin == 0)), -float(np.abs(b_origin).max()),
                            np.zeros(n), "b(0) = 0"))

    # Lipschitz spot check on axis-neighbour pairs
    nb = grid.neighbors[:, 0::2]
    bx = drift(x)
    worst_ratio, worst_pt = 0.0, None
    for k in range(n):
        j = nb[:, k]
        ok = j >= 0
        if ok.any():
            r = np.linalg.norm(bx[ok] - bx[j[ok]], axis=1) / grid.h
            i = int(r.argmax())
            if r[i] > worst_ratio:
                worst_ratio, worst_pt = float(r[i]), x[ok][i]
    rep.checks.append(Check("lipschitz", worst_ratio <= drift.lipschitz * (1 + 1e-9),
                            drift.lipschitz - worst_ratio, worst_pt, f"declared L_b = {drift.lipschitz}"))

    ball = np.linalg.norm(x, axis=1) < drift.r0
    xs = x[ball]
    val = np.einsum("ni,ni->n", drift(xs), xs) + drift.b0 * np.einsum("ni,ni->n", xs, xs)
    i = int(val.argmax())
    rep.checks.append(Check("borigin", bool(val[i] <= 1e-12), -float(val[i]), xs[i],
                            f"b.x <= -b0|x|^2 on B_r0 (b0={drift.b0}, r0={drift.r0})"))

    inside = -float(spec.domain.signed_distance(np.zeros((1, n)))[0])
    rep.checks.append(Check("ball-inside", inside >= drift.r0, inside - drift.r0, np.zeros(n),
                            "B_r0 contained in the domain"))

    bn = np.einsum("ni,ni->n", drift(grid.samples), grid.normals)
    i = int(bn.argmax())
    rep.checks.append(Check("b-inward", bool(bn[i] < 0), -float(bn[i]), grid.samples[i], "b.nu < 0 on the boundary"))

    th = spec.diffusion.theta0
    levels = level_grid(spec, grid, n_levels)
    worst, wpt, sym = np.inf, None, 0.0
    for c in levels:
        a = spec.diffusion(x, c)
        sym = max(sym, float(np.abs(a - np.swapaxes(a, 1, 2)).max()))
        ev = np.linalg.eigvalsh(a)
        m = np.minimum(ev[:, 0] - th, 1.0 / th - ev[:, -1])
        i = int(m.argmin())
        if m[i] < worst:
            worst, wpt = float(m[i]), np.append(x[i], c)
    rep.checks.append(Check("ellipticity", worst >= -1e-12, worst, wpt, f"theta0 = {th}; point shown as (x, c)"))
    rep.checks.append(Check("symmetry", sym <= 1e-12, -sym, None, "a(x,c) symmetric"))

    s = spec.boundary.summary(grid)
    gn = spec.boundary(np.vstack([x, grid.samples]))
    lo, hi = s["g_min"], s["g_max"]
    slack = 1e-9 * max(1.0, abs(lo), abs(hi))
    ok = gn.min() >= lo - slack and gn.max() <= hi + slack
    rep.checks.append(Check("g-range", bool(ok), float(min(gn.min() - lo, hi - gn.max())), None,
                            f"I_g = [{lo:.6g}, {hi:.6g}], c0 = {s['c0']:.6g}"))
    rep.checks.append(Check("g-astable", None, float("nan"), None,
                            "global asymptotic stability not decidable from samples"))
    return rep


# ---------------------------------------------------------------- stock fields

def linear_drift(k) -> Callable:
    """b(x) = -diag(k) x."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    return lambda x: -x * k


def quadratic_drift(k, q) -> Callable:
    """b_i(x) = -k_i x_i - q_i x_i |x_i|."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    return lambda x: -x * k - q * x * np.abs(x)


def constant_diffusion(s) -> Callable:
    """a = diag(s) (a scalar s means s I)."""
    s = np.atleast_1d(np.asarray(s, dtype=float))

    def a(x, c):
        d = np.broadcast_to(s, (x.shape[0], x.shape[1]))
        return d[:, :, None] * np.eye(x.shape[1])
    return a


def affine_diffusion(s0: float, s1: float) -> Callable:
    """a = (s0 + s1 c) I."""
    def a(x, c):
        return (s0 + s1 * np.asarray(c, float))[:, None, None] * np.eye(x.shape[1])
    return a


def inverse_affine_diffusion(lo: float = 0.0, hi: float = 1.0, scale: float = 1.0) -> Callable:
    """a = I / (scale (1 + clamp(c, lo, hi)))."""
    def a(x, c):
        cc = np.clip(np.asarray(c, float), lo, hi)
        return (1.0 / (scale * (1.0 + cc)))[:, None, None] * np.eye(x.shape[1])
    return a


def piecewise_linear_g(axis: int, knots, values) -> Callable:
    """g(x) = linear interpolation of ``values`` at ``knots`` along one coordinate.

    Outside the knots the end slopes are continued.
    """
    kn = np.asarray(knots, dtype=float)
    va = np.asarray(values, dtype=float)

    def g(x):
        t = x[:, axis]
        out = np.interp(t, kn, va)
        if len(kn) > 1:
            sl = (va[1] - va[0]) / (kn[1] - kn[0])
            sr = (va[-1] - va[-2]) / (kn[-1] - kn[-2])
            out = np.where(t < kn[0], va[0] + sl * (t - kn[0]), out)
            out = np.where(t > kn[-1], va[-1] + sr * (t - kn[-1]), out)
        return out
    return g


def constant_g(value: float) -> Callable:
    return lambda x: np.full(x.shape[0], float(value))


def affine_g(coef, const: float = 0.0) -> Callable:
    """g(x) = coef . x + const."""
    w = np.atleast_1d(np.asarray(coef, dtype=float))
    return lambda x: x @ w + float(const)
