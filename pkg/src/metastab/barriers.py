"""Explicit barrier functions and their numerical verification.

Each constructor returns a BarrierCandidate holding evaluators, parameters and
a list of sampled checks; a candidate is verified iff every check passes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.spatial import cKDTree

from .domain import ON_BOUNDARY, Grid
from .metamap import argmin_clusters
from .model import Check, ProblemSpec
from .parabolic import ResidualReport, Stepper, TimeGrid, evolve, residual
from .quasipotential import FrozenHamiltonian, PotentialField, exit_cost


class SideConditionViolated(ValueError):
    pass


class MarginViolated(ValueError):
    pass


class SearchFailed(RuntimeError):
    def __init__(self, msg, candidate=None):
        super().__init__(msg)
        self.candidate = candidate


# ---------------------------------------------------------------- bump profile

@dataclass(frozen=True)
class BumpProfile:
    """C^2 ramp: 0 on [0, 1/2], smoothstep on [1/2, 1], 1 on [1, inf)."""
    degree: int
    poly: Polynomial  # smoothstep in y = 2s - 1 on [0, 1]
    h2norm: float

    def _y(self, s):
        return np.clip(2.0 * np.asarray(s, float) - 1.0, 0.0, 1.0)

    def __call__(self, s):
        return self.poly(self._y(s))

    def d1(self, s):
        s = np.asarray(s, float)
        y = self._y(s)
        return np.where((s > 0.5) & (s < 1), 2.0 * self.poly.deriv(1)(y), 0.0)

    def d2(self, s):
        s = np.asarray(s, float)
        y = self._y(s)
        return np.where((s > 0.5) & (s < 1), 4.0 * self.poly.deriv(2)(y), 0.0)


def make_h(degree: int = 5) -> BumpProfile:
    """Odd-degree smoothstep (degree >= 5); ||h''|| by dense sampling."""
    if degree < 5 or degree % 2 == 0:
        raise ValueError("degree must be odd and at least 5")
    N = (degree - 1) // 2
    coef = np.zeros(degree + 1)
    for k in range(N + 1):
        coef[N + 1 + k] = comb(N + k, k) * comb(2 * N + 1, N - k) * (-1) ** k
    prof = BumpProfile(degree, Polynomial(coef), 0.0)
    s = np.linspace(0.5, 1.0, 200001)
    return BumpProfile(degree, prof.poly, float(np.abs(prof.d2(s)).max()))


# ---------------------------------------------------------------- candidates

@dataclass
class BarrierCandidate:
    kind: str
    params: dict
    evaluate: Callable
    checks: list = field(default_factory=list)
    residuals: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def verified(self) -> bool:
        return all(c.passed is not False for c in self.checks) and \
            all(r.passed for r in self.residuals.values())

    def lines(self) -> list[str]:
        out = [f"{'VERIFIED' if self.verified else 'NOT VERIFIED'} {self.kind} "
               + ", ".join(f"{k}={_fmt(v)}" for k, v in self.params.items())]
        out += ["  " + r.line(name) for name, r in self.residuals.items()]
        out += ["  " + c.line() for c in self.checks]
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# kind", self.kind] + [f"{k}={_fmt(v)}" for k, v in self.params.items()])
            w.writerow(["check", "sample", "x", "t", "residual", "bound", "pass"])
            for name, r in self.residuals.items():
                ok = r.margin >= -r.allowed
                for i in range(len(r.residual)):
                    w.writerow([name, i, " ".join(map(repr, r.points[i])), repr(r.times[i]),
                                repr(r.residual[i]), repr(-r.allowed[i] if r.kind == "super" else r.allowed[i]),
                                int(ok[i])])
            for c in self.checks:
                w.writerow([c.name, "", "", "", repr(c.margin), "", {True: 1, False: 0, None: ""}[c.passed]])


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v)


def _ball_samples(n: int, radius: float, n_r: int = 101, n_ang: int = 64) -> np.ndarray:
    if n == 1:
        return np.linspace(-radius, radius, 2 * n_r - 1)[:, None]
    rr = np.linspace(0, radius, n_r)[1:]
    th = np.linspace(0, 2 * np.pi, n_ang, endpoint=False)
    pts = (rr[:, None, None] * np.stack([np.cos(th), np.sin(th)], -1)[None]).reshape(-1, 2)
    return np.vstack([np.zeros((1, 2)), pts])


def _sphere_samples(n: int, radius: float, n_ang: int = 64) -> np.ndarray:
    if n == 1:
        return np.array([[-radius], [radius]])
    th = np.linspace(0, 2 * np.pi, n_ang, endpoint=False)
    return radius * np.stack([np.cos(th), np.sin(th)], -1)


# ---------------------------------------------------------------- q^eps

def barrier_q(profile: BumpProfile, spec: ProblemSpec, eps: float, R: Optional[float] = None,
              r: Optional[float] = None, verify: bool = True, n_r: int = 101, n_t: int = 41,
              hx: Optional[float] = None, tol: float = 1e-6) -> BarrierCandidate:
    """p^eps, q^eps and tau(eps) with the supersolution and side-bound checks."""
    n = spec.dim
    b0, r0, th = spec.drift.b0, spec.drift.r0, spec.diffusion.theta0
    k = b0 / 2
    R0 = 2 * np.sqrt(2 * n) / np.sqrt(b0 * th)
    R = R0 if R is None else float(R)
    r = r0 if r is None else float(r)
    if R < R0 * (1 - 1e-12):
        raise SideConditionViolated(f"R = {R:.6g} < R0 = {R0:.6g}")
    if not (np.sqrt(eps) * R < r <= r0):
        raise SideConditionViolated(f"need sqrt(eps) R < r <= r0: sqrt(eps) R = {np.sqrt(eps) * R:.6g}, "
                                    f"r = {r:.6g}, r0 = {r0:.6g}")
    tau = np.log(r / (R * np.sqrt(eps))) / k
    H2 = profile.h2norm
    scale = R * np.sqrt(eps)

    def p(x, t):
        x = np.atleast_2d(x)
        return profile(np.linalg.norm(x, axis=1) * np.exp(-k * np.asarray(t, float)) / scale)

    def q(x, t):
        t = np.asarray(t, float)
        return p(x, t) + H2 / (R ** 2 * th) * (1 - np.exp(-2 * k * t)) / (2 * k)

    cand = BarrierCandidate("q_eps", dict(eps=eps, k=k, R=R, R0=R0, r=r, tau=tau, h2norm=H2), q,
                            extra=dict(p=p))
    if not verify:
        return cand
    xs = _ball_samples(n, r0, n_r)
    ts = np.linspace(tau / n_t, tau, n_t)
    X = np.repeat(xs, len(ts), axis=0)
    T = np.tile(ts, len(xs))
    hx = 1e-4 * scale if hx is None else hx
    cand.residuals["pucci"] = residual(("pucci", th), q, eps, X, T, drift=spec.drift, kind="super",
                                       hx=hx, ht=1e-4 * tau, tol_abs=tol)
    ball = _ball_samples(n, r, n_r)
    rad = np.linalg.norm(ball, axis=1)
    q0 = q(ball, 0.0)
    cand.checks.append(Check("q(.,0) >= 0 on B_r", bool(q0.min() >= 0), float(q0.min()), ball[np.argmin(q0)]))
    ring = rad >= scale
    if ring.any():
        v = q0[ring]
        cand.checks.append(Check("q(.,0) >= 1 on B_r minus B_sqrt(eps)R", bool(v.min() >= 1 - 1e-12),
                                 float(v.min() - 1), ball[ring][np.argmin(v)]))
    sph = _sphere_samples(n, r)
    tt = np.linspace(0, tau, 201)
    vals = np.array([q(sph, t) for t in tt])
    cand.checks.append(Check("q >= 1 on the sphere of radius r for t in [0, tau]",
                             bool(vals.min() >= 1 - 1e-12), float(vals.min() - 1)))
    half = ball[rad <= r / 2]
    qt = q(half, tau)
    bound = H2 / (b0 * th * R ** 2)
    cand.checks.append(Check("q(., tau) <= ||h''||/(b0 theta0 R^2) on B_r/2", bool(qt.max() <= bound * (1 + 1e-12)),
                             float(bound - qt.max()), half[np.argmax(qt)]))
    return cand


# ---------------------------------------------------------------- smoothed potential

class GridFunction:
    """C^2 interpolant of nodal values with gradient and Hessian (1D and 2D)."""

    def __init__(self, grid: Grid, values: np.ndarray):
        self.dim = grid.dim
        if grid.dim == 1:
            order = np.argsort(grid.coords[:, 0])
            self._s = CubicSpline(grid.coords[order, 0], values[order])
        elif grid.dim == 2:
            axes = [(grid.kmin[k] + np.arange(grid.lattice.shape[k])) * grid.h for k in range(2)]
            full = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 2)
            _, nearest = cKDTree(grid.coords).query(full)
            vals = values[nearest].reshape(len(axes[0]), len(axes[1]))
            self._s = RectBivariateSpline(axes[0], axes[1], vals, kx=3, ky=3, s=0)
        else:
            raise NotImplementedError("dimension > 2")

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        if self.dim == 1:
            return self._s(x[:, 0])
        return self._s.ev(x[:, 0], x[:, 1])

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        if self.dim == 1:
            return self._s(x[:, 0], 1)[:, None]
        return np.stack([self._s.ev(x[:, 0], x[:, 1], dx=1), self._s.ev(x[:, 0], x[:, 1], dy=1)], 1)

    def hess(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        if self.dim == 1:
            return self._s(x[:, 0], 2)[:, None, None]
        xx = self._s.ev(x[:, 0], x[:, 1], dx=2)
        yy = self._s.ev(x[:, 0], x[:, 1], dy=2)
        xy = self._s.ev(x[:, 0], x[:, 1], dx=1, dy=1)
        return np.stack([np.stack([xx, xy], -1), np.stack([xy, yy], -1)], -2)


def mollify(grid: Grid, values: np.ndarray, rho: float) -> np.ndarray:
    """Nodal average with the C^inf bump kernel of radius rho (weights renormalized at the boundary)."""
    if rho <= 0:
        return values.copy()
    tree = cKDTree(grid.coords)
    out = np.empty_like(values)
    for i, nbrs in enumerate(tree.query_ball_point(grid.coords, rho)):
        d = np.linalg.norm(grid.coords[nbrs] - grid.coords[i], axis=1) / rho
        w = np.where(d < 1, np.exp(-1.0 / np.maximum(1 - d ** 2, 1e-300)), 0.0)
        out[i] = np.dot(w, values[nbrs]) / w.sum()
    return out


def _hamiltonian(ham: FrozenHamiltonian, x, p):
    a = ham.alpha(x)
    return np.einsum("ni,nij,nj->n", p, a, p) + np.einsum("ni,ni->n", ham.b(x), p)


def _v_checks(grid, V, vfun, r, ham, sample_pts=None):
    """H(x, Dv) <= -eta off B_r, <= 1 on B_r, sup|v - V| < r (sampled at nodes)."""
    x = grid.coords if sample_pts is None else sample_pts
    H = _hamiltonian(ham, x, vfun.grad(x))
    inner = np.linalg.norm(x, axis=1) < r
    out = ~inner
    eta = float(-H[out].max()) if out.any() else np.inf
    dev = np.abs(vfun(grid.coords) - V)
    checks = [
        Check("H(x, Dv) <= -eta off B_r", bool(eta > 0), eta, x[out][np.argmax(H[out])] if out.any() else None),
        Check("H(x, Dv) <= 1 on B_r", bool(H[inner].max() <= 1) if inner.any() else True,
              float(1 - H[inner].max()) if inner.any() else np.inf),
        Check("sup|v - V| < r", bool(dev.max() < r), float(r - dev.max()), grid.coords[np.argmax(dev)]),
    ]
    return checks, eta


def build_smooth(pf: PotentialField, mu: float, rho: float) -> GridFunction:
    return GridFunction(pf.grid, mollify(pf.grid, (1 - mu) * pf.values, rho))


def smooth_potential(pf: PotentialField, r: float, spec: ProblemSpec, ham: FrozenHamiltonian,
                     mus=None, rhos=None, strict: bool = True) -> BarrierCandidate:
    """v_r = mollified (1 - mu) V with (mu, rho) from a bounded grid search.

    Candidates are verified on grid nodes; the passing candidate with the
    largest eta is returned.  Raises SearchFailed (with the best candidate
    attached) when none passes and ``strict``.
    """
    if not 0 < r < spec.drift.r0:
        raise ValueError("r must lie in (0, r0)")
    grid = pf.grid
    vmax = float(np.max(np.abs(pf.values)))
    mus = (2.0 ** -np.arange(4, 0, -1)) * r / max(vmax, 1e-12) if mus is None else mus
    rhos = (grid.h, 2 * grid.h, 4 * grid.h) if rhos is None else rhos
    best, best_key = None, None
    for mu in mus:
        for rho in rhos:
            vf = build_smooth(pf, mu, rho)
            checks, eta = _v_checks(grid, pf.values, vf, r, ham)
            cand = BarrierCandidate("v_smooth", dict(r=r, mu=float(mu), rho=float(rho), eta=eta), vf, checks,
                                    extra=dict(pf=pf, ham=ham))
            key = (cand.verified, eta)
            if best_key is None or key > best_key:
                best, best_key = cand, key
    if not best.verified and strict:
        raise SearchFailed("no (mu, rho) verifies the smoothed-potential inequalities", best)
    return best


# ---------------------------------------------------------------- w_short (upper barrier)

def _sigma(pf: PotentialField, m: float) -> np.ndarray:
    return pf.values <= m


def _a_fields(ham: FrozenHamiltonian, theta0: float, upper: bool):
    """Sampled diffusion fields bounded by alpha: alpha itself and theta0 I (above) or theta0^-1 I (below)."""
    other = theta0 if upper else 1.0 / theta0
    yield "alpha", lambda x, t: ham.alpha(x)
    yield ("theta0 I" if upper else "theta0^-1 I"), lambda x, t: other * np.broadcast_to(
        np.eye(x.shape[1]), (x.shape[0], x.shape[1], x.shape[1]))


def barrier_w_short(v: BarrierCandidate, m: float, r: float, eps: float, spec: ProblemSpec,
                    C1: Optional[float] = None, n_times: int = 3) -> BarrierCandidate:
    """z = exp((v - m + 2r)/eps) + d_eps t, a supersolution against every a^eps <= alpha.

    Checks: residual on every grid node for the sampled a^eps fields, w > C1
    off Sigma^m, and the closeness properties of v used by the comparison
    argument (v <= 2r on B_r, v >= m - r where V >= m).
    """
    pf, ham = v.extra["pf"], v.extra["ham"]
    grid = pf.grid
    M = pf.M
    if m >= M - 3 * r:
        raise MarginViolated(f"m = {m:.6g} must be below M - 3r = {M - 3 * r:.6g}")
    vf = v.evaluate
    d = 2.0 / eps * np.exp((-m + 4 * r) / eps)
    C1 = float(np.abs(spec.boundary(grid.coords)).max()) if C1 is None else C1

    def w(x):
        return np.exp((vf(x) - m + 2 * r) / eps)

    def z(x, t):
        return w(x) + d * np.asarray(t, float)

    def derivs(x, t):
        wx = w(x)
        gv = vf.grad(x)
        Dw = wx[:, None] * gv / eps
        D2 = wx[:, None, None] * (vf.hess(x) / eps + np.einsum("ni,nj->nij", gv, gv) / eps ** 2)
        return wx + d * t, np.full(len(x), d), Dw, D2

    cand = BarrierCandidate("w_short", dict(eps=eps, m=m, r=r, d_eps=d, C1=C1, mu=v.params.get("mu")), z,
                            extra=dict(w=w, v=v))
    x = grid.coords
    X = np.repeat(x, n_times, axis=0)
    T = np.tile(np.linspace(0, 1, n_times), len(x))
    for name, afield in _a_fields(ham, spec.diffusion.theta0, upper=True):
        cand.residuals[f"supersolution, a = {name}"] = residual(
            afield, z, eps, X, T, drift=spec.drift, kind="super", derivatives=derivs,
            tol_abs=1e-8, tol_rel=1e-8)
    off = ~_sigma(pf, m)
    wo = w(x[off])
    cand.checks.append(Check("w > C1 off Sigma^m", bool(wo.min() > C1), float(wo.min() - C1)))
    vals = vf(x)
    inB = np.linalg.norm(x, axis=1) < r
    cand.checks.append(Check("v <= 2r on B_r", bool(vals[inB].max() <= 2 * r), float(2 * r - vals[inB].max())))
    big = pf.values >= m
    if big.any():
        cand.checks.append(Check("v >= m - r where V >= m", bool(vals[big].min() >= m - r),
                                 float(vals[big].min() - (m - r))))
    cand.checks.append(Check("C1 < exp(r/eps)", bool(C1 < np.exp(r / eps)), float(np.exp(r / eps) - C1)))
    return cand


def search_w_short(pf: PotentialField, spec: ProblemSpec, ham: FrozenHamiltonian, m: float, r: float,
                   eps: float, mus=None, rhos=None) -> BarrierCandidate:
    """w_short over a bounded mu-range (up to r/m); the first verified candidate wins."""
    mus = np.linspace(r / m / 8, r / m, 8) if mus is None else mus
    rhos = (pf.grid.h,) if rhos is None else rhos
    best = None
    for mu in mus:
        for rho in rhos:
            vf = build_smooth(pf, mu, rho)
            checks, eta = _v_checks(pf.grid, pf.values, vf, r, ham)
            v = BarrierCandidate("v_smooth", dict(r=r, mu=float(mu), rho=float(rho), eta=eta), vf, checks,
                                 extra=dict(pf=pf, ham=ham))
            cand = barrier_w_short(v, m, r, eps, spec)
            cand.extra["v_checks"] = checks
            if cand.verified:
                return cand
            if best is None or _worst(cand) > _worst(best):
                best = cand
    raise SearchFailed(f"no mu in [{min(mus):.3g}, {max(mus):.3g}] verifies w_short at eps={eps}", best)


def _worst(c: BarrierCandidate) -> float:
    vals = [float(np.min((r.margin + r.allowed) / (r.scale + 1e-300))) for r in c.residuals.values()]
    vals += [c_.margin for c_ in c.checks if c_.passed is False]
    return min(vals) if vals else np.inf


def replay_w_short(cand: BarrierCandidate, spec: ProblemSpec, T: Optional[float] = None) -> Check:
    """Discrete comparison: linear evolve with u(.,0) = 0 on Sigma^m (g elsewhere) stays below z."""
    v = cand.extra["v"]
    pf, ham = v.extra["pf"], v.extra["ham"]
    grid = pf.grid
    eps, m = cand.params["eps"], cand.params["m"]
    u0 = spec.boundary(grid.coords)
    u0[_sigma(pf, m)] = np.minimum(u0[_sigma(pf, m)], 0.0)
    T = np.exp(m / eps) if T is None else T
    zt = lambda t: cand.evaluate(grid.coords, t)
    worst = [np.inf, None]

    def cb(t, u):
        gap = zt(t) - u
        i = int(np.argmin(gap))
        if gap[i] < worst[0]:
            worst[0], worst[1] = float(gap[i]), (grid.coords[i].tolist(), float(t))

    f = lambda x, t: ham.alpha(x)
    f.static = True
    evolve(spec, grid, eps, tgrid=TimeGrid(T, grid.h), frozen_a=f, u0=u0, callback=cb)
    gap0 = float((zt(0.0) - u0).min())
    worst[0] = min(worst[0], gap0)
    return Check("replay: u <= z nodewise", bool(worst[0] >= -1e-9), worst[0], None,
                 f"worst at (x, t) = {worst[1]}, horizon {T:.4g}")


# ---------------------------------------------------------------- w_m and z_long (lower barrier)

def _gamma_nodes(pf: PotentialField, tau: Optional[float] = None) -> np.ndarray:
    grid = pf.grid
    tau = 2 * grid.h if tau is None else tau
    _, near = argmin_clusters(grid, pf.boundary, tau)
    return np.unique(grid.sample_node[near])


def one_sided_checks(grid: Grid, w: np.ndarray, ham: FrozenHamiltonian):
    """min over nodes and all 2^n one-sided difference combinations of H(x, -Dw); max second difference."""
    n, h = grid.dim, grid.h
    nb = grid.neighbors
    full = np.all(nb >= 0, axis=1) & (grid.kind != ON_BOUNDARY)
    ids = np.nonzero(full)[0]
    x = grid.coords[ids]
    fwd = np.stack([(w[nb[ids, 2 * k]] - w[ids]) / h for k in range(n)], 1)
    bwd = np.stack([(w[ids] - w[nb[ids, 2 * k + 1]]) / h for k in range(n)], 1)
    Hmin = np.full(len(ids), np.inf)
    for combo in range(2 ** n):
        p = np.where([(combo >> k) & 1 for k in range(n)], fwd, bwd)
        Hmin = np.minimum(Hmin, _hamiltonian(ham, x, -p))
    sec = np.stack([(w[nb[ids, 2 * k]] - 2 * w[ids] + w[nb[ids, 2 * k + 1]]) / h ** 2 for k in range(n)], 1)
    if n == 2:
        for off in ((1, 1), (1, -1)):
            jp = grid.node_at(np.array(off))[ids]
            jm = grid.node_at(-np.array(off))[ids]
            ok = (jp >= 0) & (jm >= 0)
            s = np.full(len(ids), -np.inf)
            s[ok] = (w[jp[ok]] - 2 * w[ids[ok]] + w[jm[ok]]) / (2 * h ** 2)
            sec = np.concatenate([sec, s[:, None]], 1)
    return ids, Hmin, sec.max(axis=1)


def make_w_m(pf: PotentialField, m: float, spec: ProblemSpec, ham: FrozenHamiltonian, cap: Optional[float] = None,
             running=(0.001, 0.003, 0.01, 0.03), scales=(1.0, 1.05), offset: Optional[float] = None,
             strict: bool = True) -> BarrierCandidate:
    """w_m = c + s phi with phi the minimal action (plus running cost eta') to reach the argmin set.

    phi solves H(x, -D phi) = eta' in the viscosity sense, so H(x, -Dw) >= s eta'
    for s >= 1.  Verified by one-sided differences, a second-difference
    semiconcavity proxy and 0 < min w <= max w < cap (default m).
    """
    M = pf.M
    if m <= M:
        raise MarginViolated(f"m = {m:.6g} must exceed M = {M:.6g}")
    cap = m if cap is None else cap
    grid = pf.grid
    targets = _gamma_nodes(pf)
    c = 2 * grid.h if offset is None else offset
    best, best_key = None, None
    for etap in running:
        phi = exit_cost(ham, grid, targets, running=etap)
        for s in scales:
            w = c + s * phi
            ids, Hmin, sec = one_sided_checks(grid, w, ham)
            eta = float(Hmin.min())
            checks = [
                Check("H(x, -Dw) >= eta > 0 (one-sided differences)", bool(eta > 0), eta, grid.coords[ids[np.argmin(Hmin)]]),
                Check("D2 w <= 1/eta (second differences)", bool(eta > 0 and sec.max() <= 1 / eta),
                      float(1 / eta - sec.max()) if eta > 0 else -np.inf, grid.coords[ids[np.argmax(sec)]]),
                Check("0 < min w", bool(w.min() > 0), float(w.min())),
                Check("max w < cap", bool(w.max() < cap), float(cap - w.max()), None, f"cap = {cap:.6g}"),
            ]
            cand = BarrierCandidate("w_m", dict(m=m, eta=eta, running=etap, s=s, c=c, rho_minus=float(w.min()),
                                                rho_plus=float(w.max())),
                                    lambda x, _w=w: grid.interpolate(_w, x), checks, extra=dict(values=w, pf=pf))
            key = (cand.verified, eta if cand.verified else -w.max())
            if best_key is None or key > best_key:
                best, best_key = cand, key
    if not best.verified and strict:
        raise SearchFailed("no (eta', s) verifies w_m", best)
    return best


def barrier_z_long(v: BarrierCandidate, wm: BarrierCandidate, m: float, r: float, eps: float,
                   spec: ProblemSpec, gamma: Optional[float] = None, C: float = 1.0) -> BarrierCandidate:
    """z = -exp((v - m + 2r)/eps) + exp(-w_m/eps) - exp(-rho^-/eps) and the corollary variant.

    The subsolution residual is formed from grid differences at interior
    nodes (w_m is Lipschitz only) for the sampled a^eps >= alpha fields.
    """
    pf, ham = v.extra["pf"], v.extra["ham"]
    grid = pf.grid
    rp, rm = wm.params["rho_plus"], wm.params["rho_minus"]
    if not rp < m - 5 * r:
        raise MarginViolated(f"need rho+ < m - 5r: rho+ = {rp:.6g}, m - 5r = {m - 5 * r:.6g}")
    wv = wm.extra["values"]
    vv = v.evaluate(grid.coords)
    zv = -np.exp((vv - m + 2 * r) / eps) + np.exp(-wv / eps) - np.exp(-rm / eps)
    eta = wm.params["eta"]
    gamma = eta if gamma is None else gamma
    slope = gamma / 4 * np.exp(-rp / eps)
    tau = 4 * C / gamma * np.exp(rp / eps)

    def z(x, t=0.0):
        return grid.interpolate(zv, x)

    def gvar(x, t):
        return z(x) - C + slope * np.asarray(t, float)

    cand = BarrierCandidate("z_long", dict(eps=eps, m=m, r=r, rho_plus=rp, rho_minus=rm, gamma=gamma,
                                           C=C, tau=tau, z0=float(zv[grid.origin])), z,
                            extra=dict(values=zv, g=gvar, slope=slope))
    nb = grid.neighbors
    ids = np.nonzero(np.all(nb >= 0, axis=1) & (grid.kind != ON_BOUNDARY))[0]
    x = grid.coords[ids]
    for name, afield in _a_fields(ham, spec.diffusion.theta0, upper=False):
        for label, val in (("z", zv), ("corollary variant", zv)):
            wt = 0.0 if label == "z" else slope
            cand.residuals[f"{label} subsolution, a = {name}"] = _grid_residual(
                grid, val, ids, afield, spec, eps, wt)
    cand.checks.append(Check("z < 0 on the closed domain", bool(zv.max() < 0), float(-zv.max())))
    off = pf.values > m
    if off.any():
        bound = -np.exp(r / eps)
        cand.checks.append(Check("z <= -exp(r/eps) off Sigma^m", bool(zv[off].max() <= bound),
                                 float(bound - zv[off].max())))
    cand.checks.append(Check("C <= exp(r/eps)", bool(C <= np.exp(r / eps)), float(np.exp(r / eps) - C)))
    return cand


def _grid_residual(grid, vals, ids, afield, spec, eps, wt) -> ResidualReport:
    n, h = grid.dim, grid.h
    nb = grid.neighbors
    x = grid.coords[ids]
    grad = np.stack([(vals[nb[ids, 2 * k]] - vals[nb[ids, 2 * k + 1]]) / (2 * h) for k in range(n)], 1)
    hess = np.zeros((len(ids), n, n))
    for k in range(n):
        hess[:, k, k] = (vals[nb[ids, 2 * k]] - 2 * vals[ids] + vals[nb[ids, 2 * k + 1]]) / h ** 2
    if n == 2:
        pp, pm = grid.node_at(np.array((1, 1)))[ids], grid.node_at(np.array((1, -1)))[ids]
        mp, mm = grid.node_at(np.array((-1, 1)))[ids], grid.node_at(np.array((-1, -1)))[ids]
        ok = (pp >= 0) & (pm >= 0) & (mp >= 0) & (mm >= 0)
        hess[ok, 0, 1] = hess[ok, 1, 0] = (vals[pp[ok]] - vals[pm[ok]] - vals[mp[ok]] + vals[mm[ok]]) / (4 * h ** 2)
    t = np.zeros(len(ids))
    D = np.einsum("nij,nij->n", afield(x, t), hess)
    bd = np.einsum("ni,ni->n", spec.drift(x), grad)
    res = wt - eps * D - bd
    scale = abs(wt) + eps * np.abs(D) + np.abs(bd)
    return ResidualReport(x, t, res, scale, "sub", 1e-12, 1e-6)


def search_z_long(pf: PotentialField, spec: ProblemSpec, ham: FrozenHamiltonian, m: float, r: float,
                  eps: float, mus=None, running=(0.001, 0.003, 0.01)) -> BarrierCandidate:
    """Search v (mu) and w_m (running cost) for a verified z_long; SearchFailed keeps the best."""
    mus = np.linspace(r / m / 8, r / m, 8) if mus is None else mus
    best = None
    wms = []
    for etap in running:
        try:
            wms.append(make_w_m(pf, m, spec, ham, cap=m - 5 * r, running=(etap,), scales=(1.0,)))
        except SearchFailed as exc:
            if exc.candidate is not None and exc.candidate.params["rho_plus"] < m - 5 * r:
                wms.append(exc.candidate)
    if not wms:
        raise SearchFailed(f"no w_m with max below m - 5r = {m - 5 * r:.4g}")
    for mu in mus:
        vf = build_smooth(pf, mu, pf.grid.h)
        checks, eta = _v_checks(pf.grid, pf.values, vf, r, ham)
        v = BarrierCandidate("v_smooth", dict(r=r, mu=float(mu), rho=pf.grid.h, eta=eta), vf, checks,
                             extra=dict(pf=pf, ham=ham))
        for wm in wms:
            cand = barrier_z_long(v, wm, m, r, eps, spec)
            cand.extra["w_m"] = wm
            cand.params["mu"] = float(mu)
            cand.params["running"] = wm.params["running"]
            if cand.verified and wm.verified:
                return cand
            if best is None or _worst(cand) > _worst(best):
                best = cand
    raise SearchFailed(f"no (mu, eta') verifies z_long at eps={eps}", best)


def replay_z_long(spec: ProblemSpec, pf: PotentialField, ham: FrozenHamiltonian, m: float, eps: float,
                  C: float = 1.0, delta: float = 0.05, T: Optional[float] = None,
                  cand: Optional[BarrierCandidate] = None) -> list[Check]:
    """Linear evolve from -C with boundary 0 on Sigma^m and -C elsewhere.

    Checks u(0, t) >= -delta on [exp(m/eps), T] and, when a candidate is
    given, u >= g^eps nodewise up to min(T, tau(eps)).
    """
    grid = pf.grid
    T = np.exp((m + 0.3) / eps) if T is None else T
    bvals = pf.boundary
    tree = cKDTree(grid.samples)

    def boundary(x, t):
        _, s = tree.query(np.atleast_2d(x))
        return np.where(bvals[s] <= m, 0.0, -C)

    u0 = np.full(grid.n_nodes, -C)
    kn = grid.kind == ON_BOUNDARY
    u0[kn] = boundary(grid.coords[kn], 0.0)
    t_start = np.exp(m / eps)
    worst_o = [np.inf, None]
    worst_g = [np.inf, None]
    tau = cand.params["tau"] if cand is not None else None

    def cb(t, u):
        if t >= t_start * (1 - 1e-12) and u[grid.origin] < worst_o[0]:
            worst_o[0], worst_o[1] = float(u[grid.origin]), float(t)
        if cand is not None and t <= min(T, tau):
            gap = u - cand.extra["g"](grid.coords, t)
            if gap.min() < worst_g[0]:
                worst_g[0], worst_g[1] = float(gap.min()), float(t)

    f = lambda x, t: ham.alpha(x)
    f.static = True
    evolve(spec, grid, eps, tgrid=TimeGrid(T, grid.h, targets=(t_start,)), frozen_a=f, u0=u0,
           boundary=boundary, callback=cb)
    out = [Check("replay: u(0, t) >= -delta on [exp(m/eps), T]", bool(worst_o[0] >= -delta),
                 worst_o[0] + delta, None, f"min u(0,t) = {worst_o[0]:.4g} at t = {worst_o[1]}, T = {T:.4g}")]
    if cand is not None:
        out.append(Check("replay: u >= g^eps nodewise", bool(worst_g[0] >= -1e-9), worst_g[0], None,
                         f"worst at t = {worst_g[1]}"))
    return out
