"""Metastability map: M(c), argmin sets, G^+-(c), c0, g0, c1 and the staircase cbar.

A map owns a level solver ``c -> LevelRecord``; records are computed on a
c-grid over I_g and on demand (bisection for c1, crossing checks).  Maps can
also be built from tables, which is how synthetic G-graphs are examined.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .domain import Grid
from .model import ProblemSpec
from .quasipotential import FrozenHamiltonian, PotentialField, frozen_at_level, solve_dijkstra


@dataclass
class LevelRecord:
    c: float
    M: float
    gamma: np.ndarray  # (k, n) representative argmin points
    gvals: np.ndarray
    near: np.ndarray = field(repr=False, default=None)  # all sample ids with V <= M + tau
    field: Optional[PotentialField] = field(repr=False, default=None)

    @property
    def Gminus(self) -> float:
        return float(self.gvals.min())

    @property
    def Gplus(self) -> float:
        return float(self.gvals.max())


def argmin_clusters(grid: Grid, bvals: np.ndarray, tau: float, link: Optional[float] = None):
    """Near-minimal boundary samples grouped into connected clusters.

    Returns (representatives, near): one sample id per cluster (its argmin) and
    all sample ids with value <= min + tau.  Samples closer than ``link``
    (default 3h) belong to the same cluster.
    """
    M = bvals.min()
    near = np.nonzero(bvals <= M + tau)[0]
    link = 3 * grid.h if link is None else link
    pts = grid.samples[near]
    pairs = cKDTree(pts).query_pairs(link, output_type="ndarray") if len(near) > 1 else np.zeros((0, 2), int)
    k = len(near)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(k, k))
    ncomp, lab = connected_components(adj, directed=False)
    reps = []
    for comp in range(ncomp):
        members = near[lab == comp]
        reps.append(int(members[np.argmin(bvals[members])]))
    reps.sort(key=lambda s: bvals[s])
    return np.array(reps, dtype=np.int64), near


def record_from_field(spec: ProblemSpec, pf: PotentialField, c: float, tau_arg: float) -> LevelRecord:
    reps, near = argmin_clusters(pf.grid, pf.boundary, tau_arg)
    gamma = pf.grid.samples[reps]
    return LevelRecord(float(c), pf.M, gamma, spec.boundary(gamma), near, pf)


def default_tau(spec: ProblemSpec, grid: Grid, solver_err: float = 0.0) -> float:
    """max(2 * solver error, 10 h Lambda) with Lambda = max|b| / theta0."""
    lam = np.linalg.norm(spec.drift(grid.coords), axis=1).max() / spec.diffusion.theta0
    return max(2 * solver_err, 10 * grid.h * lam)


def default_rho(spec: ProblemSpec, grid: Grid, tau: float) -> float:
    """Modulus of g over the distance tau / Lambda (Lipschitz estimate from grid edges)."""
    lam = np.linalg.norm(spec.drift(grid.coords), axis=1).max() / spec.diffusion.theta0
    gv = spec.boundary(grid.coords)
    lg = 0.0
    for k in range(grid.dim):
        j = grid.neighbors[:, 2 * k]
        ok = j >= 0
        if ok.any():
            lg = max(lg, float(np.abs(gv[j[ok]] - gv[ok]).max() / grid.h))
    return lg * tau / lam


def level_record(spec: ProblemSpec, grid: Grid, c: float, tau_arg: Optional[float] = None, *,
                 stencil: int = 2, cache: Optional[dict] = None,
                 ham: Optional[FrozenHamiltonian] = None) -> LevelRecord:
    """M(c), the argmin clusters of V^c on the boundary and the g-values there."""
    tau = default_tau(spec, grid) if tau_arg is None else tau_arg
    if tau <= 0:
        raise ValueError("tau_arg must be positive")
    pf = solve_dijkstra(ham or frozen_at_level(spec, c), grid, stencil, cache=cache)
    return record_from_field(spec, pf, c, tau)


# ---------------------------------------------------------------- the map

@dataclass
class Report:
    passed: Optional[bool]
    lines: list = field(default_factory=list)
    data: dict = field(default_factory=dict)


class MetastabilityMap:
    """c-grid records plus the derived scalars c0, g0, c1 and the staircase."""

    def __init__(self, solver: Callable, g_min: float, g_max: float, g1: float, g2: float,
                 c0: float, rho_G: float, dc: float, meta: Optional[dict] = None):
        self._solver = solver
        self.records: dict[float, LevelRecord] = {}
        self.g_min, self.g_max, self.g1, self.g2 = g_min, g_max, g1, g2
        self.c0 = c0
        self.rho_G = rho_G
        self.dc = dc
        self.g0: Optional[float] = None
        self.c1: Optional[float] = None
        self.singleton: Optional[Report] = None
        self.crossing: Optional[Report] = None
        self.notes: list[str] = []
        self.meta = meta or {}

    # records ---------------------------------------------------------------
    def level(self, c: float) -> LevelRecord:
        c = float(c)
        if c not in self.records:
            self.records[c] = self._solver(c)
        return self.records[c]

    def compute_levels(self, cs, jobs: int = 1) -> None:
        todo = [float(c) for c in cs if float(c) not in self.records]
        if jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(jobs) as ex:
                for c, r in zip(todo, ex.map(self._solver, todo)):
                    self.records[c] = r
        else:
            for c in todo:
                self.records[c] = self._solver(c)

    @property
    def cgrid(self) -> np.ndarray:
        return np.array(sorted(self.records))

    def G_minus(self, c: float) -> float:
        return self.level(c).Gminus

    def G_plus(self, c: float) -> float:
        return self.level(c).Gplus

    def M(self, c: float) -> float:
        return self.level(c).M

    def M_table(self) -> tuple[np.ndarray, np.ndarray]:
        cs = self.cgrid
        return cs, np.array([self.records[c].M for c in cs])

    # staircase ---------------------------------------------------------------
    def cbar(self, lam: float) -> float:
        return cbar(self, lam)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["c", "M", "G_minus", "G_plus", "n_gamma"])
            for c in self.cgrid:
                r = self.records[c]
                w.writerow([repr(c), repr(r.M), repr(r.Gminus), repr(r.Gplus), len(r.gvals)])

    def cbar_csv(self, path, lams) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "cbar"])
            for lam in lams:
                w.writerow([repr(float(lam)), repr(cbar(self, lam))])


def tabulated_map(cs, M, Gminus, Gplus, c0, g_range, rho_G=0.0) -> MetastabilityMap:
    """Map from tables; M is interpolated linearly, G^+- by the nearest tabulated level."""
    cs = np.asarray(cs, float)
    M, Gm, Gp = (np.asarray(v, float) for v in (M, Gminus, Gplus))

    def solver(c):
        i = int(np.argmin(np.abs(cs - c)))
        return LevelRecord(c, float(np.interp(c, cs, M)), np.zeros((2, 1)), np.array([Gm[i], Gp[i]]))
    lo, hi = g_range
    mp = MetastabilityMap(solver, lo, hi, lo, hi, float(c0), rho_G, float(np.min(np.diff(cs))))
    mp.compute_levels(cs)
    return mp


def build_map(spec: ProblemSpec, grid: Grid, n_levels: int = 33, refine: int = 4,
              tau_arg: Optional[float] = None, rho_G: Optional[float] = None, stencil: int = 2,
              jobs: int = 1, solver: Optional[Callable] = None) -> MetastabilityMap:
    """Records on a uniform c-grid over I_g, refined around c0 and the provisional c1.

    Also runs the singleton check, c1 and the crossing check.
    """
    s = spec.boundary.summary(grid)
    tau = default_tau(spec, grid) if tau_arg is None else tau_arg
    rho = default_rho(spec, grid, tau) if rho_G is None else rho_G
    cache: dict = {}
    if solver is None:
        def solver(c):
            return level_record(spec, grid, c, tau, stencil=stencil, cache=cache)
    base = np.linspace(s["g_min"], s["g_max"], n_levels)
    dc = float(base[1] - base[0]) if n_levels > 1 else 1.0
    mp = MetastabilityMap(solver, s["g_min"], s["g_max"], s["g1"], s["g2"], s["c0"], rho, dc,
                          meta=dict(tau_arg=tau, n_levels=n_levels, h=grid.h))
    mp.compute_levels(np.append(base, s["c0"]), jobs)
    check_singleton(mp)
    if not mp.singleton.passed:
        return mp
    provisional = compute_c1(mp, bisect=False)
    extra = []
    for anchor in {mp.c0, provisional}:
        i = int(np.searchsorted(base, anchor))
        lo_i, hi_i = max(i - 1, 0), min(i + 1, n_levels - 1)
        for a, b in zip(base[lo_i:hi_i], base[lo_i + 1:hi_i + 1]):
            extra.extend(np.linspace(a, b, refine + 1)[1:-1])
    mp.compute_levels(extra, jobs)
    compute_c1(mp)
    check_crossing(mp)
    _flag_nonmonotone(mp)
    return mp


# ---------------------------------------------------------------- derived scalars

def check_singleton(mp: MetastabilityMap) -> Report:
    r = mp.level(mp.c0)
    gap = r.Gplus - r.Gminus
    ok = bool(gap <= mp.rho_G)
    rep = Report(ok, [f"G+(c0) - G-(c0) = {gap:.6g} (tolerance {mp.rho_G:.3g}); |Gamma| = {len(r.gvals)}"],
                 dict(gap=gap, gamma=r.gamma))
    if ok:
        mp.g0 = r.Gplus
    mp.singleton = rep
    return rep


def _bisect(pred, lo: float, hi: float, tol: float, max_iter: int = 40) -> float:
    """pred(lo) false, pred(hi) true; returns the boundary point (hi side)."""
    for _ in range(max_iter):
        if abs(hi - lo) <= tol:
            break
        mid = 0.5 * (lo + hi)
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return hi


def compute_c1(mp: MetastabilityMap, bisect: bool = True, tol: Optional[float] = None) -> float:
    """c1 = inf{c >= c0 : G-(c) <= c} (or the sup form when g0 <= c0).

    The tolerance rho_G brackets the first crossing on the c-grid; the bracket
    is then refined by bisection on the exact predicate, so that rho_G does
    not bias c1.
    """
    if mp.g0 is None:
        check_singleton(mp)
    if mp.g0 is None:
        raise ValueError("singleton assumption failed; c1 is undefined")
    c0, g0, rho = mp.c0, mp.g0, mp.rho_G
    tol = 1e-4 * max(mp.g_max - mp.g_min, 1e-12) if tol is None else tol
    if abs(g0 - c0) <= rho:
        c1 = c0
    else:
        up = g0 > c0
        cs = mp.cgrid
        cs = cs[cs >= c0] if up else cs[cs <= c0][::-1]
        if up:
            relaxed = lambda c: mp.G_minus(c) <= c + rho
            exact = lambda c: mp.G_minus(c) <= c
        else:
            relaxed = lambda c: mp.G_plus(c) >= c - rho
            exact = lambda c: mp.G_plus(c) >= c
        hit = next((i for i, c in enumerate(cs) if relaxed(c)), None)
        if hit is None:
            c1 = mp.g2 if up else mp.g1
        elif hit == 0:
            c1 = cs[0]
        else:
            lo, hi = cs[hit - 1], cs[hit]
            j = hit
            while not exact(cs[j]) and j + 1 < len(cs):
                j += 1
            if exact(cs[j]):
                hi = cs[j]
            c1 = _bisect(exact, lo, hi, tol) if (bisect and exact(hi)) else hi
        c1 = float(np.clip(c1, mp.g1, mp.g2))
    mp.c1 = float(c1)
    return mp.c1


def check_crossing(mp: MetastabilityMap, deltas=None) -> Report:
    """Crossing assumption at c1 along a geometric delta sequence."""
    c0, c1 = mp.c0, mp.c1
    if deltas is None:
        deltas = (mp.g_max - mp.g_min) / 8 * 0.5 ** np.arange(8)
    branches = []
    if c0 >= c1 > mp.g_min:
        branches.append(("lower", lambda d: mp.G_minus(c1 - d) > c1 - d))
    if c0 <= c1 < mp.g_max:
        branches.append(("upper", lambda d: mp.G_plus(c1 + d) < c1 + d))
    if not branches:
        rep = Report(True, ["vacuous: no branch guard holds "
                            f"(c0={c0:.6g}, c1={c1:.6g}, g_min={mp.g_min:.6g}, g_max={mp.g_max:.6g})"],
                     dict(vacuous=True))
        mp.crossing = rep
        return rep
    passing, failed = [], set()
    for d in deltas:
        ok = True
        for name, pred in branches:
            if not pred(d):
                ok = False
                failed.add(name)
        if ok:
            passing.append(float(d))
    names = ", ".join(n for n, _ in branches)
    if passing:
        rep = Report(True, [f"branches {names}: smallest passing delta {min(passing):.4g}"],
                     dict(vacuous=False, smallest=min(passing), passing=passing))
    else:
        rep = Report(False, [f"violated branch(es): {', '.join(sorted(failed))} at every delta"],
                     dict(vacuous=False, violated=sorted(failed)))
    mp.crossing = rep
    return rep


def _flag_nonmonotone(mp: MetastabilityMap) -> None:
    if mp.c1 is None or mp.c1 == mp.c0:
        return
    cs, M = mp.M_table()
    lo, hi = sorted((mp.c0, mp.c1))
    sel = (cs >= lo) & (cs <= hi)
    d = np.diff(M[sel])
    noise = 1e-9 * max(1.0, np.abs(M).max())
    if (d > noise).any() and (d < -noise).any():
        mp.notes.append("M is not monotone between c0 and c1; cbar uses the extreme crossing")


def cbar(mp: MetastabilityMap, lam: float) -> float:
    """The staircase level at the logarithmic time scale lam."""
    c0, c1 = mp.c0, mp.c1
    if c1 is None:
        raise ValueError("c1 not computed")
    if lam < mp.M(c0) or c1 == c0:
        return c0
    cs, M = mp.M_table()
    lo, hi = sorted((c0, c1))
    sel = (cs >= lo) & (cs <= hi)
    cs, f = cs[sel], M[sel] - lam
    if c1 > c0:
        for i in range(len(cs)):
            if f[i] == 0:
                return min(c1, cs[i])
            if i + 1 < len(cs) and f[i] * f[i + 1] < 0:
                return min(c1, cs[i] + (cs[i + 1] - cs[i]) * f[i] / (f[i] - f[i + 1]))
        return c1
    for i in range(len(cs) - 1, -1, -1):
        if f[i] == 0:
            return max(c1, cs[i])
        if i > 0 and f[i] * f[i - 1] < 0:
            return max(c1, cs[i - 1] + (cs[i] - cs[i - 1]) * f[i - 1] / (f[i - 1] - f[i]))
    return c1


def jump_set(mp: MetastabilityMap, lams, rho_jump: Optional[float] = None) -> np.ndarray:
    """lambda-grid points whose one-sided cbar differences exceed rho_jump (default 5 dc)."""
    lams = np.sort(np.asarray(lams, float))
    rho = 5 * mp.dc if rho_jump is None else rho_jump
    vals = np.array([cbar(mp, l) for l in lams])
    d = np.abs(np.diff(vals)) > rho
    flag = np.zeros(len(lams), bool)
    flag[:-1] |= d
    flag[1:] |= d
    return lams[flag]


def locate_jumps(mp: MetastabilityMap, lams, rho_jump: Optional[float] = None, tol: float = 1e-6) -> list:
    """Jump positions refined by bisection inside each flagged lambda-cell."""
    lams = np.sort(np.asarray(lams, float))
    rho = 5 * mp.dc if rho_jump is None else rho_jump
    out = []
    vals = [cbar(mp, l) for l in lams]
    for i in range(len(lams) - 1):
        if abs(vals[i + 1] - vals[i]) <= rho:
            continue
        a, b, va, vb = lams[i], lams[i + 1], vals[i], vals[i + 1]
        while b - a > tol:
            m = 0.5 * (a + b)
            vm = cbar(mp, m)
            if abs(vm - va) >= abs(vb - vm):
                b, vb = m, vm
            else:
                a, va = m, vm
        out.append(0.5 * (a + b))
    return out
