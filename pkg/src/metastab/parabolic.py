"""Monotone implicit finite differences for u_t = eps tr[a D^2 u] + b.Du with Dirichlet data.

Diffusion uses second differences (Shortley-Weller near the boundary, with
ghost values of the boundary data at the axis crossings), the drift is upwind,
and 2D cross terms use the 7-point cross stencil.  Every off-diagonal
coefficient is nonnegative, so each implicit Euler step solves an M-matrix
system and the discrete maximum and comparison principles hold.
"""
from __future__ import annotations

import csv
import struct
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, diags, hstack, identity
from scipy.sparse.linalg import splu

from .domain import ON_BOUNDARY, Grid, shrink
from .model import ProblemSpec


class NonMonotoneStencil(ValueError):
    pass


class LinearSolveFailed(RuntimeError):
    pass


class HorizonOverflow(OverflowError):
    pass


SNAP = 1e-3  # nodes closer than SNAP*h to the boundary along an axis take Dirichlet values
SOLVE_RTOL = 1e-10


# ---------------------------------------------------------------- time grid

@dataclass
class TimeGrid:
    """Uniform phase of n0 steps dt0, then t_{k+1} = t_k (1 + gamma) (step capped at dt_max)."""
    T: float
    dt0: float
    n0: int = 200
    gamma: float = 0.05
    dt_max: Optional[float] = None
    targets: tuple = ()
    t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 < self.gamma <= 0.2:
            raise ValueError("gamma must lie in (0, 0.2]")
        if self.dt0 <= 0 or self.T < 0:
            raise ValueError("dt0 must be positive and T nonnegative")
        ts = [0.0]
        while ts[-1] < self.T:
            k = len(ts) - 1
            step = self.dt0 if k < self.n0 else ts[-1] * self.gamma
            if self.dt_max is not None:
                step = min(step, self.dt_max)
            ts.append(ts[-1] + max(step, self.dt0))
        tg = [float(x) for x in self.targets if 0 < x <= ts[-1]]
        t = np.unique(np.concatenate([ts, tg]))
        # drop grid points closer than dt0/100 to an inserted target
        if tg:
            tg = np.array(tg)
            close = np.min(np.abs(t[:, None] - tg[None, :]), axis=1) < 1e-2 * self.dt0
            keep = ~close | np.isin(t, tg) | (t == 0)
            t = t[keep]
        self.t = t

    def __len__(self):
        return len(self.t)


def default_tgrid(grid: Grid, eps: float, lams, dt0: Optional[float] = None, **kw) -> TimeGrid:
    lams = np.atleast_1d(np.asarray(lams, float))
    with np.errstate(over="raise"):
        try:
            targets = np.exp(lams / eps)
        except FloatingPointError as exc:
            raise HorizonOverflow(f"exp(lambda/eps) overflows for lambda={lams.max()}, eps={eps}") from exc
    if not np.all(np.isfinite(targets)):
        raise HorizonOverflow("horizon not finite")
    return TimeGrid(float(targets.max()), grid.h if dt0 is None else dt0, targets=tuple(targets), **kw)


# ---------------------------------------------------------------- stencil geometry

@dataclass(eq=False)
class _Geometry:
    unknown: np.ndarray  # node ids of unknowns
    known_pts: np.ndarray  # (K, n) points carrying Dirichlet values
    known_node: np.ndarray  # (K,) node id for known nodes, -1 for ghost points
    slot: np.ndarray  # (U, 2n) column id: >= 0 unknown index, < 0 -> known index -1-id
    dist: np.ndarray  # (U, 2n) distance to the slot
    diag_slot: Optional[np.ndarray] = None  # (U, 4) for ++, --, +-, -+ in 2D


_GEOM: "weakref.WeakKeyDictionary[Grid, _Geometry]" = weakref.WeakKeyDictionary()


def _crossing(domain, x, step, h):
    """Distance in (0, h] from x to the boundary along the unit vector step."""
    lo = np.zeros(len(x))
    hi = np.full(len(x), h)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        out = domain.signed_distance(x + mid[:, None] * step) > 0
        hi = np.where(out, mid, hi)
        lo = np.where(out, lo, mid)
    return 0.5 * (lo + hi)


def _geometry(grid: Grid) -> _Geometry:
    if grid in _GEOM:
        return _GEOM[grid]
    n, h, N = grid.dim, grid.h, grid.n_nodes
    nb = grid.neighbors
    cand = grid.kind != ON_BOUNDARY
    ghosts = []  # (node, col, point, distance)
    for k in range(n):
        for side, col in ((1.0, 2 * k), (-1.0, 2 * k + 1)):
            miss = np.nonzero(cand & (nb[:, col] < 0))[0]
            if len(miss):
                e = np.zeros(n)
                e[k] = side
                d = _crossing(grid.domain, grid.coords[miss], e, h)
                ghosts.append((miss, col, grid.coords[miss] + d[:, None] * e, d))
    snapped = np.zeros(N, bool)
    for miss, _, _, d in ghosts:
        snapped[miss[d < SNAP * h]] = True
    is_unknown = cand & ~snapped
    unknown = np.nonzero(is_unknown)[0]
    uidx = -np.ones(N, np.int64)
    uidx[unknown] = np.arange(len(unknown))
    known_nodes = np.nonzero(~is_unknown)[0]
    kidx = -np.ones(N, np.int64)
    kidx[known_nodes] = np.arange(len(known_nodes))
    known_pts = [grid.coords[known_nodes]]
    known_node = [known_nodes]
    nk = len(known_nodes)

    def slot_of(j):
        return np.where(uidx[j] >= 0, uidx[j], -1 - kidx[j])

    U = len(unknown)
    slot = np.zeros((U, 2 * n), np.int64)
    dist = np.full((U, 2 * n), h)
    for col in range(2 * n):
        j = nb[unknown, col]
        ok = j >= 0
        slot[ok, col] = slot_of(j[ok])
    for miss, col, pts, d in ghosts:
        keep = is_unknown[miss]
        if not keep.any():
            continue
        rows = uidx[miss[keep]]
        ids = nk + np.arange(keep.sum())
        nk += int(keep.sum())
        known_pts.append(pts[keep])
        known_node.append(-np.ones(keep.sum(), np.int64))
        slot[rows, col] = -1 - ids
        dist[rows, col] = d[keep]
    diag = None
    if n == 2:
        diag = np.zeros((U, 4), np.int64)
        for c, off in enumerate(((1, 1), (-1, -1), (1, -1), (-1, 1))):
            j = grid.node_at(np.array(off))[unknown]
            ok = j >= 0
            diag[ok, c] = slot_of(j[ok])
            if (~ok).any():
                p = grid.domain.project(grid.coords[unknown[~ok]] + h * np.array(off, float))
                ids = nk + np.arange((~ok).sum())
                nk += int((~ok).sum())
                known_pts.append(p)
                known_node.append(-np.ones(len(p), np.int64))
                diag[~ok, c] = -1 - ids
    geo = _Geometry(unknown, np.concatenate(known_pts), np.concatenate(known_node), slot, dist, diag)
    _GEOM[grid] = geo
    return geo


# ---------------------------------------------------------------- operator

def assemble(grid: Grid, a: np.ndarray, b: np.ndarray, eps: float):
    """Discrete operator L u = eps tr[a D^2 u] + b.Du at the unknowns.

    ``a`` (U, n, n) and ``b`` (U, n) are evaluated at the unknown nodes.
    Returns (L_uu, L_uk): columns index unknowns and known values respectively.
    """
    geo = _geometry(grid)
    n, h = grid.dim, grid.h
    U = len(geo.unknown)
    K = len(geo.known_pts)
    rows, cols, vals = [], [], []
    r = np.arange(U)
    cross = np.zeros(U)
    if n == 2:
        cross = a[:, 0, 1]
        if np.any(np.abs(cross) > np.minimum(a[:, 0, 0], a[:, 1, 1]) * (1 + 1e-12)):
            i = int(np.argmax(np.abs(cross) - np.minimum(a[:, 0, 0], a[:, 1, 1])))
            raise NonMonotoneStencil(f"|a12| > min(a11, a22) at {grid.coords[geo.unknown[i]].tolist()}")
    for k in range(n):
        dp, dm = geo.dist[:, 2 * k], geo.dist[:, 2 * k + 1]
        akk = a[:, k, k] - (np.abs(cross) if n == 2 else 0.0)
        bk = b[:, k]
        cp = eps * 2 * akk / (dp * (dp + dm)) + np.maximum(bk, 0) / dp
        cm = eps * 2 * akk / (dm * (dp + dm)) + np.maximum(-bk, 0) / dm
        rows += [r, r]
        cols += [geo.slot[:, 2 * k], geo.slot[:, 2 * k + 1]]
        vals += [cp, cm]
    if n == 2 and np.any(cross != 0):
        pos = np.maximum(cross, 0) * eps / h ** 2
        neg = np.maximum(-cross, 0) * eps / h ** 2
        for c, w in ((0, pos), (1, pos), (2, neg), (3, neg)):
            rows.append(r)
            cols.append(geo.diag_slot[:, c])
            vals.append(w)
        # the 7-point stencil puts -|a12|/h^2 on the axis neighbours (already
        # subtracted from a_kk above) and +2|a12|/h^2 on the centre; the
        # centre term is recovered below from the zero row sum
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    off = coo_matrix((vals, (rows, np.where(cols >= 0, cols, U + (-1 - cols)))), shape=(U, U + K)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    full = off + coo_matrix((diag, (r, r)), shape=(U, U + K))
    full = full.tocsc()
    return full[:, :U].tocsr(), full[:, U:].tocsr()


def _flux(off: csr_matrix, rows: np.ndarray, vu: np.ndarray, vk: np.ndarray) -> np.ndarray:
    """(L v)_i as sum_j c_ij (v_j - v_i); no large terms cancel."""
    vals = np.concatenate([vu, vk])
    return np.bincount(rows, weights=off.data * (vals[off.indices] - vu[rows]), minlength=len(vu))


def _solve_increment(Luu, Luk, uu, gk, dt, sweeps: int = 3):
    """Increment d with (I - dt Luu) d = dt (Luu uu + Luk gk), refined with flux-form residuals.

    The residual never forms 1 + dt*diag explicitly, so roundoff stays relative
    to the increment even when dt*|L| is ~1e10.
    """
    U = len(uu)
    offu = (Luu - diags(Luu.diagonal())).tocsr()
    off = hstack([offu, Luk]).tocsr()
    off.eliminate_zeros()
    rows = np.repeat(np.arange(U), np.diff(off.indptr))
    rhs = dt * _flux(off, rows, uu, gk)
    A = (identity(U, format="csc") - dt * Luu).tocsc()
    lu = splu(A)
    d = lu.solve(rhs)
    zk = np.zeros(Luk.shape[1])
    for _ in range(sweeps):
        res = rhs - (d - dt * _flux(off, rows, d, zk))
        d += lu.solve(res)
    res = np.abs(rhs - (d - dt * _flux(off, rows, d, zk))).max()
    scale = np.abs(rhs).max() + np.abs(d).max() * (1.0 + dt * np.abs(Luu.diagonal()).max())
    if not np.all(np.isfinite(d)) or res > SOLVE_RTOL * max(scale, 1e-300):
        raise LinearSolveFailed(f"relative residual {res / max(scale, 1e-300):.3g}")
    return d


class Stepper:
    """Implicit Euler stepper for one grid and problem.

    frozen_a: optional callable (x, t) -> (N, n, n); when given the equation is
    linear, otherwise a(x, u) is lagged at the current field.
    boundary: optional callable (x, t) -> (N,) overriding g for Dirichlet data.
    """

    def __init__(self, spec: ProblemSpec, grid: Grid, eps: float, frozen_a: Optional[Callable] = None,
                 boundary: Optional[Callable] = None, picard: int = 0, picard_tol: float = 1e-8):
        self.spec, self.grid, self.eps = spec, grid, float(eps)
        self.frozen_a, self.boundary = frozen_a, boundary
        self.picard, self.picard_tol = picard, picard_tol
        self.geo = _geometry(grid)
        self.xu = grid.coords[self.geo.unknown]
        self.bu = spec.drift(self.xu)
        self._lin_cache = None

    def known_values(self, t: float) -> np.ndarray:
        if self.boundary is not None:
            return np.asarray(self.boundary(self.geo.known_pts, t), float).reshape(-1)
        return self.spec.boundary(self.geo.known_pts)

    def _operator(self, u_unknown, t):
        if self.frozen_a is not None:
            if self._lin_cache is not None and self._lin_cache[0] == "static":
                return self._lin_cache[1]
            a = np.asarray(self.frozen_a(self.xu, t), float)
            ops = assemble(self.grid, a, self.bu, self.eps)
            if getattr(self.frozen_a, "static", False):
                self._lin_cache = ("static", ops)
            return ops
        a = self.spec.diffusion(self.xu, u_unknown)
        return assemble(self.grid, a, self.bu, self.eps)

    def step(self, u: np.ndarray, t: float, dt: float) -> np.ndarray:
        """Advance the full nodal field u from t to t + dt."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        geo = self.geo
        uu = u[geo.unknown]
        gk = self.known_values(t + dt)
        lag = uu
        for it in range(self.picard + 1):
            Luu, Luk = self._operator(lag, t + dt)
            new = uu + _solve_increment(Luu, Luk, uu, gk, dt)
            if self.frozen_a is not None or np.abs(new - lag).max() < self.picard_tol:
                break
            lag = new
        out = np.empty_like(u)
        out[geo.unknown] = new
        kn = geo.known_node >= 0
        out[geo.known_node[kn]] = gk[kn]
        return out


def frozen_level(spec: ProblemSpec, c: float) -> Callable:
    """Time-independent a(x, c) in the form expected by Stepper."""
    f = lambda x, t: spec.diffusion(x, c)
    f.static = True
    return f


def step(spec: ProblemSpec, grid: Grid, u: np.ndarray, eps: float, dt: float,
         frozen_a: Optional[Callable] = None, t: float = 0.0, picard: int = 0) -> np.ndarray:
    """One implicit Euler step (see Stepper)."""
    return Stepper(spec, grid, eps, frozen_a, picard=picard).step(u, t, dt)


# ---------------------------------------------------------------- evolution

@dataclass(eq=False)
class EvolutionTrace:
    eps: float
    grid: Grid
    times: np.ndarray
    origin: np.ndarray
    umin: np.ndarray
    umax: np.ndarray
    snapshots: dict = field(default_factory=dict)
    spread: Optional[np.ndarray] = None
    spread_delta: Optional[float] = None
    config: dict = field(default_factory=dict)

    def bounded(self, lo: float, hi: float, tol: float = 1e-9) -> bool:
        return bool(self.umin.min() >= lo - tol and self.umax.max() <= hi + tol)

    def snapshot(self, t: float) -> np.ndarray:
        key = min(self.snapshots, key=lambda s: abs(s - t))
        if abs(key - t) > 1e-9 * max(1.0, t):
            raise KeyError(f"no snapshot at t={t}")
        return self.snapshots[key]

    def at_origin(self, t: float) -> float:
        i = int(np.argmin(np.abs(self.times - t)))
        return float(self.origin[i])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# eps", repr(self.eps)] + [f"{k}={v}" for k, v in self.config.items()])
            w.writerow(["t", "u0", "umin", "umax", "s"])
            s = self.spread if self.spread is not None else np.full(len(self.times), np.nan)
            for row in zip(self.times, self.origin, self.umin, self.umax, s):
                w.writerow([repr(float(v)) for v in row])

    def snapshot_csv(self, path, t: float) -> None:
        u = self.snapshot(t)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(self.grid.dim)] + ["u"])
            for x, v in zip(self.grid.coords, u):
                w.writerow([*map(repr, x), repr(v)])


def evolve(spec: ProblemSpec, grid: Grid, eps: float, lam_max: Optional[float] = None,
           tgrid: Optional[TimeGrid] = None, frozen_a: Optional[Callable] = None, *,
           lams=None, u0: Optional[np.ndarray] = None, boundary: Optional[Callable] = None,
           picard: int = 0, delta: Optional[float] = None, snapshot_times=(),
           checkpoint: Optional[str] = None, checkpoint_every: int = 100,
           resume: Optional[str] = None, callback: Optional[Callable] = None) -> EvolutionTrace:
    """Integrate from u(., 0) = g (or u0) to exp(lam_max / eps).

    Snapshots are kept at every exp(lam / eps) for lam in ``lams`` and at
    ``snapshot_times``.  With ``delta`` the spread max_{Omega_delta}|u - u(0)|
    is recorded at every step.  ``callback(t, u)`` sees every accepted step.
    """
    lams = [] if lams is None else list(np.atleast_1d(lams))
    if lam_max is None:
        lam_max = max(lams) if lams else None
    targets = list(snapshot_times)
    if lam_max is not None:
        tg = default_tgrid(grid, eps, lams + [lam_max])
        targets += list(np.exp(np.asarray(lams + [lam_max]) / eps))
        if tgrid is None:
            tgrid = tg
    if tgrid is None:
        raise ValueError("need lam_max or a TimeGrid")
    if targets:
        tgrid = TimeGrid(tgrid.T, tgrid.dt0, tgrid.n0, tgrid.gamma, tgrid.dt_max,
                         tuple(sorted(set(tgrid.targets) | set(targets))))
    stepper = Stepper(spec, grid, eps, frozen_a, boundary, picard)
    ts = tgrid.t
    u = (spec.boundary(grid.coords) if u0 is None else np.asarray(u0, float)).copy()
    k0 = 0
    if resume is not None:
        t_r, u_r = load_checkpoint(resume, grid.n_nodes)
        k0 = int(np.argmin(np.abs(ts - t_r)))
        u = u_r
    mask = None
    if delta is not None:
        sub = shrink(grid, delta)
        mask = sub
    keep = set(float(x) for x in tgrid.targets)
    n_t = len(ts)
    origin = np.empty(n_t)
    umin = np.empty(n_t)
    umax = np.empty(n_t)
    spread = np.full(n_t, np.nan) if mask is not None else None
    snaps = {}

    def record(k, u):
        origin[k] = u[grid.origin]
        umin[k], umax[k] = u.min(), u.max()
        if mask is not None and len(mask):
            spread[k] = np.abs(u[mask] - u[grid.origin]).max()
        if float(ts[k]) in keep or k == 0:
            snaps[float(ts[k])] = u.copy()

    for k in range(k0):
        origin[k] = umin[k] = umax[k] = np.nan
    record(k0, u)
    for k in range(k0, n_t - 1):
        u = stepper.step(u, ts[k], ts[k + 1] - ts[k])
        record(k + 1, u)
        if callback is not None:
            callback(ts[k + 1], u)
        if checkpoint is not None and (k + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint, ts[k + 1], u)
    return EvolutionTrace(float(eps), grid, ts.copy(), origin, umin, umax, snaps, spread, delta,
                          dict(h=grid.h, dt0=tgrid.dt0, n0=tgrid.n0, gamma=tgrid.gamma, picard=picard,
                               linear=frozen_a is not None))


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"MSTBCKPT"
_VERSION = 1


def save_checkpoint(path, t: float, u: np.ndarray) -> None:
    """Binary file: magic, version, node count, time, then float64 values."""
    u = np.ascontiguousarray(u, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<IQd", _VERSION, len(u), float(t)))
        fh.write(u.tobytes())


def load_checkpoint(path, n_nodes: Optional[int] = None) -> tuple[float, np.ndarray]:
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC) + struct.calcsize("<IQd"))
        if head[:len(_MAGIC)] != _MAGIC:
            raise ValueError("not a checkpoint file")
        ver, n, t = struct.unpack("<IQd", head[len(_MAGIC):])
        if ver != _VERSION:
            raise ValueError(f"unsupported checkpoint version {ver}")
        if n_nodes is not None and n != n_nodes:
            raise ValueError(f"checkpoint has {n} nodes, grid has {n_nodes}")
        u = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
    return t, u


# ---------------------------------------------------------------- Pucci and residuals

def pucci_plus(X, theta0: float):
    """sup{tr[AX] : theta0 I <= A <= theta0^-1 I}; vectorized over leading axes."""
    X = np.asarray(X, float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    ev = np.linalg.eigvalsh(X)
    out = np.where(ev > 0, ev / theta0, ev * theta0).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ResidualReport:
    points: np.ndarray
    times: np.ndarray
    residual: np.ndarray  # w_t - eps D(w) - b.Dw
    scale: np.ndarray  # |w_t| + eps|D(w)| + |b.Dw|
    kind: str  # "super" or "sub"
    tol_abs: float
    tol_rel: float

    @property
    def margin(self) -> np.ndarray:
        """Signed slack: >= 0 where the inequality holds exactly."""
        return self.residual if self.kind == "super" else -self.residual

    @property
    def allowed(self) -> np.ndarray:
        return self.tol_abs + self.tol_rel * self.scale

    @property
    def passed(self) -> bool:
        return bool(np.all(self.margin >= -self.allowed))

    @property
    def worst(self) -> int:
        return int(np.argmin(self.margin + self.allowed))

    def line(self, name: str = "residual") -> str:
        i = self.worst
        st = "PASS" if self.passed else "FAIL"
        return (f"{st} {name} ({self.kind}solution): min margin {self.margin.min():.3g} "
                f"at x={np.round(self.points[i], 6).tolist()}, t={self.times[i]:.6g}")

    def to_csv(self, path) -> None:
        ok = self.margin >= -self.allowed
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(self.points.shape[1])] + ["t", "residual", "bound", "pass"])
            for x, t, r, b, p in zip(self.points, self.times, self.residual, self.allowed, ok):
                w.writerow([*map(repr, x), repr(t), repr(r), repr(-b if self.kind == "super" else b), int(p)])


def fd_derivatives(w: Callable, x: np.ndarray, t: np.ndarray, hx: float, ht: float):
    """Centred differences: w_t (one-sided at t < ht), gradient and Hessian."""
    x = np.atleast_2d(np.asarray(x, float))
    t = np.broadcast_to(np.asarray(t, float), (len(x),))
    n = x.shape[1]
    w0 = w(x, t)
    tp = t + ht
    tm = np.maximum(t - ht, 0.0)
    wt = (w(x, tp) - w(x, tm)) / (tp - tm)
    grad = np.zeros((len(x), n))
    hess = np.zeros((len(x), n, n))
    E = np.eye(n) * hx
    for i in range(n):
        fp, fm = w(x + E[i], t), w(x - E[i], t)
        grad[:, i] = (fp - fm) / (2 * hx)
        hess[:, i, i] = (fp - 2 * w0 + fm) / hx ** 2
        for j in range(i + 1, n):
            v = (w(x + E[i] + E[j], t) - w(x + E[i] - E[j], t)
                 - w(x - E[i] + E[j], t) + w(x - E[i] - E[j], t)) / (4 * hx ** 2)
            hess[:, i, j] = hess[:, j, i] = v
    return w0, wt, grad, hess


def residual(op, w, eps: float, points, times=None, *, drift: Optional[Callable] = None,
             kind: str = "super", hx: float = 1e-4, ht: Optional[float] = None,
             derivatives: Optional[Callable] = None, tol_abs: float = 1e-6,
             tol_rel: float = 0.0) -> ResidualReport:
    """Residual r = w_t - eps D(w) - b.Dw at samples.

    op: ``("pucci", theta0)`` for D = P+(D^2 .), or a callable a(x, t) -> (N, n, n)
    for D = tr[a D^2 .].  w: callable w(x, t) (x of shape (N, n)), or an
    EvolutionTrace, in which case ``points`` are ignored and the residual is
    formed from consecutive snapshots on the grid.  ``derivatives(x, t)`` may
    supply exact (w, w_t, Dw, D^2 w).
    """
    if isinstance(w, EvolutionTrace):
        return _trace_residual(op, w, eps, drift, kind, tol_abs, tol_rel)
    x = np.atleast_2d(np.asarray(points, float))
    t = np.zeros(len(x)) if times is None else np.broadcast_to(np.asarray(times, float), (len(x),)).copy()
    if derivatives is not None:
        _, wt, grad, hess = derivatives(x, t)
    else:
        _, wt, grad, hess = fd_derivatives(w, x, t, hx, hx if ht is None else ht)
    return _report(op, x, t, wt, grad, hess, eps, drift, kind, tol_abs, tol_rel)


def _report(op, x, t, wt, grad, hess, eps, drift, kind, tol_abs, tol_rel):
    if isinstance(op, tuple) and op[0] == "pucci":
        D = np.atleast_1d(pucci_plus(hess, op[1]))
    else:
        D = np.einsum("nij,nij->n", np.asarray(op(x, t), float), hess)
    bd = np.zeros(len(x)) if drift is None else np.einsum("ni,ni->n", drift(x), grad)
    r = wt - eps * D - bd
    scale = np.abs(wt) + eps * np.abs(D) + np.abs(bd)
    return ResidualReport(x, t, r, scale, kind, tol_abs, tol_rel)


def _trace_residual(op, tr: EvolutionTrace, eps, drift, kind, tol_abs, tol_rel):
    """Residual of consecutive snapshots at interior nodes with all axis neighbours."""
    g = tr.grid
    ts = sorted(tr.snapshots)
    nb = g.neighbors
    inner = np.nonzero(np.all(nb >= 0, axis=1) & (g.kind != ON_BOUNDARY))[0]
    if g.dim == 2:
        dd = [g.node_at(np.array(o)) for o in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
        inner = inner[np.all(np.stack([d[inner] for d in dd]) >= 0, axis=0)]
    pts, tt, wts, grads, hesss = [], [], [], [], []
    h = g.h
    for t0, t1 in zip(ts[:-1], ts[1:]):
        u0, u1 = tr.snapshots[t0], tr.snapshots[t1]
        wt = (u1[inner] - u0[inner]) / (t1 - t0)
        grad = np.zeros((len(inner), g.dim))
        hess = np.zeros((len(inner), g.dim, g.dim))
        for k in range(g.dim):
            p, m = nb[inner, 2 * k], nb[inner, 2 * k + 1]
            grad[:, k] = (u1[p] - u1[m]) / (2 * h)
            hess[:, k, k] = (u1[p] - 2 * u1[inner] + u1[m]) / h ** 2
        if g.dim == 2:
            pp, pm, mp, mm = (d[inner] for d in dd)
            hess[:, 0, 1] = hess[:, 1, 0] = (u1[pp] - u1[pm] - u1[mp] + u1[mm]) / (4 * h ** 2)
        pts.append(g.coords[inner])
        tt.append(np.full(len(inner), t1))
        wts.append(wt)
        grads.append(grad)
        hesss.append(hess)
    x = np.concatenate(pts)
    t = np.concatenate(tt)
    return _report(op, x, t, np.concatenate(wts), np.concatenate(grads), np.concatenate(hesss),
                   eps, drift, kind, tol_abs, tol_rel)


@dataclass
class Constancy:
    times: np.ndarray
    spread: np.ndarray
    delta: float
    t_first: Optional[float]  # first time the spread falls below the threshold
    t_settle: Optional[float]  # first time after which it stays below the threshold


def constancy_metric(trace: EvolutionTrace, delta: float, threshold: Optional[float] = None) -> Constancy:
    """s(t) = max_{Omega_delta} |u(x, t) - u(0, t)| and the times it drops below ``threshold``.

    The threshold defaults to delta.
    """
    thr = delta if threshold is None else threshold
    if trace.spread is not None and trace.spread_delta == delta:
        times, s = trace.times, trace.spread
    else:
        mask = shrink(trace.grid, delta)
        times = np.array(sorted(trace.snapshots))
        o = trace.grid.origin
        s = np.array([np.abs(trace.snapshots[t][mask] - trace.snapshots[t][o]).max() if len(mask) else 0.0
                      for t in times])
    below = s < thr
    t_first = float(times[np.argmax(below)]) if below.any() else None
    t_settle = None
    if below[-1]:
        last_bad = np.nonzero(~below)[0]
        t_settle = float(times[last_bad[-1] + 1]) if len(last_bad) else float(times[0])
    return Constancy(times, s, delta, t_first, t_settle)
