"""Quasi-potentials of quadratic Hamiltonians H(x,p) = alpha(x)p.p + b(x).p.

Two independent solvers compute the maximal subsolution of H(x, DV) = 0 with
V(0) = 0 on a state-constrained grid:

* ``solve_dijkstra``: shortest paths over grid edges whose cost is the exact
  minimum over traversal time of the action with coefficients frozen at the
  edge midpoint;
* ``solve_sweeping``: Gauss-Seidel fast sweeping with a local Lax-Friedrichs
  numerical Hamiltonian and one-sided differences at boundary-layer nodes.
"""
from __future__ import annotations

import csv
import hashlib
import weakref
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .domain import Grid, DomainSpec, ON_BOUNDARY
from .model import ProblemSpec

TINY = np.finfo(float).tiny


class OutsideDomain(ValueError):
    pass


class DeltaTooLarge(ValueError):
    pass


class NotConverged(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class FrozenHamiltonian:
    """H(x, p) = alpha(x)p.p + b(x).p with ``theta I <= alpha <= I / theta``."""

    alpha: Callable
    b: Callable
    theta: float
    domain: Optional[DomainSpec] = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __call__(self, x, p):
        x = np.atleast_2d(x)
        p = np.atleast_2d(p)
        return np.einsum("ni,nij,nj->n", p, self.alpha(x), p) + np.einsum("ni,ni->n", self.b(x), p)


def frozen_at_level(spec: ProblemSpec, c: float) -> FrozenHamiltonian:
    return FrozenHamiltonian(spec.diffusion.frozen(c), spec.drift, spec.diffusion.theta0,
                             spec.domain, label=f"c={c:.6g}")


# ---------------------------------------------------------------- edge costs

def _costs(A, v, bm, running=0.0):
    """Vectorized minimal action over traversal time, A = alpha(m)^{-1}."""
    vAv = np.einsum("ni,nij,nj->n", v, A, v)
    bAb = np.einsum("ni,nij,nj->n", bm, A, bm)
    vAb = np.einsum("ni,nij,nj->n", v, A, bm)
    return 0.5 * (np.sqrt(np.maximum(vAv * (bAb + 4.0 * running), 0.0)) - vAb), vAv


def edge_cost(ham: FrozenHamiltonian, x, y) -> float:
    """Minimal action to move from x to y with coefficients frozen at the midpoint."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    y = np.asarray(y, dtype=float).reshape(1, -1)
    m = 0.5 * (x + y)
    if ham.domain is not None and ham.domain.signed_distance(m)[0] > 1e-12:
        raise OutsideDomain(f"midpoint {m[0]} outside the domain")
    A = np.linalg.inv(ham.alpha(m))
    bm = ham.b(m)
    cost, vAv = _costs(A, y - x, bm)
    if np.all(bm == 0) and np.linalg.norm(m) > 0:
        kappa = max(np.linalg.norm(ham.b(x)), np.linalg.norm(ham.b(y)))
        return float(0.25 * np.sqrt(vAv[0]) * kappa)
    return float(max(cost[0], 0.0))


def stencil_offsets(dim: int, k: int) -> np.ndarray:
    if k not in (1, 2):
        raise ValueError("stencil order must be 1 or 2")
    if dim == 1:
        base = [(1,)]
    elif k == 1:
        base = [(1, 0), (0, 1)]
    else:
        base = [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (1, 2), (2, -1), (1, -2)]
    base = np.array(base, dtype=np.int64)
    return np.concatenate([base, -base])


_EDGES: "weakref.WeakKeyDictionary[Grid, dict]" = weakref.WeakKeyDictionary()


def _edges(grid: Grid, stencil: int):
    """Directed edges (i, j) of the stencil graph and their midpoints (cached per grid)."""
    per = _EDGES.setdefault(grid, {})
    if stencil not in per:
        I, J = [], []
        for off in stencil_offsets(grid.dim, stencil):
            j = grid.node_at(off)
            i = np.nonzero(j >= 0)[0]
            j = j[i]
            if np.abs(off).sum() > 1:
                m = 0.5 * (grid.coords[i] + grid.coords[j])
                inside = grid.domain.signed_distance(m) <= 1e-9 * grid.h
                i, j = i[inside], j[inside]
            I.append(i)
            J.append(j)
        I, J = np.concatenate(I), np.concatenate(J)
        per[stencil] = (I, J, 0.5 * (grid.coords[I] + grid.coords[J]))
    return per[stencil]


def _graph(ham: FrozenHamiltonian, grid: Grid, stencil: int, running: float = 0.0, alpha=None):
    """Sparse matrix of edge costs i -> j and the alpha samples at the midpoints."""
    i, j, m = _edges(grid, stencil)
    x, y = grid.coords[i], grid.coords[j]
    al = ham.alpha(m) if alpha is None else alpha
    bm = ham.b(m)
    cost, vAv = _costs(np.linalg.inv(al), y - x, bm, running)
    dead = np.all(bm == 0, axis=1) & (np.linalg.norm(m, axis=1) > 0)
    n_fallback = int(dead.sum())
    if n_fallback:
        kap = np.maximum(np.linalg.norm(ham.b(x[dead]), axis=1), np.linalg.norm(ham.b(y[dead]), axis=1))
        cost[dead] = 0.25 * np.sqrt(vAv[dead]) * kap
    n = grid.n_nodes
    G = csr_matrix((np.maximum(cost, TINY), (i, j)), shape=(n, n))
    return G, al, n_fallback


# ---------------------------------------------------------------- potential field

@dataclass(eq=False)
class PotentialField:
    grid: Grid
    values: np.ndarray
    boundary: np.ndarray  # values at grid.samples
    method: str
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> float:
        return float(np.min(self.boundary))

    def lipschitz_bound(self, ham: FrozenHamiltonian) -> float:
        return float(np.linalg.norm(ham.b(self.grid.coords), axis=1).max() / ham.theta)

    def to_csv(self, path) -> None:
        g = self.grid
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# method", self.method] + [f"{k}={v}" for k, v in self.meta.items()])
            w.writerow(["kind"] + [f"x{k}" for k in range(g.dim)] + ["V"])
            for i in range(g.n_nodes):
                w.writerow(["node", *map(repr, g.coords[i]), repr(self.values[i])])
            for s in range(len(g.samples)):
                w.writerow(["boundary", *map(repr, g.samples[s]), repr(self.boundary[s])])


def boundary_values(grid: Grid, V: np.ndarray) -> np.ndarray:
    """Values at boundary samples by linear extrapolation along the inward normal.

    Samples that are grid nodes take the node value.  Otherwise the value at the
    boundary-layer node p is extended with the slope between p and the point
    p - t nu (t = h, then 2h if interpolation there needs a missing node).
    """
    out = np.empty(len(grid.samples))
    for s, (x, nu, i) in enumerate(zip(grid.samples, grid.normals, grid.sample_node)):
        if grid.kind[i] == ON_BOUNDARY:
            out[s] = V[i]
            continue
        p = grid.coords[i]
        d = float(np.linalg.norm(x - p))
        val = V[i]
        for t in (grid.h, 2 * grid.h, 3 * grid.h):
            q = grid.interpolate(V, p - t * nu)[0]
            if np.isfinite(q):
                val = V[i] + (V[i] - q) * d / t
                break
        out[s] = val
    return out


# ---------------------------------------------------------------- Dijkstra

def _alpha_key(alpha_samples: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(alpha_samples).tobytes()).hexdigest()


def solve_dijkstra(ham: FrozenHamiltonian, grid: Grid, stencil: int = 2,
                   cache: Optional[dict] = None) -> PotentialField:
    """Shortest-path quasi-potential from the origin node.

    ``cache`` (optional dict) reuses results when the sampled coefficients on
    all edges are bitwise identical, e.g. for level-independent diffusions.
    """
    mids = ham.alpha(_edges(grid, stencil)[2])
    key = None
    if cache is not None:
        key = (id(grid), stencil, _alpha_key(mids), _alpha_key(ham.b(grid.coords)))
        if key in cache:
            return cache[key]
    G, _, n_fb = _graph(ham, grid, stencil, alpha=mids)
    V = dijkstra(G, directed=True, indices=grid.origin)
    unreachable = ~np.isfinite(V)
    if unreachable.any():
        warnings.warn(f"{int(unreachable.sum())} nodes unreachable under stencil {stencil}", stacklevel=2)
    pf = PotentialField(grid, V, boundary_values(grid, V), "dijkstra",
                        dict(stencil=stencil, edges=G.nnz, unreachable=int(unreachable.sum()),
                             fallback_edges=n_fb))
    if cache is not None:
        cache[key] = pf
    return pf


def exit_cost(ham: FrozenHamiltonian, grid: Grid, targets, stencil: int = 2,
              running: float = 0.0) -> np.ndarray:
    """Minimal action (plus ``running`` per unit time) from each node to the target nodes."""
    G, _, _ = _graph(ham, grid, stencil, running)
    return dijkstra(G.T.tocsr(), directed=True, indices=np.atleast_1d(targets), min_only=True)


# ---------------------------------------------------------------- fast sweeping

@dataclass
class SweepConfig:
    tol: float = 1e-8
    max_sweeps: int = 5000
    viscosity: str = "local"  # "local" or "global"
    margin: float = 1.25  # widening of the gradient box around {H = 0}


@numba.njit(cache=True)
def _local_solve(u, i, nbr, alpha, b, h, lo, hi, sig, ndim):
    # F(u_i) = A u^2 + B u + C with p_k = lin_k * u_i + off_k
    lin = np.zeros(ndim)
    off = np.zeros(ndim)
    visc_c = 0.0
    visc_u = 0.0
    for k in range(ndim):
        jp = nbr[i, 2 * k]
        jm = nbr[i, 2 * k + 1]
        if jp >= 0 and jm >= 0:
            p = (u[jp] - u[jm]) / (2 * h)
            if p > hi[i, k]:
                p = hi[i, k]
            if p < lo[i, k]:
                p = lo[i, k]
            off[k] = p
            visc_u += sig[i, k] / h
            visc_c -= sig[i, k] * (u[jp] + u[jm]) / (2 * h)
        elif jm >= 0:
            lin[k] = 1.0 / h
            off[k] = -u[jm] / h
        elif jp >= 0:
            lin[k] = -1.0 / h
            off[k] = u[jp] / h
    A = 0.0
    B = visc_u
    C = visc_c
    for k in range(ndim):
        B += b[i, k] * lin[k]
        C += b[i, k] * off[k]
        for l in range(ndim):
            a = alpha[i, k, l]
            A += a * lin[k] * lin[l]
            B += a * (lin[k] * off[l] + off[k] * lin[l])
            C += a * off[k] * off[l]
    if A == 0.0:
        return -C / B
    disc = B * B - 4 * A * C
    if disc < 0:
        return -B / (2 * A)
    return (-B + np.sqrt(disc)) / (2 * A)


@numba.njit(cache=True)
def _sweep(u, nbr, orders, pinned, alpha, b, h, lo, hi, sig, tol, max_sweeps):
    n = nbr.shape[0]
    ndim = nbr.shape[1] // 2
    dmax = np.inf
    for it in range(max_sweeps):
        dmax = 0.0
        for o in range(orders.shape[0]):
            for q in range(n):
                i = orders[o, q]
                if pinned[i]:
                    continue
                new = _local_solve(u, i, nbr, alpha, b, h, lo, hi, sig, ndim)
                d = abs(new - u[i])
                if d > dmax:
                    dmax = d
                u[i] = new
        if dmax < tol:
            return it + 1, dmax
    return max_sweeps, dmax


def _sweep_coefficients(ham, grid, cfg):
    x = grid.coords
    alpha = ham.alpha(x)
    b = ham.b(x)
    ainv = np.linalg.inv(alpha)
    # every gradient with H = 0 lies on the ellipsoid centred at c with A-radius rho
    c = -0.5 * np.einsum("nij,nj->ni", ainv, b)
    rho = 0.5 * np.sqrt(np.maximum(np.einsum("ni,nij,nj->n", b, ainv, b), 0.0))
    w = cfg.margin * rho[:, None] * np.sqrt(np.einsum("nii->ni", ainv)) + grid.h
    if cfg.viscosity == "global":
        w = np.full_like(w, (np.abs(c) + w).max())
        c = np.zeros_like(c)
    elif cfg.viscosity != "local":
        raise ValueError(cfg.viscosity)
    lo, hi = c - w, c + w
    # bound of |dH/dp_k| = |2 (alpha p)_k + b_k| over the box
    sig = 2 * np.einsum("nkl,nl->nk", np.abs(alpha), w) + np.abs(2 * np.einsum("nkl,nl->nk", alpha, c) + b)
    return alpha, b, lo, hi, sig


def _orders(grid):
    """The 2^n lexicographic node orderings."""
    out = []
    for o in range(2 ** grid.dim):
        keys = [grid.ijk[:, k] if (o >> k) & 1 == 0 else -grid.ijk[:, k] for k in range(grid.dim)]
        out.append(np.lexsort(keys[::-1]))
    return np.array(out, dtype=np.int64)


def solve_sweeping(ham: FrozenHamiltonian, grid: Grid, cfg: Optional[SweepConfig] = None,
                   init: Optional[np.ndarray] = None) -> PotentialField:
    """Fast sweeping for the maximal subsolution with V(origin) = 0.

    Central differences are clipped to a box around the ellipsoid {H(x, .) = 0},
    which contains every exact gradient, and the viscosity covers |dH/dp| on
    that box, so each local update is monotone.  Nodes missing a neighbour
    use one-sided differences toward the interior and take the larger root of
    the local quadratic.  The iteration starts from the nearest-neighbour
    graph solution unless ``init`` is given.
    """
    cfg = cfg or SweepConfig()
    alpha, b, lo, hi, sig = _sweep_coefficients(ham, grid, cfg)
    if init is None:
        u = solve_dijkstra(ham, grid, stencil=1).values.copy()
    else:
        u = np.array(init, dtype=float)
    u[~np.isfinite(u)] = 1e6
    u[grid.origin] = 0.0
    pinned = np.zeros(grid.n_nodes, dtype=np.bool_)
    pinned[grid.origin] = True
    sweeps, last = _sweep(u, grid.neighbors, _orders(grid), pinned, alpha, b, grid.h, lo, hi, sig,
                          cfg.tol, cfg.max_sweeps)
    converged = bool(last < cfg.tol)
    if not converged:
        warnings.warn(f"sweeping stopped after {sweeps} sweeps, last update {last:.3g}", NotConverged,
                      stacklevel=2)
    return PotentialField(grid, u, boundary_values(grid, u), "sweeping",
                          dict(sweeps=int(sweeps), last_update=float(last), converged=converged,
                               viscosity=cfg.viscosity))


# ---------------------------------------------------------------- perturbations

def theta_delta(spec: ProblemSpec, beta0: float, delta: float, x: np.ndarray, n_c: int = 41) -> float:
    """max over sampled x and c in [beta0 - delta, beta0 + delta] of |a(x,c) - a(x,beta0)|."""
    a0 = spec.diffusion(x, beta0)
    worst = 0.0
    for c in np.linspace(beta0 - delta, beta0 + delta, n_c):
        d = spec.diffusion(x, c) - a0
        worst = max(worst, float(np.abs(np.linalg.eigvalsh(d)).max()))
    return worst


def cutoff(domain: DomainSpec, delta: float) -> Callable:
    """Piecewise-linear cutoff: 1 at depth >= delta, 0 at depth <= delta / 2."""
    def chi(x):
        depth = -domain.signed_distance(x)
        return np.clip((depth - 0.5 * delta) / (0.5 * delta), 0.0, 1.0)
    return chi


def perturbed_family(spec: ProblemSpec, beta0: float, delta: float, grid: Grid):
    """Blended Hamiltonians (H_plus, H_minus) around the level ``beta0``.

    alpha_pm = chi a_pm + (1 - chi) theta0^{-+1} I with a_pm = a(., beta0) +- theta(delta) I.
    """
    th0 = spec.diffusion.theta0
    th = theta_delta(spec, beta0, delta, np.vstack([grid.coords, grid.samples]))
    if th > th0 / 2:
        raise DeltaTooLarge(f"theta(delta)={th:.4g} exceeds theta0/2={th0 / 2:.4g}")
    chi = cutoff(spec.domain, delta)
    n = spec.dim

    def make(sign):
        far = (1.0 / th0) if sign > 0 else th0

        def alpha(x):
            x = np.atleast_2d(x)
            ch = chi(x)[:, None, None]
            inner = spec.diffusion(x, beta0) + sign * th * np.eye(n)
            return ch * inner + (1 - ch) * far * np.eye(n)
        return FrozenHamiltonian(alpha, spec.drift, th0 / 2, spec.domain,
                                 label=f"{'+' if sign > 0 else '-'} beta0={beta0:.6g} delta={delta:.6g}",
                                 meta=dict(theta_delta=th, delta=delta, beta0=beta0))
    return make(+1), make(-1)
