"""Bounded domains, uniform Cartesian grids and boundary classification.

A domain is described by an exact signed distance (negative inside).  Grids
are lattices ``h * k`` anchored at the origin, so the origin is always a
lattice point; a grid keeps only the nodes of the closed domain.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

INTERIOR, LAYER, ON_BOUNDARY = 0, 1, 2
CLASS_NAMES = {INTERIOR: "interior", LAYER: "boundary-layer", ON_BOUNDARY: "boundary"}


class OriginOutside(ValueError):
    pass


class TooCoarse(ValueError):
    pass


class NotOnBoundary(ValueError):
    pass


class EmptyShrink(UserWarning):
    pass


class DomainSpec:
    """Base class for domains; subclasses provide ``signed_distance``."""

    dim: int

    def signed_distance(self, x) -> np.ndarray:
        raise NotImplementedError

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def diameter(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def contains(self, x) -> np.ndarray:
        return self.signed_distance(x) < 0

    def _gradient(self, x: np.ndarray) -> np.ndarray:
        step = 1e-6 * self.diameter
        g = np.empty_like(x)
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = step
            g[:, k] = (self.signed_distance(x + e) - self.signed_distance(x - e)) / (2 * step)
        return g

    def _normal_raw(self, x: np.ndarray) -> np.ndarray:
        return self._gradient(x)

    def normal(self, x) -> np.ndarray:
        """Unit outward normal, vectorized, without the on-boundary check."""
        pts = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.dim))
        n = self._normal_raw(pts)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def project(self, x) -> np.ndarray:
        """Nearest boundary point (Newton projection along the distance gradient)."""
        p = np.array(np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.dim)))
        for _ in range(4):
            d = self.signed_distance(p)
            p = p - d[:, None] * self.normal(p)
        return p


@dataclass(frozen=True)
class Interval(DomainSpec):
    lo: float
    hi: float
    dim: int = field(default=1, init=False)

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return np.maximum(self.lo - x, x - self.hi)

    def bounds(self):
        return np.array([self.lo]), np.array([self.hi])

    @property
    def diameter(self):
        return self.hi - self.lo

    def _normal_raw(self, x):
        mid = 0.5 * (self.lo + self.hi)
        return np.where(x >= mid, 1.0, -1.0)

    def project(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        mid = 0.5 * (self.lo + self.hi)
        return np.where(x >= mid, self.hi, self.lo).reshape(-1, 1)


@dataclass(frozen=True)
class Box(DomainSpec):
    lo: tuple
    hi: tuple

    @property
    def dim(self):
        return len(self.lo)

    def signed_distance(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.dim))
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        q = np.abs(x - 0.5 * (lo + hi)) - 0.5 * (hi - lo)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)

    def bounds(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)

    def project(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.dim))
        lo, hi = self.bounds()
        p = np.clip(x, lo, hi)
        inside = np.all((x > lo) & (x < hi), axis=1)
        if inside.any():
            xi = x[inside]
            gaps = np.concatenate([xi - lo, hi - xi], axis=1)
            j = gaps.argmin(axis=1)
            pi = xi.copy()
            rows = np.arange(len(xi))
            ax = j % self.dim
            pi[rows, ax] = np.where(j < self.dim, lo[ax], hi[ax])
            p[inside] = pi
        return p


@dataclass(frozen=True)
class Disk(DomainSpec):
    center: tuple
    radius: float

    @property
    def dim(self):
        return len(self.center)

    def signed_distance(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.dim))
        return np.linalg.norm(x - np.asarray(self.center, float), axis=1) - self.radius

    def bounds(self):
        c = np.asarray(self.center, float)
        return c - self.radius, c + self.radius

    @property
    def diameter(self):
        return 2.0 * self.radius

    def _normal_raw(self, x):
        d = x - np.asarray(self.center, float)
        zero = np.linalg.norm(d, axis=1) == 0
        d[zero, 0] = 1.0
        return d

    def project(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.dim))
        return np.asarray(self.center, float) + self.radius * self.normal(x)


@dataclass(frozen=True)
class Ellipse(DomainSpec):
    center: tuple
    axes: tuple
    dim: int = field(default=2, init=False)

    def _closest(self, x):
        """Closest boundary points by dense angle sampling followed by Newton steps."""
        a, b = self.axes
        y = x - np.asarray(self.center, float)
        th = np.linspace(0, 2 * np.pi, 65)[:-1]
        d2 = (y[:, :1] - a * np.cos(th)) ** 2 + (y[:, 1:] - b * np.sin(th)) ** 2
        t = th[d2.argmin(axis=1)]
        for _ in range(30):
            c, s = np.cos(t), np.sin(t)
            # derivative of half the squared distance in the angle
            f = (a * c - y[:, 0]) * (-a * s) + (b * s - y[:, 1]) * (b * c)
            fp = a * a * s * s - (a * c - y[:, 0]) * a * c + b * b * c * c - (b * s - y[:, 1]) * b * s
            fp = np.where(np.abs(fp) < 1e-14, 1e-14, fp)
            step = np.clip(f / fp, -0.5, 0.5)
            t = t - np.where(fp > 0, step, -0.1 * np.sign(f))
        return np.stack([a * np.cos(t), b * np.sin(t)], axis=1) + np.asarray(self.center, float)

    def signed_distance(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, 2))
        a, b = self.axes
        y = x - np.asarray(self.center, float)
        inside = (y[:, 0] / a) ** 2 + (y[:, 1] / b) ** 2 < 1
        dist = np.linalg.norm(x - self._closest(x), axis=1)
        return np.where(inside, -dist, dist)

    def bounds(self):
        c = np.asarray(self.center, float)
        return c - np.asarray(self.axes, float), c + np.asarray(self.axes, float)

    @property
    def diameter(self):
        return 2.0 * max(self.axes)

    def _normal_raw(self, x):
        y = x - np.asarray(self.center, float)
        return y / np.asarray(self.axes, float) ** 2

    def project(self, x):
        return self._closest(np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, 2)))


@dataclass(frozen=True)
class Implicit(DomainSpec):
    """Domain given by a user signed-distance sampler and a bounding box."""

    sdf: Callable
    lo: tuple
    hi: tuple

    @property
    def dim(self):
        return len(self.lo)

    def signed_distance(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.dim))
        return np.asarray(self.sdf(x), dtype=float).reshape(-1)

    def bounds(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)


def outward_normal(domain: DomainSpec, x) -> np.ndarray:
    """Unit outward normal at a boundary point."""
    p = np.asarray(x, dtype=float).reshape(1, domain.dim)
    d = float(domain.signed_distance(p)[0])
    if abs(d) > 1e-6 * domain.diameter:
        raise NotOnBoundary(f"signed distance {d:.3g} at {p[0]}")
    return domain.normal(p)[0]


@dataclass(frozen=True, eq=False)
class Grid:
    """Nodes of a uniform lattice lying in the closed domain.

    ``coords[i]`` is the position of node ``i``, ``kind[i]`` its class and
    ``sd[i]`` its signed distance.  Boundary samples are the boundary nodes
    themselves plus the projections of boundary-layer nodes.
    """

    domain: DomainSpec
    h: float
    kmin: np.ndarray  # lattice multi-index of lattice[0, ..., 0]
    lattice: np.ndarray  # lattice array -> node id or -1
    coords: np.ndarray
    ijk: np.ndarray
    kind: np.ndarray
    sd: np.ndarray
    origin: int
    samples: np.ndarray
    sample_node: np.ndarray
    normals: np.ndarray

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @cached_property
    def neighbors(self) -> np.ndarray:
        """(N, 2n) node ids of the axis neighbours (+e_k, -e_k), -1 when absent."""
        n = self.dim
        out = -np.ones((self.n_nodes, 2 * n), dtype=np.int64)
        shape = np.array(self.lattice.shape)
        for k in range(n):
            for col, s in ((2 * k, 1), (2 * k + 1, -1)):
                nb = self.ijk.copy()
                nb[:, k] += s
                ok = np.all((nb >= 0) & (nb < shape), axis=1)
                out[ok, col] = self.lattice[tuple(nb[ok].T)]
        return out

    def node_at(self, offsets: np.ndarray) -> np.ndarray:
        """Node ids at ``ijk + offsets`` (broadcast), -1 outside the closed domain."""
        nb = self.ijk + np.asarray(offsets, dtype=np.int64)
        shape = np.array(self.lattice.shape)
        ok = np.all((nb >= 0) & (nb < shape), axis=1)
        out = -np.ones(len(nb), dtype=np.int64)
        out[ok] = self.lattice[tuple(nb[ok].T)]
        return out

    def interpolate(self, values: np.ndarray, pts) -> np.ndarray:
        """Multilinear interpolation of a nodal field; NaN where a corner is missing."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float).reshape(-1, self.dim))
        s = pts / self.h - self.kmin
        base = np.floor(s).astype(np.int64)
        frac = s - base
        out = np.zeros(len(pts))
        shape = np.array(self.lattice.shape)
        for corner in range(2 ** self.dim):
            bits = np.array([(corner >> k) & 1 for k in range(self.dim)])
            idx = base + bits
            ok = np.all((idx >= 0) & (idx < shape), axis=1)
            node = -np.ones(len(pts), dtype=np.int64)
            node[ok] = self.lattice[tuple(idx[ok].T)]
            w = np.prod(np.where(bits == 1, frac, 1 - frac), axis=1)
            v = np.where(node >= 0, values[np.maximum(node, 0)], np.nan)
            out += np.where(w > 0, w * v, 0.0)
            out[(w > 0) & (node < 0)] = np.nan
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index"] + [f"x{k}" for k in range(self.dim)] + ["class", "signed_distance"])
            for i in range(self.n_nodes):
                w.writerow([i, *map(repr, self.coords[i]), CLASS_NAMES[int(self.kind[i])], repr(self.sd[i])])


def build_grid(domain: DomainSpec, h: float, min_nodes: int = 9) -> Grid:
    """Uniform grid of spacing ``h`` on the closed domain.

    ``min_nodes`` is the minimum number of interior lattice columns per axis;
    together with ``h < diameter / 8`` it guards against useless resolutions.
    Pass ``min_nodes=0`` to build deliberately coarse grids.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    n = domain.dim
    if n not in (1, 2):
        raise ValueError("only dimensions 1 and 2 are supported")
    if domain.signed_distance(np.zeros((1, n)))[0] >= 0:
        raise OriginOutside("the origin is not inside the domain")
    lo, hi = domain.bounds()
    kmin = np.floor(lo / h - 1e-9).astype(np.int64) - 1
    kmax = np.ceil(hi / h + 1e-9).astype(np.int64) + 1
    axes = [np.arange(kmin[k], kmax[k] + 1) for k in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    kk = np.stack([m.ravel() for m in mesh], axis=1)
    pts = kk * h
    sd = domain.signed_distance(pts)
    tol = 1e-9 * h
    shape = tuple(len(a) for a in axes)
    sd_l = sd.reshape(shape)
    interior = sd_l < -tol
    active = sd_l <= tol

    # interior node with an axis neighbour outside the (open) domain
    outside_nb = np.zeros(shape, dtype=bool)
    for k in range(n):
        for s in (1, -1):
            shifted = np.roll(interior, -s, axis=k)
            edge = [slice(None)] * n
            edge[k] = -1 if s == 1 else 0
            shifted[tuple(edge)] = False
            outside_nb |= ~shifted
    layer = interior & outside_nb
    on_bnd = active & ~interior

    if min_nodes:
        cols = [len(np.unique(np.nonzero(interior)[k])) for k in range(n)]
        if h >= domain.diameter / 8 or min(cols) < min_nodes:
            raise TooCoarse(f"h={h} gives {min(cols)} interior nodes on some axis (need {min_nodes})")

    lattice = -np.ones(shape, dtype=np.int64)
    ijk = np.argwhere(active)
    lattice[tuple(ijk.T)] = np.arange(len(ijk))
    coords = (ijk + kmin) * h
    kind = np.full(len(ijk), INTERIOR, dtype=np.int8)
    kind[layer[tuple(ijk.T)]] = LAYER
    kind[on_bnd[tuple(ijk.T)]] = ON_BOUNDARY
    sdn = sd_l[tuple(ijk.T)]
    origin = int(lattice[tuple(-kmin)])

    # boundary nodes first so that they win the deduplication
    src = np.concatenate([np.nonzero(kind == ON_BOUNDARY)[0], np.nonzero(kind == LAYER)[0]])
    proj = np.where((kind[src] == ON_BOUNDARY)[:, None], coords[src], domain.project(coords[src]))
    key = np.round(proj / (1e-6 * h)).astype(np.int64)
    _, first = np.unique(key, axis=0, return_index=True)
    first = np.sort(first)
    samples = proj[first]
    sample_node = src[first]
    normals = domain.normal(samples)
    return Grid(domain, float(h), kmin, lattice, coords, ijk, kind, sdn, origin,
                samples, sample_node, normals)


def shrink(grid: Grid, delta: float) -> np.ndarray:
    """Ids of the non-boundary nodes at depth at least ``delta``."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    ids = np.nonzero((grid.kind != ON_BOUNDARY) & (grid.sd <= -delta + 1e-12 * grid.h))[0]
    if ids.size == 0:
        warnings.warn(f"no node at depth {delta}", EmptyShrink, stacklevel=2)
    return ids
