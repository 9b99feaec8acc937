"""Euler-Maruyama oracle for dX = b dt + sqrt(2 eps) sigma dW with sigma sigma^T = a(., c).

Coefficients and the signed distance are tabulated on a lattice and
interpolated multilinearly inside a numba kernel.  Normals come from a
counter-based generator keyed by (seed, path, step), so every path is
reproducible independently of how paths are scheduled.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .model import ProblemSpec


class TooFewExits(RuntimeError):
    pass


class TooFewPaths(ValueError):
    pass


class HorizonCapped(UserWarning):
    pass


MIN_PATHS = 1000


@dataclass(frozen=True)
class EnsembleConfig:
    eps: float
    c: float = 0.0
    n_paths: int = 10_000
    dt: float = 1e-2
    horizon: float = 1e6
    seed: int = 0
    start: tuple = (0.0,)

    def check(self, spec: ProblemSpec) -> None:
        if self.eps <= 0 or self.dt <= 0 or self.horizon < 0 or self.n_paths < 1:
            raise ValueError("eps, dt, n_paths must be positive and horizon nonnegative")
        if self.dt > 0.1 / spec.drift.lipschitz * (1 + 1e-12):
            raise ValueError(f"dt = {self.dt:g} exceeds 0.1/L_b = {0.1 / spec.drift.lipschitz:g}")
        if len(self.start) != spec.dim:
            raise ValueError("start has the wrong dimension")
        if not spec.domain.contains(np.array([self.start]))[0]:
            raise ValueError("start must lie in the domain")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


# ---------------------------------------------------------------- counter RNG

@njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _key(seed, path):
    return _mix(seed ^ _mix(np.uint64(path) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(1)))


@njit(cache=True)
def _normal_pair(key, counter):
    """Two independent N(0,1) draws from one 64-bit hash (Box-Muller)."""
    z = _mix(key + np.uint64(counter) * np.uint64(0x9E3779B97F4A7C15))
    u1 = ((z >> np.uint64(32)) + np.uint64(1)) * (1.0 / 4294967297.0)
    u2 = (z & np.uint64(0xFFFFFFFF)) * (1.0 / 4294967296.0)
    r = np.sqrt(-2.0 * np.log(u1))
    return r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)


@njit(cache=True)
def _uniform(key, counter):
    z = _mix(key ^ _mix(np.uint64(counter) + np.uint64(0xD1B54A32D192ED03)))
    return ((z >> np.uint64(11)) + np.uint64(1)) * (1.0 / 9007199254740993.0)


def normals(seed: int, path: int, n_steps: int, dim: int) -> np.ndarray:
    """The normals path ``path`` consumes on its first ``n_steps`` steps, shape (n_steps, dim).

    Draw m = k dim + i of the stream is component m % 2 of Box-Muller pair m // 2.
    """
    return _normals(np.uint64(seed), path, n_steps, dim)


@njit(cache=True)
def _normals(seed, path, n_steps, dim):
    total = n_steps * dim
    out = np.empty(total + 1)
    key = _key(seed, path)
    for m in range(0, total, 2):
        out[m], out[m + 1] = _normal_pair(key, m >> 1)
    return out[:total].reshape(n_steps, dim)


# ---------------------------------------------------------------- tabulation

@dataclass(frozen=True)
class _Tables:
    lo: np.ndarray
    h: np.ndarray
    b: np.ndarray  # (*shape, n)
    s: np.ndarray  # (*shape, n, n), symmetric square root of a
    sd: np.ndarray  # shape

    @property
    def var_max(self) -> float:
        return float(np.linalg.eigvalsh(np.einsum("...ij,...kj->...ik", self.s, self.s)).max())


def _tables(spec: ProblemSpec, c: float, cells: Optional[int] = None) -> _Tables:
    n = spec.dim
    if n not in (1, 2):
        raise NotImplementedError("the Euler-Maruyama kernel supports dimensions 1 and 2")
    cells = (4096 if n == 1 else 400) if cells is None else cells
    lo, hi = spec.domain.bounds()
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    axes = [np.linspace(lo[k], hi[k], cells + 1) for k in range(n)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)
    a = spec.diffusion(pts, c)
    w, Q = np.linalg.eigh(a)
    s = np.einsum("nij,nj,nkj->nik", Q, np.sqrt(np.maximum(w, 0.0)), Q)
    shape = (cells + 1,) * n
    return _Tables(lo, (hi - lo) / cells,
                   np.ascontiguousarray(spec.drift(pts).reshape(*shape, n)),
                   np.ascontiguousarray(s.reshape(*shape, n, n)),
                   np.ascontiguousarray(np.asarray(spec.domain.signed_distance(pts), float).reshape(shape)))


@njit(cache=True)
def _cell(x, lo, h, m):
    q = (x - lo) / h
    i = min(max(int(np.floor(q)), 0), m - 2)
    return i, min(max(q - i, 0.0), 1.0)


@njit(cache=True)
def _outside(x, lo, h, m):
    return max(lo - x, x - (lo + h * (m - 1)), 0.0)


@njit(cache=True)
def _sd1(x, lo, h, sd):
    i, f = _cell(x, lo, h, sd.shape[0])
    return sd[i] * (1 - f) + sd[i + 1] * f + _outside(x, lo, h, sd.shape[0])


@njit(cache=True)
def _sd2(x, y, lo0, lo1, h0, h1, sd):
    i, f = _cell(x, lo0, h0, sd.shape[0])
    j, g = _cell(y, lo1, h1, sd.shape[1])
    v = (sd[i, j] * (1 - f) * (1 - g) + sd[i + 1, j] * f * (1 - g)
         + sd[i, j + 1] * (1 - f) * g + sd[i + 1, j + 1] * f * g)
    ox = _outside(x, lo0, h0, sd.shape[0])
    oy = _outside(y, lo1, h1, sd.shape[1])
    return v + np.sqrt(ox * ox + oy * oy)


@njit(cache=True)
def _crossing(d0, dm, dn):
    """Fraction of the step at the sign change, after one bisection of the step."""
    if dm >= 0.0:
        return 0.5 * min(max(-d0 / (dm - d0) if dm > d0 else 0.5, 0.0), 1.0)
    return 0.5 + 0.5 * min(max(-dm / (dn - dm) if dn > dm else 0.5, 0.0), 1.0)


# Both kernels: a step ending outside exits at the interpolated crossing; a
# step ending inside exits with the Brownian-bridge probability
# exp(-2 d0 dn / (2 eps nu.a.nu dt)), both distances measured to the boundary.

@njit(cache=True)
def _sim1(lo, h, bt, st, sd, x0, eps, dt, horizon, seed, n_paths, bridge, var_max):
    times = np.empty(n_paths)
    pts = np.empty((n_paths, 1))
    exited = np.zeros(n_paths, np.bool_)
    amp = np.sqrt(2.0 * eps)
    m = bt.shape[0]
    n_steps = int(np.ceil(horizon / dt - 1e-12))
    for p in range(n_paths):
        key = _key(seed, p)
        x = x0
        t = 0.0
        d0 = _sd1(x, lo, h, sd)
        z1 = 0.0
        for k in range(n_steps):
            step = min(dt, horizon - t)
            if step <= 0.0:
                break
            if k & 1 == 0:
                z, z1 = _normal_pair(key, k >> 1)
            else:
                z = z1
            i, f = _cell(x, lo, h, m)
            b = bt[i, 0] * (1 - f) + bt[i + 1, 0] * f
            s = st[i, 0, 0] * (1 - f) + st[i + 1, 0, 0] * f
            xn = x + b * step + amp * np.sqrt(step) * s * z
            dn = _sd1(xn, lo, h, sd)
            if dn >= 0.0:
                fr = _crossing(d0, _sd1(0.5 * (x + xn), lo, h, sd), dn)
                pts[p, 0] = x + fr * (xn - x)
                times[p] = t + fr * step
                exited[p] = True
                break
            if bridge and d0 * dn < 20.0 * eps * var_max * step:
                arg = d0 * dn / (eps * s * s * step + 1e-300)
                if arg < 40.0 and _uniform(key, k) < np.exp(-arg):
                    fr = d0 / (d0 + dn)
                    xc = x + fr * (xn - x)
                    nu = 1.0 if _sd1(xc + h, lo, h, sd) > _sd1(xc - h, lo, h, sd) else -1.0
                    pts[p, 0] = xc - _sd1(xc, lo, h, sd) * nu
                    times[p] = t + fr * step
                    exited[p] = True
                    break
            x = xn
            d0 = dn
            t += step
        if not exited[p]:
            pts[p, 0] = x
            times[p] = t
    return times, pts, exited


@njit(cache=True)
def _sim2(lo, h, bt, st, sd, x0, eps, dt, horizon, seed, n_paths, bridge, var_max):
    times = np.empty(n_paths)
    pts = np.empty((n_paths, 2))
    exited = np.zeros(n_paths, np.bool_)
    amp = np.sqrt(2.0 * eps)
    m0, m1 = bt.shape[0], bt.shape[1]
    lo0, lo1, h0, h1 = lo[0], lo[1], h[0], h[1]
    n_steps = int(np.ceil(horizon / dt - 1e-12))
    for p in range(n_paths):
        key = _key(seed, p)
        x, y = x0[0], x0[1]
        t = 0.0
        d0 = _sd2(x, y, lo0, lo1, h0, h1, sd)
        for k in range(n_steps):
            step = min(dt, horizon - t)
            if step <= 0.0:
                break
            za, zb = _normal_pair(key, k)
            i, f = _cell(x, lo0, h0, m0)
            j, g = _cell(y, lo1, h1, m1)
            w00, w10, w01, w11 = (1 - f) * (1 - g), f * (1 - g), (1 - f) * g, f * g
            bx = w00 * bt[i, j, 0] + w10 * bt[i + 1, j, 0] + w01 * bt[i, j + 1, 0] + w11 * bt[i + 1, j + 1, 0]
            by = w00 * bt[i, j, 1] + w10 * bt[i + 1, j, 1] + w01 * bt[i, j + 1, 1] + w11 * bt[i + 1, j + 1, 1]
            s00 = w00 * st[i, j, 0, 0] + w10 * st[i + 1, j, 0, 0] + w01 * st[i, j + 1, 0, 0] + w11 * st[i + 1, j + 1, 0, 0]
            s01 = w00 * st[i, j, 0, 1] + w10 * st[i + 1, j, 0, 1] + w01 * st[i, j + 1, 0, 1] + w11 * st[i + 1, j + 1, 0, 1]
            s11 = w00 * st[i, j, 1, 1] + w10 * st[i + 1, j, 1, 1] + w01 * st[i, j + 1, 1, 1] + w11 * st[i + 1, j + 1, 1, 1]
            sq = amp * np.sqrt(step)
            xn = x + bx * step + sq * (s00 * za + s01 * zb)
            yn = y + by * step + sq * (s01 * za + s11 * zb)
            dn = _sd2(xn, yn, lo0, lo1, h0, h1, sd)
            if dn >= 0.0:
                fr = _crossing(d0, _sd2(0.5 * (x + xn), 0.5 * (y + yn), lo0, lo1, h0, h1, sd), dn)
                pts[p, 0] = x + fr * (xn - x)
                pts[p, 1] = y + fr * (yn - y)
                times[p] = t + fr * step
                exited[p] = True
                break
            if bridge and d0 * dn < 20.0 * eps * var_max * step:
                gx = (_sd2(x + h0, y, lo0, lo1, h0, h1, sd) - _sd2(x - h0, y, lo0, lo1, h0, h1, sd)) / (2 * h0)
                gy = (_sd2(x, y + h1, lo0, lo1, h0, h1, sd) - _sd2(x, y - h1, lo0, lo1, h0, h1, sd)) / (2 * h1)
                nn = np.sqrt(gx * gx + gy * gy) + 1e-300
                gx /= nn
                gy /= nn
                ax, ay = s00 * gx + s01 * gy, s01 * gx + s11 * gy
                arg = d0 * dn / (eps * (ax * ax + ay * ay) * step + 1e-300)
                if arg < 40.0 and _uniform(key, k) < np.exp(-arg):
                    fr = d0 / (d0 + dn)
                    xc, yc = x + fr * (xn - x), y + fr * (yn - y)
                    dc = _sd2(xc, yc, lo0, lo1, h0, h1, sd)
                    pts[p, 0] = xc - dc * gx
                    pts[p, 1] = yc - dc * gy
                    times[p] = t + fr * step
                    exited[p] = True
                    break
            x, y = xn, yn
            d0 = dn
            t += step
        if not exited[p]:
            pts[p, 0] = x
            pts[p, 1] = y
            times[p] = t
    return times, pts, exited


# ---------------------------------------------------------------- records

@dataclass
class ExitRecords:
    times: np.ndarray
    points: np.ndarray
    exited: np.ndarray
    config: EnsembleConfig
    table_cells: int = 0

    @property
    def capped_fraction(self) -> float:
        return float(1.0 - self.exited.mean())

    def mass_near(self, targets, d: float) -> float:
        """Fraction of all paths that exited within distance d of any target point."""
        tg = np.atleast_2d(np.asarray(targets, float))
        dist = np.linalg.norm(self.points[:, None, :] - tg[None], axis=2).min(axis=1)
        return float(np.sum(self.exited & (dist <= d)) / len(self.times))

    def to_csv(self, path) -> None:
        n = self.points.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# config"] + [f"{k}={v}" for k, v in asdict(self.config).items()])
            w.writerow(["path", "exit_time"] + [f"x{k}" for k in range(n)] + ["exited"])
            for i in range(len(self.times)):
                w.writerow([i, repr(float(self.times[i])), *map(repr, map(float, self.points[i])),
                            int(self.exited[i])])


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n: int
    config: Optional[EnsembleConfig] = None
    extra: dict = field(default_factory=dict)

    def summary(self, name: str = "estimate") -> str:
        lines = [f"{name} = {self.value:.6g}", f"stderr = {self.stderr:.3g}", f"n = {self.n}"]
        lines += [f"{k} = {v}" for k, v in self.extra.items()]
        if self.config is not None:
            lines += [f"config.{k} = {v}" for k, v in asdict(self.config).items()]
        return "\n".join(lines)


def simulate_exit(spec: ProblemSpec, cfg: EnsembleConfig, cells: Optional[int] = None,
                  bridge: bool = True, warn: bool = True) -> ExitRecords:
    """Integrate every path until its first boundary crossing or the horizon cap.

    A step ending outside is refined by one bisection and linear interpolation
    of the signed distance.  With ``bridge`` a step ending inside still exits
    with the Brownian-bridge crossing probability exp(-2 d0 d1 / (2 eps nu.a.nu dt)).
    Paths still inside at the horizon are flagged and reported with a HorizonCapped warning.
    """
    cfg.check(spec)
    tb = _tables(spec, cfg.c, cells)
    kernel = _sim1 if spec.dim == 1 else _sim2
    x0 = float(cfg.start[0]) if spec.dim == 1 else np.asarray(cfg.start, float)
    lo, h = (float(tb.lo[0]), float(tb.h[0])) if spec.dim == 1 else (tb.lo, tb.h)
    times, pts, exited = kernel(lo, h, tb.b, tb.s, tb.sd, x0, float(cfg.eps), float(cfg.dt),
                                float(cfg.horizon), np.uint64(cfg.seed), int(cfg.n_paths), bool(bridge),
                                tb.var_max)
    rec = ExitRecords(times, pts, exited, cfg, int(tb.sd.shape[0] - 1))
    if warn and not exited.all():
        warnings.warn(f"{100 * rec.capped_fraction:.2f}% of paths reached the horizon {cfg.horizon:g}",
                      HorizonCapped, stacklevel=2)
    return rec


def log_exit_time(records: ExitRecords, eps: Optional[float] = None, n_boot: int = 400,
                  seed: int = 0) -> Estimate:
    """eps log(mean exit time) with a bootstrap standard error."""
    eps = records.config.eps if eps is None else eps
    frac = records.exited.mean()
    if frac < 0.9:
        raise TooFewExits(f"only {100 * frac:.1f}% of paths exited before the horizon")
    t = records.times
    est = eps * np.log(t.mean())
    rng = np.random.default_rng(seed)
    boots = np.array([t[rng.integers(0, len(t), len(t))].mean() for _ in range(n_boot)])
    return Estimate(float(est), float(eps * np.log(boots).std(ddof=1)), len(t), records.config,
                    dict(mean_exit_time=float(t.mean()), exited_fraction=float(frac)))


def feynman_kac(spec: ProblemSpec, cfg: EnsembleConfig, t: float, min_paths: int = MIN_PATHS,
                cells: Optional[int] = None) -> Estimate:
    """Monte-Carlo estimate of u(start, t) = E[g(X_{t ^ tau})] for the linear equation frozen at c."""
    if cfg.n_paths < min_paths:
        raise TooFewPaths(f"{cfg.n_paths} paths < {min_paths}")
    if t == 0:
        return Estimate(float(spec.boundary(np.array([cfg.start]))[0]), 0.0, cfg.n_paths, cfg)
    rec = simulate_exit(spec, EnsembleConfig(cfg.eps, cfg.c, cfg.n_paths, cfg.dt, t, cfg.seed, cfg.start), cells,
                        warn=False)
    vals = spec.boundary(rec.points)
    return Estimate(float(np.sum(vals) / len(vals)), float(vals.std(ddof=1) / np.sqrt(len(vals))),
                    len(vals), cfg, dict(t=t, exited_fraction=float(rec.exited.mean())))


def one_step(spec: ProblemSpec, cfg: EnsembleConfig, x, n_samples: int, dt: Optional[float] = None) -> np.ndarray:
    """X_dt samples from x (no exit monitoring); for generator consistency checks."""
    dt = cfg.dt if dt is None else dt
    x = np.asarray(x, float).reshape(1, -1)
    b = spec.drift(x)[0]
    a = spec.diffusion(x, cfg.c)[0]
    w, Q = np.linalg.eigh(a)
    s = Q @ np.diag(np.sqrt(np.maximum(w, 0))) @ Q.T
    z = np.stack([normals(cfg.seed, p, 1, spec.dim)[0] for p in range(n_samples)])
    return x + b * dt + np.sqrt(2 * cfg.eps * dt) * z @ s.T
