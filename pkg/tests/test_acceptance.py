"""Acceptance criteria 1-8, one test each; every test records a PASS/FAIL line."""
import time
from pathlib import Path

import numpy as np

from metastab import cli
from metastab import metamap as MM
from metastab import model as M
from metastab import parabolic as P
from metastab import sde as S
from metastab.domain import build_grid
from metastab.quasipotential import SweepConfig, frozen_at_level, perturbed_family, solve_dijkstra, solve_sweeping
from metastab.scenarios import STOCK

import conftest
from conftest import s1_spec


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.VERDICTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_criterion_1_quasipotential_1d():
    spec = s1_spec()
    t0 = time.perf_counter()
    g = build_grid(spec.domain, 1e-3)
    ham = frozen_at_level(spec, 0.0)
    vd = solve_dijkstra(ham, g).values
    vs = solve_sweeping(ham, g, SweepConfig(tol=1e-8)).values
    dt = time.perf_counter() - t0
    exact = g.coords[:, 0] ** 2 / 2
    ed, es, ag = np.abs(vd - exact).max(), np.abs(vs - exact).max(), np.abs(vd - vs).max()
    verdict(1, ed <= 5e-3 and es <= 1e-2 and ag <= 1e-2 and dt < 5,
            f"dijkstra {ed:.2e} <= 5e-3, sweeping {es:.2e} <= 1e-2, agreement {ag:.2e} <= 1e-2, {dt:.1f} s < 5 s")


# ---------------------------------------------------------------- 2

def test_criterion_2_quasipotential_disk():
    spec = STOCK["disk"].problem()
    t0 = time.perf_counter()
    h = 1 / 160
    g = build_grid(spec.domain, h)
    rec = MM.level_record(spec, g, 2.0, stencil=2)
    dt = time.perf_counter() - t0
    x, y = g.coords.T
    err = np.abs(rec.field.values - (x ** 2 / 2 + y ** 2)).max()
    ends = np.array([[1.0, 0.0], [-1.0, 0.0]])
    dist = np.linalg.norm(rec.gamma[:, None, :] - ends[None], axis=2).min(axis=1).max()
    verdict(2, err <= 2e-2 and abs(rec.M - 0.5) <= 1e-2 and dist <= h and dt < 60,
            f"sup error {err:.2e} <= 2e-2, M = {rec.M:.4f}, Gamma within {dist:.2e} <= h, {dt:.1f} s < 60 s")


# ---------------------------------------------------------------- 3

def test_criterion_3_metamap():
    s2 = STOCK["ramp"].problem()
    mp = MM.build_map(s2, build_grid(s2.domain, 2e-3))
    lams = np.linspace(0.05, 1.45, 25)
    jumps = np.asarray(MM.locate_jumps(mp, np.linspace(0, 1.5, 151)))
    off = [l for l in lams if not len(jumps) or np.abs(jumps - l).min() > 2e-2]
    dev = max(abs(mp.cbar(l) - np.clip(2 * l - 1, 0, 1)) for l in off)
    s1 = STOCK["ou1d"].problem()
    j1 = MM.locate_jumps(MM.build_map(s1, build_grid(s1.domain, 2e-3)), np.linspace(0, 1, 101))
    ok = abs(mp.c1 - 1) <= 1e-2 and len(off) == 25 and dev <= 1e-2 and len(j1) == 1 and abs(j1[0] - 0.5) <= 1e-2
    found = ", ".join(f"{j:.4f}" for j in j1)
    verdict(3, ok, f"c1 = {mp.c1:.4f}, cbar deviation {dev:.2e} on {len(off)} lambdas, ou1d jumps {{{found}}}")


# ---------------------------------------------------------------- 4

def test_criterion_4_reproduce(tmp_path):
    sc = STOCK["ramp"]
    t0 = time.perf_counter()
    run = cli.Run(sc, Path(tmp_path), quiet=True)
    mp = cli.build_metamap(run)
    tab = cli.reproduce_table(run, mp)
    dt = time.perf_counter() - t0
    parts, ok = [], dt < 600 and not tab["excluded"] and len(tab["lams"]) == 3
    for lam in tab["lams"]:
        es = [tab["err"][e, lam] for e in tab["eps"]]
        mono = all(b <= a + 0.02 for a, b in zip(es, es[1:]))
        ok &= mono and es[-1] <= 0.1
        parts.append(f"lambda {lam:g}: e = {', '.join(f'{e:.3f}' for e in es)}")
    uni = max(tab["uniform"][0.1, lam] for lam in tab["lams"])
    ok &= uni <= 0.15
    verdict(4, ok, "; ".join(parts) + f"; uniform at eps 0.1 {uni:.3f} <= 0.15; {dt:.0f} s < 600 s")


# ---------------------------------------------------------------- 5

def test_criterion_5_barriers():
    sc = STOCK["ou1d"]
    spec = sc.problem()
    t0 = time.perf_counter()
    suite = cli.barrier_suite(spec, build_grid(spec.domain, 2e-3), sc, (0.05, 0.02))
    dt = time.perf_counter() - t0
    failed = [name for name, ok, _, _ in suite if not ok]
    verdict(5, not failed and dt < 120,
            f"{len(suite) - len(failed)}/{len(suite)} constructions and replays pass"
            + (f", failing: {'; '.join(failed)}" if failed else "") + f", {dt:.1f} s < 120 s")


# ---------------------------------------------------------------- 6

def test_criterion_6_bracketing():
    s2 = STOCK["ramp"].problem()
    h = 2e-3
    g = build_grid(s2.domain, h)
    rec0 = MM.level_record(s2, g, 0.0)
    tau = MM.default_tau(s2, g)
    ordered, widths, dist = True, [], 0.0
    for j in range(5):
        hp, hm = perturbed_family(s2, 0.0, 0.2 * 2.0 ** -j, g)
        pp, pm = solve_dijkstra(hp, g), solve_dijkstra(hm, g)
        ordered &= pp.M <= rec0.M <= pm.M
        widths.append(pm.M - pp.M)
        if j == 4:
            for pf in (pp, pm):
                gam = MM.record_from_field(s2, pf, 0.0, tau).gamma
                d = np.linalg.norm(gam[:, None, :] - rec0.gamma[None], axis=2).min(axis=1).max()
                dist = max(dist, float(d))
    ratio = widths[-1] / widths[0]
    verdict(6, ordered and ratio <= 0.25 and dist <= 2 * h,
            f"ordered at all j: {ordered}, width ratio {ratio:.3f} <= 0.25, Gamma distance {dist:.1e} <= 2h")


# ---------------------------------------------------------------- 7

def test_criterion_7_stochastic():
    spec = STOCK["ou1d"].problem()
    t0 = time.perf_counter()
    rec = S.simulate_exit(spec, S.EnsembleConfig(0.05, n_paths=10_000, dt=0.1, seed=1))
    mass = rec.mass_near([[-1.0]], 0.15)
    est = S.log_exit_time(rec)
    t = float(np.exp(3.0))
    fk = S.feynman_kac(spec, S.EnsembleConfig(0.1, n_paths=10_000, dt=1e-2, seed=7), t)
    tr = P.evolve(spec, build_grid(spec.domain, 2e-3), 0.1, 0.3, lams=[0.3])
    u = tr.at_origin(t)
    dt = time.perf_counter() - t0
    ok = mass >= 0.95 and 0.4 <= est.value <= 0.6 and abs(u - fk.value) <= 3 * fk.stderr and dt < 180
    verdict(7, ok, f"exit mass {mass:.4f} >= 0.95, eps log T {est.value:.4f} in [0.4, 0.6], "
                   f"FK {fk.value:.4f} +- {fk.stderr:.4f} vs evolve {u:.4f}, {dt:.0f} s < 180 s")


# ---------------------------------------------------------------- 8

def _max_principle(rng):
    worst = 0.0
    for _ in range(100):
        knots = np.sort(rng.uniform(-1, 2, 3))
        spec = s1_spec(M.piecewise_linear_g(0, [-1, *knots, 2], rng.uniform(-2, 2, 5)), k=rng.uniform(0.5, 2))
        g = build_grid(spec.domain, 5e-2)
        gv = spec.boundary(g.coords)
        tg = P.TimeGrid(float(10 ** rng.uniform(0, 4)), 10 ** rng.uniform(-3, -1), n0=20, gamma=0.2)
        tr = P.evolve(spec, g, float(rng.uniform(0.02, 0.5)), tgrid=tg)
        worst = max(worst, tr.umax.max() - gv.max(), gv.min() - tr.umin.min())
    return worst


def _comparison(rng):
    spec = s1_spec()
    g = build_grid(spec.domain, 5e-2)
    tg = P.TimeGrid(1e2, 1e-2, n0=20, gamma=0.2)
    gb = spec.boundary(g.coords)
    inner = P.Stepper(spec, g, 0.1).geo.unknown
    worst = 0.0
    for _ in range(100):
        u0 = gb.copy()
        u0[inner] = rng.uniform(-1, 1, len(inner))
        v0 = u0.copy()
        v0[inner] += rng.uniform(0, 0.5, len(inner))
        lo, hi = [], []
        P.evolve(spec, g, 0.1, tgrid=tg, u0=u0, callback=lambda t, u: lo.append(u.copy()))
        P.evolve(spec, g, 0.1, tgrid=tg, u0=v0, callback=lambda t, u: hi.append(u.copy()))
        worst = max(worst, (np.array(lo) - np.array(hi)).max())
    return worst


def _pucci(rng):
    theta0, n, k = 0.3, 3, 10_000
    X = rng.normal(size=(k, n, n))
    X = X + X.transpose(0, 2, 1)
    B = rng.normal(size=(k, n, n))
    Y = X + B @ B.transpose(0, 2, 1)
    d = P.pucci_plus(Y, theta0) - P.pucci_plus(X, theta0)
    tr = np.trace(Y - X, axis1=1, axis2=2)
    return int(np.sum((theta0 * tr > d + 1e-9) | (d > tr / theta0 + 1e-9)))


def _hamiltonian(rng):
    bad = 0
    spec = STOCK["disk"].problem()
    th = spec.diffusion.theta0
    for _ in range(1000):
        x = rng.uniform(-0.7, 0.7, (1, 2))
        c = rng.uniform(0, 3)
        p, q = rng.uniform(-3, 3, (2, 1, 2))
        t = rng.uniform()
        H = lambda v: M.hamiltonian(spec, x, c, v)[0]
        bad += H(t * p + (1 - t) * q) > t * H(p) + (1 - t) * H(q) + 1e-12
        bad += H(p) < th * (p @ p.T).item() - np.linalg.norm(spec.drift(x)) * np.linalg.norm(p) - 1e-12
    return int(bad)


def _legendre(rng):
    worst = 0.0
    for spec in (s1_spec(), STOCK["disk"].problem()):
        n = spec.dim
        p1 = np.linspace(-4, 4, 2001 if n == 1 else 401)
        Pg = p1[:, None] if n == 1 else np.stack(np.meshgrid(p1, p1), -1).reshape(-1, 2)
        for _ in range(10):
            x, q = rng.uniform(-0.5, 0.5, n), rng.uniform(-1, 1, n)
            val = (Pg @ q - M.hamiltonian(spec, np.broadcast_to(x, Pg.shape), 0.0, Pg)).max()
            exact = M.lagrangian(spec, x if n > 1 else x[0], 0.0, q if n > 1 else q[0])
            worst = max(worst, abs(val - exact))
    return worst


def test_criterion_8_properties():
    rng = np.random.default_rng(20240611)
    mp, cmp_, pu, ham, leg = _max_principle(rng), _comparison(rng), _pucci(rng), _hamiltonian(rng), _legendre(rng)
    ok = mp <= 1e-9 and cmp_ <= 1e-9 and pu == 0 and ham == 0 and leg <= 1e-3
    verdict(8, ok, f"max principle overshoot {mp:.1e}, comparison violation {cmp_:.1e}, Pucci failures {pu}/10000, "
                   f"Hamiltonian failures {ham}/2000, Legendre gap {leg:.1e} <= 1e-3")
