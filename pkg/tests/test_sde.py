import warnings

import numpy as np
import pytest

from metastab import model as M
from metastab import sde as S
from metastab.domain import Interval
from metastab.scenarios import STOCK


@pytest.fixture(scope="module")
def s1a():
    return STOCK["ou1d"].problem()


def test_config_checks(s1a):
    S.EnsembleConfig(0.1, dt=0.1).check(s1a)
    for bad in (dict(dt=0.2), dict(start=(5.0,)), dict(start=(0.0, 0.0)), dict(seed=2 ** 64), dict(eps=0.0)):
        with pytest.raises(ValueError):
            S.EnsembleConfig(**{"eps": 0.1, **bad}).check(s1a)


def test_normals_stream():
    z = S.normals(5, 3, 20000, 1)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03
    np.testing.assert_array_equal(z, S.normals(5, 3, 20000, 1))
    assert not np.array_equal(z[:10], S.normals(5, 4, 10, 1))
    assert not np.array_equal(z[:10], S.normals(6, 3, 10, 1))
    # a shorter request is a prefix of the longer stream
    np.testing.assert_array_equal(S.normals(5, 3, 7, 1), z[:7])


def test_determinism(s1a):
    cfg = S.EnsembleConfig(0.2, n_paths=500, dt=0.01, seed=11)
    a, b = S.simulate_exit(s1a, cfg), S.simulate_exit(s1a, cfg)
    assert a.times.tobytes() == b.times.tobytes()
    assert a.points.tobytes() == b.points.tobytes()
    c = S.simulate_exit(s1a, S.EnsembleConfig(0.2, n_paths=500, dt=0.01, seed=12))
    assert not np.array_equal(a.times, c.times)


def test_paths_independent_of_ensemble_size(s1a):
    a = S.simulate_exit(s1a, S.EnsembleConfig(0.2, n_paths=200, dt=0.01, seed=4))
    b = S.simulate_exit(s1a, S.EnsembleConfig(0.2, n_paths=50, dt=0.01, seed=4))
    np.testing.assert_array_equal(a.times[:50], b.times)


def test_generator_consistency(s1a):
    # (E phi(X_dt) - phi(x)) / dt -> eps a phi'' + b phi' for phi = sin
    rng = np.random.default_rng(3)
    eps, dt, n = 0.1, 1e-3, 200_000
    cfg = S.EnsembleConfig(eps, dt=dt, seed=9)
    for x in rng.uniform(-0.9, 1.9, 5):
        X = S.one_step(s1a, cfg, [x], n)[:, 0]
        f = (np.sin(X) - np.sin(x)) / dt
        exact = -eps * np.sin(x) + (-x) * np.cos(x)
        assert abs(f.mean() - exact) <= 4 * f.std() / np.sqrt(n) + 2 * dt


def test_generator_consistency_2d():
    spec = STOCK["disk"].problem()
    eps, dt, n = 0.1, 1e-3, 200_000
    cfg = S.EnsembleConfig(eps, c=2.0, dt=dt, seed=2, start=(0.0, 0.0))
    for x in ([0.3, -0.2], [-0.5, 0.1]):
        X = S.one_step(spec, cfg, x, n)
        phi = lambda y: y[..., 0] ** 2 * y[..., 1] + y[..., 1] ** 2
        f = (phi(X) - phi(np.array(x))) / dt
        a = spec.diffusion(np.array([x]), 2.0)[0]
        b = spec.drift(np.array([x]))[0]
        grad = np.array([2 * x[0] * x[1], x[0] ** 2 + 2 * x[1]])
        hess = np.array([[2 * x[1], 2 * x[0]], [2 * x[0], 2.0]])
        exact = eps * np.sum(a * hess) + b @ grad
        assert abs(f.mean() - exact) <= 4 * f.std() / np.sqrt(n) + 2 * dt


@pytest.fixture(scope="module")
def s1a_exits(s1a):
    return S.simulate_exit(s1a, S.EnsembleConfig(0.05, n_paths=10_000, dt=0.1, seed=1))


def test_exit_location_concentrates(s1a_exits):
    assert s1a_exits.mass_near([[-1.0]], 0.15) >= 0.95


def test_exit_mass_monotone_in_eps(s1a):
    out = []
    for eps in (0.4, 0.2, 0.1):
        rec = S.simulate_exit(s1a, S.EnsembleConfig(eps, n_paths=4000, dt=0.01, seed=3))
        p = rec.mass_near([[-1.0]], 0.15)
        out.append((p, np.sqrt(p * (1 - p) / 4000)))
    for (p0, s0), (p1, s1) in zip(out[:-1], out[1:]):
        assert p1 >= p0 - 2 * np.hypot(s0, s1)


def test_large_eps_hits_both_ends(s1a):
    rec = S.simulate_exit(s1a, S.EnsembleConfig(5.0, n_paths=2000, dt=0.01, seed=3))
    x = rec.points[:, 0]
    assert (x < 0).any() and (x > 0).any()
    assert rec.capped_fraction == 0.0


def test_log_exit_time_s1a(s1a_exits):
    est = S.log_exit_time(s1a_exits)
    assert 0.4 <= est.value <= 0.6
    assert 0 < est.stderr < 0.01


def test_log_exit_time_trend(s1a):
    vals = []
    for eps in (0.1, 0.07, 0.05):
        rec = S.simulate_exit(s1a, S.EnsembleConfig(eps, n_paths=2000, dt=0.1, seed=5))
        vals.append(S.log_exit_time(rec).value)
    assert abs(vals[-1] - 0.5) <= abs(vals[0] - 0.5)


def _exact_mean_exit(eps, lo=-1.0, hi=2.0):
    """T(0) for eps T'' - x T' = -1, T(lo) = T(hi) = 0, by quadrature."""
    from scipy.integrate import quad
    psi = lambda y: np.exp(y * y / (2 * eps))
    inner = lambda y: quad(lambda z: np.exp(-z * z / (2 * eps)), lo, y, limit=200)[0] / eps
    A = lambda x: quad(lambda y: psi(y) * inner(y), lo, x, limit=200)[0]
    I = lambda a, b: quad(psi, a, b, limit=200)[0]
    return -A(0.0) + A(hi) / I(lo, hi) * I(lo, 0.0)


@pytest.mark.parametrize("eps", [0.1, 0.07, 0.05])
def test_log_exit_time_matches_quadrature(s1a, eps):
    n = 2000 if eps > 0.06 else 500  # mean exit time grows like exp(0.5/eps)
    rec = S.simulate_exit(s1a, S.EnsembleConfig(eps, n_paths=n, dt=0.01, seed=5))
    est = S.log_exit_time(rec)
    exact = eps * np.log(_exact_mean_exit(eps))
    # 0.005 allows for the O(dt) weak bias
    assert abs(est.value - exact) <= 3 * est.stderr + 0.005


def test_log_exit_time_ramp_top_level():
    spec = STOCK["ramp"].problem()
    rec = S.simulate_exit(spec, S.EnsembleConfig(0.1, c=1.0, n_paths=1000, dt=0.1, seed=0))
    assert abs(S.log_exit_time(rec).value - 1.0) <= 0.2


def test_vanishing_barrier(s1a):
    # Omega = (-0.1, 0.1): V on the boundary is 0.005
    spec = M.ProblemSpec(Interval(-0.1, 0.1), s1a.drift, s1a.diffusion, s1a.boundary)
    est = [S.log_exit_time(S.simulate_exit(spec, S.EnsembleConfig(eps, n_paths=2000, dt=1e-4, seed=2))).value
           for eps in (0.1, 0.05)]
    assert abs(est[1] - 0.005) < abs(est[0] - 0.005) < 0.5


def test_too_few_exits(s1a):
    cfg = S.EnsembleConfig(0.05, n_paths=200, dt=0.1, horizon=1.0, seed=1)
    with pytest.warns(S.HorizonCapped):
        rec = S.simulate_exit(s1a, cfg)
    assert rec.capped_fraction > 0.9
    with pytest.raises(S.TooFewExits):
        S.log_exit_time(rec)


def test_no_warning_when_all_exit(s1a):
    with warnings.catch_warnings():
        warnings.simplefilter("error", S.HorizonCapped)
        S.simulate_exit(s1a, S.EnsembleConfig(1.0, n_paths=200, dt=0.01, seed=1))


def test_feynman_kac_t0(s1a):
    for x in (-0.7, 0.0, 1.2):
        est = S.feynman_kac(s1a, S.EnsembleConfig(0.1, n_paths=1000, start=(x,)), 0.0)
        assert est.value == s1a.boundary(np.array([[x]]))[0]


def test_feynman_kac_too_few_paths(s1a):
    with pytest.raises(S.TooFewPaths):
        S.feynman_kac(s1a, S.EnsembleConfig(0.1, n_paths=999), 1.0)


def test_feynman_kac_long_time(s1a):
    est = S.feynman_kac(s1a, S.EnsembleConfig(0.1, n_paths=4000, dt=0.01, seed=1), np.exp(12.0))
    assert abs(est.value - 1.0) <= 3 * est.stderr + 1e-12
    assert est.extra["exited_fraction"] == 1.0


def test_records_csv(tmp_path, s1a):
    rec = S.simulate_exit(s1a, S.EnsembleConfig(0.3, n_paths=20, dt=0.01, seed=1))
    rec.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("# config") and "seed=1" in lines[0]
    assert lines[1] == "path,exit_time,x0,exited"
    assert len(lines) == 22
