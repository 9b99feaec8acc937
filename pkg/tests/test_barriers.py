import numpy as np
import pytest

from metastab import barriers as B
from metastab.domain import build_grid
from metastab.quasipotential import frozen_at_level, solve_dijkstra
from metastab.scenarios import STOCK


@pytest.fixture(scope="module")
def s1a_pf():
    spec = STOCK["ou1d"].problem()
    grid = build_grid(spec.domain, 2e-3)
    ham = frozen_at_level(spec, 0.0)
    return spec, ham, solve_dijkstra(ham, grid, 2)


@pytest.fixture(scope="module")
def prof():
    return B.make_h(5)


# ---------------------------------------------------------------- bump profile

def test_h_values(prof):
    assert prof(0.25) == 0.0 and prof(1.5) == 1.0
    assert prof(0.75) == pytest.approx(0.5, abs=1e-15)
    assert prof.h2norm == pytest.approx(23.094, abs=1e-3)


def test_h_shape(prof):
    s = np.linspace(0, 2, 1001)
    v = prof(s)
    assert v.min() >= 0 and v.max() <= 1
    assert np.all(np.diff(v) >= -1e-15)
    assert np.all(prof.d1(s) >= 0)


def test_h_c2_matching(prof):
    for knot in (0.5, 1.0):
        for side in (-1e-7, 1e-7):
            assert abs(prof.d1(knot + side)) < 1e-5
            assert abs(prof.d2(knot + side)) < 1e-3


def test_h_derivatives_consistent(prof):
    s = np.linspace(0.52, 0.98, 47)
    e = 1e-6
    np.testing.assert_allclose(prof.d1(s), (prof(s + e) - prof(s - e)) / (2 * e), atol=1e-6)
    np.testing.assert_allclose(prof.d2(s), (prof.d1(s + e) - prof.d1(s - e)) / (2 * e), atol=1e-4)


@pytest.mark.parametrize("deg", [3, 4, 6])
def test_h_bad_degree(deg):
    with pytest.raises(ValueError):
        B.make_h(deg)


# ---------------------------------------------------------------- q^eps

def test_tau_value(prof):
    spec = STOCK["ou1d"].problem()
    c = B.barrier_q(prof, spec, 0.01, r=0.5, verify=False)
    assert c.params["k"] == 0.5 and c.params["R0"] == pytest.approx(2 * np.sqrt(2))
    assert c.params["tau"] == pytest.approx(2 * np.log(0.5 / (2 * np.sqrt(2) * 0.1)))
    assert c.params["tau"] == pytest.approx(1.139, abs=1e-3)


def test_q_verified_at_small_eps(prof):
    spec = STOCK["ou1d"].problem()
    c = B.barrier_q(prof, spec, 0.01)
    assert c.residuals["pucci"].margin.min() >= -1e-6
    assert c.verified, "\n".join(c.lines())


def test_q_side_condition(prof):
    spec = STOCK["ou1d"].problem()
    with pytest.raises(B.SideConditionViolated):
        B.barrier_q(prof, spec, 0.05)
    with pytest.raises(B.SideConditionViolated):
        B.barrier_q(prof, spec, 0.01, R=1.0)


def test_p_plateaus(prof):
    spec = STOCK["ou1d"].problem()
    c = B.barrier_q(prof, spec, 0.01, verify=False)
    p, k, R = c.extra["p"], c.params["k"], c.params["R"]
    for t in (0.0, 0.3, 1.0):
        rad = R * 0.1 * np.exp(k * t)
        x = np.array([[rad * 1.001], [-rad * 1.5]])
        np.testing.assert_allclose(p(x, t), 1.0)
        x = np.array([[0.0], [0.499 * rad], [-0.3 * rad]])
        np.testing.assert_allclose(p(x, t), 0.0)


def test_q_minus_p(prof):
    spec = STOCK["ou1d"].problem()
    c = B.barrier_q(prof, spec, 0.01, verify=False)
    p, q = c.extra["p"], c.evaluate
    k, R = c.params["k"], c.params["R"]
    x = np.linspace(-0.5, 0.5, 11)[:, None]
    bound = prof.h2norm / (2 * k * R ** 2 * 1.0)
    prev = -1.0
    for t in np.linspace(0, 20, 41):
        d = q(x, t) - p(x, t)
        assert np.ptp(d) < 1e-14
        assert 0 <= d[0] <= bound + 1e-14
        assert d[0] >= prev
        prev = d[0]


# ---------------------------------------------------------------- smoothed potential

def test_smooth_potential_s1a(s1a_pf):
    spec, ham, pf = s1a_pf
    v = B.smooth_potential(pf, 0.2, spec, ham)
    assert v.verified
    assert v.params["eta"] > 0
    assert np.abs(v.evaluate(pf.grid.coords) - pf.values).max() < 0.2


def test_smooth_potential_eta_is_margin(s1a_pf):
    spec, ham, pf = s1a_pf
    v = B.smooth_potential(pf, 0.2, spec, ham)
    x = pf.grid.coords
    off = np.linalg.norm(x, axis=1) >= 0.2
    p = v.evaluate.grad(x[off])
    H = np.einsum("ni,nij,nj->n", p, ham.alpha(x[off]), p) + np.einsum("ni,ni->n", ham.b(x[off]), p)
    assert abs(-H.max() - v.params["eta"]) <= 1e-8


def test_smooth_potential_resolution_limit():
    spec = STOCK["disk"].problem()
    grid = build_grid(spec.domain, 1 / 40)
    ham = frozen_at_level(spec, 2.0)
    pf = solve_dijkstra(ham, grid, 2)
    with pytest.raises(B.SearchFailed) as exc:
        B.smooth_potential(pf, 1e-3, spec, ham)
    assert exc.value.candidate is not None and not exc.value.candidate.verified


def test_smooth_potential_radius_range(s1a_pf):
    spec, ham, pf = s1a_pf
    with pytest.raises(ValueError):
        B.smooth_potential(pf, 0.6, spec, ham)


# ---------------------------------------------------------------- w_short

def test_d_eps_value(s1a_pf):
    spec, ham, pf = s1a_pf
    v = B.smooth_potential(pf, 0.05, spec, ham)
    c = B.barrier_w_short(v, 0.3, 0.05, 0.02, spec)
    assert c.params["d_eps"] == pytest.approx(100 * np.exp(-5), rel=1e-12)
    assert c.params["d_eps"] == pytest.approx(0.6738, abs=1e-4)


@pytest.fixture(scope="module")
def w_short(s1a_pf):
    spec, ham, pf = s1a_pf
    return B.search_w_short(pf, spec, ham, 0.3, 0.05, 0.02)


def test_w_short_verified(w_short):
    assert w_short.verified, "\n".join(w_short.lines())
    for rep in w_short.residuals.values():
        assert rep.margin.min() >= -1e-8


def test_w_short_margin_violated(s1a_pf):
    spec, ham, pf = s1a_pf
    v = B.smooth_potential(pf, 0.05, spec, ham)
    with pytest.raises(B.MarginViolated):
        B.barrier_w_short(v, 0.4, 0.05, 0.02, spec)


def test_w_short_replay(w_short, s1a_pf):
    spec, _, _ = s1a_pf
    ch = B.replay_w_short(w_short, spec)
    assert ch.passed, ch.line()


def test_w_short_csv(tmp_path, w_short):
    w_short.to_csv(tmp_path / "w.csv")
    rows = (tmp_path / "w.csv").read_text().splitlines()
    assert rows[0].startswith("# kind,w_short")
    assert rows[1] == "check,sample,x,t,residual,bound,pass"


# ---------------------------------------------------------------- w_m and z_long

@pytest.fixture(scope="module")
def w_m(s1a_pf):
    spec, ham, pf = s1a_pf
    return B.make_w_m(pf, 0.7, spec, ham)


def test_w_m_verified(w_m):
    assert w_m.verified, "\n".join(w_m.lines())
    assert w_m.params["eta"] > 0
    vals = w_m.extra["values"]
    assert vals.max() < 0.7 and vals.min() > 0


def test_w_m_margin(s1a_pf):
    spec, ham, pf = s1a_pf
    for m in (0.45, 0.3):
        with pytest.raises(B.MarginViolated):
            B.make_w_m(pf, m, spec, ham)


def test_z_long_margin(s1a_pf, w_m):
    spec, ham, pf = s1a_pf
    v = B.smooth_potential(pf, 0.05, spec, ham)
    with pytest.raises(B.MarginViolated):
        B.barrier_z_long(v, w_m, 0.7, 0.05, 0.02, spec)


def _fixed_z(s1a_pf, eps):
    spec, ham, pf = s1a_pf
    wm = B.make_w_m(pf, 0.7, spec, ham, cap=0.6, running=(0.01,), scales=(1.0,))
    v = B.BarrierCandidate("v_smooth", dict(r=0.02, mu=0.01), B.build_smooth(pf, 0.01, pf.grid.h),
                           extra=dict(pf=pf, ham=ham))
    return B.barrier_z_long(v, wm, 0.7, 0.02, eps, spec)


def test_z_long_signs(s1a_pf):
    for eps in (0.05, 0.02, 0.01):
        c = _fixed_z(s1a_pf, eps)
        assert c.extra["values"].max() < 0
        assert all(ch.passed for ch in c.checks), "\n".join(c.lines())


def test_z_long_origin_tends_to_zero(s1a_pf):
    z0 = [_fixed_z(s1a_pf, eps).params["z0"] for eps in (0.05, 0.02, 0.01)]
    assert all(z < 0 for z in z0)
    assert z0[0] < z0[1] < z0[2]


def test_z_long_residual(s1a_pf):
    spec, ham, pf = s1a_pf
    c = B.search_z_long(pf, spec, ham, 0.7, 0.02, 0.02)
    assert c.verified


def test_z_long_replay(s1a_pf):
    spec, ham, pf = s1a_pf
    checks = B.replay_z_long(spec, pf, ham, 0.7, 0.05)
    assert all(c.passed for c in checks), [c.line() for c in checks]


def test_one_sided_checks_on_exact_cost(s1a_pf):
    # w = 1 - V has H(x, -Dw) = H(x, DV) = 0 up to differencing error
    spec, ham, pf = s1a_pf
    ids, Hmin, sec = B.one_sided_checks(pf.grid, 1 - pf.values, ham)
    assert np.abs(Hmin).max() < 1e-2
    np.testing.assert_allclose(sec, -1.0, atol=1e-6)
