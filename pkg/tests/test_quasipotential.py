import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from metastab import model as M
from metastab.domain import ON_BOUNDARY, build_grid, shrink
from metastab.quasipotential import (DeltaTooLarge, FrozenHamiltonian, SweepConfig, edge_cost, frozen_at_level,
                                     perturbed_family, solve_dijkstra, solve_sweeping, theta_delta)

from conftest import s1_spec


@pytest.fixture(scope="module")
def s1():
    return s1_spec()


def test_edge_cost_against_flow(s1):
    ham = frozen_at_level(s1, 0.0)
    c = edge_cost(ham, [0.5], [0.6])
    assert c == pytest.approx(0.055, abs=1e-12)
    # independent: minimize tau L(m, v/tau) over the traversal time
    m, v = 0.55, 0.1
    res = minimize_scalar(lambda tau: tau * M.lagrangian(s1, m, 0.0, v / tau), bounds=(1e-6, 1e3), method="bounded",
                          options=dict(xatol=1e-12))
    assert res.fun == pytest.approx(c, rel=1e-6)


def test_edge_cost_with_flow(s1):
    assert edge_cost(frozen_at_level(s1, 0.0), [0.6], [0.5]) <= 1e-15


def test_edge_cost_orthogonal(s3):
    ham = frozen_at_level(s3, 2.0)
    x, y = np.array([0.2, -0.05]), np.array([0.2, 0.05])  # midpoint (0.2, 0), b = (-0.2, 0) orthogonal to v
    bm = np.array([-0.2, 0.0])
    assert edge_cost(ham, x, y) == pytest.approx(0.5 * np.sqrt(0.01 * bm @ bm))


def test_dijkstra_s1(s1):
    g = build_grid(s1.domain, 1e-3)
    pf = solve_dijkstra(frozen_at_level(s1, 0.0), g)
    assert np.abs(pf.values - g.coords[:, 0] ** 2 / 2).max() <= 5e-3
    assert pf.values[g.origin] == 0.0
    bv = dict(zip(np.round(g.samples[:, 0], 9), pf.boundary))
    assert bv[-1.0] == pytest.approx(0.5, abs=5e-3)
    assert bv[2.0] == pytest.approx(2.0, abs=5e-3)


def test_dijkstra_s3(s3):
    g = build_grid(s3.domain, 1 / 160)
    pf = solve_dijkstra(frozen_at_level(s3, 2.0), g, stencil=2)
    x, y = g.coords.T
    assert np.abs(pf.values - (x ** 2 / 2 + y ** 2)).max() <= 2e-2


def test_potential_invariants(s3):
    g = build_grid(s3.domain, 1 / 40)
    ham = frozen_at_level(s3, 2.0)
    pf = solve_dijkstra(ham, g)
    V = pf.values
    assert V[g.origin] == 0
    assert np.all(np.delete(V, g.origin) > 0)
    lam = pf.lipschitz_bound(ham)
    nb = g.neighbors
    for k in range(nb.shape[1]):
        ok = nb[:, k] >= 0
        assert np.all(np.abs(V[ok] - V[nb[ok, k]]) <= lam * g.h + 1e-12)


def test_sweeping_s1(s1):
    g = build_grid(s1.domain, 1e-3)
    ham = frozen_at_level(s1, 0.0)
    ps = solve_sweeping(ham, g, SweepConfig(tol=1e-8))
    assert ps.values[g.origin] == 0.0
    assert np.abs(ps.values - g.coords[:, 0] ** 2 / 2).max() <= 1e-2
    assert np.abs(ps.values - solve_dijkstra(ham, g).values).max() <= 1e-2


@pytest.mark.slow
def test_sweeping_s3(s3):
    g = build_grid(s3.domain, 1 / 160)
    ham = frozen_at_level(s3, 2.0)
    assert np.abs(solve_sweeping(ham, g).values - solve_dijkstra(ham, g).values).max() <= 3e-2


def test_disagreement_shrinks_under_refinement(s1):
    ham = frozen_at_level(s1, 0.0)
    d = []
    for h in (8e-3, 4e-3, 2e-3):
        g = build_grid(s1.domain, h)
        d.append(np.abs(solve_dijkstra(ham, g).values - solve_sweeping(ham, g).values).max())
    assert d[1] <= 1.1 * d[0] and d[2] <= 1.1 * d[1]
    assert d[2] < d[0]


def test_monotone_in_alpha(s1):
    g = build_grid(s1.domain, 4e-3)
    h1 = frozen_at_level(s1, 0.0)
    h2 = FrozenHamiltonian(lambda x: 2.0 * h1.alpha(x), h1.b, 0.5, s1.domain)
    for solve in (solve_dijkstra, solve_sweeping):
        assert np.all(solve(h1, g).values >= solve(h2, g).values - 1e-12)


def test_deterministic(s3):
    g = build_grid(s3.domain, 1 / 40)
    ham = frozen_at_level(s3, 2.0)
    np.testing.assert_array_equal(solve_dijkstra(ham, g).values, solve_dijkstra(ham, g).values)
    np.testing.assert_array_equal(solve_sweeping(ham, g).values, solve_sweeping(ham, g).values)


def test_perturbed_family_example(s2):
    g = build_grid(s2.domain, 2e-3)
    delta = 1 / 9  # theta(delta) = delta / (1 + delta) = 0.1
    hp, hm = perturbed_family(s2, 0.0, delta, g)
    assert hp.meta["theta_delta"] == pytest.approx(0.1, abs=1e-3)
    ids = shrink(g, delta)
    np.testing.assert_allclose(hp.alpha(g.coords[ids])[:, 0, 0], 1 + hp.meta["theta_delta"], atol=1e-12)
    far = g.coords[g.sd > -delta / 2]
    np.testing.assert_allclose(hp.alpha(far)[:, 0, 0], 1 / s2.diffusion.theta0)
    np.testing.assert_allclose(hm.alpha(far)[:, 0, 0], s2.diffusion.theta0)
    x = g.coords[ids]
    for c in np.linspace(0, delta, 9):
        a = s2.diffusion(x, c)[:, 0, 0]
        assert np.all(hm.alpha(x)[:, 0, 0] <= a + 1e-12) and np.all(a <= hp.alpha(x)[:, 0, 0] + 1e-12)


def test_theta_zero_for_level_free_a(s1):
    g = build_grid(s1.domain, 1e-2)
    assert theta_delta(s1, 0.0, 0.3, g.coords) == 0.0
    hp, hm = perturbed_family(s1, 0.0, 0.3, g)
    inner = g.coords[shrink(g, 0.3)]
    np.testing.assert_allclose(hp.alpha(inner), s1.diffusion(inner, 0.0))


def test_delta_too_large(s2):
    with pytest.raises(DeltaTooLarge):
        perturbed_family(s2, 0.0, 0.9, build_grid(s2.domain, 1e-2))


def test_bracketing_gaps_shrink(s2):
    g = build_grid(s2.domain, 2e-3)
    M0 = solve_dijkstra(frozen_at_level(s2, 0.0), g).M
    gp, gm = [], []
    for j in range(5):
        hp, hm = perturbed_family(s2, 0.0, 0.2 * 2.0 ** -j, g)
        Mp, Mm = solve_dijkstra(hp, g).M, solve_dijkstra(hm, g).M
        assert Mp <= M0 <= Mm
        gp.append(M0 - Mp)
        gm.append(Mm - M0)
    assert all(b <= a + 1e-3 for a, b in zip(gp, gp[1:]))
    assert all(b <= a + 1e-3 for a, b in zip(gm, gm[1:]))


def test_csv(tmp_path, s1):
    g = build_grid(s1.domain, 1e-2)
    pf = solve_dijkstra(frozen_at_level(s1, 0.0), g)
    pf.to_csv(tmp_path / "v.csv")
    assert len((tmp_path / "v.csv").read_text().splitlines()) >= g.n_nodes
