import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metastab import model as M
from metastab.domain import build_grid
from metastab.scenarios import STOCK

from conftest import s1_spec


def checks(rep):
    return {c.name: c for c in rep.checks}


def test_validate_s1_passes():
    spec = s1_spec()
    rep = M.validate(spec, build_grid(spec.domain, 1e-2))
    assert rep.passed
    # b.nu at the two ends
    np.testing.assert_allclose(spec.drift(np.array([[-1.0], [2.0]]))[:, 0] * [-1, 1], [-1, -2])


def test_validate_flipped_drift():
    spec = s1_spec(k=-1.0)
    ch = checks(M.validate(spec, build_grid(spec.domain, 1e-2)))
    assert ch["b-inward"].passed is False
    assert ch["borigin"].passed is False
    assert ch["blip"].passed is True


def test_validate_ellipticity_failure():
    spec = s1_spec()
    spec = M.ProblemSpec(spec.domain, spec.drift, M.DiffusionField(M.affine_diffusion(1.0, 2.0), 0.5), spec.boundary)
    ch = checks(M.validate(spec, build_grid(spec.domain, 1e-2)))
    assert ch["ellipticity"].passed is False
    # worst point reported at c = 1
    assert ch["ellipticity"].worst[-1] == pytest.approx(1.0)


def test_g_astable_assumed():
    spec = s1_spec()
    assert checks(M.validate(spec, build_grid(spec.domain, 1e-2)))["g-astable"].passed is None


def test_hamiltonian_examples():
    spec = s1_spec()
    assert M.hamiltonian(spec, 0.5, 0.3, 0.5) == pytest.approx(0.0, abs=1e-15)
    assert M.hamiltonian(spec, 0.7, 0.0, 0.0) == 0.0
    assert M.hamiltonian(spec, 1.0, 0.0, -1.0) == pytest.approx(2.0)


def test_lagrangian_examples():
    spec = s1_spec()
    assert M.lagrangian(spec, 0.5, 0.0, -0.5) == pytest.approx(0.0)
    assert M.lagrangian(spec, 0.5, 0.0, 0.5) == pytest.approx(0.25)


def test_legendre_duality(rng, s3):
    # brute-force sup_p [p.q - H] against the closed form
    for spec in (s1_spec(), s3):
        n = spec.dim
        for _ in range(10):
            x = rng.uniform(-0.5, 0.5, n)
            q = rng.uniform(-1, 1, n)
            p1 = np.linspace(-4, 4, 2001 if n == 1 else 401)
            P = p1[:, None] if n == 1 else np.stack(np.meshgrid(p1, p1), -1).reshape(-1, 2)
            X = np.broadcast_to(x, P.shape)
            val = (P @ q - M.hamiltonian(spec, X, 0.0, P)).max()
            assert abs(val - M.lagrangian(spec, x if n > 1 else x[0], 0.0, q if n > 1 else q[0])) < 1e-3


vec = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(vec, vec, vec, st.floats(0, 1), st.floats(0, 1))
def test_convex_in_p(x, p1, p2, t, c):
    spec = STOCK["ramp"].problem()
    X = np.array([x / 3])
    a, b = np.array([p1]), np.array([p2])
    lhs = M.hamiltonian(spec, X, c, t * a + (1 - t) * b)
    rhs = t * M.hamiltonian(spec, X, c, a) + (1 - t) * M.hamiltonian(spec, X, c, b)
    assert lhs[0] <= rhs[0] + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), vec, vec, st.floats(0, 3))
def test_coercive(x, y, p, q, c):
    spec = STOCK["disk"].problem()
    X = np.array([[x, y]]) / np.sqrt(2)
    P = np.array([[p, q]])
    H = M.hamiltonian(spec, X, c, P)[0]
    th = spec.diffusion.theta0
    assert H >= th * (P @ P.T)[0, 0] - np.linalg.norm(spec.drift(X)) * np.linalg.norm(P) - 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 2), vec, st.floats(0, 1))
def test_lagrangian_nonnegative(x, q, c):
    spec = s1_spec()
    L = M.lagrangian(spec, x, c, q)
    assert L >= 0
    assert M.lagrangian(spec, x, c, -x) <= 1e-12


def test_boundary_summary():
    spec = s1_spec()
    s = spec.boundary.summary(build_grid(spec.domain, 1e-2))
    assert (s["g_min"], s["g_max"], s["g1"], s["g2"], s["c0"]) == pytest.approx((0, 1, 0, 1, 0))


def test_one_by_one_matrices():
    a = M.constant_diffusion(2.0)(np.zeros((3, 1)), np.zeros(3))
    assert a.shape == (3, 1, 1)
