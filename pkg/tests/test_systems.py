import math

import numpy as np
import pytest

from nscbf import dual as du
from nscbf.systems import (
    InputPolytope,
    make_inverted_pendulum,
    make_quadpend,
    perturb_dynamics,
    polytope_vertices,
    quadpend_mixer,
    rho_quadpend,
    _rotation_rows,
    _axis_terms,
)

MG = 0.84 * 9.81


def fd_jac(fn, X, h=1e-6):
    n = X.shape[-1]
    cols = []
    for i in range(n):
        e = np.zeros_like(X)
        e[..., i] = h
        cols.append((np.asarray(fn(X + e)) - np.asarray(fn(X - e))) / (2 * h))
    return np.stack(cols, axis=-1)


class TestInvertedPendulum:
    def test_equilibrium_and_rho(self):
        sys = make_inverted_pendulum()
        np.testing.assert_allclose(sys.f(np.zeros((1, 2)))[0], 0.0)
        assert sys.rho(np.zeros((1, 2)))[0] == pytest.approx(-(math.pi / 4) ** 2)

    def test_gravity_term(self):
        sys = make_inverted_pendulum()
        x = np.array([[math.pi / 4, 0.0]])
        assert sys.f(x)[0, 1] == pytest.approx(9.81 * math.sin(math.pi / 4))
        assert sys.f(x)[0, 1] == pytest.approx(6.9367, abs=1e-4)

    def test_input_interval(self):
        sys = make_inverted_pendulum()
        v = polytope_vertices(sys.input_polytope)
        np.testing.assert_allclose(sorted(v[:, 0]), [-6.0, 6.0])


class TestQuadpend:
    def test_origin_is_equilibrium(self):
        sys = make_quadpend()
        xdot = sys.f(np.zeros((1, 10)))[0]
        assert np.linalg.norm(xdot) < 1e-9

    def test_rotation_identity_at_zero(self):
        rows = _rotation_rows(0.0, 0.0, 0.0)
        R = np.array(rows, dtype=float)
        np.testing.assert_allclose(R, np.eye(3), atol=1e-15)

    def test_axis_terms_at_zero(self):
        kx, ky, kz = _axis_terms(0.0, 0.0, 0.0)
        assert (kx, ky, kz) == (0.0, 0.0, 1.0)

    def test_rho_values(self):
        assert rho_quadpend(np.zeros((1, 10)))[0] == pytest.approx(
            -(math.pi / 4) ** 2)
        assert rho_quadpend(np.zeros((1, 10)))[0] == pytest.approx(-0.61685, abs=1e-5)
        x = np.zeros((1, 10))
        x[0, 3] = math.pi / 2  # pendulum roll 90 deg
        assert rho_quadpend(x)[0] == pytest.approx(
            (math.pi / 2) ** 2 - (math.pi / 4) ** 2)

    def test_inertia_scale_validation(self):
        with pytest.raises(ValueError):
            make_quadpend(inertia_scale=0.0)

    def test_feature_map_dimensions_and_linearity_in_rates(self):
        sys = make_quadpend()
        rng = np.random.default_rng(0)
        X = rng.uniform(-0.5, 0.5, size=(4, 10))
        F = sys.psi(X)
        assert F.shape == (4, 11)
        # angles pass through
        np.testing.assert_allclose(F[:, :5], X[:, :5])
        # doubling rates doubles the velocity features
        X2 = X.copy()
        X2[:, 5:] *= 2.0
        F2 = sys.psi(X2)
        np.testing.assert_allclose(F2[:, 5:], 2 * F[:, 5:], rtol=1e-12)

    def test_feature_map_matches_fd_of_axes(self):
        # velocity features equal d/dt of the axis vectors
        sys = make_quadpend()
        rng = np.random.default_rng(1)
        x = rng.uniform(-0.5, 0.5, size=(1, 10))
        h = 1e-7

        def axes(xa):
            kx, ky, kz = _axis_terms(xa[..., 0], xa[..., 1], xa[..., 2])
            pa = np.stack([np.sin(xa[..., 4]),
                           -np.sin(xa[..., 3]) * np.cos(xa[..., 4]),
                           np.cos(xa[..., 3]) * np.cos(xa[..., 4])], axis=-1)
            return np.concatenate([np.stack([kx, ky, kz], axis=-1), pa], axis=-1)

        xp = x.copy()
        xp[:, :5] += h * x[:, 5:]
        xm = x.copy()
        xm[:, :5] -= h * x[:, 5:]
        vel_fd = (axes(xp) - axes(xm)) / (2 * h)
        F = sys.psi(x)
        np.testing.assert_allclose(F[:, 5:], vel_fd, rtol=1e-6, atol=1e-9)


class TestPolytope:
    def test_vertex_count_and_corners(self):
        p = quadpend_mixer()
        V = p.vertices()
        assert V.shape == (16, 4)
        np.testing.assert_allclose(V[0], [-MG, 0, 0, 0], atol=1e-12)
        np.testing.assert_allclose(V[-1], [16.0 - MG, 0, 0, 0], atol=1e-12)

    def test_vertices_inside_set(self):
        p = quadpend_mixer()
        assert np.all(p.contains(p.vertices()))

    def test_interior_points_strictly_inside(self):
        p = quadpend_mixer()
        rng = np.random.default_rng(2)
        v = rng.uniform(0.05, 0.95, size=(100, 4))
        u = v @ p.mixer.T - p.offset
        vv = np.linalg.solve(p.mixer, (u + p.offset).T).T
        assert np.all((vv > 0) & (vv < 1))


class TestDerivatives:
    @pytest.mark.parametrize("make", [make_inverted_pendulum, make_quadpend])
    def test_rho_grad_matches_fd(self, make):
        sys = make()
        rng = np.random.default_rng(3)
        X = rng.uniform(sys.domain_lo * 0.8, sys.domain_hi * 0.8, size=(50, sys.n))
        g = sys.rho_grad(X)
        g_fd = fd_jac(sys.rho, X)
        np.testing.assert_allclose(g, g_fd, rtol=1e-5, atol=1e-8)

    @pytest.mark.parametrize("make", [make_inverted_pendulum, make_quadpend])
    def test_f_jacobian_matches_fd(self, make):
        sys = make()
        rng = np.random.default_rng(4)
        X = rng.uniform(sys.domain_lo * 0.5, sys.domain_hi * 0.5, size=(10, sys.n))
        J = du.jacobian(sys.f, X)
        J_fd = fd_jac(sys.f, X)
        np.testing.assert_allclose(J, J_fd, rtol=1e-5, atol=1e-7)

    @pytest.mark.parametrize("make", [make_inverted_pendulum, make_quadpend])
    def test_relative_degree_two(self, make):
        # grad rho . g == 0 everywhere sampled
        sys = make()
        rng = np.random.default_rng(5)
        X = rng.uniform(sys.domain_lo, sys.domain_hi, size=(10_000, sys.n))
        g = sys.rho_grad(X)
        gm = np.asarray(sys.g(X))
        lg = np.einsum("bi,bij->bj", g, gm)
        assert np.max(np.abs(lg)) < 1e-10

    def test_rho_dot_matches_fd(self):
        sys = make_quadpend()
        rng = np.random.default_rng(6)
        X = rng.uniform(sys.domain_lo * 0.5, sys.domain_hi * 0.5, size=(20, 10))
        rd = sys.rho_dot(X)
        h = 1e-7
        fX = np.asarray(sys.f(X))
        rd_fd = (sys.rho(X + h * fX) - sys.rho(X - h * fX)) / (2 * h)
        np.testing.assert_allclose(rd, rd_fd, rtol=1e-5, atol=1e-8)


class TestPerturb:
    def test_zero_noise_identity(self):
        sys = make_inverted_pendulum()
        sys2 = perturb_dynamics(sys, 0.0)
        assert sys2.noise_stddev == 0.0
        X = np.array([[0.1, 0.2]])
        np.testing.assert_array_equal(np.asarray(sys.f(X)), np.asarray(sys2.f(X)))

    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError):
            perturb_dynamics(make_inverted_pendulum(), -0.1)

    def test_noise_variance(self):
        rng = np.random.default_rng(7)
        sd = 2.5
        w = rng.normal(0.0, sd, size=1_000_000)
        assert np.var(w) == pytest.approx(sd ** 2, rel=0.01)


def test_linearize_quadpend_shapes():
    sys = make_quadpend()
    A, B = sys.linearize()
    assert A.shape == (10, 10)
    assert B.shape == (10, 4)
    # rate integration block
    np.testing.assert_allclose(A[:5, 5:], np.eye(5), atol=1e-12)
    # pendulum is not directly actuated at the origin
    np.testing.assert_allclose(B[8:, :], 0.0, atol=1e-12)
