import numpy as np
import pytest

from nscbf.cbf import CbfParams, NeuralCbf
from nscbf.mlp import MlpParams
from nscbf.risk import (
    SeverityStats,
    risk_grad_theta,
    risk_grad_x,
    risk_values,
    saturation_risk,
    severity_stats,
    stats_of_risks,
)
from nscbf.systems import make_inverted_pendulum, make_quadpend


def toy_setup(seed=0, hidden=(8, 8)):
    sys = make_inverted_pendulum()
    p = CbfParams.init(sys, hidden, np.random.default_rng(seed))
    return p, sys, NeuralCbf(p, sys)


class TestValue:
    def test_zero_gradient_gives_zero_value(self):
        # constant net at the origin: grad phi_star = 0, so the risk is 0
        sys = make_inverted_pendulum()
        p = CbfParams(MlpParams.zeros([2, 4, 1]), np.array([0.005]))
        ev = saturation_risk(p, sys, np.zeros(2))
        assert ev.value == 0.0
        assert ev.attaining_vertex == 0  # all-equal tie takes index 0

    def test_toy_closed_form_min_of_two_vertices(self):
        p, sys, cbf = toy_setup(1)
        rng = np.random.default_rng(2)
        X = rng.uniform(sys.domain_lo, sys.domain_hi, size=(200, 2))
        vals, idx = risk_values(cbf, X)
        lo = cbf.phi_star_dot(X, np.full((200, 1), -6.0))
        hi = cbf.phi_star_dot(X, np.full((200, 1), 6.0))
        np.testing.assert_allclose(vals, np.minimum(lo, hi), rtol=1e-12)
        np.testing.assert_array_equal(idx, np.where(lo <= hi, 0, 1))

    @pytest.mark.parametrize("make,seed", [(make_inverted_pendulum, 3),
                                           (make_quadpend, 4)])
    def test_affinity_lower_bound(self, make, seed):
        # vertex minimum bounds phi_star_dot at any interior input
        sys = make()
        rng = np.random.default_rng(seed)
        p = CbfParams.init(sys, (8, 8), rng)
        cbf = NeuralCbf(p, sys)
        X = rng.uniform(sys.domain_lo * 0.7, sys.domain_hi * 0.7,
                        size=(500, sys.n))
        vals, _ = risk_values(cbf, X)
        gphi = cbf.phi_star_grad(X)
        a = np.sum(gphi * np.asarray(sys.f(X)), axis=1)
        Bm = np.einsum("bn,bnm->bm", gphi, np.asarray(sys.g(X)))
        lam = rng.uniform(size=(1000, 2 ** sys.m))
        lam /= lam.sum(axis=1, keepdims=True)
        U = lam @ sys.input_polytope.vertices()    # interior points of U
        per = a[:, None] + Bm @ U.T
        assert np.all(vals[:, None] <= per + 1e-9)

    def test_single_state_matches_batch(self):
        p, sys, cbf = toy_setup(5)
        x = np.array([0.4, -1.2])
        ev = saturation_risk(p, sys, x, want_grad_x=True, want_grad_theta=True)
        vals, idx = risk_values(cbf, x[None, :])
        assert ev.value == vals[0] and ev.attaining_vertex == idx[0]
        assert ev.grad_x.shape == (2,)
        assert ev.grad_theta.shape == (p.n_params,)


class TestGradients:
    @pytest.mark.parametrize("make,seed", [(make_inverted_pendulum, 6),
                                           (make_quadpend, 7)])
    def test_grad_x_matches_fd(self, make, seed):
        sys = make()
        rng = np.random.default_rng(seed)
        p = CbfParams.init(sys, (8, 8), rng)
        cbf = NeuralCbf(p, sys)
        X = rng.uniform(sys.domain_lo * 0.5, sys.domain_hi * 0.5,
                        size=(20, sys.n))
        vals, idx = risk_values(cbf, X)
        g = risk_grad_x(cbf, X, idx)
        h = 1e-6
        for i in range(sys.n):
            e = np.zeros((1, sys.n))
            e[0, i] = h
            # hold the attaining vertex fixed while differencing
            u = sys.input_polytope.vertices()[idx]
            fp = cbf.phi_star_dot(X + e, u)
            fm = cbf.phi_star_dot(X - e, u)
            fd = (fp - fm) / (2 * h)
            sel = np.abs(fd) > 1e-6
            np.testing.assert_allclose(g[sel, i], fd[sel], rtol=1e-4, atol=1e-6)

    @pytest.mark.parametrize("variant", ["xe", "softplus"])
    def test_grad_theta_matches_fd(self, variant):
        sys = make_inverted_pendulum()
        rng = np.random.default_rng(8)
        p = CbfParams.init(sys, (5, 4), rng)
        cbf = NeuralCbf(p, sys, rho_star_variant=variant)
        X = rng.uniform(sys.domain_lo * 0.8, sys.domain_hi * 0.8, size=(8, 2))
        vals, idx = risk_values(cbf, X)
        g = risk_grad_theta(cbf, X, idx)
        u = sys.input_polytope.vertices()[idx]
        flat = p.flatten()
        h = 1e-6
        for k in range(0, p.n_params, 5):
            e = np.zeros_like(flat)
            e[k] = h
            pp = CbfParams.unflatten(p.mlp.layer_sizes, 1, flat + e)
            pm = CbfParams.unflatten(p.mlp.layer_sizes, 1, flat - e)
            fp = NeuralCbf(pp, sys, rho_star_variant=variant).phi_star_dot(X, u)
            fm = NeuralCbf(pm, sys, rho_star_variant=variant).phi_star_dot(X, u)
            np.testing.assert_allclose(g[:, k], (fp - fm) / (2 * h),
                                       rtol=1e-4, atol=1e-8)

    def test_grad_theta_quadpend_feature_map_fd(self):
        sys = make_quadpend()
        rng = np.random.default_rng(9)
        p = CbfParams.init(sys, (6,), rng)
        cbf = NeuralCbf(p, sys)
        X = rng.uniform(sys.domain_lo * 0.3, sys.domain_hi * 0.3, size=(3, 10))
        vals, idx = risk_values(cbf, X)
        g = risk_grad_theta(cbf, X, idx)
        u = sys.input_polytope.vertices()[idx]
        flat = p.flatten()
        h = 1e-6
        for k in list(range(0, p.n_params - 1, 17)) + [p.n_params - 1]:
            e = np.zeros_like(flat)
            e[k] = h
            pp = CbfParams.unflatten(p.mlp.layer_sizes, 1, flat + e)
            pm = CbfParams.unflatten(p.mlp.layer_sizes, 1, flat - e)
            fp = NeuralCbf(pp, sys).phi_star_dot(X, u)
            fm = NeuralCbf(pm, sys).phi_star_dot(X, u)
            np.testing.assert_allclose(g[:, k], (fp - fm) / (2 * h),
                                       rtol=1e-4, atol=1e-8)


class TestSeverity:
    def test_all_nonsaturating(self):
        s = stats_of_risks(np.array([-1.0, -0.5, 0.0]))
        assert s == SeverityStats(0.0, 0.0, 100.0, 0)

    def test_mean_two_stddev_one(self):
        s = stats_of_risks(np.array([1.0, 3.0, -2.0]))
        assert s.mean == pytest.approx(2.0)
        assert s.stddev == pytest.approx(1.0)  # population convention
        assert s.n_saturating == 2
        assert s.pct_nonsaturating == pytest.approx(100.0 / 3)

    def test_severity_stats_end_to_end(self):
        p, sys, cbf = toy_setup(10)
        rng = np.random.default_rng(11)
        X = rng.uniform(sys.domain_lo, sys.domain_hi, size=(100, 2))
        s = severity_stats(p, sys, X)
        vals, _ = risk_values(cbf, X)
        assert s.pct_nonsaturating == pytest.approx(100.0 * np.mean(vals <= 0))

    def test_empty_rejected(self):
        p, sys, _ = toy_setup(12)
        with pytest.raises(ValueError):
            severity_stats(p, sys, np.zeros((0, 2)))


def test_determinism():
    p, sys, cbf = toy_setup(13)
    X = np.array([[0.3, 1.0], [-0.5, 0.2]])
    a1 = risk_values(cbf, X)
    a2 = risk_values(cbf, X)
    assert np.array_equal(a1[0], a2[0]) and np.array_equal(a1[1], a2[1])
    assert np.array_equal(risk_grad_theta(cbf, X), risk_grad_theta(cbf, X))
