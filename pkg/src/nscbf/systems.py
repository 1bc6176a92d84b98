"""Concrete control-affine systems: 2D inverted pendulum and the
10D quadcopter-pendulum.

Each system exposes dual-capable evaluators (f, g, rho, psi), so any
derivative the trainer or simulator needs can be taken with forward
sweeps from :mod:`nscbf.dual`. The quadcopter-pendulum follows the
rigid-body model with roll-pitch-yaw quadcopter orientation, a roll-pitch
pendulum, a rotor mixer matrix, and a thrust offset that places the
equilibrium at the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import dual as du
from .dual import Dual, acos_sq, cos, dstack, sin, tan, value_of


@dataclass(frozen=True)
class InputPolytope:
    """Admissible input set: u = M v - offset for v in the unit box."""

    mixer: np.ndarray   # (m, m)
    offset: np.ndarray  # (m,)

    @property
    def m(self) -> int:
        return self.offset.shape[0]

    def vertices(self) -> np.ndarray:
        """All 2^m corner images, ordered by the binary index of the corner
        (bit j of the index is coordinate j of v)."""
        m = self.m
        idx = np.arange(2 ** m)
        corners = ((idx[:, None] >> np.arange(m)[None, :]) & 1).astype(float)
        return corners @ self.mixer.T - self.offset

    def contains(self, u, tol=1e-9) -> np.ndarray:
        """Membership check via the box preimage (mixer must be invertible)."""
        v = np.linalg.solve(self.mixer, (np.atleast_2d(u) + self.offset).T).T
        return np.all((v >= -tol) & (v <= 1.0 + tol), axis=1)


def polytope_vertices(p: InputPolytope) -> np.ndarray:
    return p.vertices()


@dataclass(frozen=True)
class SystemModel:
    """Control-affine system bundle: xdot = f(x) + g(x) u."""

    name: str
    n: int
    m: int
    r: int
    f: Callable            # X (..., n) -> (..., n), dual-capable
    g: Callable            # X (B, n) -> (B, n, m), dual-capable
    rho: Callable          # X (..., n) -> (...,), dual-capable
    x_e: np.ndarray
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    input_polytope: InputPolytope
    psi: Optional[Callable]  # feature map before the net (None = identity)
    psi_dim: int
    params: dict = field(default_factory=dict)
    noise_stddev: float = 0.0

    def rho_grad(self, X):
        return du.grad(self.rho, np.asarray(X, dtype=float))

    def rho_dot(self, X):
        """d rho / dt along the drift (input term vanishes below order r)."""
        X = np.asarray(X, dtype=float) if not isinstance(X, Dual) else X
        return du.lie_derivative(self.rho, self.f, X)

    def linearize(self):
        """(A, B) of the dynamics at x_e."""
        x0 = self.x_e[None, :]
        A = du.jacobian(self.f, x0)[0]
        B = value_of(self.g(x0))[0]
        return A, B

    def sample_domain(self, n_samples: int, rng: np.random.Generator):
        return rng.uniform(self.domain_lo, self.domain_hi,
                           size=(n_samples, self.n))


def perturb_dynamics(sys: SystemModel, noise_stddev: float) -> SystemModel:
    """Copy of the system whose rollouts add N(0, stddev^2 I) to xdot per
    integration step. Training always uses the nominal model."""
    if noise_stddev < 0:
        raise ValueError("noise_stddev must be >= 0")
    return replace(sys, noise_stddev=float(noise_stddev))


# ---------------------------------------------------------------------------
# 2D toy inverted pendulum
# ---------------------------------------------------------------------------

def make_inverted_pendulum(m_p: float = 1.0, length: float = 1.0,
                           g_grav: float = 9.81, u_max: float = 6.0,
                           theta_max: float = math.pi / 4,
                           domain_theta: float = 1.0,
                           domain_omega: float = 3.0) -> SystemModel:
    """theta_dd = (g/l) sin(theta) + u / (m l^2), state (theta, theta_dot).

    Defaults make the limit-blind CBF saturate (gravity at the allowable-set
    edge exceeds the maximum torque) while leaving a nonempty recoverable set.
    """
    inv_ml2 = 1.0 / (m_p * length ** 2)
    w_nat = g_grav / length

    def f(X):
        return dstack([X[..., 1], w_nat * sin(X[..., 0])], axis=-1)

    def g(X):
        th = X[..., 0]
        zero = th * 0.0
        col = dstack([zero, zero + inv_ml2], axis=-1)
        return dstack([col], axis=-1)  # (B, 2, 1)

    def rho(X):
        return X[..., 0] * X[..., 0] - theta_max ** 2

    poly = InputPolytope(mixer=np.array([[2.0 * u_max]]),
                         offset=np.array([u_max]))
    return SystemModel(
        name="inverted_pendulum", n=2, m=1, r=2,
        f=f, g=g, rho=rho,
        x_e=np.zeros(2),
        domain_lo=np.array([-domain_theta, -domain_omega]),
        domain_hi=np.array([domain_theta, domain_omega]),
        input_polytope=poly,
        psi=None, psi_dim=2,
        params=dict(m_p=m_p, length=length, g_grav=g_grav,
                    u_max=u_max, theta_max=theta_max),
    )


# ---------------------------------------------------------------------------
# 10D quadcopter-pendulum
# ---------------------------------------------------------------------------

_J_NOMINAL = np.array([0.005, 0.005, 0.009])
_MASS = 0.84
_L_PEND = 0.03
_GRAV = 9.81
_ARM = 0.3 / 2
_K1 = 4.0
_K2 = 0.05


def _axis_terms(gam, bet, alp):
    """kx, ky, kz: world components of the quadcopter's body z-axis."""
    sg, cg = sin(gam), cos(gam)
    sb, cb = sin(bet), cos(bet)
    sa, ca = sin(alp), cos(alp)
    kx = ca * sb * cg + sa * sg
    ky = sa * sb * cg - ca * sg
    kz = cb * cg
    return kx, ky, kz


def _rotation_rows(gam, bet, alp):
    """Rows of R = Rz(alpha) Ry(beta) Rx(gamma)."""
    sg, cg = sin(gam), cos(gam)
    sb, cb = sin(bet), cos(bet)
    sa, ca = sin(alp), cos(alp)
    r00, r01, r02 = ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg
    r10, r11, r12 = sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg
    r20, r21, r22 = -sb, cb * sg, cb * cg
    return ((r00, r01, r02), (r10, r11, r12), (r20, r21, r22))


def _pend_gain(gam, bet, alp, phi, th, mass, lp):
    """Thrust-to-pendulum-acceleration couplings (h_phi, h_theta)."""
    kx, ky, kz = _axis_terms(gam, bet, alp)
    sphi, cphi = sin(phi), cos(phi)
    sth, cth = sin(th), cos(th)
    h_phi = 1.5 / (mass * lp * cth) * (ky * cphi + kz * sphi)
    h_th = 1.5 / (mass * lp) * (-kx * cth - ky * sphi * sth + kz * cphi * sth)
    return h_phi, h_th


def quadpend_mixer(arm: float = _ARM, k1: float = _K1, k2: float = _K2,
                   mass: float = _MASS, grav: float = _GRAV) -> InputPolytope:
    M = np.array([
        [k1, k1, k1, k1],
        [0.0, -arm * k1, 0.0, arm * k1],
        [arm * k1, 0.0, -arm * k1, 0.0],
        [-k2, k2, -k2, k2],
    ])
    return InputPolytope(mixer=M, offset=np.array([mass * grav, 0, 0, 0]))


def _quadpend_feature_map(X):
    """Angles plus the linear velocities of the quadcopter's vertical body
    axis and of the pendulum tip (unit arms): 10D state -> 11D features."""
    ang = X[..., 0:5]
    rate = X[..., 5:10]

    def quad_axis(a):
        kx, ky, kz = _axis_terms(a[..., 0], a[..., 1], a[..., 2])
        return dstack([kx, ky, kz], axis=-1)

    def pend_axis(a):
        phi, th = a[..., 0], a[..., 1]
        return dstack([sin(th), -sin(phi) * cos(th), cos(phi) * cos(th)],
                      axis=-1)

    v_quad = quad_axis(Dual(ang[..., 0:3], rate[..., 0:3])).dot
    v_pend = pend_axis(Dual(ang[..., 3:5], rate[..., 3:5])).dot
    return dstack([ang[..., 0], ang[..., 1], ang[..., 2], ang[..., 3],
                   ang[..., 4],
                   v_quad[..., 0], v_quad[..., 1], v_quad[..., 2],
                   v_pend[..., 0], v_pend[..., 1], v_pend[..., 2]], axis=-1)


def make_quadpend(inertia_scale: float = 1.0,
                  use_feature_map: bool = True,
                  domain_angle: float = math.pi / 2,
                  domain_rate: float = 6.0) -> SystemModel:
    """10D state (gamma, beta, alpha, phi_p, theta_p; then rates), 4D input
    (F, tau_gamma, tau_beta, tau_alpha) after the +mg thrust shift."""
    if inertia_scale <= 0:
        raise ValueError("inertia_scale must be > 0")
    J = _J_NOMINAL * inertia_scale
    mass, lp, grav = _MASS, _L_PEND, _GRAV

    def f(X):
        gam, bet, alp = X[..., 0], X[..., 1], X[..., 2]
        phi, th = X[..., 3], X[..., 4]
        dphi, dth = X[..., 8], X[..., 9]
        h_phi, h_th = _pend_gain(gam, bet, alp, phi, th, mass, lp)
        cor_phi = 2.0 * dth * dphi * tan(th)
        cor_th = -dphi * dphi * sin(th) * cos(th)
        zero = gam * 0.0
        return dstack([
            X[..., 5], X[..., 6], X[..., 7], dphi, dth,
            zero, zero, zero,
            h_phi * (mass * grav) + cor_phi,
            h_th * (mass * grav) + cor_th,
        ], axis=-1)

    def g(X):
        gam, bet, alp = X[..., 0], X[..., 1], X[..., 2]
        phi, th = X[..., 3], X[..., 4]
        rows = _rotation_rows(gam, bet, alp)
        h_phi, h_th = _pend_gain(gam, bet, alp, phi, th, mass, lp)
        zero = gam * 0.0
        # columns: thrust F, then body torques
        cols = []
        cols.append(dstack([zero] * 8 + [h_phi, h_th], axis=-1))
        for j in range(3):
            tcol = [zero] * 5 + [rows[0][j] / J[j], rows[1][j] / J[j],
                                 rows[2][j] / J[j]] + [zero, zero]
            cols.append(dstack(tcol, axis=-1))
        return dstack(cols, axis=-1)  # (B, 10, 4)

    def rho(X):
        gam, bet = X[..., 0], X[..., 1]
        phi, th = X[..., 3], X[..., 4]
        dp2 = acos_sq(cos(phi) * cos(th))
        return gam * gam + bet * bet + dp2 - (math.pi / 4) ** 2

    lo = np.concatenate([-domain_angle * np.ones(5), -domain_rate * np.ones(5)])
    if use_feature_map:
        psi, psi_dim = _quadpend_feature_map, 11
    else:
        psi, psi_dim = None, 10
    return SystemModel(
        name="quadpend", n=10, m=4, r=2,
        f=f, g=g, rho=rho,
        x_e=np.zeros(10),
        domain_lo=lo, domain_hi=-lo,
        input_polytope=quadpend_mixer(),
        psi=psi, psi_dim=psi_dim,
        params=dict(inertia_scale=inertia_scale, J=J.tolist(), mass=mass,
                    L_p=lp, grav=grav, arm=_ARM, k1=_K1, k2=_K2,
                    use_feature_map=use_feature_map),
    )


def rho_quadpend(X):
    """Standalone safety spec gamma^2 + beta^2 + delta_p^2 - (pi/4)^2."""
    return make_quadpend().rho(np.asarray(X, dtype=float))


def make_system(name: str, **kwargs) -> SystemModel:
    if name == "inverted_pendulum":
        return make_inverted_pendulum(**kwargs)
    if name == "quadpend":
        return make_quadpend(**kwargs)
    raise ValueError(f"unknown system '{name}'")
