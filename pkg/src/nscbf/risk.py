"""Saturation risk: best-case time derivative of the modified barrier.

The risk at a state x is

    L(theta, x) = min_{u in U} d/dt phi_star(x, u),

which by affinity of the dynamics in u is attained at a vertex of the input
polytope. A positive risk means no admissible input can push phi_star
downhill: the barrier saturates the actuators there.

Batched value/gradient routines operate on a NeuralCbf (so the equilibrium
network value is computed once); the free functions match the single-state
interface used by callers outside the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import dual as du
from .dual import Dual
from .cbf import RHO_STAR_XE, CbfParams, NeuralCbf
from .mlp import mlp_forward_dual, mlp_param_gradient_of_directional
from .systems import SystemModel


@dataclass
class RiskEval:
    """Risk value at one state plus the gradients of its attaining branch."""

    value: float
    attaining_vertex: int
    grad_x: Optional[np.ndarray] = None
    grad_theta: Optional[np.ndarray] = None


@dataclass
class SeverityStats:
    """Saturation summary over a sample of boundary states.

    mean/stddev are over the saturating subset only (risk > 0), population
    convention; both are 0 when n_saturating is 0.
    """

    mean: float
    stddev: float
    pct_nonsaturating: float
    n_saturating: int


# -- batched core ----------------------------------------------------------

def risk_values(cbf: NeuralCbf, X, gphi=None):
    """(values, vertex indices) for a batch X (B, n).

    Ties take the lowest vertex index. Passing a precomputed phi_star
    gradient avoids recomputing it.
    """
    X = np.asarray(X, dtype=float)
    if gphi is None:
        gphi = cbf.phi_star_grad(X)
    sys = cbf.sys
    V = sys.input_polytope.vertices()              # (2^m, m)
    a = np.sum(gphi * np.asarray(sys.f(X)), axis=1)
    Bm = np.einsum("bn,bnm->bm", gphi, np.asarray(sys.g(X)))
    per_vertex = a[:, None] + Bm @ V.T             # (B, 2^m)
    idx = np.argmin(per_vertex, axis=1)            # first min = lowest index
    return per_vertex[np.arange(X.shape[0]), idx], idx


def _attaining_direction(cbf: NeuralCbf, X, vertex_idx):
    """d = f(x) + g(x) u* at each state's attaining vertex."""
    sys = cbf.sys
    V = sys.input_polytope.vertices()
    u = V[vertex_idx]                              # (B, m)
    return np.asarray(sys.f(X)) + np.einsum(
        "bnm,bm->bn", np.asarray(sys.g(X)), u)


def risk_grad_x(cbf: NeuralCbf, X, vertex_idx=None):
    """grad_x of the risk, holding the attaining vertex fixed.

    Equals H_phi_star d + J_d^T grad phi_star with d = f + g u*; the first
    term is one dual sweep through phi_star_grad, the second sweeps only the
    dynamics.
    """
    X = np.asarray(X, dtype=float)
    if vertex_idx is None:
        _, vertex_idx = risk_values(cbf, X)
    d = _attaining_direction(cbf, X, vertex_idx)
    hd = cbf.phi_star_grad(Dual(X, d)).dot
    gphi = cbf.phi_star_grad(X)
    sys = cbf.sys
    u = sys.input_polytope.vertices()[vertex_idx]

    def along(Y):
        dy = sys.f(Y) + du.dsum(sys.g(Y) * u[:, None, :], axis=-1) \
            if isinstance(Y, Dual) else \
            np.asarray(sys.f(Y)) + np.einsum("bnm,bm->bn", np.asarray(sys.g(Y)), u)
        return du.dsum(gphi * dy, axis=-1)

    jt = du.grad(along, X)
    return hd + jt


def risk_grad_theta(cbf: NeuralCbf, X, vertex_idx=None):
    """grad_theta of the risk (B, P), attaining vertex held fixed."""
    X = np.asarray(X, dtype=float)
    if vertex_idx is None:
        _, vertex_idx = risk_values(cbf, X)
    d = _attaining_direction(cbf, X, vertex_idx)
    p = cbf.params
    sys = cbf.sys

    # coefficient part: d(risk)/dc1 = grad(rho_dot) . d
    w = du.grad(sys.rho_dot, X)
    dc = np.sum(w * d, axis=1)

    # network part, through the feature map
    feats = X if sys.psi is None else sys.psi(X)
    dpsi = d if sys.psi is None else du.jvp(sys.psi, X, d)[1]
    nn_dir = mlp_forward_dual(p.mlp, Dual(feats, dpsi))
    nn, gNd = nn_dir.val, nn_dir.dot               # nn value, grad nn . dpsi
    gth = cbf.nn_param_grad(X)                     # (B, P_mlp)
    mixed = mlp_param_gradient_of_directional(p.mlp, feats, dpsi)
    if cbf.variant == RHO_STAR_XE:
        delta = nn - cbf._nn_e
        gmlp = 2.0 * gNd[:, None] * (gth - cbf._nn_e_param_grad()) \
            + 2.0 * delta[:, None] * mixed
    else:
        gmlp = mixed
    return np.concatenate([gmlp, dc[:, None]], axis=1)


# -- single-state and summary interfaces -----------------------------------

def saturation_risk(params: CbfParams, sys: SystemModel, x,
                    want_grad_x: bool = False, want_grad_theta: bool = False,
                    rho_star_variant: str = RHO_STAR_XE) -> RiskEval:
    cbf = NeuralCbf(params, sys, rho_star_variant)
    X = np.asarray(x, dtype=float)[None, :]
    vals, idx = risk_values(cbf, X)
    gx = risk_grad_x(cbf, X, idx)[0] if want_grad_x else None
    gt = risk_grad_theta(cbf, X, idx)[0] if want_grad_theta else None
    return RiskEval(float(vals[0]), int(idx[0]), gx, gt)


def severity_stats(params: CbfParams, sys: SystemModel, samples,
                   rho_star_variant: str = RHO_STAR_XE) -> SeverityStats:
    """Saturation severity over boundary states (caller puts them on the
    boundary)."""
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("samples must be a nonempty (B, n) array")
    cbf = NeuralCbf(params, sys, rho_star_variant)
    vals, _ = risk_values(cbf, X)
    return stats_of_risks(vals)


def stats_of_risks(vals: np.ndarray) -> SeverityStats:
    vals = np.asarray(vals, dtype=float)
    sat = vals[vals > 0]
    pct = 100.0 * float(np.mean(vals <= 0))
    if sat.size == 0:
        return SeverityStats(0.0, 0.0, pct, 0)
    return SeverityStats(float(np.mean(sat)), float(np.std(sat)), pct,
                         int(sat.size))
