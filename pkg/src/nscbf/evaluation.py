"""Evaluation: saturation metrics, safe-set volume, slice grids, the exact
dynamic-programming safe-set oracle for 2D systems, and the hand-designed
barrier baseline tuned by a small evolution strategy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import dual as du
from .cbf import NeuralCbf
from .critic import CriticConfig, compute_counterexamples_cbf, \
    sample_boundary_cbf
from .dual import Dual
from .risk import SeverityStats, risk_values, stats_of_risks
from .systems import SystemModel


# -- Q1 metrics ------------------------------------------------------------

def pct_nonsaturating(cbf, n: int = 10_000, seed: int = 0) -> SeverityStats:
    """Severity stats over n fresh boundary samples."""
    X = sample_boundary_cbf(cbf, n, np.random.default_rng(seed))
    vals, _ = risk_values(cbf, X)
    return stats_of_risks(vals)


def worst_saturation(cbf, batch: int = 10_000, steps: int = 50,
                     seed: int = 0) -> float:
    """Strong-critic estimate of the maximum risk on the boundary."""
    cfg = CriticConfig(batch_size=batch, critic_steps=steps, topk=1)
    out = compute_counterexamples_cbf(cbf, cfg, np.random.default_rng(seed))
    return float(out.risks[0])


def volume_mc(cbf, n: int = 1_000_000, seed: int = 0):
    """(safe fraction of the domain box, binomial standard error)."""
    sys = cbf.sys
    rng = np.random.default_rng(seed)
    inside = 0
    chunk = 200_000
    left = n
    while left > 0:
        k = min(chunk, left)
        X = rng.uniform(sys.domain_lo, sys.domain_hi, size=(k, sys.n))
        inside += int(np.sum(cbf.ss_star_value(X) <= 0))
        left -= k
    p = inside / n
    return p, math.sqrt(max(p * (1 - p), 1e-12) / n)


# -- slice grids -----------------------------------------------------------

@dataclass
class SliceGrid:
    dims: tuple
    axis_i: np.ndarray
    axis_j: np.ndarray
    values: np.ndarray  # (len(axis_i), len(axis_j)) of ss_star


def slice_grid(cbf, dims, ranges=None, resolution: int = 201) -> SliceGrid:
    """ss_star over a 2D axis-aligned slice, other coordinates at 0."""
    sys = cbf.sys
    i, j = dims
    if not 0 <= i < j < sys.n:
        raise ValueError(f"invalid slice dims {dims} for n={sys.n}")
    if ranges is None:
        ranges = ((sys.domain_lo[i], sys.domain_hi[i]),
                  (sys.domain_lo[j], sys.domain_hi[j]))
    ai = np.linspace(ranges[0][0], ranges[0][1], resolution)
    aj = np.linspace(ranges[1][0], ranges[1][1], resolution)
    II, JJ = np.meshgrid(ai, aj, indexing="ij")
    X = np.zeros((resolution * resolution, sys.n))
    X[:, i] = II.ravel()
    X[:, j] = JJ.ravel()
    vals = cbf.ss_star_value(X).reshape(resolution, resolution)
    return SliceGrid((i, j), ai, aj, vals)


# -- DP maximal control-invariant set (2D oracle) --------------------------

def maximal_set_2d(sys: SystemModel, grid_resolution: int = 401,
                   input_resolution: int = 21, horizon: float = 20.0,
                   dt: float = 0.02) -> SliceGrid:
    """Largest control-invariant subset of {rho <= 0} within the domain box.

    Backward value recursion V_{k+1}(x) = max(rho(x), min_u V_k(x_u^+))
    with RK4 successors and bilinear interpolation of V; the fixed point's
    negative region is the maximal set, with symmetric O(h) boundary error.
    Successor interpolation stencils are precomputed once; each sweep is a
    batch of gathers. Successors leaving the analysis box count as unsafe.
    """
    if sys.n != 2:
        raise ValueError("the DP oracle applies to 2D systems only")
    lo, hi = sys.domain_lo, sys.domain_hi
    ax0 = np.linspace(lo[0], hi[0], grid_resolution)
    ax1 = np.linspace(lo[1], hi[1], grid_resolution)
    G0, G1 = np.meshgrid(ax0, ax1, indexing="ij")
    X = np.stack([G0.ravel(), G1.ravel()], axis=1)
    n_cells = X.shape[0]
    V = sys.input_polytope.vertices()
    u_levels = np.linspace(V.min(), V.max(), input_resolution)

    step0 = (hi[0] - lo[0]) / (grid_resolution - 1)
    step1 = (hi[1] - lo[1]) / (grid_resolution - 1)
    res = grid_resolution
    idx = np.empty((input_resolution, n_cells), dtype=np.int64)
    w = np.empty((input_resolution, 4, n_cells))
    inside = np.empty((input_resolution, n_cells), dtype=bool)
    for k, u in enumerate(u_levels):
        U = np.full((n_cells, 1), u)

        def xdot(Y):
            return np.asarray(sys.f(Y)) + np.einsum(
                "bnm,bm->bn", np.asarray(sys.g(Y)), U)

        k1 = xdot(X)
        k2 = xdot(X + 0.5 * dt * k1)
        k3 = xdot(X + 0.5 * dt * k2)
        k4 = xdot(X + dt * k3)
        Xn = X + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t0 = (Xn[:, 0] - lo[0]) / step0
        t1 = (Xn[:, 1] - lo[1]) / step1
        i0 = np.floor(t0).astype(np.int64)
        i1 = np.floor(t1).astype(np.int64)
        inside[k] = (i0 >= 0) & (i0 + 1 < res) & (i1 >= 0) & (i1 + 1 < res)
        i0c = np.clip(i0, 0, res - 2)
        i1c = np.clip(i1, 0, res - 2)
        f0 = t0 - i0c
        f1 = t1 - i1c
        idx[k] = i0c * res + i1c
        w[k, 0] = (1 - f0) * (1 - f1)
        w[k, 1] = (1 - f0) * f1
        w[k, 2] = f0 * (1 - f1)
        w[k, 3] = f0 * f1

    rho = np.asarray(sys.rho(X), dtype=float)
    unsafe = float(np.max(rho)) + 1.0
    vals = rho.copy()
    max_sweeps = int(round(horizon / dt))
    for _ in range(max_sweeps):
        best = np.full(n_cells, np.inf)
        for k in range(input_resolution):
            b = idx[k]
            vu = (w[k, 0] * vals[b] + w[k, 1] * vals[b + 1] +
                  w[k, 2] * vals[b + res] + w[k, 3] * vals[b + res + 1])
            vu = np.where(inside[k], vu, unsafe)
            np.minimum(best, vu, out=best)
        new_vals = np.maximum(rho, best)
        if np.max(np.abs(new_vals - vals)) < 1e-12:
            vals = new_vals
            break
        vals = new_vals
    return SliceGrid((0, 1), ax0, ax1,
                     vals.reshape(grid_resolution, grid_resolution))


# -- hand-designed barrier baseline ----------------------------------------

@dataclass
class HandCbfParams:
    a1: float
    a2: float
    c: float

    def validate(self):
        if self.a1 <= 0 or self.a2 < 0 or self.c <= 0:
            raise ValueError("require a1 > 0, a2 >= 0, c > 0")
        return self


class HandCbf:
    """Power-law barrier rho* = s^a1 - s_max^a1 + a2, phi* = rho* + c rho*'.

    s is the squared angle magnitude of the safety spec (theta^2 for the 2D
    pendulum; gamma^2 + beta^2 + pendulum-tilt^2 for the quadcopter).
    Duck-types with NeuralCbf for every metric, critic, and controller path.
    """

    def __init__(self, params: HandCbfParams, sys: SystemModel,
                 theta_lim: float = math.pi / 4):
        self.params = params.validate()
        self.sys = sys
        self.s_max = theta_lim ** 2

    def _s(self, X):
        if self.sys.n == 2:
            return X[..., 0] * X[..., 0]
        return X[..., 0] * X[..., 0] + X[..., 1] * X[..., 1] + \
            du.acos_sq(du.cos(X[..., 3]) * du.cos(X[..., 4]))

    def rho_star(self, X):
        a1, a2 = self.params.a1, self.params.a2
        return self._s(X) ** a1 - self.s_max ** a1 + a2

    def phi_star(self, X):
        return self.rho_star(X) + self.params.c * du.lie_derivative(
            self.rho_star, self.sys.f, X)

    def phi_star_grad(self, X):
        return du.grad(self.phi_star, X)

    def phi_star_dot(self, X, U):
        X = np.asarray(X, dtype=float)
        U = np.atleast_2d(np.asarray(U, dtype=float))
        gphi = self.phi_star_grad(X)
        d = np.asarray(self.sys.f(X)) + np.einsum(
            "bij,bj->bi", np.asarray(self.sys.g(X)), U)
        return np.sum(gphi * d, axis=1)

    def _branches(self, X):
        return [np.asarray(self.sys.rho(X)), du.value_of(self.phi_star(X))]

    def ss_star(self, X):
        vals = np.stack(self._branches(X), axis=0)
        return np.max(vals, axis=0), np.argmax(vals, axis=0)

    def ss_star_value(self, X):
        return self.ss_star(X)[0]

    def ss_star_grad(self, X, branch=None):
        X = np.asarray(X, dtype=float)
        if branch is None:
            _, branch = self.ss_star(X)
        grho = self.sys.rho_grad(X)
        gphi = self.phi_star_grad(X)
        return np.where(branch[:, None] == 0, grho, gphi)


@dataclass
class EsConfig:
    mu: int = 8
    lam: int = 32
    generations: int = 20
    sigma0: float = 0.3
    boundary_samples: int = 200
    reg_weight: float = 150.0
    reg_samples: int = 250
    softmax_temperature: float = 1.0


def _hand_objective(params: HandCbfParams, sys: SystemModel, cfg: EsConfig,
                    rng) -> float:
    """Learner objective (softmax risk + volume term) for one candidate."""
    from .learner import softmax_weighted_loss
    cbf = HandCbf(params, sys)
    try:
        X = sample_boundary_cbf(cbf, cfg.boundary_samples, rng,
                                max_rounds=200)
    except Exception:
        return np.inf
    risks, _ = risk_values(cbf, X)
    loss, _ = softmax_weighted_loss(risks, cfg.softmax_temperature)
    Xr = sys.sample_domain(cfg.reg_samples, rng)
    reg = float(np.sum(1.0 / (1.0 + np.exp(-cbf.ss_star_value(Xr)))))
    return loss + cfg.reg_weight * reg


def hand_cbf_baseline(sys: SystemModel, cfg: EsConfig = None, seed: int = 0):
    """(mu, lambda) evolution strategy over (a1, a2, c), 1/5-rule step size.

    Returns (best HandCbfParams, best objective, history of per-generation
    best objectives).
    """
    cfg = cfg or EsConfig()
    rng = np.random.default_rng(seed)
    sigma = cfg.sigma0

    def clip(v):
        return np.array([max(v[0], 0.05), max(v[1], 0.0), max(v[2], 1e-4)])

    pop = np.stack([clip(np.array([1.0, 0.0, 0.01]) +
                         sigma * rng.standard_normal(3))
                    for _ in range(cfg.lam)])
    fits = np.array([_hand_objective(HandCbfParams(*v), sys, cfg, rng)
                     for v in pop])
    order = np.argsort(fits)
    best_v, best_f = pop[order[0]].copy(), fits[order[0]]
    history = [float(best_f)]
    for _ in range(cfg.generations):
        parents = pop[order[:cfg.mu]]
        parent_fits = fits[order[:cfg.mu]]
        pick = rng.integers(0, cfg.mu, size=cfg.lam)
        pop = np.stack([clip(parents[k] + sigma * rng.standard_normal(3))
                        for k in pick])
        fits = np.array([_hand_objective(HandCbfParams(*v), sys, cfg, rng)
                         for v in pop])
        success = float(np.mean(fits < parent_fits[pick]))
        sigma *= 1.22 if success > 0.2 else 1 / 1.22
        order = np.argsort(fits)
        if fits[order[0]] < best_f:
            best_v, best_f = pop[order[0]].copy(), fits[order[0]]
        history.append(float(best_f))
    return HandCbfParams(*best_v), float(best_f), history
