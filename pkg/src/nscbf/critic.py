"""Critic: find worst-case states on the safe-set boundary.

Three pieces: near-uniform sampling of the zero level set of ss_star
(Gaussian segment shooting from interior points plus bisection), an
approximate projection onto that level set, and projected gradient ascent on
the saturation risk that returns the worst offenders for the learner.

All routines are duck-typed over a "barrier" object exposing
``ss_star_value(X)``, ``ss_star_grad(X)`` and ``.sys`` (for the domain box),
so they serve both the learned barrier and hand-designed ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cbf import NeuralCbf
from .risk import risk_grad_x, risk_values

BOUNDARY_TOL = 1e-5
_BISECT_TOL = 1e-10
_ACCEPT_FLOOR = 1e-4


class BoundarySamplingError(RuntimeError):
    pass


@dataclass
class CriticConfig:
    batch_size: int = 500
    critic_steps: int = 20
    critic_lr: float = 1e-3
    topk: int = 100
    boundary_tol: float = BOUNDARY_TOL
    warm_fraction: float = 0.5


@dataclass
class CounterexampleBatch:
    """Boundary states ranked by saturation risk, for the learner."""

    states: np.ndarray     # (k, n), all with |ss_star| <= boundary_tol
    risks: np.ndarray      # (k,), risk under the theta snapshot used
    is_warm: np.ndarray    # (k,) bool, warm-started vs freshly sampled


def shooting_stddev(n: int, eps: float = 0.01, tau: float = 0.25) -> float:
    """Per-coordinate stddev of the Gaussian shooting step.

    The variance is 2 (tau sqrt(eps) / (4 (n + 2 ln(1/eps))))^2; for n = 10
    at the defaults this is 2.117e-7.
    """
    var = 2.0 * (tau * math.sqrt(eps) / (4.0 * (n + 2.0 * math.log(1.0 / eps)))) ** 2
    return math.sqrt(var)


def _bisect_crossings(cbf, P, Q):
    """Roots of ss_star on segments P -> Q with a sign change across them."""
    lo = np.zeros(P.shape[0])
    hi = np.ones(P.shape[0])
    seglen = np.linalg.norm(Q - P, axis=1)
    max_iters = int(np.ceil(np.log2(max(np.max(seglen), 1e-16) / _BISECT_TOL))) + 1
    for _ in range(max(max_iters, 1)):
        mid = 0.5 * (lo + hi)
        Xm = P + mid[:, None] * (Q - P)
        inside = cbf.ss_star_value(Xm) <= 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    t = 0.5 * (lo + hi)
    return P + t[:, None] * (Q - P)


def sample_boundary_cbf(cbf, n_samples: int, rng: np.random.Generator,
                        boundary_tol: float = BOUNDARY_TOL,
                        proposals_per_round: int = 8192,
                        shots_per_point: int = 16,
                        max_rounds: int = None) -> np.ndarray:
    """Near-uniform samples on the boundary of the safe set.

    Per round: rejection-sample interior points p from the domain box, shoot
    several Gaussian segments q from each p (amortizes the interior
    sampling; each (p, q) pair has the prescribed kernel), and bisect the
    segments that cross the boundary.
    """
    sys = cbf.sys
    sd = shooting_stddev(sys.n)
    if max_rounds is None:
        max_rounds = 400 * max(1, -(-n_samples // 500))
    # a shot can only cross the boundary from inside the shell
    # |ss_star| <= L * reach; track a running Lipschitz estimate with a wide
    # safety margin and skip interior points that are provably too deep
    shot_reach = sd * (math.sqrt(sys.n) + 8.0)
    lip_hat = 0.0
    found = []
    n_found = 0
    n_proposed = 0
    n_interior = 0
    for rounds_done in range(max_rounds):
        P = rng.uniform(sys.domain_lo, sys.domain_hi,
                        size=(proposals_per_round, sys.n))
        n_proposed += proposals_per_round
        vals_p = cbf.ss_star_value(P)
        inside = vals_p <= 0
        n_interior += int(np.sum(inside))
        if n_proposed >= 10 * proposals_per_round and \
                n_interior < _ACCEPT_FLOOR * n_proposed:
            raise BoundarySamplingError(
                f"interior acceptance rate {n_interior / n_proposed:.2e} "
                f"below floor {_ACCEPT_FLOOR:.0e}; safe set degenerate?")
        P, vals_p = P[inside], vals_p[inside]
        if P.shape[0] == 0:
            continue
        g = cbf.ss_star_grad(P[:512])
        lip_hat = max(lip_hat, float(np.max(np.linalg.norm(g, axis=1))))
        P = P[vals_p >= -8.0 * max(lip_hat, 1e-12) * shot_reach]
        if P.shape[0] == 0:
            continue
        Pr = np.repeat(P, shots_per_point, axis=0)
        Q = Pr + sd * rng.standard_normal(Pr.shape)
        crossed = (cbf.ss_star_value(Q) > 0).reshape(-1, shots_per_point)
        # keep at most one crossing per interior point: crossings sharing a
        # p are clustered, and mixing them in skews the spread on the
        # boundary
        has_any = crossed.any(axis=1)
        if not np.any(has_any):
            continue
        shot = np.argmax(crossed, axis=1)
        sel = np.flatnonzero(has_any) * shots_per_point + shot[has_any]
        roots = _bisect_crossings(cbf, Pr[sel], Q[sel])
        roots = roots[np.abs(cbf.ss_star_value(roots)) <= boundary_tol]
        if roots.shape[0]:
            found.append(roots)
            n_found += roots.shape[0]
        if n_found >= n_samples:
            return np.concatenate(found, axis=0)[:n_samples]
        # low hit rate: grow the proposal batch to cut loop overhead
        if n_found < (rounds_done + 1) * max(1, n_samples // 200):
            proposals_per_round = min(2 * proposals_per_round, 65536)
    raise BoundarySamplingError(
        f"collected {n_found}/{n_samples} boundary samples in {max_rounds} "
        f"rounds (interior acceptance {n_interior / max(n_proposed, 1):.2e})")


def project_to_boundary_cbf(cbf, X, boundary_tol: float = BOUNDARY_TOL,
                            lr: float = 0.01, max_iters: int = 200,
                            max_halvings: int = 30):
    """Approximate projection onto the ss_star zero level set.

    Gradient descent on |ss_star| with step-halving when a step fails to
    decrease it. Returns (projected states, converged mask); callers decide
    whether to drop the stragglers.
    """
    X = np.array(X, dtype=float)
    vals = cbf.ss_star_value(X)
    active = np.abs(vals) > boundary_tol
    for _ in range(max_iters):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        g = cbf.ss_star_grad(X[idx])
        step = lr * np.sign(vals[idx])[:, None] * g
        scale = np.ones(idx.size)
        cur = np.abs(vals[idx])
        done_step = np.zeros(idx.size, dtype=bool)
        for _ in range(max_halvings):
            cand = X[idx] - scale[:, None] * step
            cv = cbf.ss_star_value(cand)
            better = (np.abs(cv) < cur) & ~done_step
            X[idx[better]] = cand[better]
            vals[idx[better]] = cv[better]
            done_step |= better
            if np.all(done_step):
                break
            scale = np.where(done_step, scale, 0.5 * scale)
        active[idx[~done_step]] = False  # stuck, give up on these
        active[idx] &= np.abs(vals[idx]) > boundary_tol
    converged = np.abs(vals) <= boundary_tol
    return X, converged


def compute_counterexamples_cbf(cbf: NeuralCbf, cfg: CriticConfig,
                                rng: np.random.Generator,
                                warm: CounterexampleBatch = None
                                ) -> CounterexampleBatch:
    """Projected gradient ascent on the risk over a boundary batch.

    Half the batch is warm-started from the previous call (re-projected onto
    the current boundary), half freshly sampled. Each point's best iterate
    by risk is kept; the top-k worst points are returned.
    """
    n_warm = 0
    parts = []
    if warm is not None and warm.states.shape[0] > 0:
        take = min(int(cfg.batch_size * cfg.warm_fraction),
                   warm.states.shape[0])
        Xw, ok = project_to_boundary_cbf(cbf, warm.states[:take],
                                         cfg.boundary_tol)
        Xw = Xw[ok]
        n_warm = Xw.shape[0]
        if n_warm:
            parts.append(Xw)
    n_fresh = cfg.batch_size - n_warm
    if n_fresh > 0:
        parts.append(sample_boundary_cbf(cbf, n_fresh, rng, cfg.boundary_tol))
    X = np.concatenate(parts, axis=0)
    is_warm = np.arange(X.shape[0]) < n_warm

    risks, _ = risk_values(cbf, X)
    best_X = X.copy()
    best_risks = risks.copy()
    for _ in range(cfg.critic_steps):
        g = risk_grad_x(cbf, X)
        nrm = cbf.ss_star_grad(X)
        nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True),
                               1e-30)
        g_t = g - np.sum(g * nrm, axis=1, keepdims=True) * nrm
        X_new = X + cfg.critic_lr * g_t
        X_new, ok = project_to_boundary_cbf(cbf, X_new, cfg.boundary_tol)
        X = np.where(ok[:, None], X_new, X)  # failed projections stay put
        risks, _ = risk_values(cbf, X)
        improved = risks > best_risks
        best_X[improved] = X[improved]
        best_risks[improved] = risks[improved]

    order = np.argsort(-best_risks, kind="stable")[:cfg.topk]
    return CounterexampleBatch(best_X[order], best_risks[order],
                               is_warm[order])


# -- spec-facing wrappers over (params, sys) -------------------------------

def sample_boundary(params, sys, n_samples: int, seed) -> np.ndarray:
    return sample_boundary_cbf(NeuralCbf(params, sys), n_samples,
                               np.random.default_rng(seed))


def project_to_boundary(X, params, sys):
    Xp, ok = project_to_boundary_cbf(NeuralCbf(params, sys), X)
    return Xp[ok], int(np.sum(~ok))


def compute_counterexamples(params, sys, cfg: CriticConfig, seed,
                            warm: CounterexampleBatch = None
                            ) -> CounterexampleBatch:
    return compute_counterexamples_cbf(NeuralCbf(params, sys), cfg,
                                       np.random.default_rng(seed), warm)
