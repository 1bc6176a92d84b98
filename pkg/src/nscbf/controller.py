"""Safe-control filter and rollout simulator.

The filter solves, at states flagged by the activation rule,

    min_u  1/2 ||u - u_nom||^2   s.t.  d/dt phi_star(x, u) <= 0,  u in U,

falling back to a slack-penalized soft version when no admissible input
satisfies the hard constraint. The input set U is the image of the actuator
box [0,1]^m under the mixer, so the QP is solved in actuator coordinates by
enumerating active sets of the box plus the single inequality (m <= 4 keeps
the enumeration tiny and exact).

Also here: LQR nominal controllers via Kleinman iteration, and batched RK4
rollouts with forward-invariance accounting.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Optional

import numpy as np
import scipy.linalg

from .cbf import NeuralCbf
from .systems import SystemModel

LAMBDA_SLACK = 1e4
EPS_ACT = 1e-3
_TOL = 1e-9


@dataclass
class QpSolution:
    u: np.ndarray
    slack: float
    active_set: tuple       # indices of actuator bounds / 'c' for the ineq
    kkt_residual: float
    fallback: bool = False  # vertex fallback after solver failure


# -- box QP with one optional inequality, by active-set enumeration --------

def _solve_box_qp(H, g, a=None, b=None):
    """min 1/2 v'Hv + g'v over [0,1]^m, optionally s.t. a + b'v <= 0.

    Returns (v, mu, active_set, kkt_residual) or None when infeasible. H
    must be positive definite. Exact for the tiny m used here.
    """
    m = H.shape[0]
    best = None
    ineq_opts = (False, True) if b is not None else (False,)
    for states in product((0, 1, 2), repeat=m):   # lo, hi, free
        F = [j for j in range(m) if states[j] == 2]
        v = np.array([0.0 if s == 0 else 1.0 if s == 1 else np.nan
                      for s in states])
        fixed = np.isnan(v) == False  # noqa: E712  (bool mask)
        for ineq_active in ineq_opts:
            vv = v.copy()
            mu = 0.0
            nf = len(F)
            try:
                if ineq_active:
                    if nf == 0:
                        continue  # degenerate: constraint fixed by bounds
                    K = np.zeros((nf + 1, nf + 1))
                    K[:nf, :nf] = H[np.ix_(F, F)]
                    K[:nf, nf] = b[F]
                    K[nf, :nf] = b[F]
                    rhs = np.zeros(nf + 1)
                    rhs[:nf] = -(g[F] + H[np.ix_(F, range(m))][:, fixed]
                                 @ vv[fixed])
                    rhs[nf] = -a - b[fixed] @ vv[fixed]
                    sol = np.linalg.solve(K, rhs)
                    vv[F] = sol[:nf]
                    mu = sol[nf]
                    if mu < -_TOL:
                        continue
                elif nf:
                    vv[F] = np.linalg.solve(
                        H[np.ix_(F, F)],
                        -(g[F] + H[np.ix_(F, range(m))][:, fixed] @ vv[fixed]))
            except np.linalg.LinAlgError:
                continue
            if np.any(vv < -1e-8) or np.any(vv > 1 + 1e-8):
                continue
            if b is not None and not ineq_active and a + b @ vv > _TOL:
                continue
            grad = H @ vv + g + (mu * b if b is not None else 0.0)
            ok_dual = True
            for j in range(m):
                if states[j] == 0 and grad[j] < -_TOL:
                    ok_dual = False
                elif states[j] == 1 and grad[j] > _TOL:
                    ok_dual = False
            obj = 0.5 * vv @ H @ vv + g @ vv
            stat = np.max(np.abs(grad[F])) if F else 0.0
            prim = max(0.0, float(a + b @ vv)) if (b is not None) else 0.0
            if ineq_active:
                prim = abs(a + b @ vv)
            res = max(stat, prim if b is not None else 0.0)
            active = tuple(j for j in range(m) if states[j] != 2)
            if ineq_active:
                active = active + ("c",)
            cand = (not ok_dual, obj, vv, mu, active, res)
            if best is None or cand[:2] < best[:2]:
                best = cand
    if best is None:
        return None
    _, _, vv, mu, active, res = best
    return np.clip(vv, 0.0, 1.0), mu, active, res


def project_to_input_set(sys: SystemModel, u_nom) -> np.ndarray:
    """Euclidean projection of u_nom onto U (the mixer image of the box)."""
    poly = sys.input_polytope
    if bool(poly.contains(u_nom[None, :])[0]):
        return np.asarray(u_nom, dtype=float)
    M = poly.mixer
    H = M.T @ M
    g = -M.T @ (u_nom + poly.offset)
    v, _, _, _ = _solve_box_qp(H, g)
    return M @ v - poly.offset


def activation_rule(cbf: NeuralCbf, x, dt: float, u_nom=None) -> bool:
    """Engage the filter near the boundary or when one Euler step under the
    nominal input would cross it."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    X = np.asarray(x, dtype=float)[None, :]
    v, _ = cbf.ss_star(X)
    if v[0] >= -EPS_ACT:
        return True
    u = np.zeros(cbf.sys.m) if u_nom is None else np.asarray(u_nom)
    xdot = np.asarray(cbf.sys.f(X))[0] + \
        np.asarray(cbf.sys.g(X))[0] @ u
    v1, _ = cbf.ss_star((X[0] + dt * xdot)[None, :])
    return bool(v1[0] >= 0)


def cbf_qp(cbf: NeuralCbf, x, u_nom, dt: float = 0.002,
           lambda_slack: float = LAMBDA_SLACK) -> QpSolution:
    """Safety filter at one state. Inactive rule: plain projection onto U."""
    x = np.asarray(x, dtype=float)
    u_nom = np.asarray(u_nom, dtype=float)
    sys = cbf.sys
    if not activation_rule(cbf, x, dt, u_nom):
        return QpSolution(project_to_input_set(sys, u_nom), 0.0, (), 0.0)

    gphi = cbf.phi_star_grad(x[None, :])[0]
    a = float(gphi @ np.asarray(sys.f(x[None, :]))[0])
    bu = np.asarray(sys.g(x[None, :]))[0].T @ gphi      # (m,)
    poly = sys.input_polytope
    M = poly.mixer
    H = M.T @ M
    g0 = -M.T @ (u_nom + poly.offset)
    av = a - bu @ poly.offset
    bv = M.T @ bu

    # hard phase feasible iff the constraint can hold somewhere in the box
    feasible = av + np.sum(np.minimum(bv, 0.0)) <= _TOL
    if feasible:
        sol = _solve_box_qp(H, g0, av, bv)
        if sol is not None:
            v, _, active, res = sol
            return QpSolution(M @ v - poly.offset, 0.0, active, res)
    # soft phase: s = max(0, av + bv'v) folded into the objective
    Hp = H + 2.0 * lambda_slack * np.outer(bv, bv)
    gp = g0 + 2.0 * lambda_slack * av * bv
    sol = _solve_box_qp(Hp, gp)
    if sol is None:
        # last resort: vertex minimizing phi_star_dot
        V = poly.vertices()
        u = V[int(np.argmin(a + V @ bu))]
        return QpSolution(u, max(0.0, a + bu @ u), (), np.inf, fallback=True)
    v, _, active, res = sol
    u = M @ v - poly.offset
    return QpSolution(u, max(0.0, float(a + bu @ u)), active, res)


# -- LQR nominal controllers ----------------------------------------------

def _bass_stabilizing_gain(A, B):
    """Stabilizing seed gain via a shifted Lyapunov solve."""
    n = A.shape[0]
    # shift until A + sigma I is anti-stable, then X solves
    # Abar X + X Abar' = 2 B B'; X > 0 for a controllable pair, and
    # K = B' X^-1 makes X a Lyapunov certificate for A - BK
    sigma = 0.5 - float(np.min(np.real(np.linalg.eigvals(A))))
    Abar = A + sigma * np.eye(n)
    X = scipy.linalg.solve_continuous_lyapunov(Abar, 2.0 * B @ B.T)
    K = B.T @ np.linalg.inv(X)
    if np.max(np.real(np.linalg.eigvals(A - B @ K))) >= 0:
        raise RuntimeError("failed to find a stabilizing seed gain; "
                           "linearization may not be stabilizable")
    return K


def lqr_solution(A, B, q_scale: float = 1.0, tol: float = 1e-12,
                 max_iters: int = 100):
    """(K, P) minimizing int (q_scale x'x + u'u) dt.

    Kleinman iteration: repeated Lyapunov solves from a stabilizing seed;
    quadratically convergent, no Hamiltonian eigendecomposition needed.
    """
    n = A.shape[0]
    Q = q_scale * np.eye(n)
    K = _bass_stabilizing_gain(A, B)
    P = None
    for _ in range(max_iters):
        Acl = A - B @ K
        P_new = scipy.linalg.solve_continuous_lyapunov(Acl.T, -(Q + K.T @ K))
        K = B.T @ P_new
        if P is not None and np.max(np.abs(P_new - P)) < tol:
            P = P_new
            break
        P = P_new
    return K, P


def lqr_gain(sys_or_ab, q_scale: float = 1.0) -> np.ndarray:
    if isinstance(sys_or_ab, tuple):
        A, B = sys_or_ab
    else:
        A, B = sys_or_ab.linearize()
    return lqr_solution(A, B, q_scale)[0]


def make_nominal(name: str, sys: SystemModel, q_scale_agg: float = 25.0):
    """One of the nominal controllers: k0, k_lqr, k_lqr_agg."""
    if name == "k0":
        return lambda X: np.zeros((X.shape[0], sys.m))
    if name in ("k_lqr", "k_lqr_agg"):
        K = lqr_gain(sys, 1.0 if name == "k_lqr" else q_scale_agg)
        return lambda X: -(X - sys.x_e) @ K.T
    raise ValueError(f"unknown nominal controller '{name}'")


# -- rollouts --------------------------------------------------------------

FI = "forward-invariant"
EXITED = "exited"
INTERIOR = "horizon-reached-interior"


@dataclass
class RolloutResult:
    trajectory: np.ndarray      # (T, 1 + n + m + 2): t, x, u, ss_star, slack
    outcome: str
    hit_time: Optional[float]


def _filtered_controls(cbf, X, U_nom, dt, lambda_slack=LAMBDA_SLACK):
    """Batched control step: QP where activated, projection elsewhere."""
    sys = cbf.sys
    B = X.shape[0]
    vals, _ = cbf.ss_star(X)
    xdot = np.asarray(sys.f(X)) + np.einsum(
        "bnm,bm->bn", np.asarray(sys.g(X)), U_nom)
    v1, _ = cbf.ss_star(X + dt * xdot)
    active = (vals >= -EPS_ACT) | (v1 >= 0)
    U = np.empty_like(U_nom)
    slack = np.zeros(B)
    inside = sys.input_polytope.contains(U_nom)
    for i in range(B):
        if active[i]:
            sol = cbf_qp(cbf, X[i], U_nom[i], dt, lambda_slack)
            U[i] = sol.u
            slack[i] = sol.slack
        elif inside[i]:
            U[i] = U_nom[i]
        else:
            U[i] = project_to_input_set(sys, U_nom[i])
    return U, slack


def _rk4_step(true_sys, X, U, dt, W=None):
    def xdot(Y):
        d = np.asarray(true_sys.f(Y)) + np.einsum(
            "bnm,bm->bn", np.asarray(true_sys.g(Y)), U)
        return d if W is None else d + W

    k1 = xdot(X)
    k2 = xdot(X + 0.5 * dt * k1)
    k3 = xdot(X + 0.5 * dt * k2)
    k4 = xdot(X + dt * k3)
    return X + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_batch(cbf, nominal, X0, dt, horizon, rng=None,
                   true_sys: SystemModel = None, post_hit_window: float = 1.0):
    """Batched closed-loop rollouts; returns per-rollout outcomes.

    Control is computed from cbf's assumed model; the state is propagated by
    true_sys (defaults to the assumed one). true_sys.noise_stddev > 0 adds a
    per-step constant disturbance to the state derivative.
    """
    sys = cbf.sys
    true_sys = true_sys or sys
    X = np.array(X0, dtype=float)
    B, n = X.shape
    n_steps = int(round(horizon / dt))
    window_steps = int(round(post_hit_window / dt))
    hit_step = np.full(B, -1)
    outcome = np.array([None] * B, dtype=object)
    hit_time = np.full(B, np.nan)
    alive = np.ones(B, dtype=bool)
    rho_ok = np.ones(B, dtype=bool)

    for step in range(n_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        Xa = X[idx]
        U_nom = nominal(Xa)
        U, _ = _filtered_controls(cbf, Xa, U_nom, dt)
        W = None
        if true_sys.noise_stddev > 0:
            W = true_sys.noise_stddev * rng.standard_normal((idx.size, n))
        Xn = _rk4_step(true_sys, Xa, U, dt, W)
        X[idx] = Xn

        out_of_box = np.any((Xn < true_sys.domain_lo) |
                            (Xn > true_sys.domain_hi), axis=1)
        vals, _ = cbf.ss_star(Xn)
        rho_ok[idx] &= np.asarray(sys.rho(Xn)) <= 0
        newly_hit = (vals >= 0) & (hit_step[idx] < 0)
        hit_step[idx[newly_hit]] = step
        hit_time[idx[newly_hit]] = (step + 1) * dt

        # rollout ends when its post-hit window closes or it leaves the box
        done_window = (hit_step[idx] >= 0) & \
            (step - hit_step[idx] >= window_steps)
        for j in np.flatnonzero(out_of_box):
            outcome[idx[j]] = EXITED
            alive[idx[j]] = False
        for j in np.flatnonzero(done_window & ~out_of_box):
            k = idx[j]
            back_in = vals[j] <= 0
            outcome[k] = FI if (back_in and rho_ok[k]) else EXITED
            alive[k] = False

    for k in np.flatnonzero(alive):
        if hit_step[k] < 0:
            outcome[k] = INTERIOR
        else:
            v, _ = cbf.ss_star(X[k][None, :])
            outcome[k] = FI if (v[0] <= 0 and rho_ok[k]) else EXITED
    return outcome, hit_time


def rollout(cbf, nominal, x0, dt: float = 0.002, horizon: float = 10.0,
            seed: int = 0, true_sys: SystemModel = None,
            post_hit_window: float = 1.0) -> RolloutResult:
    """Single rollout with a full recorded trace."""
    sys = cbf.sys
    true_sys = true_sys or sys
    rng = np.random.default_rng(seed)
    n_steps = int(round(horizon / dt))
    window_steps = int(round(post_hit_window / dt))
    x = np.asarray(x0, dtype=float).copy()
    rows = []
    hit_step = -1
    hit_time = None
    outcome = None
    rho_ok = True
    for step in range(n_steps):
        X = x[None, :]
        u_nom = nominal(X)[0]
        U, slack = _filtered_controls(cbf, X, u_nom[None, :], dt)
        vals, _ = cbf.ss_star(X)
        rows.append(np.concatenate([[step * dt], x, U[0],
                                    [vals[0], slack[0]]]))
        W = None
        if true_sys.noise_stddev > 0:
            W = true_sys.noise_stddev * rng.standard_normal((1, x.size))
        x = _rk4_step(true_sys, X, U, dt, W)[0]
        v, _ = cbf.ss_star(x[None, :])
        rho_ok = rho_ok and float(np.asarray(sys.rho(x[None, :]))[0]) <= 0
        if np.any((x < true_sys.domain_lo) | (x > true_sys.domain_hi)):
            outcome = EXITED
            break
        if v[0] >= 0 and hit_step < 0:
            hit_step = step
            hit_time = (step + 1) * dt
        if hit_step >= 0 and step - hit_step >= window_steps:
            outcome = FI if (v[0] <= 0 and rho_ok) else EXITED
            break
    if outcome is None:
        if hit_step < 0:
            outcome = INTERIOR
        else:
            v, _ = cbf.ss_star(x[None, :])
            outcome = FI if (v[0] <= 0 and rho_ok) else EXITED
    return RolloutResult(np.array(rows), outcome, hit_time)


def sample_safe_states(cbf, n: int, rng, max_tries: int = 2000):
    """Uniform states with ss_star <= 0, by rejection from the domain box."""
    sys = cbf.sys
    out = []
    got = 0
    for _ in range(max_tries):
        X = rng.uniform(sys.domain_lo, sys.domain_hi, size=(max(256, n), sys.n))
        X = X[cbf.ss_star_value(X) <= 0]
        if X.shape[0]:
            out.append(X)
            got += X.shape[0]
        if got >= n:
            return np.concatenate(out)[:n]
    raise RuntimeError(f"could not sample {n} safe states (got {got})")


def fi_metric(cbf, nominal, n_rollouts: int, seed: int = 0,
              dt: float = 0.002, horizon: float = 10.0,
              true_sys: SystemModel = None,
              post_hit_window: float = 1.0) -> float:
    """Percent of rollouts that stay forward-invariant (interior counts)."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rng = np.random.default_rng(seed)
    X0 = sample_safe_states(cbf, n_rollouts, rng)
    outcome, _ = simulate_batch(cbf, nominal, X0, dt, horizon, rng,
                                true_sys, post_hit_window)
    good = sum(1 for o in outcome if o in (FI, INTERIOR))
    return 100.0 * good / n_rollouts
