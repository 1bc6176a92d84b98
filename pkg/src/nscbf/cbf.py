"""Assembly of the learned barrier function and its safe-set functions.

Given parameters theta = (network weights, derivative coefficients c_i) and
a system, this module evaluates, for batches of states:

* rho_star    -- the shrunk safety specification,
* phi_j       -- the ladder functions (1 + c_i d/dt) applied to rho,
* phi_star    -- the modified barrier function,
* ss_star     -- the pointwise max whose zero-sublevel set is the safe set,

plus their state gradients (dual-capable, so a further forward sweep yields
Hessian-vector products) and their parameter gradients for the learner.

Gradient paths are implemented for relative degree 2, which covers both
shipped systems; values of phi_j are generic in j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dual as du
from .dual import Dual, value_of
from .mlp import (
    MlpParams,
    mlp_forward,
    mlp_forward_dual,
    mlp_input_gradient,
    mlp_input_gradient_dual,
    mlp_param_gradient,
    mlp_param_gradient_of_directional,
)
from .systems import SystemModel

C_MIN = 1e-4  # floor for the derivative coefficients after projection

RHO_STAR_XE = "xe"
RHO_STAR_SOFTPLUS = "softplus"


@dataclass
class CbfParams:
    """All learnable parameters: network weights plus the c_i coefficients."""

    mlp: MlpParams
    c: np.ndarray  # (r - 1,), kept positive by projection

    @property
    def n_params(self) -> int:
        return self.mlp.n_params + self.c.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.mlp.flatten(), self.c])

    @classmethod
    def unflatten(cls, layer_sizes, n_c, flat) -> "CbfParams":
        flat = np.asarray(flat, dtype=float)
        mlp = MlpParams.unflatten(layer_sizes, flat[:flat.size - n_c])
        return cls(mlp, flat[flat.size - n_c:].copy())

    def copy(self) -> "CbfParams":
        return CbfParams(self.mlp.copy(), self.c.copy())

    @classmethod
    def init(cls, sys: SystemModel, hidden, rng: np.random.Generator) -> "CbfParams":
        sizes = [sys.psi_dim] + list(hidden) + [1]
        mlp = MlpParams.xavier_init(sizes, rng)
        c = rng.uniform(0.0, 0.01, size=sys.r - 1)
        c = np.maximum(c, C_MIN)
        return cls(mlp, c)


def _dcontract(J, v):
    """Batched J^T v for J (B, k, n) and v (B, k); either may be Dual."""
    if isinstance(J, Dual) or isinstance(v, Dual):
        Jv, Jd = (J.val, J.dot) if isinstance(J, Dual) else (J, None)
        vv, vd = (v.val, v.dot) if isinstance(v, Dual) else (v, None)
        val = np.einsum("bkn,bk->bn", Jv, vv)
        dot = np.zeros_like(val)
        if Jd is not None:
            dot = dot + np.einsum("bkn,bk->bn", Jd, vv)
        if vd is not None:
            dot = dot + np.einsum("bkn,bk->bn", Jv, vd)
        return Dual(val, dot)
    return np.einsum("bkn,bk->bn", J, v)


class NeuralCbf:
    """Barrier function bound to a parameter snapshot and a system.

    All methods take batches X of shape (B, n). Methods marked dual-capable
    also accept a Dual-wrapped batch, returning Dual outputs whose tangents
    are directional derivatives.
    """

    def __init__(self, params: CbfParams, sys: SystemModel,
                 rho_star_variant: str = RHO_STAR_XE):
        if rho_star_variant not in (RHO_STAR_XE, RHO_STAR_SOFTPLUS):
            raise ValueError(f"unknown rho_star variant '{rho_star_variant}'")
        self.params = params
        self.sys = sys
        self.variant = rho_star_variant
        self._features_e = self._features(sys.x_e[None, :])
        self._nn_e = float(mlp_forward(params.mlp, self._features_e)[0])

    # -- building blocks --------------------------------------------------
    def _features(self, X):
        return X if self.sys.psi is None else self.sys.psi(X)

    def nn_value(self, X):
        """nn(psi(X)); dual-capable."""
        feats = self._features(X)
        return mlp_forward_dual(self.params.mlp, feats) \
            if isinstance(feats, Dual) else mlp_forward(self.params.mlp, feats)

    def _nn_grad_x(self, X):
        """grad_x nn(psi(X)) (chain through the feature map); dual-capable."""
        feats = self._features(X)
        if isinstance(feats, Dual):
            gnn = mlp_input_gradient_dual(self.params.mlp, feats)
        else:
            gnn = mlp_input_gradient(self.params.mlp, feats)
        if self.sys.psi is None:
            return gnn
        J = du.jacobian(self.sys.psi, X)  # (B, psi_dim, n), dual-capable
        return _dcontract(J, gnn)

    # -- safe-set functions ------------------------------------------------
    def rho_star(self, X):
        """Shrunk safety spec; >= rho by construction. Dual-capable.

        The softplus variant is nn + rho: the network's softplus output
        activation already supplies the positive margin, so the shrink
        term is the (nonnegative) network output itself.
        """
        rho = self.sys.rho(X)
        nn = self.nn_value(X)
        if self.variant == RHO_STAR_XE:
            d = nn - self._nn_e
            return d * d + rho
        return nn + rho

    def phi_j(self, X, j: int):
        """(prod_{i<=j} (1 + c_i d/dt)) rho, for 1 <= j <= r-1."""
        if not 1 <= j <= self.sys.r - 1:
            raise ValueError(f"j={j} out of range for relative degree {self.sys.r}")

        def ladder(Y, k):
            if k == 0:
                return self.sys.rho(Y)
            prev = lambda Z: ladder(Z, k - 1)
            return prev(Y) + self.params.c[k - 1] * du.lie_derivative(
                prev, self.sys.f, Y)

        return ladder(X, j)

    def phi_star(self, X):
        """Modified barrier: ladder(rho) - rho + rho_star. Dual-capable."""
        r = self.sys.r
        ladder = self.phi_j(X, r - 1) if r >= 2 else self.sys.rho(X)
        return ladder - self.sys.rho(X) + self.rho_star(X)

    def phi_star_grad(self, X):
        """grad_x phi_star, shape (B, n). Dual-capable (one more sweep gives
        Hessian-vector products)."""
        if self.sys.r != 2:
            raise NotImplementedError("gradient path implemented for r = 2")
        w = du.grad(self.sys.rho_dot, X)           # grad of rho-dot
        grho = du.grad(self.sys.rho, X)
        gN = self._nn_grad_x(X)
        nn = self.nn_value(X)
        if self.variant == RHO_STAR_XE:
            scale = 2.0 * (nn - self._nn_e)
            if isinstance(scale, Dual) or isinstance(gN, Dual):
                sN = _dual_scale(scale, gN)
            else:
                sN = scale[:, None] * gN
        else:
            sN = gN
        return self.params.c[0] * w + grho + sN

    def phi_star_dot(self, X, U):
        """d phi_star / dt under input U: grad phi_star . (f + g U)."""
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float)
        gphi = self.phi_star_grad(X)
        d = np.asarray(self.sys.f(X)) + np.einsum(
            "bij,bj->bi", np.asarray(self.sys.g(X)), np.atleast_2d(U))
        return np.sum(gphi * d, axis=1)

    def _branch_values(self, X):
        """All branches of the safe-set max: [rho, phi_1..phi_{r-1}, phi*]."""
        vals = [self.sys.rho(X)]
        for j in range(1, self.sys.r):
            vals.append(self.phi_j(X, j))
        vals.append(self.phi_star(X))
        return vals

    def ss_star(self, X):
        """(max branch value, index of the attaining branch). Ties take the
        lowest index."""
        vals = np.stack([value_of(v) for v in self._branch_values(X)], axis=0)
        branch = np.argmax(vals, axis=0)
        return np.max(vals, axis=0), branch

    def ss_star_value(self, X):
        return self.ss_star(X)[0]

    def ss_star_grad(self, X, branch=None):
        """Gradient of the attaining branch of ss_star."""
        if self.sys.r != 2:
            raise NotImplementedError("gradient path implemented for r = 2")
        X = np.asarray(X, dtype=float)
        if branch is None:
            _, branch = self.ss_star(X)
        grho = du.grad(self.sys.rho, X)
        w = du.grad(self.sys.rho_dot, X)
        gphi1 = grho + self.params.c[0] * w
        gphistar = self.phi_star_grad(X)
        out = np.where(branch[:, None] == 0, grho,
                       np.where(branch[:, None] == 1, gphi1, gphistar))
        return out

    # -- parameter gradients ----------------------------------------------
    def nn_param_grad(self, X):
        """grad_theta nn(psi(X)) over the network weights, (B, P_mlp)."""
        return mlp_param_gradient(self.params.mlp, self._features(X))

    def _nn_e_param_grad(self):
        return mlp_param_gradient(self.params.mlp, self._features_e)[0]

    def rho_star_theta_grad(self, X):
        """grad_theta rho_star, over [mlp weights, c]; c part is zero."""
        X = np.asarray(X, dtype=float)
        gth = self.nn_param_grad(X)
        if self.variant == RHO_STAR_XE:
            nn = self.nn_value(X)
            g = 2.0 * (nn - self._nn_e)[:, None] * (gth - self._nn_e_param_grad())
        else:
            g = gth
        zeros_c = np.zeros((X.shape[0], self.params.c.size))
        return np.concatenate([g, zeros_c], axis=1)

    def ss_star_theta_grad(self, X, branch=None):
        """grad_theta of the attaining branch of ss_star, (B, P)."""
        X = np.asarray(X, dtype=float)
        if branch is None:
            _, branch = self.ss_star(X)
        B = X.shape[0]
        out = np.zeros((B, self.params.n_params))
        rdot = value_of(self.sys.rho_dot(X))
        # phi_1 branch: d/dc_1 = rho_dot
        sel1 = branch == 1
        out[sel1, -1] = rdot[sel1]
        # phi_star branch: d/dc_1 = rho_dot, mlp part from rho_star
        sel2 = branch == 2
        if np.any(sel2):
            g = self.rho_star_theta_grad(X[sel2])
            out[sel2] = g
            out[sel2, -1] = rdot[sel2]
        return out


def _dual_scale(scale, vec):
    """scale (B,) * vec (B, n) with either being Dual."""
    sv, sd = (scale.val, scale.dot) if isinstance(scale, Dual) else (scale, None)
    vv, vd = (vec.val, vec.dot) if isinstance(vec, Dual) else (vec, None)
    val = sv[:, None] * vv
    dot = np.zeros_like(val)
    if sd is not None:
        dot = dot + sd[:, None] * vv
    if vd is not None:
        dot = dot + sv[:, None] * vd
    return Dual(val, dot)


# -- free-function interface ----------------------------------------------

def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def rho_star(params: CbfParams, sys: SystemModel, x, variant=RHO_STAR_XE):
    X, sq = _as_batch(x)
    out = NeuralCbf(params, sys, variant).rho_star(X)
    return float(out[0]) if sq else out


def phi_j(params: CbfParams, sys: SystemModel, x, j: int):
    X, sq = _as_batch(x)
    out = NeuralCbf(params, sys).phi_j(X, j)
    return float(out[0]) if sq else out


def phi_star(params: CbfParams, sys: SystemModel, x, variant=RHO_STAR_XE):
    X, sq = _as_batch(x)
    out = NeuralCbf(params, sys, variant).phi_star(X)
    return float(out[0]) if sq else out


def phi_star_dot(params: CbfParams, sys: SystemModel, x, u, variant=RHO_STAR_XE):
    X, sq = _as_batch(x)
    U = np.atleast_2d(np.asarray(u, dtype=float))
    out = NeuralCbf(params, sys, variant).phi_star_dot(X, U)
    return float(out[0]) if sq else out


def ss_star(params: CbfParams, sys: SystemModel, x, variant=RHO_STAR_XE):
    X, sq = _as_batch(x)
    vals, branch = NeuralCbf(params, sys, variant).ss_star(X)
    return (float(vals[0]), int(branch[0])) if sq else (vals, branch)


def ss_star_gradient(params: CbfParams, sys: SystemModel, x, variant=RHO_STAR_XE):
    X, sq = _as_batch(x)
    out = NeuralCbf(params, sys, variant).ss_star_grad(X)
    return out[0] if sq else out
