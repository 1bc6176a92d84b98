"""Small MLP with hand-rolled derivatives.

Architecture: n_in -> hidden ... -> 1 with tanh on hidden layers and a
softplus output. Everything the trainer needs is provided in closed form:

* value and input gradient (reverse accumulation),
* Hessian-vector products in the input (forward-over-reverse),
* parameter gradients, and
* the mixed derivative grad_theta(grad_x nn . d) (forward-over-reverse
  threaded through the parameter-gradient pass).

All operations accept a batch of inputs X with shape (B, n_in) and are
deterministic. Finite differences are used only in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dual import Dual


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class MlpParams:
    """Weights/biases for the CBF network, with a stable flat ordering.

    Flat ordering is layer-major, weights before biases, row-major within
    each weight matrix. Checkpoints rely on this ordering.
    """

    weights: list = field(default_factory=list)  # W_l: (out_l, in_l)
    biases: list = field(default_factory=list)   # b_l: (out_l,)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def layer_sizes(self) -> list:
        return [self.n_in] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, sizes, flat) -> "MlpParams":
        flat = np.asarray(flat, dtype=float)
        weights, biases = [], []
        k = 0
        for lin, lout in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[k:k + lout * lin].reshape(lout, lin).copy())
            k += lout * lin
            biases.append(flat[k:k + lout].copy())
            k += lout
        if k != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {k}")
        return cls(weights, biases)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    @classmethod
    def xavier_init(cls, sizes, rng: np.random.Generator) -> "MlpParams":
        weights, biases = [], []
        for lin, lout in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (lin + lout))
            weights.append(rng.uniform(-bound, bound, size=(lout, lin)))
            biases.append(np.zeros(lout))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes) -> "MlpParams":
        weights = [np.zeros((lout, lin)) for lin, lout in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(lout) for lout in sizes[1:]]
        return cls(weights, biases)


def _check_input(params: MlpParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None, :]
    if X.shape[1] != params.n_in:
        raise ValueError(
            f"input has dimension {X.shape[1]}, network expects {params.n_in}")
    return X, squeeze


def _forward_pass(params: MlpParams, X):
    """Returns (activations per layer incl. input, final preactivation)."""
    acts = [X]
    a = X
    L = len(params.weights)
    for l in range(L - 1):
        a = np.tanh(a @ params.weights[l].T + params.biases[l])
        acts.append(a)
    z = a @ params.weights[-1].T + params.biases[-1]  # (B, 1)
    return acts, z[:, 0]


def mlp_forward(params: MlpParams, X):
    """nn(X) for a batch; scalar in, scalar out for 1-D input."""
    X, squeeze = _check_input(params, X)
    _, z = _forward_pass(params, X)
    y = _softplus(z)
    return y[0] if squeeze else y


def mlp_input_gradient(params: MlpParams, X):
    """grad_x nn(X), shape (B, n_in), by reverse accumulation."""
    X, squeeze = _check_input(params, X)
    acts, z = _forward_pass(params, X)
    delta = _sigmoid(z)[:, None] * params.weights[-1]          # (B, h_last)
    for l in range(len(params.weights) - 2, -1, -1):
        delta = delta * (1.0 - acts[l + 1] ** 2)               # through tanh
        delta = delta @ params.weights[l]                      # (B, in_l)
    return delta[0] if squeeze else delta


def mlp_hessian_vector(params: MlpParams, X, D):
    """grad_x(grad_x nn . d) via a dual-number perturbation of the reverse pass."""
    X, squeeze = _check_input(params, X)
    D = np.asarray(D, dtype=float)
    if D.ndim == 1:
        D = np.broadcast_to(D, X.shape)
    if D.shape != X.shape:
        raise ValueError("direction shape does not match input shape")
    g = _grad_dual(params, X, D).dot
    return g[0] if squeeze else g


def _fwd_dual(params: MlpParams, X, D):
    """Forward pass with tangents. Returns acts, tangent-acts, z, z_dot."""
    acts, dacts = [X], [D]
    a, da = X, D
    L = len(params.weights)
    for l in range(L - 1):
        z = a @ params.weights[l].T + params.biases[l]
        dz = da @ params.weights[l].T
        a = np.tanh(z)
        da = (1.0 - a ** 2) * dz
        acts.append(a)
        dacts.append(da)
    z = (a @ params.weights[-1].T + params.biases[-1])[:, 0]
    dz = (da @ params.weights[-1].T)[:, 0]
    return acts, dacts, z, dz


def _grad_dual(params: MlpParams, X, D):
    """Input gradient with its tangent along input direction D (both (B, n))."""
    acts, dacts, z, dz = _fwd_dual(params, X, D)
    s = _sigmoid(z)
    ds = s * (1.0 - s) * dz
    delta = s[:, None] * params.weights[-1]
    ddelta = ds[:, None] * params.weights[-1]
    for l in range(len(params.weights) - 2, -1, -1):
        a, da = acts[l + 1], dacts[l + 1]
        t = 1.0 - a ** 2
        ddelta = ddelta * t + delta * (-2.0 * a * da)
        delta = delta * t
        delta, ddelta = delta @ params.weights[l], ddelta @ params.weights[l]
    return Dual(delta, ddelta)


def _param_grad_parts(params: MlpParams, X):
    """Per-layer (dW, db) of nn wrt parameters, batched."""
    acts, z = _forward_pass(params, X)
    L = len(params.weights)
    dWs = [None] * L
    dbs = [None] * L
    delta = _sigmoid(z)[:, None]                               # (B, 1)
    dbs[-1] = delta
    dWs[-1] = delta[:, :, None] * acts[-1][:, None, :]
    for l in range(L - 2, -1, -1):
        if l == L - 2:
            delta = delta * params.weights[-1]
        else:
            delta = delta @ params.weights[l + 1]
        delta = delta * (1.0 - acts[l + 1] ** 2)               # (B, out_l)
        dbs[l] = delta
        dWs[l] = delta[:, :, None] * acts[l][:, None, :]
    return dWs, dbs


def _flatten_parts(dWs, dbs):
    B = dbs[0].shape[0]
    parts = []
    for dW, db in zip(dWs, dbs):
        parts.append(dW.reshape(B, -1))
        parts.append(db.reshape(B, -1))
    return np.concatenate(parts, axis=1)


def mlp_param_gradient(params: MlpParams, X):
    """grad_theta nn(X), flattened, shape (B, n_params)."""
    X, squeeze = _check_input(params, X)
    g = _flatten_parts(*_param_grad_parts(params, X))
    return g[0] if squeeze else g


def mlp_param_gradient_of_directional(params: MlpParams, X, D):
    """grad_theta(grad_x nn . d): forward tangent along d threaded through
    the parameter-gradient pass."""
    X, squeeze = _check_input(params, X)
    D = np.asarray(D, dtype=float)
    if D.ndim == 1:
        D = np.broadcast_to(D, X.shape)
    if D.shape != X.shape:
        raise ValueError("direction shape does not match input shape")
    acts, dacts, z, dz = _fwd_dual(params, X, D)
    L = len(params.weights)
    dWs = [None] * L
    dbs = [None] * L
    s = _sigmoid(z)
    delta = s[:, None]
    ddelta = (s * (1.0 - s) * dz)[:, None]
    dbs[-1] = ddelta
    dWs[-1] = (ddelta[:, :, None] * acts[-1][:, None, :]
               + delta[:, :, None] * dacts[-1][:, None, :])
    for l in range(L - 2, -1, -1):
        if l == L - 2:
            delta = delta * params.weights[-1]
            ddelta = ddelta * params.weights[-1]
        else:
            delta = delta @ params.weights[l + 1]
            ddelta = ddelta @ params.weights[l + 1]
        a, da = acts[l + 1], dacts[l + 1]
        t = 1.0 - a ** 2
        ddelta = ddelta * t + delta * (-2.0 * a * da)
        delta = delta * t
        dbs[l] = ddelta
        dWs[l] = (ddelta[:, :, None] * acts[l][:, None, :]
                  + delta[:, :, None] * dacts[l][:, None, :])
    g = _flatten_parts(dWs, dbs)
    return g[0] if squeeze else g


# -- dual-aware wrappers used when a state sweep passes through the net ---

def mlp_forward_dual(params: MlpParams, x):
    """nn at a Dual input: value plus tangent grad . x_dot."""
    if not isinstance(x, Dual):
        return mlp_forward(params, x)
    X, squeeze = _check_input(params, x.val)
    D = np.asarray(x.dot, dtype=float)
    if D.ndim == 1:
        D = D[None, :]
    _, _, z, dz = _fwd_dual(params, X, D)
    s = _sigmoid(z)
    y, dy = _softplus(z), s * dz
    if squeeze:
        return Dual(y[0], dy[0])
    return Dual(y, dy)


def mlp_input_gradient_dual(params: MlpParams, x):
    """grad_x nn at a Dual input: value plus Hessian-vector tangent."""
    if not isinstance(x, Dual):
        return mlp_input_gradient(params, x)
    X, squeeze = _check_input(params, x.val)
    D = np.asarray(x.dot, dtype=float)
    if D.ndim == 1:
        D = D[None, :]
    out = _grad_dual(params, X, D)
    if squeeze:
        return Dual(out.val[0], out.dot[0])
    return out
