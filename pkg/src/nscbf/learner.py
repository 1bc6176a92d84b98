"""Learner: gradient descent on the softmax-weighted saturation risk plus a
volume regularizer, and the outer learner-critic training loop.

The loop alternates critic calls (worst boundary states under the current
parameters) with single gradient steps on those states. Convergence is a
sustained fraction of non-saturating fresh boundary samples. All artifacts
(metrics CSV, checkpoints) are deterministic functions of config + seed;
wall-clock timing goes to a separate log so reruns reproduce the CSV
byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cbf import CbfParams, NeuralCbf
from .critic import (
    CounterexampleBatch,
    CriticConfig,
    compute_counterexamples_cbf,
    sample_boundary_cbf,
)
from .mlp import MlpParams
from .risk import risk_grad_theta, risk_values
from .systems import SystemModel

CHECKPOINT_VERSION = 1
C_MIN = 1e-4


@dataclass
class TrainConfig:
    learner_lr: float = 1e-3
    critic_lr: float = 1e-3
    critic_steps: int = 20
    critic_batch: int = 500
    learner_topk: int = 100
    reg_weight: float = 150.0
    reg_samples: int = 250
    softmax_temperature: float = 1.0
    max_outer_iters: int = 200
    target_pct: float = 99.0
    convergence_window: int = 2   # consecutive passing test evals
    test_every: int = 10
    test_samples: int = 2000
    hidden: tuple = (64, 64)
    seed: int = 0
    rho_star_variant: str = "xe"
    use_feature_map: bool = True
    boundary_tol: float = 1e-5
    optimizer: str = "sgd"        # "sgd" (default) or "adam"
    momentum: float = 0.0         # optional heavy-ball term, off by default
    init_output_bias: float = 0.0  # added to the output-layer bias at init
    learner_steps: int = 1        # gradient steps per counterexample batch

    def validate(self):
        if min(self.learner_lr, self.critic_lr, self.softmax_temperature) <= 0:
            raise ValueError("rates and temperature must be > 0")
        if min(self.critic_batch, self.learner_topk, self.reg_samples,
               self.test_samples) < 1:
            raise ValueError("batch sizes must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        if self.learner_steps < 1:
            raise ValueError("learner_steps must be >= 1")
        return self

    def critic_config(self) -> CriticConfig:
        return CriticConfig(batch_size=self.critic_batch,
                            critic_steps=self.critic_steps,
                            critic_lr=self.critic_lr,
                            topk=self.learner_topk,
                            boundary_tol=self.boundary_tol)


@dataclass
class Checkpoint:
    """Self-describing JSON container for a parameter snapshot."""

    params: CbfParams
    config: dict
    outer_iter: int
    rng_state: dict
    history: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def save(self, path: str):
        payload = {
            "format_version": self.version,
            "layer_sizes": list(self.params.mlp.layer_sizes),
            "n_c": int(self.params.c.size),
            "flat_params": self.params.flatten().tolist(),
            "config": self.config,
            "outer_iter": self.outer_iter,
            "rng_state": _jsonable(self.rng_state),
            "history": self.history,
        }
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(payload, fh)  # repr round-trips float64 exactly
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path) as fh:
            payload = json.load(fh)
        version = payload.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version!r} in {path}")
        params = CbfParams.unflatten(payload["layer_sizes"], payload["n_c"],
                                     np.array(payload["flat_params"]))
        return cls(params, payload["config"], payload["outer_iter"],
                   payload["rng_state"], payload["history"], version)


class CheckpointError(RuntimeError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# -- loss pieces -----------------------------------------------------------

def softmax_weighted_loss(risks, temperature: float):
    """(sum_i w_i L_i, weights) with w = softmax(L / T), max-subtracted."""
    risks = np.asarray(risks, dtype=float)
    if risks.size == 0:
        raise ValueError("risks must be nonempty")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = risks / temperature
    z = z - np.max(z)
    w = np.exp(z)
    w /= np.sum(w)
    return float(np.sum(w * risks)), w


def regularizer(cbf: NeuralCbf, X_reg):
    """(sum sigmoid(ss_star), theta-gradient) over domain samples.

    The gradient flows through the attaining branch of the max.
    """
    X_reg = np.asarray(X_reg, dtype=float)
    vals, branch = cbf.ss_star(X_reg)
    s = 1.0 / (1.0 + np.exp(-vals))
    g = cbf.ss_star_theta_grad(X_reg, branch)
    return float(np.sum(s)), (s * (1.0 - s)) @ g


def learner_gradient(cbf: NeuralCbf, batch: CounterexampleBatch,
                     cfg: TrainConfig, X_reg=None):
    """Full theta-gradient of the learner objective at the cbf's params."""
    _, w = softmax_weighted_loss(batch.risks, cfg.softmax_temperature)
    g_risk = risk_grad_theta(cbf, batch.states)
    grad = w @ g_risk  # weights detached: convex combination of gradients
    reg_val = 0.0
    if cfg.reg_weight > 0 and X_reg is not None:
        reg_val, g_reg = regularizer(cbf, X_reg)
        grad = grad + cfg.reg_weight * g_reg
    return grad, reg_val


def learner_step(params: CbfParams, sys: SystemModel,
                 batch: CounterexampleBatch, cfg: TrainConfig,
                 X_reg=None, lr: Optional[float] = None) -> CbfParams:
    """One gradient step; c coefficients projected to stay >= c_min."""
    cbf = NeuralCbf(params, sys, cfg.rho_star_variant)
    grad, _ = learner_gradient(cbf, batch, cfg, X_reg)
    if not np.all(np.isfinite(grad)):
        bad = int(np.argmax(batch.risks))
        raise RuntimeError(
            "non-finite learner gradient; worst counterexample "
            f"{batch.states[bad].tolist()} risk {batch.risks[bad]}")
    flat = params.flatten() - (cfg.learner_lr if lr is None else lr) * grad
    out = CbfParams.unflatten(params.mlp.layer_sizes, params.c.size, flat)
    out.c = np.maximum(out.c, C_MIN)
    return out


# -- outer loop ------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def train(sys: SystemModel, cfg: TrainConfig, out_dir: Optional[str] = None,
          log=None, csv_header: Optional[str] = None) -> Checkpoint:
    """Learner-critic loop. Writes metrics.csv and checkpoints to out_dir."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = CbfParams.init(sys, cfg.hidden, rng)
    if cfg.init_output_bias:
        params.mlp.biases[-1][0] += cfg.init_output_bias
    ccfg = cfg.critic_config()
    warm = None
    velocity = np.zeros(params.n_params)
    adam_m = np.zeros(params.n_params)
    adam_v = np.zeros(params.n_params)
    history = []
    passing_streak = 0
    n_steps = 0
    t0 = time.monotonic()

    def emit(msg):
        if log is not None:
            log(msg)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "metrics.csv")
        csv_fh = open(csv_path, "w")
        if csv_header:
            csv_fh.write(csv_header.rstrip("\n") + "\n")
        csv_fh.write(
            "iter,train_worst_risk,test_pct_nonsat,reg_value,"
            "equilibrium_margin\n")
    else:
        csv_fh = None

    last_pct = ""
    for it in range(1, cfg.max_outer_iters + 1):
        cbf = NeuralCbf(params, sys, cfg.rho_star_variant)
        batch = compute_counterexamples_cbf(cbf, ccfg, rng, warm)
        warm = batch
        train_worst = float(np.max(batch.risks))

        X_reg = sys.sample_domain(cfg.reg_samples, rng) \
            if cfg.reg_weight > 0 else None
        reg_val = 0.0
        for _ in range(cfg.learner_steps):
            cbf = NeuralCbf(params, sys, cfg.rho_star_variant)
            grad, reg_val = learner_gradient(cbf, batch, cfg, X_reg)
            if not np.all(np.isfinite(grad)):
                raise RuntimeError(
                    f"non-finite loss gradient at iteration {it}")
            n_steps += 1
            if cfg.optimizer == "adam":
                adam_m = 0.9 * adam_m + 0.1 * grad
                adam_v = 0.999 * adam_v + 0.001 * grad * grad
                mhat = adam_m / (1.0 - 0.9 ** n_steps)
                vhat = adam_v / (1.0 - 0.999 ** n_steps)
                step_dir = mhat / (np.sqrt(vhat) + 1e-8)
            elif cfg.momentum > 0:
                velocity = cfg.momentum * velocity + grad
                step_dir = velocity
            else:
                step_dir = grad

            # keep the equilibrium inside the safe set: reject and halve
            # the step until ss_star(x_e) <= 0 again
            lr = cfg.learner_lr
            flat = params.flatten()
            for _ in range(30):
                cand = CbfParams.unflatten(params.mlp.layer_sizes,
                                           params.c.size,
                                           flat - lr * step_dir)
                cand.c = np.maximum(cand.c, C_MIN)
                v_e, _ = NeuralCbf(cand, sys, cfg.rho_star_variant).ss_star(
                    sys.x_e[None, :])
                if v_e[0] <= 0:
                    params = cand
                    break
                lr *= 0.5
            else:
                emit(f"iter {it}: step rejected, equilibrium would leave "
                     f"the set")

        pct = ""
        if it % cfg.test_every == 0 or it == cfg.max_outer_iters:
            cbf_now = NeuralCbf(params, sys, cfg.rho_star_variant)
            X_test = sample_boundary_cbf(cbf_now, cfg.test_samples, rng,
                                         cfg.boundary_tol)
            vals, _ = risk_values(cbf_now, X_test)
            pct = 100.0 * float(np.mean(vals <= 0))
            passing_streak = passing_streak + 1 if pct >= cfg.target_pct else 0
            last_pct = pct
            if out_dir is not None:
                Checkpoint(params, dataclasses.asdict(cfg), it,
                           rng.bit_generator.state, history).save(
                    os.path.join(out_dir, "checkpoint.json"))

        margin_e = float(NeuralCbf(params, sys, cfg.rho_star_variant).ss_star(
            sys.x_e[None, :])[0][0])
        row = [str(it), _fmt(train_worst),
               "" if pct == "" else _fmt(pct), _fmt(reg_val),
               _fmt(margin_e)]
        history.append(row)
        if csv_fh is not None:
            csv_fh.write(",".join(row) + "\n")
            csv_fh.flush()
        emit(f"iter {it}: worst_risk {train_worst:.4g} "
             f"pct_nonsat {last_pct if last_pct != '' else 'n/a'} "
             f"reg {reg_val:.4g} elapsed {time.monotonic() - t0:.1f}s")

        if passing_streak >= cfg.convergence_window:
            break

    if csv_fh is not None:
        csv_fh.close()
    ckpt = Checkpoint(params, dataclasses.asdict(cfg), it,
                      rng.bit_generator.state, history)
    if out_dir is not None:
        ckpt.save(os.path.join(out_dir, "checkpoint.json"))
    return ckpt
