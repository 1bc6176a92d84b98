"""Command-line entry point.

Subcommands: train, eval, slice, oracle, baseline, rollout, volume.
Every artifact begins with a metadata comment line (tool version, resolved
config hash, seed) and all floats use 17 significant digits, so reruns with
the same config and seed reproduce every file byte-for-byte.

Exit codes: 0 ok, 2 config error, 3 checkpoint error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys as _sys

import numpy as np

from . import __version__
from .cbf import NeuralCbf
from .config import (
    ConfigError,
    RunConfig,
    build_system,
    config_hash,
    load_config,
    write_resolved,
)
from .controller import fi_metric, make_nominal
from .critic import BoundarySamplingError
from .evaluation import (
    EsConfig,
    hand_cbf_baseline,
    maximal_set_2d,
    pct_nonsaturating,
    slice_grid,
    volume_mc,
    worst_saturation,
)
from .learner import Checkpoint, CheckpointError, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_NUMERIC = 4


class NumericError(RuntimeError):
    pass


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _header(cfg: RunConfig, seed: int) -> str:
    return f"# nscbf {__version__} config {config_hash(cfg)} seed {seed}"


def _require_finite(name, *values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite result in {name}")


def _load_cbf(cfg: RunConfig, checkpoint_path: str) -> NeuralCbf:
    if checkpoint_path is None:
        raise ConfigError("this command requires --checkpoint")
    if not os.path.isfile(checkpoint_path):
        raise CheckpointError(f"checkpoint not found: {checkpoint_path}")
    ckpt = Checkpoint.load(checkpoint_path)
    sysm = build_system(cfg.system)
    variant = ckpt.config.get("rho_star_variant", "xe")
    return NeuralCbf(ckpt.params, sysm, variant)


def _out_dir(cfg: RunConfig, args) -> str:
    out = args.out if args.out else cfg.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _write_grid_csv(path, header, grid, value_name="ss_star"):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        fh.write(f"x_i,x_j,{value_name}\n")
        for i, xi in enumerate(grid.axis_i):
            for j, xj in enumerate(grid.axis_j):
                fh.write(f"{_fmt(xi)},{_fmt(xj)},{_fmt(grid.values[i, j])}\n")


# -- subcommands -----------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    write_resolved(cfg, out)
    sysm = build_system(cfg.system)
    log = print if args.verbose else None
    train(sysm, cfg.train, out_dir=out, log=log,
          csv_header=_header(cfg, cfg.train.seed))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    ec = cfg.eval
    cbf = _load_cbf(cfg, args.checkpoint)
    stats = pct_nonsaturating(cbf, n=ec.boundary_samples, seed=ec.seed)
    worst = worst_saturation(cbf, batch=ec.worst_batch, steps=ec.worst_steps,
                             seed=ec.seed)
    vol, vol_se = volume_mc(cbf, n=ec.volume_samples, seed=ec.seed)
    true_sys = build_system(cfg.system)
    nominal = make_nominal(ec.nominal, cbf.sys)
    fi = fi_metric(cbf, nominal, ec.fi_rollouts, seed=ec.seed, dt=ec.dt,
                   horizon=ec.horizon, true_sys=true_sys)
    _require_finite("eval", stats.pct_nonsaturating, worst, vol, fi)
    path = os.path.join(out, "report.txt")
    with open(path, "w") as fh:
        fh.write(_header(cfg, ec.seed) + "\n")
        for key, val in [
            ("system", cfg.system.name),
            ("nominal", ec.nominal),
            ("pct_nonsaturating", _fmt(stats.pct_nonsaturating)),
            ("severity_mean", _fmt(stats.mean)),
            ("severity_stddev", _fmt(stats.stddev)),
            ("n_saturating", str(stats.n_saturating)),
            ("worst_saturation", _fmt(worst)),
            ("volume", _fmt(vol)),
            ("volume_stderr", _fmt(vol_se)),
            ("fi_pct", _fmt(fi)),
        ]:
            fh.write(f"{key} {val}\n")
    return EXIT_OK


def cmd_slice(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    ec = cfg.eval
    cbf = _load_cbf(cfg, args.checkpoint)
    grid = slice_grid(cbf, tuple(ec.slice_dims),
                      resolution=ec.slice_resolution)
    _require_finite("slice", grid.values)
    i, j = ec.slice_dims
    _write_grid_csv(os.path.join(out, f"slice_{i}_{j}.csv"),
                    _header(cfg, ec.seed), grid)
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    ec = cfg.eval
    sysm = build_system(cfg.system)
    oracle = maximal_set_2d(sysm, grid_resolution=ec.slice_resolution)
    _write_grid_csv(os.path.join(out, "oracle.csv"), _header(cfg, ec.seed),
                    oracle)
    if args.checkpoint is not None:
        cbf = _load_cbf(cfg, args.checkpoint)
        learned = slice_grid(cbf, (0, 1), resolution=ec.slice_resolution)
        _write_grid_csv(os.path.join(out, "learned.csv"),
                        _header(cfg, ec.seed), learned)
    return EXIT_OK


def cmd_baseline(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    sysm = build_system(cfg.system)
    es = EsConfig()
    best, best_f, history = hand_cbf_baseline(sysm, es, seed=cfg.eval.seed)
    _require_finite("baseline", best_f)
    with open(os.path.join(out, "baseline.txt"), "w") as fh:
        fh.write(_header(cfg, cfg.eval.seed) + "\n")
        fh.write(f"a1 {_fmt(best.a1)}\n")
        fh.write(f"a2 {_fmt(best.a2)}\n")
        fh.write(f"c {_fmt(best.c)}\n")
        fh.write(f"objective {_fmt(best_f)}\n")
    with open(os.path.join(out, "baseline_history.csv"), "w") as fh:
        fh.write(_header(cfg, cfg.eval.seed) + "\n")
        fh.write("generation,best_objective\n")
        for g, f in enumerate(history):
            fh.write(f"{g},{_fmt(f)}\n")
    return EXIT_OK


def cmd_rollout(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    ec = cfg.eval
    cbf = _load_cbf(cfg, args.checkpoint)
    nominal = make_nominal(ec.nominal, cbf.sys)
    path = os.path.join(out, "rollout.csv")
    with open(path, "w") as fh:
        fh.write(_header(cfg, ec.seed) + "\n")
        fh.write("noise_stddev,inertia_scale,nominal,fi_pct\n")
        for scale in ec.inertia_sweep:
            for noise in ec.noise_sweep:
                true_sys = build_system(cfg.system, inertia_scale=scale,
                                        noise_stddev=noise)
                fi = fi_metric(cbf, nominal, ec.fi_rollouts, seed=ec.seed,
                               dt=ec.dt, horizon=ec.horizon,
                               true_sys=true_sys)
                _require_finite("rollout", fi)
                fh.write(f"{_fmt(noise)},{_fmt(scale)},{ec.nominal},"
                         f"{_fmt(fi)}\n")
    return EXIT_OK


def cmd_volume(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    ec = cfg.eval
    cbf = _load_cbf(cfg, args.checkpoint)
    vol, se = volume_mc(cbf, n=ec.volume_samples, seed=ec.seed)
    _require_finite("volume", vol, se)
    with open(os.path.join(out, "volume.csv"), "w") as fh:
        fh.write(_header(cfg, ec.seed) + "\n")
        fh.write("volume,stderr\n")
        fh.write(f"{_fmt(vol)},{_fmt(se)}\n")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "slice": cmd_slice,
    "oracle": cmd_oracle,
    "baseline": cmd_baseline,
    "rollout": cmd_rollout,
    "volume": cmd_volume,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nscbf",
        description="Neural non-saturating control barrier functions")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--checkpoint", default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.train.seed = args.seed
            cfg.eval.seed = args.seed
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=_sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=_sys.stderr)
        return EXIT_CHECKPOINT
    except (NumericError, BoundarySamplingError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=_sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    _sys.exit(main())
