"""Figure rendering from the trainer CLI's CSV exports.

Two figure kinds, both pure functions of their input files:

- slice: filled-contour membership regions of safe-set slice grids, with
  optional outline overlays (e.g. a learned set inside the exact oracle
  set); the origin is marked.
- loss: per-run training curves (worst training risk and the saturating
  fraction of test boundary samples) with a zero reference line.

No metric is recomputed here; everything is read from the CSVs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import yaml  # noqa: E402

DEFAULT_DPI = 120
_SLICE_COLORS = ["tab:blue", "tab:purple", "tab:green", "tab:orange"]


class RenderError(RuntimeError):
    pass


@dataclass
class GridLayer:
    path: str
    label: str = ""
    color: str = ""
    fill: bool = False


@dataclass
class FigureSpec:
    kind: str                      # "slice" or "loss"
    output: str
    grids: list = field(default_factory=list)    # slice kind
    metrics: list = field(default_factory=list)  # loss kind
    labels: list = field(default_factory=list)
    axis_labels: list = field(default_factory=lambda: ["x_i", "x_j"])
    dpi: int = DEFAULT_DPI
    title: str = ""

    @classmethod
    def load(cls, path: str) -> "FigureSpec":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise RenderError("figure spec must be a mapping")
        grids = [GridLayer(**g) if isinstance(g, dict) else GridLayer(g)
                 for g in data.pop("grids", [])]
        known = {"kind", "output", "metrics", "labels", "axis_labels",
                 "dpi", "title"}
        unknown = set(data) - known
        if unknown:
            raise RenderError(f"unknown spec keys: {sorted(unknown)}")
        spec = cls(grids=grids, **data)
        if spec.kind not in ("slice", "loss"):
            raise RenderError(f"unknown figure kind '{spec.kind}'")
        if not spec.output:
            raise RenderError("spec must name an output file")
        return spec


def read_grid_csv(path: str):
    """(axis_i, axis_j, values) from a long-format x_i,x_j,value CSV."""
    try:
        raw = np.loadtxt(path, delimiter=",", skiprows=2)
    except OSError as e:
        raise RenderError(f"cannot read grid CSV {path}: {e}") from e
    if raw.ndim != 2 or raw.shape[1] != 3:
        raise RenderError(f"{path}: expected three columns x_i,x_j,value")
    ai = np.unique(raw[:, 0])
    aj = np.unique(raw[:, 1])
    if ai.size * aj.size != raw.shape[0]:
        raise RenderError(f"{path}: rows do not form a full grid")
    vals = raw[:, 2].reshape(ai.size, aj.size)
    return ai, aj, vals


def read_metrics_csv(path: str):
    """(iters, train_risk, test_iters, test_pct) from a training metrics CSV.

    The test-percentage column is empty except at test cadence rows.
    """
    try:
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    except OSError as e:
        raise RenderError(f"cannot read metrics CSV {path}: {e}") from e
    rows = [ln for ln in lines if not ln.startswith("#")]
    if not rows or rows[0].split(",")[:2] != ["iter", "train_worst_risk"]:
        raise RenderError(f"{path}: not a training metrics CSV")
    iters, risk, t_iters, t_pct = [], [], [], []
    for ln in rows[1:]:
        parts = ln.split(",")
        iters.append(int(parts[0]))
        risk.append(float(parts[1]))
        if parts[2] != "":
            t_iters.append(int(parts[0]))
            t_pct.append(float(parts[2]))
    return (np.array(iters), np.array(risk),
            np.array(t_iters), np.array(t_pct))


def render_slice(spec: FigureSpec) -> str:
    if not spec.grids:
        raise RenderError("slice figure needs at least one grid")
    layers = []
    for layer in spec.grids:
        ai, aj, vals = read_grid_csv(layer.path)
        layers.append((layer, ai, aj, vals))
    ref_ai, ref_aj = layers[0][1], layers[0][2]
    for layer, ai, aj, _ in layers[1:]:
        if ai.shape != ref_ai.shape or aj.shape != ref_aj.shape or \
                not (np.allclose(ai, ref_ai) and np.allclose(aj, ref_aj)):
            raise RenderError(
                f"axis mismatch between {spec.grids[0].path} and "
                f"{layer.path}")

    fig, ax = plt.subplots(figsize=(5, 4))
    for k, (layer, ai, aj, vals) in enumerate(layers):
        color = layer.color or _SLICE_COLORS[k % len(_SLICE_COLORS)]
        label = layer.label or layer.path
        # meshgrid 'ij' layout: values[i, j] at (ai[i], aj[j])
        if layer.fill or k == 0:
            ax.contourf(ai, aj, vals.T, levels=[-np.inf, 0.0],
                        colors=[color], alpha=0.35)
        ax.contour(ai, aj, vals.T, levels=[0.0], colors=[color],
                   linewidths=1.5)
        ax.plot([], [], color=color, label=label)
    ax.plot([0.0], [0.0], marker="+", color="black", markersize=10,
            label="origin")
    ax.set_xlabel(spec.axis_labels[0])
    ax.set_ylabel(spec.axis_labels[1])
    if spec.title:
        ax.set_title(spec.title)
    ax.legend(loc="upper right", fontsize=8)
    fig.savefig(spec.output, dpi=spec.dpi, metadata={"Software": None})
    plt.close(fig)
    return spec.output


def render_losses(spec: FigureSpec) -> str:
    if not spec.metrics:
        raise RenderError("loss figure needs at least one metrics CSV")
    fig, ax = plt.subplots(figsize=(5, 4))
    cycle = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for k, path in enumerate(spec.metrics):
        iters, risk, t_iters, t_pct = read_metrics_csv(path)
        color = cycle[k % len(cycle)]
        label = spec.labels[k] if k < len(spec.labels) else f"run {k}"
        ax.plot(iters, risk, color=color, label=f"{label} train")
        if t_iters.size:
            ax.plot(t_iters, (100.0 - t_pct) / 100.0, color=color,
                    linestyle="--", label=f"{label} test")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("worst train risk / test saturating fraction")
    if spec.title:
        ax.set_title(spec.title)
    ax.legend(fontsize=7)
    fig.savefig(spec.output, dpi=spec.dpi, metadata={"Software": None})
    plt.close(fig)
    return spec.output


def render(spec: FigureSpec) -> str:
    return render_slice(spec) if spec.kind == "slice" else render_losses(spec)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="nscbf-plots")
    sub = p.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("render")
    rp.add_argument("--kind", choices=["slice", "loss"], default=None)
    rp.add_argument("--spec", required=True)
    args = p.parse_args(argv)
    try:
        spec = FigureSpec.load(args.spec)
        if args.kind is not None and args.kind != spec.kind:
            raise RenderError(
                f"--kind {args.kind} disagrees with spec kind {spec.kind}")
        out = render(spec)
    except (RenderError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
