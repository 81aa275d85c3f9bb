"""Figure rendering for the report path.

Every figure is drawn from the delimited artifacts already on disk, never
from live model state, so the plots always agree with the CSVs they sit
next to. PNGs land in the run directory as fig_<name>.png.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .formats import read_csv

plt.rcParams.update({
    "figure.figsize": (5.5, 3.4),
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
})


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_curve(out: Path) -> Path:
    _, _, rows = read_csv(out / "loss.csv", "loss.v1")
    steps = [int(r[0]) for r in rows]
    losses = [float(r[1]) for r in rows]
    fig, ax = plt.subplots()
    ax.plot(steps, losses, lw=0.6, alpha=0.4, color="tab:blue")
    if len(losses) >= 100:
        kernel = np.ones(100) / 100
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[99:], smooth, lw=1.5, color="tab:blue")
    ax.set_xlabel("training step")
    ax.set_ylabel("noise-prediction MSE")
    ax.set_yscale("log")
    return _save(fig, out / "fig_loss.png")


def layer_profile(out: Path) -> Path:
    _, _, rows = read_csv(out / "layer_profile.csv", "layer_profile.v1")
    blocks = [int(r[0]) for r in rows]
    fig, ax = plt.subplots()
    for idx, label in ((1, "top1"), (2, "top2"), (3, "top3")):
        ax.plot(blocks, [float(r[idx]) for r in rows], marker="o",
                ms=3, label=label)
    ax.plot(blocks, [float(r[4]) for r in rows], marker="s", ms=3,
            ls="--", color="gray", label="median")
    ax.set_xlabel("block")
    ax.set_ylabel("mean |activation|")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, out / "fig_layer_profile.png")


def alpha_profile(out: Path) -> Path:
    _, _, rows = read_csv(out / "alpha_profile.csv", "alpha_profile.v1")
    blocks = sorted(set(int(r[0]) for r in rows))
    dims = max(int(r[1]) for r in rows) + 1
    grid = np.zeros((len(blocks), dims))
    for r in rows:
        grid[int(r[0]) - 1, int(r[1])] = float(r[2])
    fig, ax = plt.subplots()
    im = ax.imshow(grid, aspect="auto", cmap="magma", origin="lower",
                   extent=(0, dims, 0.5, len(blocks) + 0.5))
    ax.set_xlabel("hidden dimension")
    ax.set_ylabel("block")
    fig.colorbar(im, ax=ax, label="|alpha| (feedforward branch)")
    return _save(fig, out / "fig_alpha_profile.png")


def timestep_sweep(out: Path) -> Path | None:
    _, _, rows = read_csv(out / "timestep_sweep.csv", "timestep_sweep.v1")
    if not rows:
        return None
    ts = [float(r[0]) for r in rows]
    mags = [float(r[2]) for r in rows]
    fig, ax = plt.subplots()
    ax.plot(ts, mags, marker="o", ms=3)
    ax.set_xlabel("timestep t")
    ax.set_ylabel("mean |activation| on detected dims")
    ax.set_title(f"block {rows[0][1]}")
    return _save(fig, out / "fig_timestep_sweep.png")


def condition_invariance(out: Path) -> Path | None:
    _, _, rows = read_csv(out / "condition_invariance.csv",
                          "condition_invariance.v1")
    if not rows:
        return None
    conds = [int(r[0]) for r in rows]
    mags = [float(r[2]) for r in rows]
    fig, ax = plt.subplots()
    ax.bar(conds, mags, color="tab:purple", alpha=0.8)
    ax.set_xlabel("condition id")
    ax.set_ylabel("mean |activation| on detected dims")
    return _save(fig, out / "fig_condition_invariance.png")


def intervention(out: Path) -> Path:
    _, _, rows = read_csv(out / "intervention_l2.csv", "intervention_l2.v1")
    arms: dict[str, list[float]] = {}
    for arm, _, v in rows:
        arms.setdefault(arm, []).append(float(v))
    names = list(arms)
    medians = [float(np.median(arms[a])) for a in names]
    fig, ax = plt.subplots()
    ax.bar(names, medians, color=["gray", "tab:red", "tab:green"][:len(names)])
    ax.set_ylabel("median output delta (L2)")
    return _save(fig, out / "fig_intervention.png")


def mode_metrics(out: Path) -> Path:
    _, _, rows = read_csv(out / "mode_metrics.csv", "mode_metrics.v1")
    modes = [r[0] for r in rows]
    w2 = [float(r[1]) for r in rows]
    detail = [float(r[2]) for r in rows]
    x = np.arange(len(modes))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.5, 3.2))
    ax1.bar(x, w2, color="tab:blue", alpha=0.8)
    ax1.set_xticks(x, modes)
    ax1.set_ylabel("sliced W2 to class reference")
    ax2.bar(x, detail, color="tab:orange", alpha=0.8)
    ax2.set_xticks(x, modes)
    ax2.set_ylabel("detail energy")
    return _save(fig, out / "fig_mode_metrics.png")


def sample_scatter(out: Path) -> Path | None:
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    drew = False
    for mode, color in (("cond", "tab:gray"), ("cfg", "tab:blue"),
                        ("dg", "tab:orange"), ("cfg_dg", "tab:red")):
        path = out / f"samples_{mode}.csv"
        if not path.exists():
            continue
        _, header, rows = read_csv(path, "samples.v1")
        if len(header) < 4:
            continue
        pts = np.array([[float(r[2]), float(r[3])] for r in rows])
        shown = pts[:2000]
        ax.scatter(shown[:, 0], shown[:, 1], s=2, alpha=0.25,
                   color=color, label=mode.replace("_", "+"))
        drew = True
    if not drew:
        plt.close(fig)
        return None
    ax.set_aspect("equal")
    ax.legend(markerscale=4)
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    return _save(fig, out / "fig_samples.png")


def render_all(out: Path) -> dict[str, Path]:
    """Render every figure whose CSV exists; returns name -> path."""
    out = Path(out)
    made: dict[str, Path] = {}
    renderers = {
        "loss": (loss_curve, "loss.csv"),
        "layer_profile": (layer_profile, "layer_profile.csv"),
        "alpha_profile": (alpha_profile, "alpha_profile.csv"),
        "timestep_sweep": (timestep_sweep, "timestep_sweep.csv"),
        "condition_invariance": (condition_invariance,
                                 "condition_invariance.csv"),
        "intervention": (intervention, "intervention_l2.csv"),
        "mode_metrics": (mode_metrics, "mode_metrics.csv"),
        "samples": (sample_scatter, "samples_cond.csv"),
    }
    for name, (fn, needs) in renderers.items():
        if (out / needs).exists():
            path = fn(out)
            if path is not None:
                made[name] = path
    return made
