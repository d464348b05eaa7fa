"""Figure and SVG export for trajectories, training curves and evaluation summaries."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PAST_COLOR = "#b0b0b0"
TRUTH_COLOR = "#1f4fd1"
PRED_COLOR = "#d62728"

# Fixed metadata keeps PNG/SVG bytes independent of the matplotlib build date.
_META_PNG = {"Software": None}
_META_SVG = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = _META_SVG if path.suffix == ".svg" else _META_PNG if path.suffix == ".png" else None
    fig.savefig(path, dpi=100, metadata=meta)
    plt.close(fig)
    return path


def plot_scene(past, truth, samples, path, title: str = "") -> Path:
    """Past (gray), truth (blue) and sampled futures (red) for every agent of one scene."""
    past, truth = np.asarray(past), np.asarray(truth)
    samples = np.asarray(samples).reshape((-1,) + truth.shape)
    fig, ax = plt.subplots(figsize=(5, 5))
    for i in range(past.shape[0]):
        start = past[i, -1:]
        for s in samples:
            line = np.concatenate([start, s[i]])
            ax.plot(line[:, 0], line[:, 1], color=PRED_COLOR, alpha=0.35, lw=1)
        line = np.concatenate([start, truth[i]])
        ax.plot(line[:, 0], line[:, 1], color=TRUTH_COLOR, lw=2)
        ax.plot(past[i, :, 0], past[i, :, 1], color=PAST_COLOR, lw=2, marker="o", ms=3)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title)
    return _save(fig, path)


def plot_training(history, path) -> Path:
    """Per-epoch loss terms from a metrics history (list of dict rows)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if history:
        epochs = [r["epoch"] for r in history]
        for key in ("total", "plan_recon", "traj_pred", "kl", "ebm_pos"):
            ax.plot(epochs, [float(r[key]) for r in history], label=key)
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog")
    return _save(fig, path)


def plot_errors(report, path) -> Path:
    """Histogram of per-agent best-of-k ADE and FDE."""
    fig, ax = plt.subplots(figsize=(6, 4))
    o = report.overall
    bins = 30
    ax.hist(o.ade_per_agent, bins=bins, alpha=0.6, label=f"ADE (mean {o.ade:.3f})")
    ax.hist(o.fde_per_agent, bins=bins, alpha=0.6, label=f"FDE (mean {o.fde:.3f})")
    ax.set_xlabel(f"best-of-{o.k} error [{o.units}]")
    ax.set_ylabel("agents")
    ax.legend()
    return _save(fig, path)


def scene_svg(past, truth, samples, title: str = "", size: int = 400, margin: int = 20) -> str:
    """Standalone SVG with one polyline per past, truth and predicted trajectory."""
    past, truth = np.asarray(past, dtype=float), np.asarray(truth, dtype=float)
    samples = np.asarray(samples, dtype=float).reshape((-1,) + truth.shape)
    pts = np.concatenate([past.reshape(-1, 2), truth.reshape(-1, 2), samples.reshape(-1, 2)])
    lo, hi = pts.min(0), pts.max(0)
    span = max(float((hi - lo).max()), 1e-9)
    scale = (size - 2 * margin) / span

    def xy(p):
        # SVG y grows downward
        return f"{margin + (p[0] - lo[0]) * scale:.3f},{size - margin - (p[1] - lo[1]) * scale:.3f}"

    def poly(line, color, width, opacity=1.0):
        return (f'<polyline points="{" ".join(xy(p) for p in line)}" fill="none" stroke="{color}" '
                f'stroke-width="{width}" stroke-opacity="{opacity}"/>')

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">', f"<title>{escape(title)}</title>",
           f'<rect width="{size}" height="{size}" fill="white"/>']
    for i in range(past.shape[0]):
        for s in samples:
            out.append(poly(np.concatenate([past[i, -1:], s[i]]), PRED_COLOR, 1, 0.5))
        out.append(poly(np.concatenate([past[i, -1:], truth[i]]), TRUTH_COLOR, 2))
        out.append(poly(past[i], PAST_COLOR, 2))
    out.append("</svg>")
    return "\n".join(out) + "\n"
