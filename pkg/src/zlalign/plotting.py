"""Static figure output (PNG) for the PCA view and the ablation grid."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}

_MARKERS = {"vision": "*", "reference": "o", "text_gt": "s", "text_g": "^", "base": "^", "tuned": "v"}
_WIDTH_COLORS = {128: "tab:orange", 256: "tab:cyan", 512: "tab:purple", 1024: "tab:pink"}


def _save(fig, path, config: dict | None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Software": "zlalign"}
    if config is not None:
        meta["Description"] = json.dumps(config, sort_keys=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def plot_pca(projection, path, title: str = "2-D PCA of vision and text features", config: dict | None = None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        tags = list(dict.fromkeys(projection.tags))
        for tag in tags:
            pts = projection.points[[i for i, t in enumerate(projection.tags) if t == tag]]
            size = 120 if tag == "vision" else 30
            ax.scatter(pts[:, 0], pts[:, 1], marker=_MARKERS.get(tag, "o"), s=size, label=tag, alpha=0.8)
        ev = projection.explained_variance
        ax.set_xlabel(f"PC1 (var {ev[0]:.3g})")
        ax.set_ylabel(f"PC2 (var {ev[1]:.3g})" if len(ev) > 1 else "PC2")
        ax.set_title(title)
        ax.legend(loc="best")
        fig.tight_layout()
        return _save(fig, path, config)


def plot_ablation(rows: list[dict], path, metric: str = "BERTS", config: dict | None = None):
    """One panel per variant: ``metric`` against data size, one line per width."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(variants), figsize=(4.2 * len(variants), 3.4), squeeze=False)
        for ax, variant in zip(axes[0], variants):
            sub = [r for r in rows if r["variant"] == variant]
            for width in sorted({r["width"] for r in sub}):
                pts = sorted((r["size"], r[metric]) for r in sub if r["width"] == width)
                ax.plot(*zip(*pts), marker="o", label=f"width={width}", color=_WIDTH_COLORS.get(width))
            ax.set_xlabel("mapper data size (samples)")
            ax.set_ylabel(metric)
            ax.set_title(f"variant {variant}")
            ax.legend(loc="best")
        fig.tight_layout()
        return _save(fig, path, config)
