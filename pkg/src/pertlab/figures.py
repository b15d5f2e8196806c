"""SVG rendering for sweep tables and prediction maps.

Everything routes through Agg with a pinned svg.hashsalt and no Date
metadata, so rendering the same object twice gives byte-identical files
(replay depends on this).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .experiments import MapResult, Table, collapse_best

_HASHSALT = "pertlab-fixed-salt"

_SERIES = [
    ("acc_f_train", "train acc of f"),
    ("acc_g_clean", "clean acc of g"),
    ("agreement_test", "sign agreement"),
    ("mean_cosine", "mean cosine"),
]


def _fresh_figure(*args, **kwargs):
    matplotlib.rcParams["svg.hashsalt"] = _HASHSALT
    return plt.subplots(*args, **kwargs)


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _render_table(tab: Table, path: Path) -> None:
    if "value" not in tab.columns:
        raise ValueError("can only render sweep-style tables (no 'value' column)")
    best = collapse_best(tab) if len(tab.rows) else tab
    values = sorted({row["value"] for row in best.rows})
    axis = best.rows[0]["axis"] if best.rows else ""

    fig, ax = _fresh_figure(figsize=(5.0, 3.4))
    for key, label in _SERIES:
        ys = []
        for v in values:
            pts = [r[key] for r in best.rows if r["value"] == v and np.isfinite(r[key])]
            ys.append(float(np.median(pts)) if pts else np.nan)
        if all(np.isnan(y) for y in ys):
            continue
        ax.plot(values, ys, marker="o", markersize=3, label=label)
    if values and values[0] > 0 and max(values) / min(values) >= 50:
        ax.set_xscale("log")
    ax.set_xlabel(str(axis))
    ax.set_ylabel("median over seeds")
    ax.grid(True, alpha=0.3)
    if best.rows:
        ax.legend(fontsize=8)
    _save(fig, path)


def _render_map(mp: MapResult, path: Path) -> None:
    L = mp.extent
    lin = np.linspace(-L, L, mp.resolution)
    panels = [
        (mp.f_sign, "sgn f (net)"),
        (mp.g_sign, "sgn g (net)"),
        (mp.cond_all.astype(float), "all conditions"),
    ]
    fig, axes = _fresh_figure(1, 3, figsize=(10.5, 3.6), sharey=True)
    for ax, (grid, title) in zip(axes, panels):
        # grid is indexed [i_s, i_t]; transpose so s runs along x
        ax.imshow(
            grid.T,
            origin="lower",
            extent=(-L, L, -L, L),
            cmap="coolwarm",
            vmin=-1,
            vmax=1,
            interpolation="nearest",
        )
        for vals, style in ((mp.fhat, "solid"), (mp.ghat, "dashed")):
            if np.any(vals > 0) and np.any(vals < 0):
                ax.contour(
                    lin, lin, vals.T, levels=[0.0], colors="k", linestyles=style,
                    linewidths=0.8,
                )
        pos = mp.sample_y == 1
        ax.scatter(mp.sample_s[pos], mp.sample_t[pos], s=4, c="w", edgecolors="k",
                   linewidths=0.3, marker="o")
        ax.scatter(mp.sample_s[~pos], mp.sample_t[~pos], s=4, c="k", marker="x",
                   linewidths=0.5)
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("s (along u+)")
    axes[0].set_ylabel("t (along u-)")
    _save(fig, path)


def render(obj, path) -> Path:
    path = Path(path)
    if isinstance(obj, MapResult):
        _render_map(obj, path)
    elif isinstance(obj, Table):
        _render_table(obj, path)
    else:
        raise TypeError(f"cannot render {type(obj).__name__} as a figure")
    return path
