"""Deterministic SVG figures and histogram tables.

Figures are written with a fixed SVG hash salt and no date metadata so the
same inputs always produce the same bytes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

HASH_SALT = "imanifold"
DEFAULT_FLOOR = -1e4


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": HASH_SALT, "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _no_data(ax, message: str = "no data"):
    ax.text(0.5, 0.5, message, ha="center", va="center", transform=ax.transAxes)
    ax.set_xticks([])
    ax.set_yticks([])


@dataclass
class Histogram:
    edges: np.ndarray
    density: np.ndarray
    excluded: int  # values below the floor (or non-finite)
    used: int

    @property
    def mass(self) -> float:
        return float(np.sum(self.density * np.diff(self.edges)))


def histogram(values, bins: int = 50, floor: float | None = DEFAULT_FLOOR) -> Histogram:
    """Density-normalised histogram of the values at or above ``floor``."""
    if bins < 1:
        raise ValueError("bins must be at least 1")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    keep = np.isfinite(v)
    if floor is not None:
        keep &= v >= floor
    kept = v[keep]
    if kept.size == 0:
        return Histogram(np.zeros(0), np.zeros(0), int(v.size), 0)
    density, edges = np.histogram(kept, bins=bins, density=True)
    return Histogram(edges, density, int(v.size - kept.size), int(kept.size))


def write_histogram_csv(path, hist: Histogram) -> Path:
    """Bin table plus a JSON sidecar holding the excluded count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_left", "bin_right", "density"))
        for lo, hi, d in zip(hist.edges[:-1], hist.edges[1:], hist.density):
            w.writerow((repr(float(lo)), repr(float(hi)), repr(float(d))))
    path.with_suffix(".json").write_text(json.dumps({"excluded": hist.excluded, "used": hist.used}, sort_keys=True))
    return path


def emit_histogram(svg_path, csv_path, values, bins: int = 50, floor: float | None = DEFAULT_FLOOR,
                   title: str = "", xlabel: str = "value") -> Histogram:
    hist = histogram(values, bins, floor)
    write_histogram_csv(csv_path, hist)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if hist.used == 0:
        _no_data(ax, f"no data ({hist.excluded} values excluded)")
    else:
        ax.stairs(hist.density, hist.edges, fill=True, alpha=0.6)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("density")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, svg_path)
    return hist


def histogram_panels(svg_path, panels: dict[str, dict[str, np.ndarray]], bins: int = 50,
                     floor: float | None = DEFAULT_FLOOR, xlabel: str = "log-probability") -> Path:
    """One panel per key, each overlaying several labelled distributions."""
    fig, axes = plt.subplots(1, max(len(panels), 1), figsize=(4.2 * max(len(panels), 1), 3.5), squeeze=False)
    for ax, (title, groups) in zip(axes[0], panels.items()):
        drawn = False
        for label, values in groups.items():
            hist = histogram(values, bins, floor)
            if hist.used:
                ax.stairs(hist.density, hist.edges, fill=True, alpha=0.45, label=f"{label} (excl. {hist.excluded})")
                drawn = True
        if drawn:
            ax.legend(fontsize=7)
            ax.set_xlabel(xlabel)
        else:
            _no_data(ax)
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, svg_path)


def bar_chart(svg_path, names, values, title: str = "", ylabel: str = "") -> Path:
    names = list(names)
    values = np.asarray(values, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(names) + 2), 3.5))
    if len(names) == 0:
        _no_data(ax)
    else:
        ax.bar(range(len(names)), np.nan_to_num(values), color="tab:blue")
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
        ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, svg_path)


def latent_scatter(svg_path, points, labels=None, centers=None, title: str = "") -> Path:
    """2-D latent scatter with cell boundaries midway between neighbouring centres."""
    pts = np.asarray(points, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if pts.size == 0:
        _no_data(ax)
    else:
        ax.scatter(pts[:, 0], pts[:, 1], c=labels, s=3, cmap="tab20" if labels is not None else None)
        if centers is not None:
            for axis, cs in enumerate(centers[:2]):
                cs = np.asarray(cs, dtype=np.float64)
                for b in (cs[1:] + cs[:-1]) / 2:
                    (ax.axvline if axis == 0 else ax.axhline)(b, color="red", lw=0.6)
        ax.set_xlabel("z1")
        ax.set_ylabel("z2")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, svg_path)


def sample_scatter(svg_path, sets: dict[str, np.ndarray], title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if not sets:
        _no_data(ax)
    for label, pts in sets.items():
        pts = np.asarray(pts)
        ax.scatter(pts[:, 0], pts[:, 1], s=2, alpha=0.5, label=label)
    if sets:
        ax.legend(fontsize=7, markerscale=4)
    ax.set_title(title)
    ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    return _save(fig, svg_path)


def image_strip(svg_path, rows: dict[str, np.ndarray], side: int = 16, captions: dict[str, list] | None = None,
                correct: dict[str, list] | None = None, title: str = "") -> Path:
    """Grid of grey images, one labelled row per key.

    ``captions`` adds a text label under each image, coloured green when the
    matching ``correct`` entry is true and red otherwise.
    """
    names = list(rows)
    n_cols = max((len(np.asarray(r)) for r in rows.values()), default=0)
    fig, axes = plt.subplots(max(len(names), 1), max(n_cols, 1), figsize=(0.9 * max(n_cols, 1) + 1,
                             1.1 * max(len(names), 1)), squeeze=False)
    for i, name in enumerate(names):
        imgs = np.asarray(rows[name], dtype=np.float64).reshape(-1, side, side)
        for j in range(n_cols):
            ax = axes[i, j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j < len(imgs):
                ax.imshow(imgs[j], cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
                if captions and name in captions:
                    ok = correct[name][j] if correct and name in correct else True
                    ax.set_xlabel(str(captions[name][j]), fontsize=7, color="green" if ok else "red")
            else:
                ax.axis("off")
        axes[i, 0].set_ylabel(name, fontsize=7)
    if not names:
        _no_data(axes[0, 0])
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, svg_path)
