"""Central-slice montages with mask contours (deterministic PNG output)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

AXIS_NAMES = ("axis 0", "axis 1", "axis 2")
COLORS = ("#e41a1c", "#377eb8", "#4daf4a", "#ff7f00", "#984ea3", "#a65628")


def central_slices(data: np.ndarray) -> list[np.ndarray]:
    """The middle slice orthogonal to each axis."""
    return [np.take(data, data.shape[axis] // 2, axis=axis) for axis in range(3)]


def montage_layout(n_masks: int) -> tuple[int, int]:
    """(rows, columns): one row per axis, one plain column plus one per mask."""
    return 3, 1 + n_masks


def render_overlay(image: np.ndarray, masks: Sequence[np.ndarray], labels: Sequence[str], out,
                   dpi: int = 100) -> Path:
    image = np.asarray(image, dtype=np.float64)
    lo, hi = np.percentile(image, [1, 99])
    rows, cols = montage_layout(len(masks))
    fig = Figure(figsize=(2.2 * cols, 2.2 * rows), dpi=dpi)
    FigureCanvasAgg(fig)
    image_slices = central_slices(image)
    mask_slices = [central_slices(np.asarray(m) > 0) for m in masks]
    for r in range(rows):
        for c in range(cols):
            ax = fig.add_subplot(rows, cols, r * cols + c + 1)
            ax.imshow(image_slices[r].T, cmap="gray", vmin=lo, vmax=hi, origin="lower", interpolation="nearest")
            if c > 0:
                m = mask_slices[c - 1][r]
                # an empty slice has no contour to draw
                if m.any() and not m.all():
                    ax.contour(m.T.astype(float), levels=[0.5], colors=[COLORS[(c - 1) % len(COLORS)]],
                               linewidths=1.0)
            if r == 0:
                ax.set_title("image" if c == 0 else labels[c - 1], fontsize=8)
            if c == 0:
                ax.set_ylabel(AXIS_NAMES[r], fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="png", metadata={"Software": None})
    return out
