"""Attention-weight heatmap export as CSV or PGM (P2) files.

PGM pixel values are round(255 * weight) with round-half-to-even, so a
uniform 2x2 map renders as 128 and exact zeros stay exactly 0.  Row i of
the image is query position i.
"""

from __future__ import annotations

import numpy as np

from .fileio import atomic_write_text

HEATMAP_FORMATS = ("csv", "pgm")


def heatmap_pgm(a: np.ndarray) -> str:
    a = np.asarray(a)
    pixels = np.rint(255.0 * a).astype(int)
    if pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("heatmap values must lie in [0, 1]")
    lines = ["P2", f"{a.shape[1]} {a.shape[0]}", "255"]
    for row in pixels:
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def heatmap_csv(a: np.ndarray) -> str:
    a = np.asarray(a)
    return "\n".join(",".join(f"{v:.8f}" for v in row) for row in a) + "\n"


def parse_pgm(text: str) -> np.ndarray:
    """Read back a P2 file written by :func:`heatmap_pgm`."""
    tokens = text.split()
    if tokens[0] != "P2":
        raise ValueError("not a P2 PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:4 + w * h], dtype=np.int64)
    return vals.reshape(h, w)


def export_heatmap(a: np.ndarray, path: str, format: str = "pgm") -> None:
    """Write one attention matrix to ``path`` in the chosen format.

    Rows must be probability distributions (entries in [0, 1]); the write
    is atomic (temp file + rename).
    """
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"heatmap expects a rank-2 matrix, got shape {a.shape}")
    if format not in HEATMAP_FORMATS:
        raise ValueError(f"unknown heatmap format {format!r}")
    text = heatmap_pgm(a) if format == "pgm" else heatmap_csv(a)
    atomic_write_text(path, text)
