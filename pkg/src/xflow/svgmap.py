"""Hand-emitted SVG heatmaps of importance scores.

No plotting dependency: rectangles with grayscale fills and <title>
tooltips, formatted with fixed precision so identical inputs always give
identical bytes.
"""

from __future__ import annotations

import numpy as np

_HEADER = ('<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
           'viewBox="0 0 {w} {h}">\n')


def _normalize(scores):
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi - lo < 1e-30:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def _fill(v):
    g = int(round(255.0 * (1.0 - v)))
    return f"rgb({g},{g},{g})"


def render_unit_heatmap(scores, topk, present=None, cell=12):
    """One rectangle per unit; darker means more important, the Top-K
    selection is outlined."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    norm = _normalize(scores)
    chosen = set(int(i) for i in np.asarray(topk).ravel()) if topk is not None else set()
    parts = [_HEADER.format(w=n * cell, h=cell)]
    for j in range(n):
        absent = present is not None and not present[j]
        fill = "#ffffff" if absent else _fill(norm[j])
        stroke = ' stroke="#d04000" stroke-width="1.5"' if j in chosen else ' stroke="#cccccc" stroke-width="0.5"'
        title = f"unit {j}: pad" if absent else f"unit {j}: {scores[j]:.6f}"
        parts.append(f'<rect x="{j * cell}" y="0" width="{cell}" height="{cell}" '
                     f'fill="{fill}"{stroke}><title>{title}</title></rect>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def render_interaction_heatmap(matrix, topk_pairs, cell=6):
    """Grid heatmap of pairwise scores with the Top-K pairs outlined."""
    m = np.asarray(matrix, dtype=np.float64)
    n = m.shape[0]
    norm = _normalize(m)
    chosen = {(int(i), int(j)) for i, j in np.asarray(topk_pairs).reshape(-1, 2)} \
        if topk_pairs is not None else set()
    parts = [_HEADER.format(w=n * cell, h=n * cell)]
    for i in range(n):
        for j in range(n):
            stroke = ' stroke="#d04000" stroke-width="1"' if (i, j) in chosen else ""
            parts.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{_fill(norm[i, j])}"{stroke}>'
                         f'<title>({i},{j}): {m[i, j]:.6f}</title></rect>\n')
    parts.append("</svg>\n")
    return "".join(parts)
