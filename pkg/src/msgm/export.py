"""Adjacency export: CSV matrices, JSON statistics and SVG heatmaps."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .model import MsgmModel


def effective_adjacency(raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """What the encoders see: symmetrised, self-loops removed, masked."""
    offdiag = ~np.eye(raw.shape[0], dtype=bool)
    return (raw + raw.T) / 2.0 * (mask & offdiag)


def write_matrix_csv(path: Path, mat: np.ndarray, labels: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(labels)
        for row in mat:
            w.writerow([repr(float(x)) for x in row])


def heatmap_svg(mat: np.ndarray, labels: Sequence[str], title: str, cell: int = 12) -> str:
    c = mat.shape[0]
    margin = 48
    size = margin + c * cell + 8
    vmax = float(mat.max()) if mat.size and mat.max() > 0 else 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 16}" '
        f'font-family="sans-serif" font-size="{max(cell - 4, 6)}">',
        f'<text x="{margin}" y="12">{escape(title)}</text>',
    ]
    for i in range(c):
        y = margin + i * cell + 16
        parts.append(f'<text x="{margin - 2}" y="{y + cell - 3}" text-anchor="end">{escape(labels[i])}</text>')
        parts.append(
            f'<text transform="translate({margin + i * cell + cell - 3},{margin + 12}) rotate(-90)">'
            f'{escape(labels[i])}</text>'
        )
        for j in range(c):
            v = max(float(mat[i, j]), 0.0) / vmax
            shade = int(round(255 * (1.0 - v)))
            parts.append(
                f'<rect x="{margin + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb(255,{shade},{shade})"><title>{escape(labels[i])}-{escape(labels[j])}: '
                f'{float(mat[i, j]):.4g}</title></rect>'
            )
    parts.append("</svg>")
    return "\n".join(parts)


def export_graphs(model: MsgmModel, k: int, out: Path) -> list[Path]:
    """Initial and trained global/local adjacency for scale ``k``, both stacked copies."""
    if model.priors is None or not 0 <= k < len(model.priors):
        n = 0 if model.priors is None else len(model.priors)
        raise IndexError(f"scale {k} out of range; checkpoint has {n} scale(s)")
    prior = model.priors[k]
    labels = list(model.regions.channel_names)
    full = np.ones_like(prior.local_mask)
    sources = {
        ("initial", "global"): (prior.init_global, full),
        ("initial", "local"): (prior.init_local, prior.local_mask),
        ("trained", "global"): (prior.G_global.data, full),
        ("trained", "local"): (prior.G_local.data, prior.local_mask),
    }
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (stage, kind), (stacked, mask) in sources.items():
        for copy in range(stacked.shape[0]):
            mat = effective_adjacency(stacked[copy], mask)
            stem = f"scale{k}_{stage}_{kind}_{copy}"
            write_matrix_csv(out / f"{stem}.csv", mat, labels)
            (out / f"{stem}.svg").write_text(heatmap_svg(mat, labels, f"{stage} {kind} graph, copy {copy}, scale {k}"))
            written += [out / f"{stem}.csv", out / f"{stem}.svg"]
    stats = dict(prior.stats.to_json(), scale=k, regions=model.regions.to_json())
    (out / f"scale{k}_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    written.append(out / f"scale{k}_stats.json")
    return written
