"""Open-vocabulary inference: render features, decode to 512-d, score against
a query embedding, and compute segmentation/localization metrics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .codec import Autoencoder
from .errors import CheckpointIncomplete, EmptyQuerySet
from .grid import SparseVoxelGrid
from .modulate import ModulationNet, modulate_features
from .raster import Camera, render

logger = logging.getLogger(__name__)

TAU_Q = 0.5
_NORM_EPS = 1e-12


@dataclass
class QueryEmbedding:
    """A 512-d unit query vector with its label."""

    vector: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(v)
        if n <= _NORM_EPS:
            raise ValueError("query embedding must be nonzero")
        if abs(n - 1.0) > 1e-6:
            v = v / n
        self.vector = v


@dataclass
class RelevanceResult:
    relevance: np.ndarray  # (H, W) cosine similarity in [-1, 1]
    mask: np.ndarray       # (H, W) bool at the configured threshold
    argmax: tuple          # (x, y) localization pixel, first in scan order
    label: str = ""


def _threshold_mask(rel, tau):
    lo, hi = float(rel.min()), float(rel.max())
    if hi - lo < 1e-9:
        return rel > tau
    norm = (rel - lo) / (hi - lo)
    return norm > tau


def relevance_from_features(m_f, codec: Autoencoder, q: QueryEmbedding, tau: float = TAU_Q) -> RelevanceResult:
    """Cosine relevance of decoded per-pixel features against the query."""
    decoded = codec.decode(m_f)
    norms = np.maximum(np.linalg.norm(decoded, axis=-1), _NORM_EPS)
    rel = (decoded @ q.vector) / norms
    rel = np.clip(rel, -1.0, 1.0)
    flat = int(np.argmax(rel))
    h, w = rel.shape
    return RelevanceResult(
        relevance=rel, mask=_threshold_mask(rel, tau),
        argmax=(flat % w, flat // w), label=q.label,
    )


def relevance(
    grid: SparseVoxelGrid,
    cam: Camera,
    codec: Optional[Autoencoder],
    q: QueryEmbedding,
    net: Optional[ModulationNet] = None,
    tau: float = TAU_Q,
    n_samples: int = 3,
) -> RelevanceResult:
    """Render the view's modulated feature map and score it against the query."""
    if codec is None or net is None:
        raise CheckpointIncomplete("query needs both the codec and the modulation net")
    bundle = render(grid, cam, n_samples=n_samples, with_tape=False, with_normals=False)
    m_f = modulate_features(bundle.feat, net)
    return relevance_from_features(m_f, codec, q, tau=tau)


def iou(pred_mask, gt_mask) -> float:
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def miou(pred_masks, gt_masks) -> float:
    """Mean IoU over aligned (prediction, ground-truth) mask pairs."""
    if len(pred_masks) == 0 or len(pred_masks) != len(gt_masks):
        raise EmptyQuerySet("need at least one aligned mask pair")
    return float(np.mean([iou(p, g) for p, g in zip(pred_masks, gt_masks)]))


def macc(points, gt_regions) -> float:
    """Mean localization accuracy: fraction of argmax points inside ground truth.

    Each region is either a boolean mask or an (x0, y0, x1, y1) box (inclusive).
    """
    if len(points) == 0 or len(points) != len(gt_regions):
        raise EmptyQuerySet("need at least one aligned point/region pair")
    correct = 0
    for (x, y), region in zip(points, gt_regions):
        region_arr = np.asarray(region)
        if region_arr.dtype == bool:
            inside = bool(region_arr[int(y), int(x)])
        else:
            x0, y0, x1, y1 = region_arr.astype(float)
            inside = x0 <= x <= x1 and y0 <= y <= y1
        correct += int(inside)
    return correct / len(points)
