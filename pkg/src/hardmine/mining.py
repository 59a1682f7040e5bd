"""Loss Rank Mining over the three detector feature maps.

For every scale the per-cell losses of each image are flattened, ranked, and
only the top ``rank_b`` fraction of cells is kept. The kept losses are
averaged per image, the image means are averaged per scale, and the three
scale means are summed. The selection is a hard mask: it is recomputed on
every call and treated as a constant when differentiating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from hardmine.errors import ConfigError, DataError
from hardmine.losses import Kernel, LossConfig, Variant, balanced_focal_loss, kernel_for

NUM_SCALES = 3


@dataclass
class ScaleMap:
    """One feature map for a mini-batch: arrays shaped (N, H, W[, 4])."""

    p: np.ndarray
    t: np.ndarray
    box_pred: Optional[np.ndarray] = None
    box_target: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.t = np.asarray(self.t)
        if self.p.ndim != 3:
            raise DataError(f"objectness grid must be (N, H, W), got shape {self.p.shape}")
        if self.t.shape != self.p.shape:
            raise DataError(f"target grid {self.t.shape} does not match prediction grid {self.p.shape}")
        if np.any((self.p < 0.0) | (self.p > 1.0)) or not np.all(np.isfinite(self.p)):
            raise DataError("objectness values must lie in [0, 1]")
        if np.any((self.t != 0) & (self.t != 1)):
            raise DataError("objectness targets must be 0 or 1")
        for name in ("box_pred", "box_target"):
            box = getattr(self, name)
            if box is not None and np.shape(box) != self.p.shape + (4,):
                raise DataError(f"{name} must have shape {self.p.shape + (4,)}, got {np.shape(box)}")

    @property
    def shape(self):
        return self.p.shape


@dataclass
class FeatureMapBatch:
    scales: Sequence[ScaleMap]

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if len(self.scales) != NUM_SCALES:
            raise DataError(f"expected {NUM_SCALES} feature maps, got {len(self.scales)}")
        n = {s.p.shape[0] for s in self.scales}
        if len(n) != 1:
            raise DataError(f"feature maps disagree on batch size: {sorted(n)}")

    @property
    def batch_size(self) -> int:
        return self.scales[0].p.shape[0]


@dataclass
class ObjectnessResult:
    """Scalar objectness loss plus per-scale d(loss)/dp and selection masks."""

    value: float
    grads: list
    masks: list
    scale_values: list


def flatten_per_image(grid) -> np.ndarray:
    """(N, H, W) cell values -> (N, H*W), row-major within each image."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise DataError(f"expected a (N, H, W) grid, got shape {grid.shape}")
    return grid.reshape(grid.shape[0], grid.shape[1] * grid.shape[2])


def selection_count(n: int, rank_b: float) -> int:
    """``max(1, ceil(rank_b * n))`` with ``rank_b`` read as its decimal literal."""
    if not 0.0 < rank_b <= 1.0:
        raise ConfigError(f"rank factor must lie in (0, 1], got {rank_b}")
    # 0.3 * 10 is 3.0000000000000004 in binary floating point
    return max(1, math.ceil(Fraction(repr(float(rank_b))) * n))


def select_top_b(losses, rank_b: float) -> np.ndarray:
    """Indices of the ``selection_count`` largest losses, highest first.

    Equal losses keep ascending index order.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise DataError("select_top_b needs a non-empty 1-D loss vector")
    if not np.all(np.isfinite(losses)):
        raise DataError("loss vector contains non-finite values")
    k = selection_count(losses.size, rank_b)
    return np.argsort(-losses, kind="stable")[:k]


def _top_b_rows(values: np.ndarray, rank_b: float):
    """Row-wise select_top_b on an (N, n) matrix; returns (indices, k)."""
    k = selection_count(values.shape[1], rank_b)
    order = np.argsort(-values, axis=1, kind="stable")
    return order[:, :k], k


def lrm_objectness_loss(batch: FeatureMapBatch, cfg: LossConfig, base_kernel: Optional[Kernel] = None) -> ObjectnessResult:
    if not 0.0 < cfg.rank_b <= 1.0:
        raise ConfigError(f"rank factor must lie in (0, 1], got {cfg.rank_b}")
    if base_kernel is None:
        base_kernel = kernel_for(cfg)
    total = 0.0
    grads, masks, scale_values = [], [], []
    for scale in batch.scales:
        n_img, h, w = scale.shape
        cell = base_kernel(scale.p, scale.t)
        values = flatten_per_image(np.broadcast_to(cell.value, scale.shape))
        d_dp = flatten_per_image(np.broadcast_to(cell.d_dp, scale.shape))
        idx, k = _top_b_rows(values, cfg.rank_b)
        rows = np.arange(n_img)[:, None]
        selected = values[rows, idx]
        scale_value = float(np.mean(selected.mean(axis=1)))
        mask = np.zeros_like(values, dtype=bool)
        mask[rows, idx] = True
        grad = np.where(mask, d_dp / (k * n_img), 0.0)
        total += scale_value
        scale_values.append(scale_value)
        grads.append(grad.reshape(n_img, h, w))
        masks.append(mask.reshape(n_img, h, w))
    return ObjectnessResult(total, grads, masks, scale_values)


def mean_objectness_loss(batch: FeatureMapBatch, base_kernel: Kernel) -> ObjectnessResult:
    """Default reduction: mean over all cells of each scale, summed over scales."""
    total = 0.0
    grads, masks, scale_values = [], [], []
    for scale in batch.scales:
        cell = base_kernel(scale.p, scale.t)
        value = np.broadcast_to(cell.value, scale.shape)
        scale_value = float(value.mean())
        total += scale_value
        scale_values.append(scale_value)
        grads.append(np.broadcast_to(cell.d_dp, scale.shape) / value.size)
        masks.append(np.ones(scale.shape, dtype=bool))
    return ObjectnessResult(total, grads, masks, scale_values)


def combined_objectness_loss(batch: FeatureMapBatch, cfg: LossConfig) -> ObjectnessResult:
    """LRM over balanced focal cell losses."""
    return lrm_objectness_loss(batch, cfg, lambda p, t: balanced_focal_loss(p, t, cfg))


def objectness_loss(batch: FeatureMapBatch, cfg: LossConfig) -> ObjectnessResult:
    """Objectness term for any of the five loss variants."""
    if cfg.variant is Variant.COMBINED:
        return combined_objectness_loss(batch, cfg)
    if cfg.variant is Variant.LRM:
        return lrm_objectness_loss(batch, cfg)
    return mean_objectness_loss(batch, kernel_for(cfg))


def selection_margins(batch: FeatureMapBatch, cfg: LossConfig, base_kernel: Optional[Kernel] = None) -> list:
    """Per scale, per image gap between the k-th and (k+1)-th largest loss.

    ``inf`` where every cell is selected. Used to reject tie-prone batches
    before finite-difference checks.
    """
    if cfg.variant not in (Variant.LRM, Variant.COMBINED):
        return [np.full(s.shape[0], np.inf) for s in batch.scales]
    if base_kernel is None:
        base_kernel = kernel_for(cfg)
    out = []
    for scale in batch.scales:
        values = flatten_per_image(np.broadcast_to(base_kernel(scale.p, scale.t).value, scale.shape))
        n = values.shape[1]
        k = selection_count(n, cfg.rank_b)
        if k >= n:
            out.append(np.full(values.shape[0], np.inf))
            continue
        ranked = -np.sort(-values, axis=1)
        out.append(ranked[:, k - 1] - ranked[:, k])
    return out
