"""Hard-example-mining objectness losses and a toy single-shot grid detector."""

from hardmine.losses import (
    CellLoss,
    LossConfig,
    Variant,
    balanced_focal_loss,
    ce_loss,
    focal_loss,
    grad_check_cell,
)
from hardmine.mining import (
    FeatureMapBatch,
    ScaleMap,
    combined_objectness_loss,
    flatten_per_image,
    lrm_objectness_loss,
    mean_objectness_loss,
    objectness_loss,
    select_top_b,
    selection_count,
)

__version__ = "0.1.0"

__all__ = [
    "CellLoss",
    "FeatureMapBatch",
    "LossConfig",
    "ScaleMap",
    "Variant",
    "balanced_focal_loss",
    "ce_loss",
    "combined_objectness_loss",
    "flatten_per_image",
    "focal_loss",
    "grad_check_cell",
    "lrm_objectness_loss",
    "mean_objectness_loss",
    "objectness_loss",
    "select_top_b",
    "selection_count",
]
