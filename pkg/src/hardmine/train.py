"""Loss composition, plain-SGD training, gradient auditing and inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from hardmine.data import Frame, GridSpec, images_array, stack_targets
from hardmine.detector import DEFAULT_CHANNELS, GridDetector, sigmoid
from hardmine.errors import BoundaryTieError, ConfigError, DataError, NumericError, TrainingError
from hardmine.evaluation import Detection
from hardmine.losses import LossConfig, Variant
from hardmine.mining import FeatureMapBatch, ScaleMap, objectness_loss, selection_margins

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    lambda_box: float = 1.0
    lr: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    channels: tuple = DEFAULT_CHANNELS

    def __post_init__(self):
        if not self.lr >= 0.0:
            raise ConfigError(f"train.lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_box < 0.0:
            raise ConfigError(f"train.lambda_box must be >= 0, got {self.lambda_box}")


@dataclass
class LossBreakdown:
    total: float
    box: float
    objectness: float
    grad: np.ndarray
    objectness_result: object = None
    d_logits: list = None


def smooth_l1(diff):
    a = np.abs(diff)
    value = np.where(a < 1.0, 0.5 * diff * diff, a - 0.5)
    grad = np.where(a < 1.0, diff, np.sign(diff))
    return value, grad


def prepare(frames: Sequence[Frame], grid: GridSpec):
    """Image tensor and per-scale targets for a list of frames."""
    if not frames:
        raise DataError("empty dataset")
    return images_array(frames), stack_targets(frames, grid)


def feature_maps(model: GridDetector, heads, targets) -> FeatureMapBatch:
    scales = []
    for raw, (t, box_t) in zip(heads, targets):
        scales.append(ScaleMap(sigmoid(raw[..., 0]), t, raw[..., 1:], box_t))
    return FeatureMapBatch(scales)


def compute_loss(model: GridDetector, images, targets, cfg: TrainConfig, params=None, need_grad=True) -> LossBreakdown:
    """Total loss ``lambda_box * box + objectness`` and its parameter gradient.

    The box term is smooth-L1 summed over the four regression outputs,
    averaged over each image's positive cells and then over the images of the
    batch (images without a target contribute zero). Both terms are therefore
    per-image means, so epoch averages do not depend on how frames are batched.
    """
    heads, cache = model.forward(images, params)
    if not all(np.all(np.isfinite(h)) for h in heads):
        raise NumericError("network produced non-finite outputs")
    batch = feature_maps(model, heads, targets)
    obj = objectness_loss(batch, cfg.loss)
    n_img = batch.batch_size
    pos_per_image = sum(s.t.reshape(n_img, -1).sum(axis=1) for s in batch.scales)
    weight = np.where(pos_per_image > 0, 1.0 / (np.maximum(pos_per_image, 1) * n_img), 0.0)
    box_value = 0.0
    d_heads = []
    for scale, raw, g_p in zip(batch.scales, heads, obj.grads):
        d_raw = np.zeros_like(raw)
        # dp/dlogit = p (1 - p)
        d_raw[..., 0] = g_p * scale.p * (1.0 - scale.p)
        pos = scale.t.astype(bool)
        if pos.any():
            value, grad = smooth_l1(scale.box_pred[pos] - scale.box_target[pos])
            w = np.broadcast_to(weight[:, None, None], pos.shape)[pos]
            box_value += float((value.sum(axis=1) * w).sum())
            d_raw[..., 1:][pos] = cfg.lambda_box * grad * w[:, None]
        d_heads.append(d_raw)
    total = cfg.lambda_box * box_value + obj.value
    grad = model.backward(d_heads, cache, params) if need_grad else None
    return LossBreakdown(total, box_value, obj.value, grad, obj, [d[..., 0] for d in d_heads])


@dataclass
class TrainResult:
    model: GridDetector
    history: List[dict]
    initial_params: np.ndarray


def train(frames: Sequence[Frame], cfg: TrainConfig, grid: Optional[GridSpec] = None, callback=None) -> TrainResult:
    """Plain mini-batch SGD with a fixed learning rate.

    ``history`` holds one record per epoch with the frame-weighted mean of the
    total, box and objectness terms. A non-finite loss raises TrainingError.
    """
    if not frames:
        raise DataError("cannot train on an empty dataset")
    grid = grid or GridSpec(image_size=frames[0].image.shape[0])
    rng = np.random.default_rng(cfg.seed)
    model = GridDetector(grid, cfg.channels, seed=int(rng.integers(2**31)))
    initial = model.params.copy()
    images, targets = prepare(frames, grid)
    n = images.shape[0]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch_t = [(t[idx], b[idx]) for t, b in targets]
            try:
                out = compute_loss(model, images[idx], batch_t, cfg)
            except NumericError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}", epoch=epoch) from None
            if not (np.isfinite(out.total) and np.all(np.isfinite(out.grad))):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            if cfg.lr:
                model.params -= cfg.lr * out.grad
                if not np.all(np.isfinite(model.params)):
                    raise TrainingError(f"parameters diverged at epoch {epoch}", epoch=epoch)
            sums += len(idx) * np.array([out.total, out.box, out.objectness])
        record = {"epoch": epoch, "loss": sums[0] / n, "box": sums[1] / n, "objectness": sums[2] / n}
        history.append(record)
        log.debug("epoch %d loss %.6f (box %.6f, obj %.6f)", epoch, record["loss"], record["box"], record["objectness"])
        if callback is not None:
            callback(record)
    return TrainResult(model, history, initial)


def _masks_of(model, images, targets, cfg, params):
    heads, _ = model.forward(images, params)
    return objectness_loss(feature_maps(model, heads, targets), cfg.loss).masks


def audit_gradients(
    model: GridDetector,
    images,
    targets,
    cfg: TrainConfig,
    n_params: int = 100,
    h: float = 1e-6,
    seed: int = 0,
    min_margin: float = 1e-6,
):
    """Max relative error of the analytic gradient against central differences.

    Relative error is ``|analytic - numeric| / max(1, |analytic|)``, the same
    measure used for the per-cell kernels. Batches whose LRM selection sits
    within ``min_margin`` of a tie, or whose selection flips inside a
    perturbation, raise BoundaryTieError.
    """
    heads, _ = model.forward(images)
    batch = feature_maps(model, heads, targets)
    margins = selection_margins(batch, cfg.loss)
    worst = min(float(np.min(m)) for m in margins)
    if worst < min_margin:
        raise BoundaryTieError(f"LRM selection margin {worst:.3g} below {min_margin:.3g}; pick another batch")
    base = compute_loss(model, images, targets, cfg)
    base_masks = base.objectness_result.masks
    rng = np.random.default_rng(seed)
    n_params = min(n_params, model.num_params)
    picks = rng.choice(model.num_params, size=n_params, replace=False)
    errors = np.empty(n_params)
    theta = model.params.copy()
    for j, i in enumerate(picks):
        values = []
        for sign in (1.0, -1.0):
            probe = theta.copy()
            probe[i] += sign * h
            if cfg.loss.variant in (Variant.LRM, Variant.COMBINED):
                masks = _masks_of(model, images, targets, cfg, probe)
                if any(not np.array_equal(a, b) for a, b in zip(masks, base_masks)):
                    raise BoundaryTieError(f"selection changes when perturbing parameter {i}")
            values.append(compute_loss(model, images, targets, cfg, params=probe, need_grad=False).total)
        numeric = (values[0] - values[1]) / (2.0 * h)
        analytic = base.grad[i]
        errors[j] = abs(analytic - numeric) / max(1.0, abs(analytic))
    return float(errors.max()), picks, errors


# -- inference ----------------------------------------------------------------


def _nms(boxes, scores, iou_thr):
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        xx1 = np.maximum(boxes[i, 0], boxes[rest, 0])
        yy1 = np.maximum(boxes[i, 1], boxes[rest, 1])
        xx2 = np.minimum(boxes[i, 2], boxes[rest, 2])
        yy2 = np.minimum(boxes[i, 3], boxes[rest, 3])
        inter = np.clip(xx2 - xx1, 0, None) * np.clip(yy2 - yy1, 0, None)
        area = lambda b: (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])  # noqa: E731
        ov = inter / (area(boxes[i]) + area(boxes[rest]) - inter)
        order = rest[ov <= iou_thr]
    return keep


def detect(
    model: GridDetector,
    frames: Sequence[Frame],
    min_conf: float = 0.001,
    nms_iou: float = 0.5,
    max_det: int = 10,
    batch_size: int = 128,
) -> List[Detection]:
    """Decode every cell of every scale, then per-frame greedy NMS."""
    out = []
    for start in range(0, len(frames), batch_size):
        chunk = frames[start : start + batch_size]
        heads, _ = model.forward(images_array(chunk))
        decoded = model.decode(heads)
        for k, frame in enumerate(chunk):
            scores = np.concatenate([p[k].ravel() for p, _ in decoded])
            boxes = np.concatenate([b[k].reshape(-1, 4) for _, b in decoded])
            valid = (scores >= min_conf) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
            scores, boxes = scores[valid], boxes[valid]
            for i in _nms(boxes, scores, nms_iou)[:max_det]:
                box = tuple(round(float(v), 4) for v in boxes[i])
                if box[2] > box[0] and box[3] > box[1]:
                    out.append(Detection(frame.frame_id, box, round(float(scores[i]), 6)))
    return out
