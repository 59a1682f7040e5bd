"""Synthetic single-target scenes, grid target assignment and dataset files.

Each frame is a small grayscale image holding at most one target: a thin
"X" glyph standing in for a distant drone. Distractor blobs of comparable
size and contrast supply the hard negatives, and low-contrast targets supply
the hard positives.

On-disk layout of a dataset directory::

    frames/000000.pgm ...   8-bit binary PGM, one per frame
    gt.jsonl                {"frame_id": 0, "box": [x1, y1, x2, y2] | null}
    scene.json              the SceneSpec that produced the frames
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hardmine.errors import ConfigError, DataError

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    presence_prob: float = 0.7
    size_min: int = 10
    size_max: int = 24
    contrast_min: float = 0.12
    contrast_max: float = 0.6
    distractors_min: int = 0
    distractors_max: int = 3
    noise: float = 0.05
    seed: int = 7

    def validate(self, coarsest_stride: Optional[int] = None) -> None:
        if self.image_size < 1:
            raise ConfigError("scene.image_size must be positive")
        if coarsest_stride is not None and self.image_size % coarsest_stride:
            raise ConfigError(f"scene.image_size {self.image_size} is not divisible by stride {coarsest_stride}")
        if not 0.0 <= self.presence_prob <= 1.0:
            raise ConfigError("scene.presence_prob must lie in [0, 1]")
        if not 2 <= self.size_min <= self.size_max:
            raise ConfigError("scene.size_min must be >= 2 and <= scene.size_max")
        if self.size_max > self.image_size:
            raise ConfigError(f"scene.size_max {self.size_max} does not fit in a {self.image_size}px image")
        if not 0.0 < self.contrast_min <= self.contrast_max <= 1.0:
            raise ConfigError("scene contrast range must satisfy 0 < min <= max <= 1")
        if not 0 <= self.distractors_min <= self.distractors_max:
            raise ConfigError("scene distractor range must satisfy 0 <= min <= max")
        if self.noise < 0.0:
            raise ConfigError("scene.noise must be >= 0")


@dataclass(frozen=True)
class GridSpec:
    """Three square output grids, finest first; one anchor per cell."""

    image_size: int = 64
    sizes: Tuple[int, int, int] = (8, 4, 2)

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) != 3:
            raise ConfigError(f"grid.sizes needs exactly 3 scales, got {len(self.sizes)}")
        for s in self.sizes:
            if s < 1 or self.image_size % s:
                raise ConfigError(f"grid size {s} does not divide image size {self.image_size}")

    @property
    def strides(self) -> Tuple[int, int, int]:
        return tuple(self.image_size // s for s in self.sizes)

    @property
    def num_cells(self) -> int:
        return sum(s * s for s in self.sizes)


@dataclass
class Frame:
    frame_id: int
    image: np.ndarray  # (H, W) uint8
    box: Optional[Box] = None


@dataclass
class ScaleTargets:
    t: np.ndarray  # (G, G) int8
    box: np.ndarray  # (G, G, 4) float64, zero on negatives


def _draw_x(canvas, x0, y0, w, h, level, thickness):
    yy, xx = np.mgrid[y0 : y0 + h, x0 : x0 + w]
    u = (xx + 0.5 - x0) / w
    v = (yy + 0.5 - y0) / h
    half = thickness / (2.0 * max(w, h))
    stroke = (np.abs(u - v) <= half) | (np.abs(u + v - 1.0) <= half)
    canvas[y0 : y0 + h, x0 : x0 + w][stroke] += level


def _draw_blob(canvas, rng, size, level):
    n = canvas.shape[0]
    w = int(rng.integers(size[0], size[1] + 1))
    h = int(rng.integers(size[0], size[1] + 1))
    x0 = int(rng.integers(0, n - w + 1))
    y0 = int(rng.integers(0, n - h + 1))
    yy, xx = np.mgrid[0:n, 0:n]
    cx, cy = x0 + w / 2.0, y0 + h / 2.0
    if rng.random() < 0.5:
        inside = ((xx + 0.5 - cx) / (w / 2.0)) ** 2 + ((yy + 0.5 - cy) / (h / 2.0)) ** 2 <= 1.0
    else:
        inside = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    canvas[inside] += level


def generate_dataset(spec: SceneSpec, count: int, first_id: int = 0) -> List[Frame]:
    """Deterministically render ``count`` frames from ``spec.seed``."""
    spec.validate()
    if count < 1:
        raise ConfigError("frame count must be >= 1")
    rng = np.random.default_rng(spec.seed)
    n = spec.image_size
    frames = []
    yy, xx = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    for i in range(count):
        base = rng.uniform(0.15, 0.45)
        gx, gy = rng.uniform(-0.1, 0.1, size=2)
        canvas = base + gx * (xx - 0.5) + gy * (yy - 0.5)
        canvas = canvas + rng.normal(0.0, spec.noise, size=(n, n))
        for _ in range(int(rng.integers(spec.distractors_min, spec.distractors_max + 1))):
            level = rng.uniform(spec.contrast_min, spec.contrast_max) * rng.choice([-1.0, 1.0])
            _draw_blob(canvas, rng, (max(2, spec.size_min // 2), spec.size_max), level)
        box = None
        if rng.random() < spec.presence_prob:
            w = int(rng.integers(spec.size_min, spec.size_max + 1))
            h = int(rng.integers(spec.size_min, spec.size_max + 1))
            x0 = int(rng.integers(0, n - w + 1))
            y0 = int(rng.integers(0, n - h + 1))
            level = rng.uniform(spec.contrast_min, spec.contrast_max)
            _draw_x(canvas, x0, y0, w, h, level, thickness=rng.uniform(1.5, 2.5))
            box = (float(x0), float(y0), float(x0 + w), float(y0 + h))
        image = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
        frames.append(Frame(first_id + i, image, box))
    return frames


def build_targets(box: Optional[Sequence[float]], grid: GridSpec) -> List[ScaleTargets]:
    """Mark the cell holding the box center at every scale.

    Box regression targets are the center offset inside the cell (in [0, 1))
    and ``log(size / stride)`` for width and height.
    """
    out = []
    for g, stride in zip(grid.sizes, grid.strides):
        t = np.zeros((g, g), dtype=np.int8)
        reg = np.zeros((g, g, 4), dtype=np.float64)
        if box is not None:
            x1, y1, x2, y2 = (float(v) for v in box)
            if not (0.0 <= x1 < x2 <= grid.image_size and 0.0 <= y1 < y2 <= grid.image_size):
                raise DataError(f"box {box} lies outside the {grid.image_size}px image")
            cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
            col = min(int(math.floor(cx / stride)), g - 1)
            row = min(int(math.floor(cy / stride)), g - 1)
            t[row, col] = 1
            reg[row, col] = (
                cx / stride - col,
                cy / stride - row,
                math.log((x2 - x1) / stride),
                math.log((y2 - y1) / stride),
            )
        out.append(ScaleTargets(t, reg))
    return out


def stack_targets(frames: Sequence[Frame], grid: GridSpec):
    """Per-scale (t, box) arrays for a list of frames: [(N,G,G), (N,G,G,4)] x 3."""
    per_frame = [build_targets(f.box, grid) for f in frames]
    return [
        (np.stack([ft[s].t for ft in per_frame]), np.stack([ft[s].box for ft in per_frame]))
        for s in range(len(grid.sizes))
    ]


def images_array(frames: Sequence[Frame]) -> np.ndarray:
    """(N, 1, H, W) float64 in [0, 1]."""
    return np.stack([f.image for f in frames]).astype(np.float64)[:, None] / 255.0


# -- file formats ---------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


def box_to_json(box):
    return None if box is None else [round(float(v), 6) for v in box]


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc.msg}") from None
    return out


def save_dataset(frames: Sequence[Frame], directory, spec: Optional[SceneSpec] = None) -> Path:
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_pgm(directory / "frames" / f"{f.frame_id:06d}.pgm", f.image)
    write_jsonl(directory / "gt.jsonl", ({"frame_id": f.frame_id, "box": box_to_json(f.box)} for f in frames))
    if spec is not None:
        (directory / "scene.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return directory


def parse_box(raw, where="") -> Optional[Box]:
    if raw is None:
        return None
    try:
        box = tuple(float(v) for v in raw)
    except (TypeError, ValueError):
        raise DataError(f"{where}malformed box {raw!r}") from None
    if len(box) != 4 or not (box[0] < box[2] and box[1] < box[3]):
        raise DataError(f"{where}box must be [x1, y1, x2, y2] with x1 < x2 and y1 < y2, got {raw!r}")
    return box


def load_ground_truth(path) -> dict:
    """frame_id -> optional box, from a gt JSON-lines file."""
    gts = {}
    for rec in read_jsonl(path):
        if "frame_id" not in rec:
            raise DataError(f"{path}: record without frame_id: {rec!r}")
        fid = int(rec["frame_id"])
        if fid in gts:
            raise DataError(f"{path}: duplicate frame_id {fid}")
        gts[fid] = parse_box(rec.get("box"), f"{path}: frame {fid}: ")
    return gts


def load_dataset(directory) -> List[Frame]:
    directory = Path(directory)
    gts = load_ground_truth(directory / "gt.jsonl")
    frames = []
    for fid in sorted(gts):
        img_path = directory / "frames" / f"{fid:06d}.pgm"
        if not img_path.is_file():
            raise DataError(f"missing image for frame {fid}: {img_path}")
        frames.append(Frame(fid, read_pgm(img_path), gts[fid]))
    if not frames:
        raise DataError(f"{directory}: dataset is empty")
    return frames
