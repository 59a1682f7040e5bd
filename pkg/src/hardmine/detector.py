"""A small single-shot grid detector in plain numpy (float64).

Backbone: a stack of stride-2 3x3 convolutions with leaky ReLU; the last three
feature maps each feed a 1x1 head emitting
(objectness logit, cx, cy, w, h) per cell. All parameters live in one flat
vector so they can be saved verbatim and probed by finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hardmine.data import GridSpec
from hardmine.errors import ConfigError, DataError

MODEL_MAGIC = b"HMDL1\n"
HEAD_OUTPUTS = 5
DEFAULT_CHANNELS = (8, 16, 24, 24, 24)
LEAK = 0.1
# fixed input standardisation for [0, 1] frames
INPUT_SHIFT = 0.5
INPUT_SCALE = 4.0
BOX_LOG_CLIP = 4.0


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    kernel: int
    stride: int
    pad: int


def _im2col(x, k, s, p):
    """NHWC input -> (N*Ho*Wo, C*k*k) patch matrix."""
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    n, ho, wo = win.shape[:3]
    return win.reshape(n * ho * wo, -1), (n, ho, wo)


def _col2im(dcols, x_shape, k, s, p, out_hw):
    n, h, w, c = x_shape
    ho, wo = out_hw
    d = dcols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dx[:, i : i + s * ho : s, j : j + s * wo : s, :] += d[..., i, j]
    if p:
        dx = dx[:, p:-p, p:-p, :]
    return dx


class GridDetector:
    """Parameters plus the forward/backward maps of the toy detector."""

    def __init__(self, grid: GridSpec, channels: Sequence[int] = DEFAULT_CHANNELS, params=None, seed: int = 0):
        strides = grid.strides
        base = strides[0]
        n_down = int(round(np.log2(base))) if base > 0 else -1
        if n_down < 1 or 2**n_down != base or strides[1] != 2 * base or strides[2] != 4 * base:
            raise ConfigError(f"detector needs grid strides (s, 2s, 4s) with s a power of two, got {strides}")
        if len(channels) != n_down + 2:
            raise ConfigError(f"grid stride {base} needs {n_down + 2} channel widths, got {len(channels)}")
        self.grid = grid
        self.channels = tuple(int(c) for c in channels)
        c_in = 1
        self.convs = []
        for i, c in enumerate(self.channels):
            self.convs.append(ConvSpec(f"conv{i + 1}", c_in, c, 3, 2, 1))
            c_in = c
        self.head_inputs = self.channels[-3:]
        self.layout: List[Tuple[str, tuple]] = []
        for cv in self.convs:
            self.layout.append((cv.name + ".w", (cv.c_out, cv.kernel * cv.kernel * cv.c_in)))
            self.layout.append((cv.name + ".b", (cv.c_out,)))
        for s, c in enumerate(self.head_inputs):
            self.layout.append((f"head{s}.w", (HEAD_OUTPUTS, c)))
            self.layout.append((f"head{s}.b", (HEAD_OUTPUTS,)))
        self._offsets = {}
        pos = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            self._offsets[name] = (pos, pos + size, shape)
            pos += size
        self.num_params = pos
        if params is None:
            params = self.init_params(seed)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.num_params,):
            raise DataError(f"expected {self.num_params} parameters, got {params.shape}")
        self.params = params.copy()

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.num_params)
        for name, shape in self.layout:
            lo, hi, _ = self._offsets[name]
            if name.endswith(".b"):
                continue
            fan_in = shape[1]
            std = 0.01 if name.startswith("head") else np.sqrt(2.0 / fan_in)
            theta[lo:hi] = rng.normal(0.0, std, size=hi - lo)
        return theta

    def view(self, name: str, params=None) -> np.ndarray:
        lo, hi, shape = self._offsets[name]
        return (self.params if params is None else params)[lo:hi].reshape(shape)

    def slice_of(self, name: str) -> slice:
        lo, hi, _ = self._offsets[name]
        return slice(lo, hi)

    # -- forward / backward ------------------------------------------------

    def forward(self, images, params=None):
        """Raw head outputs per scale, shaped (N, G, G, 5), plus a backward cache.

        ``images`` is (N, 1, H, W) or (N, H, W) with values in [0, 1].
        """
        theta = self.params if params is None else params
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 4:
            if x.shape[1] != 1:
                raise DataError(f"expected single-channel images, got shape {x.shape}")
            x = x[:, 0]
        size = self.grid.image_size
        if x.ndim != 3 or x.shape[1:] != (size, size):
            raise DataError(f"expected images of shape (N, {size}, {size}), got {np.shape(images)}")
        x = (x[..., None] - INPUT_SHIFT) * INPUT_SCALE
        cache = {"convs": []}
        feats = []
        for cv in self.convs:
            cols, (n, ho, wo) = _im2col(x, cv.kernel, cv.stride, cv.pad)
            pre = cols @ self.view(cv.name + ".w", theta).T + self.view(cv.name + ".b", theta)
            slope = np.where(pre > 0.0, 1.0, LEAK)
            out = (pre * slope).reshape(n, ho, wo, cv.c_out)
            cache["convs"].append((x.shape, cols, slope, (ho, wo)))
            feats.append(out)
            x = out
        heads = []
        for s, f in enumerate(feats[-3:]):
            raw = f @ self.view(f"head{s}.w", theta).T + self.view(f"head{s}.b", theta)
            heads.append(raw)
        for raw, g in zip(heads, self.grid.sizes):
            if raw.shape[1:3] != (g, g):
                raise DataError(f"head produced {raw.shape[1:3]} cells, grid expects {(g, g)}")
        cache["feats"] = feats
        return heads, cache

    def backward(self, d_heads, cache, params=None) -> np.ndarray:
        """Gradient of a scalar loss w.r.t. the flat parameters, given d loss / d raw heads."""
        theta = self.params if params is None else params
        grad = np.zeros(self.num_params)
        feats = cache["feats"]
        d_feats = [None] * len(feats)
        for s, d_raw in enumerate(d_heads):
            f = feats[len(feats) - 3 + s]
            d2 = d_raw.reshape(-1, HEAD_OUTPUTS)
            grad[self.slice_of(f"head{s}.w")] = (d2.T @ f.reshape(-1, f.shape[-1])).ravel()
            grad[self.slice_of(f"head{s}.b")] = d2.sum(axis=0)
            d_feats[len(feats) - 3 + s] = d_raw @ self.view(f"head{s}.w", theta)
        d_out = None
        for idx in range(len(self.convs) - 1, -1, -1):
            cv = self.convs[idx]
            if d_feats[idx] is not None:
                d_out = d_feats[idx] if d_out is None else d_out + d_feats[idx]
            x_shape, cols, slope, (ho, wo) = cache["convs"][idx]
            d_pre = d_out.reshape(-1, cv.c_out) * slope
            grad[self.slice_of(cv.name + ".w")] = (d_pre.T @ cols).ravel()
            grad[self.slice_of(cv.name + ".b")] = d_pre.sum(axis=0)
            if idx == 0:
                break
            d_cols = d_pre @ self.view(cv.name + ".w", theta)
            d_out = _col2im(d_cols, x_shape, cv.kernel, cv.stride, cv.pad, (ho, wo))
        return grad

    # -- decoding -----------------------------------------------------------

    def decode(self, heads):
        """Per scale: objectness (N,G,G) and pixel boxes (N,G,G,4) as x1,y1,x2,y2."""
        out = []
        for raw, g, stride in zip(heads, self.grid.sizes, self.grid.strides):
            p = sigmoid(raw[..., 0])
            cols = np.arange(g)[None, None, :]
            rows = np.arange(g)[None, :, None]
            cx = (cols + np.clip(raw[..., 1], 0.0, 1.0)) * stride
            cy = (rows + np.clip(raw[..., 2], 0.0, 1.0)) * stride
            w = stride * np.exp(np.clip(raw[..., 3], -BOX_LOG_CLIP, BOX_LOG_CLIP))
            h = stride * np.exp(np.clip(raw[..., 4], -BOX_LOG_CLIP, BOX_LOG_CLIP))
            size = self.grid.image_size
            boxes = np.stack(
                [
                    np.clip(cx - w / 2, 0, size),
                    np.clip(cy - h / 2, 0, size),
                    np.clip(cx + w / 2, 0, size),
                    np.clip(cy + h / 2, 0, size),
                ],
                axis=-1,
            )
            out.append((p, boxes))
        return out

    # -- persistence --------------------------------------------------------

    def header(self, **extra) -> dict:
        head = {
            "grid": {"image_size": self.grid.image_size, "sizes": list(self.grid.sizes)},
            "channels": list(self.channels),
            "param_count": self.num_params,
            "dtype": "<f8",
        }
        head.update(extra)
        return head

    def save(self, path, **extra) -> None:
        head = json.dumps(self.header(**extra), sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        """Returns ``(model, header)``."""
        data = Path(path).read_bytes()
        if not data.startswith(MODEL_MAGIC):
            raise DataError(f"{path}: not a model file")
        pos = len(MODEL_MAGIC)
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        head = json.loads(data[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        params = np.frombuffer(data, dtype="<f8", offset=pos)
        if params.size != head["param_count"]:
            raise DataError(f"{path}: header says {head['param_count']} parameters, file has {params.size}")
        grid = GridSpec(head["grid"]["image_size"], tuple(head["grid"]["sizes"]))
        return cls(grid, head["channels"], params=params.astype(np.float64)), head
