"""Ghost-block detection head with four scales and anchor-free decoding.

Each scale owns a short single-branch trunk of ghost blocks followed by one
1x1 prediction conv emitting ``4 + num_classes`` channels per cell: four
non-negative left/top/right/bottom distances, then raw class logits. The
finest scale sits at stride 4 (a 640 input yields a 160x160 map) so small
objects keep enough resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    OpCounter,
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    relu,
    scope,
    sigmoid,
)

__all__ = ["GhostBlock", "DetectionHead", "Detection", "decode_detections", "box_iou", "HEAD_STRIDES"]

HEAD_STRIDES = (4, 8, 16, 32)


def _f32_uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, shape).astype(np.float32).astype(np.float64)


class GhostBlock:
    """Half the outputs from a dense 1x1 conv, the rest from a cheap depthwise 3x3."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator | None = None,
                 primary: np.ndarray | None = None, cheap: np.ndarray | None = None):
        if c_out % 2 != 0:
            raise ShapeError(f"ghost block output channels must be even, got {c_out}")
        self.c_in = c_in
        self.c_out = c_out
        half = c_out // 2
        if primary is None:
            primary = _f32_uniform(rng, 1.0 / np.sqrt(c_in), (half, c_in, 1, 1))
        if cheap is None:
            cheap = _f32_uniform(rng, 1.0 / 3.0, (half, 1, 3, 3))
        self.primary = np.asarray(primary, dtype=np.float64)
        self.cheap = np.asarray(cheap, dtype=np.float64)
        if self.primary.shape != (half, c_in, 1, 1):
            raise ShapeError(f"primary kernel must be ({half}, {c_in}, 1, 1)")
        if self.cheap.shape != (half, 1, 3, 3):
            raise ShapeError(f"cheap kernel must be ({half}, 1, 3, 3)")

    def forward(self, x: Tensor, counter: OpCounter | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[0] != self.c_in:
            raise ShapeError(f"expected {self.c_in} input channels, got {x.shape}")
        p = relu(conv2d(x, Tensor._wrap(self.primary), counter=counter), counter=counter)
        q = relu(conv2d(p, Tensor._wrap(self.cheap), padding=1, groups=self.c_out // 2,
                        counter=counter), counter=counter)
        return concat_channels([p, q], counter=counter)

    def parameter_items(self):
        return [("primary", self.primary), ("cheap", self.cheap)]

    def set_parameter(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if name == "primary":
            if value.shape != self.primary.shape:
                raise ShapeError(f"primary: expected {self.primary.shape}, got {value.shape}")
            self.primary = value
        elif name == "cheap":
            if value.shape != self.cheap.shape:
                raise ShapeError(f"cheap: expected {self.cheap.shape}, got {value.shape}")
            self.cheap = value
        else:
            raise KeyError(f"ghost block has no parameter {name!r}")

    def param_count(self) -> int:
        return int(self.primary.size + self.cheap.size)


class PredictConv:
    """1x1 conv producing the (4 + num_classes)-channel prediction map."""

    def __init__(self, c_in: int, num_classes: int, rng=None, weight: np.ndarray | None = None):
        self.c_in = c_in
        self.num_classes = num_classes
        out = num_classes + 4
        if weight is None:
            weight = _f32_uniform(rng, 1.0 / np.sqrt(c_in), (out, c_in, 1, 1))
        self.weight = np.asarray(weight, dtype=np.float64)
        if self.weight.shape != (out, c_in, 1, 1):
            raise ShapeError(f"prediction weight must be ({out}, {c_in}, 1, 1)")

    def forward(self, x: Tensor, counter: OpCounter | None = None) -> Tensor:
        return conv2d(x, Tensor._wrap(self.weight), counter=counter)

    def parameter_items(self):
        return [("weight", self.weight)]

    def set_parameter(self, name, value):
        if name != "weight":
            raise KeyError(f"prediction conv has no parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.weight.shape:
            raise ShapeError(f"weight: expected {self.weight.shape}, got {value.shape}")
        self.weight = value

    def param_count(self) -> int:
        return int(self.weight.size)


class DetectionHead:
    """Four single-branch trunks (one per scale), no weight sharing across scales."""

    def __init__(self, channels: Sequence[int], num_classes: int, rng=None, *,
                 trunk_depth: int = 2):
        if len(channels) != len(HEAD_STRIDES):
            raise ShapeError(f"head needs {len(HEAD_STRIDES)} scales, got {len(channels)}")
        if num_classes < 1:
            raise ShapeError(f"num_classes must be positive, got {num_classes}")
        if trunk_depth < 1:
            raise ShapeError(f"trunk depth must be positive, got {trunk_depth}")
        self.channels = tuple(channels)
        self.num_classes = num_classes
        self.trunk_depth = trunk_depth
        self.scales = []
        for c in self.channels:
            trunk = [GhostBlock(c, c, rng) for _ in range(trunk_depth)]
            self.scales.append((trunk, PredictConv(c, num_classes, rng)))

    def forward(self, features: Sequence[Tensor], counter: OpCounter | None = None,
                stats: dict | None = None, prefix: str = "head.") -> list:
        if len(features) != len(self.scales):
            raise ShapeError(f"expected {len(self.scales)} feature maps, got {len(features)}")
        preds = []
        for s, ((trunk, predict), feat, c) in enumerate(zip(self.scales, features, self.channels),
                                                        start=1):
            if feat.shape[0] != c:
                raise ShapeError(f"scale expects {c} channels, got {feat.shape[0]}")
            x = feat
            for j, block in enumerate(trunk, start=1):
                with scope(stats, counter, f"{prefix}scale{s}.ghost{j}") as cnt:
                    x = block.forward(x, cnt)
            with scope(stats, counter, f"{prefix}scale{s}.predict") as cnt:
                p = predict.forward(x, cnt)
                boxes = relu(Tensor._wrap(p.data[:4]), counter=cnt)
                preds.append(concat_channels([boxes, Tensor._wrap(p.data[4:])], counter=cnt))
        return preds

    def param_count(self) -> int:
        total = 0
        for trunk, predict in self.scales:
            total += sum(b.param_count() for b in trunk) + predict.param_count()
        return total


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple  # (x1, y1, x2, y2) in input-image pixels


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0.0 else 0.0


def _greedy_nms(candidates, iou_thresh):
    kept = []
    for cand in candidates:
        if all(box_iou(cand[4], k[4]) < iou_thresh for k in kept):
            kept.append(cand)
    return kept


def decode_detections(preds: Sequence[Tensor], *, conf_thresh: float, iou_thresh: float,
                      strides: Sequence[int] = HEAD_STRIDES) -> list:
    """Prediction maps -> deterministic list of class/score/box detections.

    Cells whose sigmoid class score clears ``conf_thresh`` become candidate
    boxes via cell centre +- ltrb*stride; greedy per-class NMS at
    ``iou_thresh`` follows. Ordering is score descending, then scale, row,
    column, class. Empty output is valid.
    """
    if not (0.0 < conf_thresh < 1.0):
        raise ValueError(f"conf_thresh must lie in (0, 1), got {conf_thresh}")
    if not (0.0 < iou_thresh < 1.0):
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    if len(preds) != len(strides):
        raise ShapeError(f"{len(preds)} prediction maps for {len(strides)} strides")

    candidates = []
    for s_idx, (pred, stride) in enumerate(zip(preds, strides)):
        p = pred.data
        num_classes = p.shape[0] - 4
        if num_classes < 1:
            raise ShapeError(f"prediction map needs >= 5 channels, got {p.shape[0]}")
        scores = sigmoid(p[4:])
        hits = np.argwhere(scores > conf_thresh)
        for cls, i, j in hits:
            l, t, r, b = p[0, i, j], p[1, i, j], p[2, i, j], p[3, i, j]
            cx = (j + 0.5) * stride
            cy = (i + 0.5) * stride
            box = (cx - l * stride, cy - t * stride, cx + r * stride, cy + b * stride)
            candidates.append((float(scores[cls, i, j]), (s_idx, int(i), int(j)),
                               int(cls), stride, box))

    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    kept = []
    for cls in sorted({c[2] for c in candidates}):
        kept.extend(_greedy_nms([c for c in candidates if c[2] == cls], iou_thresh))
    kept.sort(key=lambda c: (-c[0], c[1], c[2]))
    return [Detection(class_id=c[2], score=c[0], box=c[4]) for c in kept]
