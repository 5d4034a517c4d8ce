"""Single-scale grid detector: target encoding, training loss, decoding, NMS.

The image is divided into an S x S grid with B anchor slots per cell. A
ground-truth box is regressed by exactly one responsible predictor: the
anchor with the best width/height IoU in the cell containing the box
center. Coordinates are regressed directly (cell-relative x/y offset,
image-normalized w/h); objectness and per-class scores are sigmoid logits,
class scores living at cell level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data import BoxLabel

DEFAULT_ANCHORS = ((0.10, 0.10), (0.20, 0.20), (0.40, 0.40))


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 416
    grid: int = 13  # S
    boxes_per_cell: int = 3  # B
    anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS
    num_classes: int = 5  # C
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    ignore_iou: float = 0.5

    def __post_init__(self):
        if self.input_size % self.grid != 0:
            raise ValueError(f"input_size {self.input_size} not divisible by grid {self.grid}")
        if len(self.anchors) != self.boxes_per_cell:
            raise ValueError("anchors must have one (w, h) pair per box slot")
        if self.lambda_coord <= 0 or self.lambda_noobj <= 0:
            raise ValueError("loss trade-off weights must be positive")
        if self.num_classes < 1 or self.grid < 1 or self.boxes_per_cell < 1:
            raise ValueError("grid, boxes_per_cell and num_classes must be >= 1")


@dataclass
class GridTarget:
    """Training target for one image (or a stacked batch of images)."""

    obj_mask: np.ndarray  # (..., S, S, B) bool
    noobj_mask: np.ndarray  # (..., S, S, B) bool
    tcoord: np.ndarray  # (..., S, S, B, 4) float
    tclass: np.ndarray  # (..., S, S, C) float one-hot
    tobj: np.ndarray  # (..., S, S, B) float, 1 where obj_mask
    dropped_boxes: int = 0  # boxes discarded in (cell, anchor) collisions

    def __post_init__(self):
        if np.logical_and(self.obj_mask, self.noobj_mask).any():
            raise ValueError("a predictor cannot be both object and no-object")
        if not np.array_equal(self.tobj > 0.5, self.obj_mask):
            raise ValueError("tobj must be 1 exactly where obj_mask is set")


def stack_targets(targets: Sequence[GridTarget]) -> GridTarget:
    """Stack per-image targets into one batch-shaped target."""
    return GridTarget(
        obj_mask=np.stack([t.obj_mask for t in targets]),
        noobj_mask=np.stack([t.noobj_mask for t in targets]),
        tcoord=np.stack([t.tcoord for t in targets]),
        tclass=np.stack([t.tclass for t in targets]),
        tobj=np.stack([t.tobj for t in targets]),
        dropped_boxes=sum(t.dropped_boxes for t in targets),
    )


@dataclass
class RawPrediction:
    """Raw detector outputs; tensors may carry a leading batch dimension."""

    coord: torch.Tensor  # (..., S, S, B, 4)
    obj_logit: torch.Tensor  # (..., S, S, B)
    class_logit: torch.Tensor  # (..., S, S, C)

    def __post_init__(self):
        for t in (self.coord, self.obj_logit, self.class_logit):
            if not torch.isfinite(t).all():
                raise ValueError("prediction contains non-finite values")

    def __getitem__(self, idx) -> "RawPrediction":
        return RawPrediction(
            coord=self.coord[idx], obj_logit=self.obj_logit[idx], class_logit=self.class_logit[idx]
        )

    def detach(self) -> "RawPrediction":
        return RawPrediction(
            coord=self.coord.detach(),
            obj_logit=self.obj_logit.detach(),
            class_logit=self.class_logit.detach(),
        )


@dataclass(frozen=True)
class Detection:
    """One decoded detection; cell/anchor record where it came from."""

    box: "BoxLabel"
    class_id: int
    confidence: float
    cell: tuple[int, int] | None = None
    anchor: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class LossBreakdown:
    """Named loss components; ``total`` stays differentiable when the
    inputs were torch tensors with gradients."""

    l_cls: torch.Tensor | float
    l_coord: torch.Tensor | float
    l_obj: torch.Tensor | float
    l_noobj: torch.Tensor | float
    l_domain: torch.Tensor | float = 0.0
    p_irm: torch.Tensor | float = 0.0
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    lambda_d: float = 0.0
    lambda_p: float = 0.0
    total: torch.Tensor | float = 0.0

    _FIELDS = ("l_cls", "l_coord", "l_obj", "l_noobj", "l_domain", "p_irm", "total")

    def detached(self) -> "LossBreakdown":
        """Copy with plain floats, for logging and serialization."""
        def as_float(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return LossBreakdown(
            **{f: as_float(getattr(self, f)) for f in self._FIELDS},
            lambda_coord=self.lambda_coord,
            lambda_noobj=self.lambda_noobj,
            lambda_d=self.lambda_d,
            lambda_p=self.lambda_p,
        )

    def to_dict(self) -> dict:
        d = self.detached()
        return {f: getattr(d, f) for f in self._FIELDS} | {
            "lambda_coord": self.lambda_coord,
            "lambda_noobj": self.lambda_noobj,
            "lambda_d": self.lambda_d,
            "lambda_p": self.lambda_p,
        }


def iou_xyxy(
    a: tuple[float, float, float, float], b: tuple[float, float, float, float]
) -> float:
    """IoU of two corner-format boxes (x1, y1, x2, y2); 0 when disjoint."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(ix2 - ix1, 0.0), max(iy2 - iy1, 0.0)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def wh_iou(w1: float, h1: float, w2: float, h2: float) -> float:
    """IoU of two boxes sharing a common center (width/height only)."""
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def assign_targets(boxes: Sequence[BoxLabel], cfg: DetectorConfig) -> GridTarget:
    """Encode ground-truth boxes into the grid target.

    Each box claims the best-matching anchor in the cell holding its
    center. When two boxes claim the same (cell, anchor) slot the later
    one is dropped and counted. Predictors whose anchor matches any
    ground truth above the ignore threshold are excluded from the
    no-object mask (unless they are themselves responsible).
    """
    s, b, c = cfg.grid, cfg.boxes_per_cell, cfg.num_classes
    obj = np.zeros((s, s, b), dtype=bool)
    noobj = np.ones((s, s, b), dtype=bool)
    tcoord = np.zeros((s, s, b, 4), dtype=np.float64)
    tclass = np.zeros((s, s, c), dtype=np.float64)
    tobj = np.zeros((s, s, b), dtype=np.float64)
    cell_claimed = np.zeros((s, s), dtype=bool)
    dropped = 0

    ignore = np.zeros(b, dtype=bool)
    for box in boxes:
        ious = np.array([wh_iou(box.w, box.h, aw, ah) for aw, ah in cfg.anchors])
        ignore |= ious > cfg.ignore_iou

    for box in boxes:
        if box.class_id >= c:
            raise ValueError(f"class_id {box.class_id} out of range [0, {c})")
        col = min(int(box.cx * s), s - 1)
        row = min(int(box.cy * s), s - 1)
        ious = np.array([wh_iou(box.w, box.h, aw, ah) for aw, ah in cfg.anchors])
        a = int(np.argmax(ious))
        if obj[row, col, a]:
            dropped += 1
            continue
        obj[row, col, a] = True
        tobj[row, col, a] = 1.0
        tcoord[row, col, a] = (box.cx * s - col, box.cy * s - row, box.w, box.h)
        if not cell_claimed[row, col]:
            tclass[row, col, box.class_id] = 1.0
            cell_claimed[row, col] = True

    noobj &= ~ignore[None, None, :]
    noobj &= ~obj
    return GridTarget(
        obj_mask=obj, noobj_mask=noobj, tcoord=tcoord, tclass=tclass, tobj=tobj,
        dropped_boxes=dropped,
    )


def _to_tensor(arr, like: torch.Tensor) -> torch.Tensor:
    if isinstance(arr, torch.Tensor):
        return arr.to(dtype=like.dtype)
    return torch.as_tensor(arr, dtype=like.dtype)


def yolo_loss(pred: RawPrediction, target: GridTarget, cfg: DetectorConfig) -> LossBreakdown:
    """Detection loss: per-class/objectness sigmoid BCE plus squared-error
    coordinates, summed (not averaged) over predictors and any leading
    batch dimension. The returned total is differentiable."""
    coord, obj_logit, cls_logit = pred.coord, pred.obj_logit, pred.class_logit
    if coord.shape[:-1] != obj_logit.shape or cls_logit.shape[:-1] != obj_logit.shape[:-1]:
        raise ValueError("prediction field shapes disagree")
    obj_m = _to_tensor(target.obj_mask, coord)
    noobj_m = _to_tensor(target.noobj_mask, coord)
    tcoord = _to_tensor(target.tcoord, coord)
    tclass = _to_tensor(target.tclass, coord)
    tobj = _to_tensor(target.tobj, coord)
    if obj_m.shape != obj_logit.shape:
        raise ValueError(f"target shape {tuple(obj_m.shape)} != prediction {tuple(obj_logit.shape)}")

    bce = torch.nn.functional.binary_cross_entropy_with_logits
    l_coord = (obj_m.unsqueeze(-1) * (tcoord - coord) ** 2).sum()
    l_obj = (obj_m * bce(obj_logit, tobj, reduction="none")).sum()
    l_noobj = (noobj_m * bce(obj_logit, torch.zeros_like(obj_logit), reduction="none")).sum()
    cell_m = obj_m.amax(dim=-1)
    l_cls = (cell_m.unsqueeze(-1) * bce(cls_logit, tclass, reduction="none")).sum()
    total = l_cls + cfg.lambda_coord * l_coord + l_obj + cfg.lambda_noobj * l_noobj
    return LossBreakdown(
        l_cls=l_cls, l_coord=l_coord, l_obj=l_obj, l_noobj=l_noobj,
        lambda_coord=cfg.lambda_coord, lambda_noobj=cfg.lambda_noobj, total=total,
    )


def decode(pred: RawPrediction, conf_threshold: float = 0.5) -> list[Detection]:
    """Turn raw single-image outputs into detections.

    Confidence is sigmoid(objectness) times the best per-class sigmoid
    score of the cell; detections below the threshold are dropped.
    """
    if not (0.0 <= conf_threshold <= 1.0):
        raise ValueError("conf_threshold outside [0, 1]")
    coord = np.asarray(pred.coord.detach() if isinstance(pred.coord, torch.Tensor) else pred.coord)
    obj = np.asarray(
        pred.obj_logit.detach() if isinstance(pred.obj_logit, torch.Tensor) else pred.obj_logit
    )
    cls = np.asarray(
        pred.class_logit.detach() if isinstance(pred.class_logit, torch.Tensor) else pred.class_logit
    )
    if coord.ndim != 4:
        raise ValueError("decode expects a single-image prediction")
    s = coord.shape[0]
    b = coord.shape[2]
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    cls_prob = sig(cls)
    best_class = cls_prob.argmax(axis=-1)
    best_prob = cls_prob.max(axis=-1)
    obj_prob = sig(obj)

    dets: list[Detection] = []
    for row in range(s):
        for col in range(s):
            for a in range(b):
                conf = float(obj_prob[row, col, a] * best_prob[row, col])
                if conf < conf_threshold:
                    continue
                x, y, w, h = coord[row, col, a]
                cx = float(np.clip((col + x) / s, 0.0, 1.0))
                cy = float(np.clip((row + y) / s, 0.0, 1.0))
                bw = float(np.clip(w, 1e-6, 1.0))
                bh = float(np.clip(h, 1e-6, 1.0))
                cid = int(best_class[row, col])
                dets.append(
                    Detection(
                        box=BoxLabel(cx=cx, cy=cy, w=bw, h=bh, class_id=cid),
                        class_id=cid,
                        confidence=conf,
                        cell=(row, col),
                        anchor=a,
                    )
                )
    dets.sort(key=lambda d: -d.confidence)
    return dets


def box_iou(a: BoxLabel, b: BoxLabel) -> float:
    """IoU of two center/size boxes."""
    return iou_xyxy(a.to_xyxy(), b.to_xyxy())


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression by descending confidence; a detection
    is removed when its IoU with an already-kept detection of the same
    class exceeds the threshold."""
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError("iou_threshold outside [0, 1]")
    ordered = sorted(dets, key=lambda d: -d.confidence)
    kept: list[Detection] = []
    for cand in ordered:
        suppressed = any(
            k.class_id == cand.class_id and box_iou(k.box, cand.box) > iou_threshold
            for k in kept
        )
        if not suppressed:
            kept.append(cand)
    return kept
