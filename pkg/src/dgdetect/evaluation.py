"""Evaluation and analysis: AP/mAP, performance matrices, the style-vs-
performance correlation, and SmoothGrad saliency.

Average precision uses greedy confidence-ordered matching at a fixed IoU
threshold and all-point interpolation of the precision-recall curve, so
evaluation numbers are internally comparable across arms and domains.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .data import AnnotatedImage, BoxLabel, DatasetManifest, assign_domain_labels
from .detector import Detection, decode, iou_xyxy, nms, wh_iou
from .model import DetectorModel, load_checkpoint
from .wqt import StyleDistanceMatrix


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    conf_threshold: float = 0.5
    nms_threshold: float = 0.5

    def __post_init__(self):
        for name in ("iou_threshold", "conf_threshold", "nms_threshold"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} outside [0, 1]: {v}")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two corner-format boxes (x1, y1, x2, y2)."""
    return iou_xyxy(tuple(a), tuple(b))


def _match_flags(
    dets: Sequence[tuple[object, Detection]],
    gts: Mapping[object, Sequence[BoxLabel]],
    class_id: int,
    cfg: EvalConfig,
) -> tuple[list[bool], int]:
    """Greedy matching by descending confidence; at most one detection per
    ground truth. Returns per-detection TP flags plus the GT count."""
    cls_dets = [(img, d) for img, d in dets if d.class_id == class_id]
    cls_dets.sort(key=lambda t: (-t[1].confidence, str(t[0])))
    gt_boxes = {
        img: [b for b in boxes if b.class_id == class_id] for img, boxes in gts.items()
    }
    n_gt = sum(len(v) for v in gt_boxes.values())
    used: dict[object, list[bool]] = {img: [False] * len(v) for img, v in gt_boxes.items()}
    flags: list[bool] = []
    for img, det in cls_dets:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes.get(img, [])):
            if used[img][j]:
                continue
            value = iou_xyxy(det.box.to_xyxy(), gt.to_xyxy())
            if value >= cfg.iou_threshold and value > best_iou:
                best_iou, best_j = value, j
        if best_j >= 0:
            used[img][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, n_gt


def pr_curve(
    dets: Sequence[tuple[object, Detection]],
    gts: Mapping[object, Sequence[BoxLabel]],
    class_id: int,
    cfg: EvalConfig = EvalConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each detection, confidence-ordered."""
    flags, n_gt = _match_flags(dets, gts, class_id, cfg)
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / n_gt if n_gt > 0 else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, 1e-12)
    return recall, precision


def average_precision(
    dets: Sequence[tuple[object, Detection]],
    gts: Mapping[object, Sequence[BoxLabel]],
    class_id: int,
    cfg: EvalConfig = EvalConfig(),
) -> float:
    """Area under the all-point-interpolated precision-recall curve.

    Returns 0 when the class has no ground truth or no detections.
    """
    recall, precision = pr_curve(dets, gts, class_id, cfg)
    if recall.size == 0:
        return 0.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changes = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(((mrec[changes] - mrec[changes - 1]) * mpre[changes]).sum())


@dataclass
class EvalResult:
    per_class: dict[int, float]
    map: float
    n_images: int
    detections: list[tuple[object, Detection]] = field(default_factory=list)
    ground_truths: dict[object, list[BoxLabel]] = field(default_factory=dict)


def evaluate_samples(
    model: DetectorModel,
    images: Sequence[AnnotatedImage],
    cfg: EvalConfig = EvalConfig(),
    batch_size: int = 16,
) -> EvalResult:
    """Decode + NMS every image, then per-class AP and their unweighted
    mean over the classes that have ground truth."""
    if not images:
        raise ValueError("empty evaluation split")
    dets: list[tuple[object, Detection]] = []
    gts: dict[object, list[BoxLabel]] = {}
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            batch = np.stack([img.pixels for img in chunk])
            preds = model.predict(batch)
            for j, img in enumerate(chunk):
                idx = start + j
                gts[idx] = list(img.boxes)
                for det in nms(decode(preds[j], cfg.conf_threshold), cfg.nms_threshold):
                    dets.append((idx, det))
    classes = sorted({b.class_id for boxes in gts.values() for b in boxes})
    per_class = {c: average_precision(dets, gts, c, cfg) for c in classes}
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalResult(
        per_class=per_class, map=mean, n_images=len(images),
        detections=dets, ground_truths=gts,
    )


def evaluate(
    model: DetectorModel | str | Path,
    manifest: DatasetManifest,
    split: str,
    cfg: EvalConfig = EvalConfig(),
) -> EvalResult:
    """Evaluate a model (or checkpoint path) on one manifest split."""
    if not isinstance(model, DetectorModel):
        model, _ = load_checkpoint(model)
    images = [img for img, _ in assign_domain_labels(manifest, split)]
    return evaluate_samples(model, images, cfg)


@dataclass(frozen=True)
class PerfMatrix:
    """Rectangular mAP table: training arms by validation domains.

    ``kind`` is "map" for raw percentages in [0, 100] and "delta" for
    baseline-subtracted differences.
    """

    rows: tuple[str, ...]
    cols: tuple[str, ...]
    values: np.ndarray
    kind: str = "map"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (len(self.rows), len(self.cols)):
            raise ValueError(
                f"values shape {vals.shape} != ({len(self.rows)}, {len(self.cols)})"
            )
        if self.kind == "map" and (vals.min() < 0.0 or vals.max() > 100.0):
            raise ValueError("mAP percentages must lie in [0, 100]")
        if self.kind not in ("map", "delta"):
            raise ValueError(f"unknown kind '{self.kind}'")
        object.__setattr__(self, "values", vals)

    def row(self, name: str) -> dict[str, float]:
        i = self.rows.index(name)
        return dict(zip(self.cols, self.values[i]))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("method," + ",".join(self.cols) + "\n")
            for name, row in zip(self.rows, self.values):
                fh.write(name + "," + ",".join(f"{v:.2f}" for v in row) + "\n")
        return path

    @classmethod
    def from_csv(cls, path: str | Path, kind: str = "map") -> "PerfMatrix":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            cols = tuple(header[1:])
            rows, values = [], []
            for line in fh:
                parts = line.strip().split(",")
                if not parts or parts == [""]:
                    continue
                rows.append(parts[0])
                values.append([float(v) for v in parts[1:]])
        return cls(rows=tuple(rows), cols=cols, values=np.array(values), kind=kind)

    def render_text(self) -> str:
        width = max(len(r) for r in self.rows + ("method",)) + 2
        colw = max(max(len(c) for c in self.cols) + 2, 8)
        lines = ["method".ljust(width) + "".join(c.rjust(colw) for c in self.cols)]
        for name, row in zip(self.rows, self.values):
            lines.append(name.ljust(width) + "".join(f"{v:.2f}".rjust(colw) for v in row))
        return "\n".join(lines)


def perf_delta_matrix(perf: PerfMatrix, baseline_row: Mapping[str, float]) -> PerfMatrix:
    """Subtract the per-column baseline from every row."""
    missing = [c for c in perf.cols if c not in baseline_row]
    if missing:
        raise ValueError(f"baseline row missing columns: {missing}")
    base = np.array([baseline_row[c] for c in perf.cols])
    return PerfMatrix(
        rows=perf.rows, cols=perf.cols, values=perf.values - base[None, :], kind="delta"
    )


CORRELATION_CONVENTIONS = ("all", "offdiag")


def style_perf_correlation(
    h_dist: StyleDistanceMatrix, h_perf: PerfMatrix, convention: str = "all"
) -> float:
    """Negated Pearson correlation between flattened style-distance and
    performance-delta matrices.

    ``all`` flattens every entry; ``offdiag`` drops the diagonal.
    """
    if convention not in CORRELATION_CONVENTIONS:
        raise ValueError(f"convention must be one of {CORRELATION_CONVENTIONS}")
    k = len(h_dist.names)
    if h_perf.values.shape != (k, k):
        raise ValueError(
            f"shape mismatch: distances {k}x{k} vs performance {h_perf.values.shape}"
        )
    if convention == "all":
        x, y = h_dist.d.ravel(), h_perf.values.ravel()
    else:
        mask = ~np.eye(k, dtype=bool)
        x, y = h_dist.d[mask], h_perf.values[mask]
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom == 0.0:
        raise ValueError("undefined correlation: an input has zero variance")
    return float(-(xc * yc).sum() / denom)


def _fixture_path(name: str):
    return resources.files("dgdetect").joinpath("fixtures", name)


def load_reference_perf() -> PerfMatrix:
    """The shipped reference mAP table (training arms x validation sets)."""
    with resources.as_file(_fixture_path("reference_perf.csv")) as path:
        return PerfMatrix.from_csv(path)


def load_reference_style_distance() -> StyleDistanceMatrix:
    """The shipped reference pairwise style-distance table."""
    with resources.as_file(_fixture_path("reference_style_distance.csv")) as path:
        with open(path, "r", encoding="utf-8") as fh:
            names = tuple(fh.readline().strip().split(",")[1:])
            rows = [
                [float(v) for v in line.strip().split(",")[1:]] for line in fh if line.strip()
            ]
    return StyleDistanceMatrix(names=names, d=np.array(rows))


def reference_h_perf() -> PerfMatrix:
    """Baseline-subtracted 7x7 slice of the reference table: single-domain
    augmentation rows against the synthesized validation columns."""
    perf = load_reference_perf()
    rows = tuple(f"ori+type{i}" for i in range(1, 8))
    cols = tuple(f"val_type{i}" for i in range(1, 8))
    idx = [perf.rows.index(r) for r in rows]
    jdx = [perf.cols.index(c) for c in cols]
    sub = PerfMatrix(rows=rows, cols=cols, values=perf.values[np.ix_(idx, jdx)])
    return perf_delta_matrix(sub, {c: perf.row("baseline")[c] for c in cols})


def reference_correlation() -> dict[str, float]:
    """Style/performance correlation of the shipped fixtures, under both
    flattening conventions."""
    h_dist = load_reference_style_distance()
    h_perf = reference_h_perf()
    return {
        conv: style_perf_correlation(h_dist, h_perf, conv)
        for conv in CORRELATION_CONVENTIONS
    }


@dataclass
class SaliencyMap:
    """Per-pixel non-negative relevance in [0, 1] for one detection."""

    values: np.ndarray  # (H, W)
    target: Detection

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(vals).all() or vals.min() < 0.0:
            raise ValueError("saliency values must be finite and non-negative")
        self.values = vals


def saliency_from_score(
    score_fn,
    image: np.ndarray,
    n: int = 50,
    noise_sigma: float = 0.15,
    seed: int = 0,
) -> np.ndarray:
    """Average absolute input-gradient of a scalar score over n noisy
    copies; noise scale is noise_sigma times the image dynamic range."""
    if n < 1:
        raise ValueError("n must be >= 1")
    base = torch.as_tensor(np.asarray(image, dtype=np.float64))
    spread = float(base.max() - base.min())
    sigma = noise_sigma * spread
    gen = torch.Generator().manual_seed(seed)
    acc = torch.zeros_like(base)
    for _ in range(n):
        noise = torch.randn(base.shape, generator=gen, dtype=base.dtype) * sigma
        x = (base + noise).requires_grad_(True)
        score = score_fn(x)
        (grad,) = torch.autograd.grad(score, x)
        if not torch.isfinite(grad).all():
            raise RuntimeError("non-finite saliency gradient")
        acc += grad.abs()
    sal = (acc / n).numpy()
    if sal.ndim == 3:
        sal = sal.mean(axis=2)
    peak = sal.max()
    return sal / peak if peak > 0 else sal


def smoothgrad(
    model: DetectorModel,
    image: AnnotatedImage | np.ndarray,
    target: Detection,
    n: int = 50,
    noise_sigma: float = 0.15,
    seed: int = 0,
) -> SaliencyMap:
    """SmoothGrad saliency for one detection's confidence score."""
    if target.confidence <= 0.95:
        warnings.warn(
            f"target confidence {target.confidence:.3f} <= 0.95; proceeding anyway",
            stacklevel=2,
        )
    pixels = image.pixels if isinstance(image, AnnotatedImage) else np.asarray(image)
    s = model.cfg.grid
    if target.cell is not None:
        row, col = target.cell
    else:
        col = min(int(target.box.cx * s), s - 1)
        row = min(int(target.box.cy * s), s - 1)
    if target.anchor is not None:
        anchor = target.anchor
    else:
        ious = [wh_iou(target.box.w, target.box.h, aw, ah) for aw, ah in model.cfg.anchors]
        anchor = int(np.argmax(ious))

    def score_fn(x: torch.Tensor) -> torch.Tensor:
        pred = model.predict(x.permute(2, 0, 1).unsqueeze(0).to(model.dtype))
        obj = torch.sigmoid(pred.obj_logit[0, row, col, anchor])
        cls = torch.sigmoid(pred.class_logit[0, row, col, target.class_id])
        return obj * cls

    values = saliency_from_score(score_fn, pixels, n=n, noise_sigma=noise_sigma, seed=seed)
    return SaliencyMap(values=values, target=target)
