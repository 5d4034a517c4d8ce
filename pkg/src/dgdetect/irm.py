"""Invariance penalty for the grid detector.

Each detection loss term is rescaled by a dummy scalar r multiplying the
raw predictions exactly where they enter the loss; the penalty is the
square of the derivative of that rescaled loss at r=1. The closed forms
below are differentiable functions of the predictions, so the penalty can
feed parameter gradients without differentiating through an autodiff
graph twice. A central-finite-difference implementation of the same
quantities serves as the independent second route.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import DomainId
from .detector import GridTarget, RawPrediction


@dataclass
class PenaltyBreakdown:
    """The four squared-derivative terms and their sum."""

    pen_coord: torch.Tensor | float
    pen_cls: torch.Tensor | float
    pen_obj: torch.Tensor | float
    pen_noobj: torch.Tensor | float
    p_irm: torch.Tensor | float

    _FIELDS = ("pen_coord", "pen_cls", "pen_obj", "pen_noobj", "p_irm")

    def detached(self) -> "PenaltyBreakdown":
        def as_float(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return PenaltyBreakdown(**{f: as_float(getattr(self, f)) for f in self._FIELDS})

    def __add__(self, other: "PenaltyBreakdown") -> "PenaltyBreakdown":
        return PenaltyBreakdown(
            **{f: getattr(self, f) + getattr(other, f) for f in self._FIELDS}
        )


@dataclass(frozen=True)
class IrmConfig:
    lambda_p: float = 1.0
    grouping: str = "per-environment"  # or "per-batch"

    def __post_init__(self):
        if self.lambda_p < 0.0:
            raise ValueError("lambda_p must be non-negative")
        if self.grouping not in ("per-environment", "per-batch"):
            raise ValueError(f"unknown grouping '{self.grouping}'")


def _masks(pred: RawPrediction, target: GridTarget):
    coord = pred.coord
    obj_m = torch.as_tensor(target.obj_mask, dtype=coord.dtype)
    noobj_m = torch.as_tensor(target.noobj_mask, dtype=coord.dtype)
    tcoord = torch.as_tensor(target.tcoord, dtype=coord.dtype)
    tclass = torch.as_tensor(target.tclass, dtype=coord.dtype)
    tobj = torch.as_tensor(target.tobj, dtype=coord.dtype)
    if obj_m.shape != pred.obj_logit.shape:
        raise ValueError(
            f"target shape {tuple(obj_m.shape)} != prediction {tuple(pred.obj_logit.shape)}"
        )
    return obj_m, noobj_m, tcoord, tclass, tobj


def penalty_closed_form(pred: RawPrediction, target: GridTarget) -> PenaltyBreakdown:
    """Analytic r-derivatives at r=1, squared term by term.

    All sums run over every predictor (and any leading batch dimension),
    so a stacked batch is treated as a single environment.
    """
    obj_m, noobj_m, tcoord, tclass, tobj = _masks(pred, target)
    coord, obj_logit, cls_logit = pred.coord, pred.obj_logit, pred.class_logit

    d_coord = (obj_m.unsqueeze(-1) * (-2.0) * coord * (tcoord - coord)).sum()
    cell_m = obj_m.amax(dim=-1)
    d_cls = (cell_m.unsqueeze(-1) * (torch.sigmoid(cls_logit) - tclass) * cls_logit).sum()
    d_obj = (obj_m * (torch.sigmoid(obj_logit) - tobj) * obj_logit).sum()
    d_noobj = (noobj_m * torch.sigmoid(obj_logit) * obj_logit).sum()

    pen = PenaltyBreakdown(
        pen_coord=d_coord**2,
        pen_cls=d_cls**2,
        pen_obj=d_obj**2,
        pen_noobj=d_noobj**2,
        p_irm=0.0,
    )
    pen.p_irm = pen.pen_coord + pen.pen_cls + pen.pen_obj + pen.pen_noobj
    return pen


def _np_field(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy().astype(np.float64)
    return np.asarray(t, dtype=np.float64)


def _bce_sigmoid(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Stable binary cross entropy between y and sigmoid(z)."""
    return y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)


def _scaled_losses(
    r: float,
    coord: np.ndarray,
    obj_logit: np.ndarray,
    cls_logit: np.ndarray,
    target: GridTarget,
) -> tuple[float, float, float, float]:
    """The four loss terms with the dummy scalar multiplying predictions."""
    obj_m = target.obj_mask.astype(np.float64)
    noobj_m = target.noobj_mask.astype(np.float64)
    cell_m = obj_m.max(axis=-1)
    l_coord = float(
        (obj_m[..., None] * (target.tcoord - coord * r) ** 2).sum()
    )
    l_cls = float(
        (cell_m[..., None] * _bce_sigmoid(cls_logit * r, target.tclass)).sum()
    )
    l_obj = float((obj_m * _bce_sigmoid(obj_logit * r, target.tobj)).sum())
    l_noobj = float((noobj_m * _bce_sigmoid(obj_logit * r, np.zeros_like(obj_logit))).sum())
    return l_coord, l_cls, l_obj, l_noobj


def penalty_finite_diff(
    pred: RawPrediction, target: GridTarget, h: float = 1e-4
) -> PenaltyBreakdown:
    """Central-difference estimate of the same four penalty terms."""
    if h <= 0.0:
        raise ValueError("h must be positive")
    coord = _np_field(pred.coord)
    obj_logit = _np_field(pred.obj_logit)
    cls_logit = _np_field(pred.class_logit)
    plus = _scaled_losses(1.0 + h, coord, obj_logit, cls_logit, target)
    minus = _scaled_losses(1.0 - h, coord, obj_logit, cls_logit, target)
    derivs = [(p - m) / (2.0 * h) for p, m in zip(plus, minus)]
    pens = [d**2 for d in derivs]
    return PenaltyBreakdown(
        pen_coord=pens[0], pen_cls=pens[1], pen_obj=pens[2], pen_noobj=pens[3],
        p_irm=sum(pens),
    )


def _zero_like(pred: RawPrediction) -> PenaltyBreakdown:
    z = pred.coord.sum() * 0.0
    return PenaltyBreakdown(pen_coord=z, pen_cls=z, pen_obj=z, pen_noobj=z, p_irm=z)


def batch_penalty(
    preds: RawPrediction,
    targets: GridTarget,
    domains: Sequence[DomainId | int | None] | None,
    cfg: IrmConfig,
) -> PenaltyBreakdown:
    """Penalty over a batch, summed across environments.

    With per-environment grouping, samples sharing a domain label form one
    environment (null labels form their own), the penalty is computed per
    group and the group results are summed. Per-batch grouping treats the
    whole batch as one environment. The result stays differentiable with
    respect to the predictions.
    """
    if preds.coord.ndim == 4:  # single sample: nothing to group
        return penalty_closed_form(preds, targets)
    n = preds.coord.shape[0]
    if cfg.grouping == "per-batch" or domains is None:
        return penalty_closed_form(preds, targets)
    if len(domains) != n:
        raise ValueError(f"{n} samples but {len(domains)} domain labels")

    keys = [d.index if isinstance(d, DomainId) else d for d in domains]
    groups: dict[object, list[int]] = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)

    total = _zero_like(preds)
    for indices in groups.values():
        sub_pred = preds[indices]
        sub_target = GridTarget(
            obj_mask=targets.obj_mask[indices],
            noobj_mask=targets.noobj_mask[indices],
            tcoord=targets.tcoord[indices],
            tclass=targets.tclass[indices],
            tobj=targets.tobj[indices],
        )
        total = total + penalty_closed_form(sub_pred, sub_target)
    return total
