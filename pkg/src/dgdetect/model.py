"""Tiny convolutional detector backbone and head.

Six convolution blocks (a stem plus five stride-2 stages) downsample the
input by 32, so a 32*S input yields the S x S feature map that both the
detection head and the domain classifier tap. GroupNorm keeps per-sample
statistics independent, which preserves gradient-accumulation equivalence.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .detector import DetectorConfig, RawPrediction

_STAGE_CHANNELS = (8, 12, 16, 24, 32, 48)


def _init_params(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.ndim == 4 else 1
            )
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(
                    torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype) * std
                )
                if m.bias is not None:
                    m.bias.zero_()


class DetectorModel(nn.Module):
    """Backbone feature extractor plus single-scale detection head."""

    def __init__(self, cfg: DetectorConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if cfg.input_size != 32 * cfg.grid:
            raise ValueError(
                f"backbone stride is 32: input_size must be 32*grid, got "
                f"{cfg.input_size} for grid {cfg.grid}"
            )
        self.cfg = cfg
        self.seed = seed

        def block(cin: int, cout: int, stride: int) -> nn.Sequential:
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.GroupNorm(4, cout),
                nn.LeakyReLU(0.1),
            )

        chans = _STAGE_CHANNELS
        strides = (2, 2, 2, 2, 2, 1)  # five stride-2 stages reach /32
        stages = [block(3, chans[0], strides[0])]
        for cin, cout, stride in zip(chans[:-1], chans[1:], strides[1:]):
            stages.append(block(cin, cout, stride))
        self.backbone = nn.Sequential(*stages)
        b, c = cfg.boxes_per_cell, cfg.num_classes
        self.head = nn.Conv2d(chans[-1], b * 5 + c, 1)

        gen = torch.Generator().manual_seed(seed)
        _init_params(self, gen)
        with torch.no_grad():
            # prime coordinates at anchor boxes centered in the cell and
            # start objectness pessimistic
            bias = self.head.bias.reshape(-1)
            for a, (aw, ah) in enumerate(cfg.anchors):
                bias[a * 4 : a * 4 + 4] = torch.tensor([0.5, 0.5, aw, ah])
            bias[b * 4 : b * 5] = -3.0
        self.to(dtype)
        self._dtype = dtype

    @property
    def feature_channels(self) -> int:
        return _STAGE_CHANNELS[-1]

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    def _prep(self, images) -> tuple[torch.Tensor, bool]:
        """Accept HxWx3 / NxHxWx3 arrays or already-batched NCHW tensors."""
        if isinstance(images, torch.Tensor):
            t = images.to(self._dtype)
            if t.ndim == 3:
                return t.unsqueeze(0), True
            return t, False
        arr = np.asarray(images, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        t = torch.as_tensor(arr, dtype=self._dtype).permute(0, 3, 1, 2).contiguous()
        return t, single

    def features(self, images) -> torch.Tensor:
        """Feature map (N, F, S, S): the tap point for the domain head."""
        t, _ = self._prep(images)
        return self.backbone(t)

    def head_outputs(self, feats: torch.Tensor) -> RawPrediction:
        """Split head channels into coord / objectness / class tensors."""
        n = feats.shape[0]
        s, b, c = self.cfg.grid, self.cfg.boxes_per_cell, self.cfg.num_classes
        raw = self.head(feats)  # (N, B*5 + C, S, S)
        raw = raw.permute(0, 2, 3, 1)  # (N, S, S, B*5 + C)
        coord = raw[..., : b * 4].reshape(n, s, s, b, 4)
        obj = raw[..., b * 4 : b * 5]
        cls = raw[..., b * 5 :]
        return RawPrediction(coord=coord, obj_logit=obj, class_logit=cls)

    def predict(self, images) -> RawPrediction:
        """Full forward pass; single images come back without a batch dim."""
        t, single = self._prep(images)
        pred = self.head_outputs(self.backbone(t))
        if single:
            return pred[0]
        return pred

    forward = predict


def build_model(
    cfg: DetectorConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> DetectorModel:
    """Construct a detector with deterministic, seed-controlled weights."""
    return DetectorModel(cfg, seed=seed, dtype=dtype)


def save_checkpoint(
    path: str | Path,
    model: DetectorModel,
    step: int = 0,
    classes: list[str] | None = None,
    dim_state: dict | None = None,
    dim_config: dict | None = None,
    extra: dict | None = None,
) -> Path:
    """Write a self-describing checkpoint: config, named parameter arrays,
    and the training step counter."""
    path = Path(path)
    payload = {
        "format": "dgdetect-checkpoint",
        "version": 1,
        "detector_config": asdict(model.cfg),
        "seed": model.seed,
        "step": step,
        "classes": classes,
        "params": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "dim_params": dim_state,
        "dim_config": dim_config,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[DetectorModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, payload)."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != "dgdetect-checkpoint":
        raise ValueError(f"{path} is not a detector checkpoint")
    raw_cfg = dict(payload["detector_config"])
    raw_cfg["anchors"] = tuple(tuple(a) for a in raw_cfg["anchors"])
    cfg = DetectorConfig(**raw_cfg)
    model = DetectorModel(cfg, seed=payload.get("seed", 0))
    model.load_state_dict(payload["params"])
    return model, payload
