"""Domain Invariant Module: gradient reversal plus a domain classifier.

The reversal layer is the identity on the forward pass and multiplies the
incoming gradient by -lambda on the backward pass, so minimizing the
domain-classification loss drives the feature extractor to *remove*
domain information while the classifier head still learns to find it.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import DomainId


@dataclass(frozen=True)
class DimConfig:
    num_domains: int
    grl_lambda: float = 1.0
    hidden: int = 128

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValueError("need at least 2 domains")
        if self.grl_lambda < 0.0:
            raise ValueError("grl_lambda must be non-negative")


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, lam: float) -> torch.Tensor:
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad: torch.Tensor):
        return -ctx.lam * grad, None


def grl(x: torch.Tensor, grl_lambda: float = 1.0) -> torch.Tensor:
    """Identity forward; backward gradient scaled by -grl_lambda."""
    return _ReverseGrad.apply(x, grl_lambda)


class GradientReversal(nn.Module):
    def __init__(self, grl_lambda: float = 1.0):
        super().__init__()
        self.grl_lambda = grl_lambda

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return grl(x, self.grl_lambda)


class DomainClassifier(nn.Module):
    """Global-average-pooled features -> hidden affine -> domain logits."""

    def __init__(self, in_channels: int, cfg: DimConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.fc1 = nn.Linear(in_channels, cfg.hidden)
        self.act = nn.LeakyReLU(0.1)
        self.fc2 = nn.Linear(cfg.hidden, cfg.num_domains)
        gen = torch.Generator().manual_seed(seed)
        for m in (self.fc1, self.fc2):
            std = (2.0 / m.weight.shape[1]) ** 0.5
            with torch.no_grad():
                m.weight.copy_(
                    torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype) * std
                )
                m.bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        single = features.ndim == 3
        if single:
            features = features.unsqueeze(0)
        if features.ndim != 4 or features.shape[1] != self.fc1.in_features:
            raise ValueError(
                f"expected (N, {self.fc1.in_features}, H, W) features, got "
                f"{tuple(features.shape)}"
            )
        pooled = features.mean(dim=(2, 3))
        logits = self.fc2(self.act(self.fc1(pooled)))
        return logits[0] if single else logits


def domain_classify(features: torch.Tensor, classifier: DomainClassifier) -> torch.Tensor:
    """Per-sample domain logits from backbone features; spatial size is
    folded away by the global average pool."""
    return classifier(features)


def domain_loss(
    logits: torch.Tensor, labels: list[DomainId | int | None]
) -> torch.Tensor:
    """Summed softmax cross entropy over samples that carry a domain label.

    Null-labeled samples (original data) contribute nothing; an all-null
    batch yields exactly zero.
    """
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    if logits.shape[0] != len(labels):
        raise ValueError(f"{logits.shape[0]} logit rows but {len(labels)} labels")
    k = logits.shape[1]
    idx = []
    target = []
    for i, lab in enumerate(labels):
        if lab is None:
            continue
        index = lab.index if isinstance(lab, DomainId) else int(lab)
        if not (0 <= index < k):
            raise ValueError(f"domain index {index} out of range [0, {k})")
        idx.append(i)
        target.append(index)
    if not idx:
        return logits.new_zeros(())
    selected = logits[idx]
    tgt = torch.as_tensor(target, dtype=torch.long)
    return nn.functional.cross_entropy(selected, tgt, reduction="sum")
