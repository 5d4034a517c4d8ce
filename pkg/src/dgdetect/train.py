"""Training orchestration: total objective, optimizer loop, checkpointing.

Five method arms are supported. ``baseline`` trains on the original split
only; the ``wqt_*`` arms train across the original plus every synthesized
training domain. ``wqt_dim`` adds the adversarial domain loss, ``wqt_irm``
the invariance penalty, and ``wqt_dg_yolo`` both. Losses are sums over
samples and gradients are accumulated across ``accumulate_every``
iterations before each Adam step, so two half batches reproduce one full
batch exactly.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import AnnotatedImage, DatasetManifest, DomainId, assign_domain_labels
from .detector import (
    DetectorConfig,
    GridTarget,
    LossBreakdown,
    RawPrediction,
    assign_targets,
    stack_targets,
    yolo_loss,
)
from .dim import DimConfig, DomainClassifier, domain_loss, grl
from .irm import IrmConfig, batch_penalty
from .model import DetectorModel, build_model, save_checkpoint

METHODS = ("baseline", "wqt_only", "wqt_dim", "wqt_irm", "wqt_dg_yolo")


class ConfigurationError(ValueError):
    """Inputs inconsistent with the selected method arm."""


class TrainingError(RuntimeError):
    """Training aborted (for example on a non-finite loss)."""


def _desk_detector() -> DetectorConfig:
    return DetectorConfig(input_size=160, grid=5)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    accumulate_every: int = 2
    lambda_d: float = 1.0
    lambda_p: float = 1.0
    method: str = "wqt_dg_yolo"
    seed: int = 0
    detector: DetectorConfig = field(default_factory=_desk_detector)
    grl_lambda: float = 1.0
    dim_hidden: int = 128
    irm_grouping: str = "per-environment"
    eval_every: int = 5
    hflip: bool = False
    rot90: bool = False
    balanced_sampler: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got '{self.method}'")
        if self.accumulate_every < 1:
            raise ConfigurationError("accumulate_every must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")

    @property
    def uses_dim(self) -> bool:
        return self.method in ("wqt_dim", "wqt_dg_yolo")

    @property
    def uses_irm(self) -> bool:
        return self.method in ("wqt_irm", "wqt_dg_yolo")

    @property
    def multi_domain(self) -> bool:
        return self.method != "baseline"

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1)
            fh.write("\n")
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        det = raw.pop("detector", None)
        if det is not None:
            det["anchors"] = tuple(tuple(a) for a in det["anchors"])
            raw["detector"] = DetectorConfig(**det)
        return cls(**raw)


def total_loss(
    pred: RawPrediction,
    target: GridTarget,
    dim_logits: torch.Tensor | None,
    domains: Sequence[DomainId | int | None] | None,
    cfg: TrainConfig,
) -> LossBreakdown:
    """Combine detection loss, domain loss, and invariance penalty per the
    configured method arm; terms of disabled arms are exactly zero."""
    labeled = domains is not None and any(d is not None for d in domains)
    if not cfg.uses_dim and dim_logits is not None:
        raise ConfigurationError(f"method '{cfg.method}' does not take domain logits")
    if cfg.method == "baseline" and labeled:
        raise ConfigurationError("baseline takes no domain labels")
    if cfg.method == "wqt_only" and labeled:
        raise ConfigurationError("wqt_only ignores domains; do not supply labels")
    if cfg.uses_dim and dim_logits is None and labeled:
        raise ConfigurationError(f"method '{cfg.method}' requires domain logits")

    breakdown = yolo_loss(pred, target, cfg.detector)
    l_domain: torch.Tensor | float = 0.0
    p_irm: torch.Tensor | float = 0.0
    if cfg.uses_dim and dim_logits is not None:
        l_domain = domain_loss(dim_logits, list(domains or []))
    if cfg.uses_irm:
        irm_cfg = IrmConfig(lambda_p=cfg.lambda_p, grouping=cfg.irm_grouping)
        p_irm = batch_penalty(pred, target, domains, irm_cfg).p_irm

    total = breakdown.total + cfg.lambda_d * l_domain + cfg.lambda_p * p_irm
    return replace(
        breakdown,
        l_domain=l_domain,
        p_irm=p_irm,
        lambda_d=cfg.lambda_d if cfg.uses_dim else 0.0,
        lambda_p=cfg.lambda_p if cfg.uses_irm else 0.0,
        total=total,
    )


@dataclass
class Batch:
    images: np.ndarray  # (N, H, W, 3)
    targets: GridTarget  # stacked
    domains: list[DomainId | None]
    domain_names: list[str]  # "original" for null-domain samples


@dataclass
class TrainState:
    model: DetectorModel
    classifier: DomainClassifier | None
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    step: int = 0
    updates: int = 0


def make_state(cfg: TrainConfig, num_domains: int | None = None,
               dtype: torch.dtype = torch.float32) -> TrainState:
    model = build_model(cfg.detector, seed=cfg.seed, dtype=dtype)
    classifier = None
    params = list(model.parameters())
    if cfg.uses_dim:
        if num_domains is None:
            raise ConfigurationError(f"method '{cfg.method}' needs the domain count")
        dim_cfg = DimConfig(
            num_domains=num_domains, grl_lambda=cfg.grl_lambda, hidden=cfg.dim_hidden
        )
        classifier = DomainClassifier(model.feature_channels, dim_cfg, seed=cfg.seed + 1)
        classifier.to(dtype)
        params += list(classifier.parameters())
    optimizer = torch.optim.Adam(
        params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2)
    )
    return TrainState(model=model, classifier=classifier, optimizer=optimizer, cfg=cfg)


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> LossBreakdown:
    """One iteration: accumulate gradients of the total loss; apply the
    Adam update every ``accumulate_every`` iterations, then reset."""
    model = state.model
    images = torch.as_tensor(
        np.ascontiguousarray(batch.images.transpose(0, 3, 1, 2)), dtype=model.dtype
    )
    feats = model.features(images)
    pred = model.head_outputs(feats)
    dim_logits = None
    domains: list[DomainId | None] | None = batch.domains if cfg.multi_domain else None
    if cfg.method in ("baseline", "wqt_only"):
        domains = None
    if cfg.uses_dim and state.classifier is not None:
        dim_logits = state.classifier(grl(feats, cfg.grl_lambda))

    breakdown = total_loss(pred, batch.targets, dim_logits, domains, cfg)
    if not torch.isfinite(breakdown.total.detach()):
        raise TrainingError(f"non-finite loss at step {state.step}: {breakdown.detached()}")
    breakdown.total.backward()
    state.step += 1
    if state.step % cfg.accumulate_every == 0:
        state.optimizer.step()
        state.optimizer.zero_grad()
        state.updates += 1
    return breakdown.detached()


@dataclass
class TrainRecord:
    """Everything needed to replay or audit a run."""

    seed: int
    method: str
    config: dict
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0
    best: dict = field(default_factory=dict)

    def to_ndjson(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            meta = {
                "kind": "meta", "seed": self.seed, "method": self.method,
                "config": self.config, "wall_clock_s": self.wall_clock_s,
                "best": self.best,
            }
            fh.write(json.dumps(meta) + "\n")
            for s in self.steps:
                fh.write(json.dumps({"kind": "step"} | s) + "\n")
            for e in self.evals:
                fh.write(json.dumps({"kind": "eval"} | e) + "\n")
        return path

    @classmethod
    def from_ndjson(cls, path: str | Path) -> "TrainRecord":
        meta = None
        steps: list[dict] = []
        evals: list[dict] = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                kind = row.pop("kind")
                if kind == "meta":
                    meta = row
                elif kind == "step":
                    steps.append(row)
                elif kind == "eval":
                    evals.append(row)
        if meta is None:
            raise ValueError(f"{path}: no meta row")
        return cls(
            seed=meta["seed"], method=meta["method"], config=meta["config"],
            steps=steps, evals=evals, wall_clock_s=meta.get("wall_clock_s", 0.0),
            best=meta.get("best", {}),
        )


def training_splits(manifest: DatasetManifest, method: str) -> list[str]:
    """Split names an arm trains on; held-out domains have no train split
    by construction, so they can never be selected."""
    if method == "baseline":
        if "train" not in manifest.splits:
            raise ConfigurationError("manifest has no 'train' split")
        return ["train"]
    names = [n for n in manifest.splits if n.startswith("train")]
    if len(names) < 2:
        raise ConfigurationError(f"method '{method}' needs synthesized train_* splits")
    return sorted(names)


def validation_splits(manifest: DatasetManifest) -> list[str]:
    return sorted(n for n in manifest.splits if n.startswith("val"))


@dataclass
class _Sample:
    pixels: np.ndarray
    boxes: list
    domain: DomainId | None
    domain_name: str


def _augment(sample: _Sample, cfg: TrainConfig, rng: np.random.Generator) -> _Sample:
    from .data import BoxLabel

    pixels, boxes = sample.pixels, sample.boxes
    if cfg.hflip and rng.random() < 0.5:
        pixels = pixels[:, ::-1].copy()
        boxes = [replace(b, cx=1.0 - b.cx) for b in boxes]
    if cfg.rot90:
        k = int(rng.integers(0, 4))
        for _ in range(k):
            pixels = np.rot90(pixels).copy()
            boxes = [
                BoxLabel(cx=b.cy, cy=1.0 - b.cx, w=b.h, h=b.w, class_id=b.class_id)
                for b in boxes
            ]
    return _Sample(pixels=pixels, boxes=boxes, domain=sample.domain,
                   domain_name=sample.domain_name)


def _load_pool(manifest: DatasetManifest, splits: Sequence[str]) -> list[_Sample]:
    pool = []
    for split in splits:
        for img, dom in assign_domain_labels(manifest, split):
            pool.append(
                _Sample(
                    pixels=img.pixels, boxes=img.boxes, domain=dom,
                    domain_name=dom.name if dom is not None else "original",
                )
            )
    return pool


def _epoch_order(pool: list[_Sample], cfg: TrainConfig, rng: np.random.Generator) -> list[int]:
    if not cfg.balanced_sampler:
        return list(rng.permutation(len(pool)))
    by_domain: dict[str, list[int]] = {}
    for i, s in enumerate(pool):
        by_domain.setdefault(s.domain_name, []).append(i)
    names = sorted(by_domain)
    per_domain = max(len(v) for v in by_domain.values())
    order: list[int] = []
    for name in names:
        idx = by_domain[name]
        picks = rng.choice(idx, size=per_domain, replace=len(idx) < per_domain)
        order.extend(int(p) for p in picks)
    return [order[i] for i in rng.permutation(len(order))]


def _make_batches(
    pool: list[_Sample], order: list[int], cfg: TrainConfig, rng: np.random.Generator
) -> list[Batch]:
    batches = []
    for start in range(0, len(order), cfg.batch_size):
        chunk = [pool[i] for i in order[start : start + cfg.batch_size]]
        if cfg.hflip or cfg.rot90:
            chunk = [_augment(s, cfg, rng) for s in chunk]
        targets = stack_targets([assign_targets(s.boxes, cfg.detector) for s in chunk])
        batches.append(
            Batch(
                images=np.stack([s.pixels for s in chunk]),
                targets=targets,
                domains=[s.domain for s in chunk],
                domain_names=[s.domain_name for s in chunk],
            )
        )
    return batches


@dataclass
class FitResult:
    state: TrainState
    record: TrainRecord
    final_params: dict
    best_ori: dict
    best_heldout: dict
    held_out_split: str | None


def _snapshot(state: TrainState) -> dict:
    params = {k: v.detach().clone() for k, v in state.model.state_dict().items()}
    dim = (
        {k: v.detach().clone() for k, v in state.classifier.state_dict().items()}
        if state.classifier is not None
        else None
    )
    return {"params": params, "dim_params": dim, "step": state.step}


def fit(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> FitResult:
    """Train one arm; track the best checkpoints for the original-domain
    and held-out-domain validation splits separately."""
    from .evaluation import EvalConfig, evaluate_samples

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()

    train_names = training_splits(manifest, cfg.method)
    val_names = validation_splits(manifest)
    held_out = manifest.held_out_domains()
    held_split = None
    for name in val_names:
        entries = manifest.splits[name]
        if entries and entries[0].domain in held_out and entries[0].domain is not None:
            held_split = name
    pool = _load_pool(manifest, train_names)
    if not pool:
        raise ConfigurationError("empty training pool")
    leak = [s.domain_name for s in pool if s.domain_name in held_out]
    if leak:
        raise ConfigurationError(f"held-out domain in training pool: {sorted(set(leak))}")

    val_samples = {
        name: [img for img, _ in assign_domain_labels(manifest, name)]
        for name in val_names
    }

    train_domains = manifest.training_domains()
    state = make_state(cfg, num_domains=max(len(train_domains), 2))
    record = TrainRecord(seed=cfg.seed, method=cfg.method, config=asdict(cfg))
    eval_cfg = EvalConfig()

    best_ori = {"map": -1.0, "epoch": -1, "snapshot": None}
    best_held = {"map": -1.0, "epoch": -1, "snapshot": None}

    def run_eval(epoch: int) -> None:
        for name in val_names:
            result = evaluate_samples(state.model, val_samples[name], eval_cfg)
            record.evals.append(
                {
                    "epoch": epoch,
                    "split": name,
                    "map": result.map,
                    "per_class": {str(k): v for k, v in result.per_class.items()},
                }
            )
            if name == "val" and result.map > best_ori["map"]:
                best_ori.update(map=result.map, epoch=epoch, snapshot=_snapshot(state))
            if name == held_split and result.map > best_held["map"]:
                best_held.update(map=result.map, epoch=epoch, snapshot=_snapshot(state))

    for epoch in range(1, cfg.epochs + 1):
        order = _epoch_order(pool, cfg, rng)
        for batch in _make_batches(pool, order, cfg, rng):
            breakdown = train_step(state, batch, cfg)
            counts: dict[str, int] = {}
            for name in batch.domain_names:
                counts[name] = counts.get(name, 0) + 1
            record.steps.append(
                {"step": state.step, "epoch": epoch, "domains": counts}
                | breakdown.to_dict()
            )
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            run_eval(epoch)

    record.wall_clock_s = time.perf_counter() - t0
    record.best = {
        "ori": {"map": best_ori["map"], "epoch": best_ori["epoch"]},
        "held_out": {"map": best_held["map"], "epoch": best_held["epoch"], "split": held_split},
    }

    final = _snapshot(state)
    result = FitResult(
        state=state,
        record=record,
        final_params=final,
        best_ori=best_ori["snapshot"] or final,
        best_heldout=best_held["snapshot"] or final,
        held_out_split=held_split,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _save_fit(out, result, manifest, cfg)
    return result


def _save_fit(out: Path, result: FitResult, manifest: DatasetManifest, cfg: TrainConfig) -> None:
    state = result.state
    dim_cfg = asdict(state.classifier.cfg) if state.classifier is not None else None
    for name, snap in (
        ("final", result.final_params),
        ("best_ori", result.best_ori),
        ("best_heldout", result.best_heldout),
    ):
        model = copy.deepcopy(state.model)
        model.load_state_dict(snap["params"])
        save_checkpoint(
            out / f"{name}.pt", model, step=snap["step"], classes=manifest.classes,
            dim_state=snap["dim_params"], dim_config=dim_cfg,
            extra={"method": cfg.method, "seed": cfg.seed},
        )
    result.record.to_ndjson(out / "record.ndjson")
