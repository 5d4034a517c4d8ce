"""Synthetic detection dataset with controllable domain shift ("AquaShapes").

Scenes are textured, muted backgrounds with 1..max_objects shapes drawn from
five archetypes (spiky disc, five-pointed star, elongated blob, fan, strand
cluster). The same scenes are re-rendered once per domain: each domain
applies a water-like tint (per-channel attenuation plus veiling light), and
with probability ``spurious_correlation`` an object is painted in the
domain's signature hue instead of its class hue. That knob makes object
color a domain-dependent shortcut while shape stays the invariant cue.

Domains ``type1..typeK`` get train and val splits; one extra domain
``type{K+1}`` is rendered for validation only and never appears in any
training split. The untinted originals are the ``train``/``val`` splits
with a null domain.
"""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    BoxLabel,
    DatasetManifest,
    SplitEntry,
    save_annotations,
    save_image,
    write_manifest,
)

SHAPE_CLASSES = ("spikedisc", "star", "blob", "fan", "strands")

# one paint hue per archetype; kept away from the held-out domain hue
CLASS_HUES = (0.99, 0.13, 0.33, 0.60, 0.44)

# per-class brightness bands: a class cue that survives any water tint,
# unlike hue (the spurious cue)
CLASS_VALUE_BANDS = ((0.42, 0.54), (0.84, 0.95), (0.60, 0.72), (0.72, 0.82), (0.90, 0.98))


@dataclass(frozen=True)
class DomainTint:
    """Water tint for one domain plus the hue its objects take on."""

    attenuation: tuple[float, float, float]
    veiling: tuple[float, float, float]
    transmission: float
    object_hue: float

    def __post_init__(self):
        if not all(0.0 < a <= 1.0 for a in self.attenuation):
            raise ValueError(f"attenuation outside (0, 1]: {self.attenuation}")
        if not all(0.0 <= v <= 1.0 for v in self.veiling):
            raise ValueError(f"veiling outside [0, 1]: {self.veiling}")
        if not (0.0 < self.transmission <= 1.0):
            raise ValueError(f"transmission outside (0, 1]: {self.transmission}")


def default_tints(k_domains: int, heldout_hue: float = 0.86) -> tuple[DomainTint, ...]:
    """K training tints with hues spread over [0.02, 0.66] plus one held-out
    tint in the unused part of the hue wheel."""
    hues = [0.02 + 0.64 * i / max(k_domains - 1, 1) for i in range(k_domains)]
    hues.append(heldout_hue)
    tints = []
    for i, hue in enumerate(hues):
        veil = colorsys.hsv_to_rgb(hue, 0.55, 0.52)
        peak = max(veil)
        att = tuple(0.30 + 0.68 * (v / peak) for v in veil)
        trans = 0.56 + 0.10 * ((i * 0.618) % 1.0)
        tints.append(
            DomainTint(attenuation=att, veiling=veil, transmission=trans, object_hue=hue)
        )
    return tuple(tints)


@dataclass(frozen=True)
class SynthConfig:
    """Generation parameters; identical configs produce identical bytes."""

    n_train: int = 20
    n_val: int = 10
    image_size: int = 160
    classes: tuple[str, ...] = SHAPE_CLASSES
    class_hues: tuple[float, ...] = CLASS_HUES
    k_domains: int = 7
    tints: tuple[DomainTint, ...] | None = None
    spurious_correlation: float = 0.8
    original_object_hue: float = 0.46
    min_objects: int = 1
    max_objects: int = 3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.spurious_correlation <= 1.0):
            raise ValueError("spurious_correlation outside [0, 1]")
        if self.k_domains < 2:
            raise ValueError("need at least 2 domains")
        if self.n_train <= 0 or self.n_val <= 0 or self.image_size < 32:
            raise ValueError("invalid dataset dimensions")
        if len(self.classes) != len(self.class_hues):
            raise ValueError("classes and class_hues must align")
        if self.tints is not None and len(self.tints) != self.k_domains + 1:
            raise ValueError("need k_domains + 1 tints (last one is held out)")

    def resolved_tints(self) -> tuple[DomainTint, ...]:
        return self.tints if self.tints is not None else default_tints(self.k_domains)


@dataclass(frozen=True)
class _ObjectSpec:
    class_id: int
    cx: float  # center, fraction of image
    cy: float
    size: float  # radius, fraction of image
    angle: float
    hue_from_domain: bool
    sat: float
    val: float
    shape_seed: int


@dataclass
class _Scene:
    objects: list[_ObjectSpec]
    bg_hsv: tuple[float, float, float]
    lum_field: np.ndarray  # image-sized additive luminance
    grain: np.ndarray  # image-sized per-channel noise


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    n = grid.shape[0]
    pos = np.linspace(0.0, n - 1.0, size)
    i0 = np.clip(pos.astype(int), 0, n - 2)
    frac = pos - i0
    rows = grid[i0] * (1.0 - frac)[:, None] + grid[i0 + 1] * frac[:, None]
    return rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]


def _build_scene(rng: np.random.Generator, cfg: SynthConfig) -> _Scene:
    size = cfg.image_size
    bg_hsv = (
        float(rng.uniform(0.07, 0.13)),
        float(rng.uniform(0.10, 0.22)),
        float(rng.uniform(0.34, 0.46)),
    )
    lum = _bilinear_upsample(rng.uniform(-0.05, 0.05, size=(7, 7)), size)
    grain = rng.normal(0.0, 0.010, size=(size, size, 3))

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[_ObjectSpec] = []
    for _ in range(n_obj):
        class_id = int(rng.integers(0, len(cfg.classes)))
        obj_size = float(rng.uniform(0.12, 0.22))  # radius
        placed = None
        for _attempt in range(12):
            margin = obj_size + 3.0 / size
            cx = float(rng.uniform(margin, 1.0 - margin))
            cy = float(rng.uniform(margin, 1.0 - margin))
            if all(np.hypot(cx - o.cx, cy - o.cy) > 0.75 * (obj_size + o.size) for o in objects):
                placed = (cx, cy)
                break
        if placed is None:
            placed = (cx, cy)  # accept the last try; mild overlap is fine
        objects.append(
            _ObjectSpec(
                class_id=class_id,
                cx=placed[0],
                cy=placed[1],
                size=obj_size,
                angle=float(rng.uniform(0.0, 2.0 * np.pi)),
                hue_from_domain=bool(rng.random() < cfg.spurious_correlation),
                sat=float(rng.uniform(0.80, 0.97)),
                val=float(rng.uniform(*CLASS_VALUE_BANDS[class_id % len(CLASS_VALUE_BANDS)])),
                shape_seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return _Scene(objects=objects, bg_hsv=bg_hsv, lum_field=lum, grain=grain)


def _edge(limit: np.ndarray | float, r: np.ndarray, soft: float = 1.2) -> np.ndarray:
    return np.clip((limit - r) / soft + 0.5, 0.0, 1.0)


def _shape_mask(obj: _ObjectSpec, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Alpha mask and luminance pattern for one object, image-sized."""
    cy, cx = obj.cy * size, obj.cx * size
    radius = obj.size * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    phi = np.arctan2(dy, dx) - obj.angle
    srng = np.random.default_rng(obj.shape_seed)
    name = SHAPE_CLASSES[obj.class_id % len(SHAPE_CLASSES)]

    if name == "spikedisc":
        limit = radius * (0.58 + 0.42 * np.abs(np.cos(4.5 * phi)) ** 0.6)
        mask = _edge(limit, r)
        pattern = 0.74 + 0.30 * np.clip(r / radius, 0.0, 1.0)
    elif name == "star":
        sector = np.mod(phi, 2.0 * np.pi / 5.0) - np.pi / 5.0
        limit = radius * np.cos(np.pi / 5.0) / np.maximum(np.cos(sector), 1e-6)
        limit = np.minimum(limit, radius * 1.05)
        mask = _edge(limit, r)
        pattern = 1.06 - 0.18 * np.clip(r / radius, 0.0, 1.0)
    elif name == "blob":
        a, b = radius, radius / 2.6
        xr = dx * np.cos(obj.angle) + dy * np.sin(obj.angle)
        yr = -dx * np.sin(obj.angle) + dy * np.cos(obj.angle)
        wobble = 1.0 + 0.10 * np.sin(3.0 * phi + srng.uniform(0, 2 * np.pi))
        rho = np.sqrt((xr / a) ** 2 + (yr / b) ** 2) / wobble
        mask = _edge(1.0, rho, soft=1.4 / b)
        pattern = 0.82 + 0.28 * np.clip((xr / a + 1.0) / 2.0, 0.0, 1.0)
    elif name == "fan":
        span = 1.15
        wrapped = np.mod(phi + np.pi, 2.0 * np.pi) - np.pi
        radial = _edge(radius, r)
        angular = np.clip((span - np.abs(wrapped)) * radius / 2.5 + 0.5, 0.0, 1.0)
        mask = radial * angular
        pattern = 1.0 + 0.16 * np.cos(11.0 * wrapped)
    else:  # strands
        mask = np.zeros((size, size))
        n_strands = 4 + int(srng.integers(0, 2))
        for _ in range(n_strands):
            ang = obj.angle + srng.uniform(-0.55, 0.55)
            off = srng.uniform(-0.30, 0.30, size=2) * radius
            length = radius * srng.uniform(0.8, 1.05)
            width = max(radius * 0.11, 1.3)
            xr = (dx - off[0]) * np.cos(ang) + (dy - off[1]) * np.sin(ang)
            yr = -(dx - off[0]) * np.sin(ang) + (dy - off[1]) * np.cos(ang)
            rho = np.sqrt((xr / length) ** 2 + (yr / width) ** 2)
            mask = np.maximum(mask, _edge(1.0, rho, soft=1.0 / width))
        pattern = np.full((size, size), 1.08)

    return mask, pattern


def _mask_box(mask: np.ndarray, class_id: int, size: int) -> BoxLabel | None:
    solid = mask >= 0.5
    if not solid.any():
        return None
    rows = np.flatnonzero(solid.any(axis=1))
    cols = np.flatnonzero(solid.any(axis=0))
    y1, y2 = rows[0], rows[-1] + 1
    x1, x2 = cols[0], cols[-1] + 1
    return BoxLabel(
        cx=(x1 + x2) / 2.0 / size,
        cy=(y1 + y2) / 2.0 / size,
        w=(x2 - x1) / size,
        h=(y2 - y1) / size,
        class_id=class_id,
    )


def _render(
    scene: _Scene, tint: DomainTint | None, cfg: SynthConfig
) -> tuple[np.ndarray, list[BoxLabel], list[dict]]:
    """Render one scene for one domain; returns pixels, boxes, object rows."""
    size = cfg.image_size
    bg = np.array(colorsys.hsv_to_rgb(*scene.bg_hsv))
    img = np.clip(bg[None, None, :] + scene.lum_field[:, :, None] + scene.grain, 0.0, 1.0)

    boxes: list[BoxLabel] = []
    rows: list[dict] = []
    for obj in scene.objects:
        if obj.hue_from_domain:
            hue = tint.object_hue if tint is not None else cfg.original_object_hue
            source = "domain"
        else:
            hue = cfg.class_hues[obj.class_id]
            source = "class"
        color = np.array(colorsys.hsv_to_rgb(hue, obj.sat, obj.val))
        mask, pattern = _shape_mask(obj, size)
        paint = np.clip(color[None, None, :] * pattern[:, :, None], 0.0, 1.0)
        img = img * (1.0 - mask[:, :, None]) + paint * mask[:, :, None]
        box = _mask_box(mask, obj.class_id, size)
        if box is None:
            continue
        boxes.append(box)
        rows.append({"class_id": obj.class_id, "hue": round(hue, 4), "hue_source": source})

    if tint is not None:
        att = np.array(tint.attenuation)
        veil = np.array(tint.veiling)
        img = img * att[None, None, :] * tint.transmission + veil[None, None, :] * (
            1.0 - tint.transmission
        )
    return np.clip(img, 0.0, 1.0), boxes, rows


def generate_synthetic_dataset(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Generate the dataset on disk and return its manifest.

    Splits: ``train``/``val`` (original, null domain), ``train_typek`` and
    ``val_typek`` for k=1..K, and ``val_type{K+1}`` for the held-out domain.
    A per-object metadata table is written to ``objects.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tints = cfg.resolved_tints()
    k = cfg.k_domains
    domain_names = [f"type{i}" for i in range(1, k + 2)]

    scenes = {
        "train": [
            _build_scene(np.random.default_rng([cfg.seed, 0, i]), cfg)
            for i in range(cfg.n_train)
        ],
        "val": [
            _build_scene(np.random.default_rng([cfg.seed, 1, i]), cfg)
            for i in range(cfg.n_val)
        ],
    }

    # (split name, base split, tint, domain name) for every emitted split
    renders: list[tuple[str, str, DomainTint | None, str | None]] = [
        ("train", "train", None, None),
        ("val", "val", None, None),
    ]
    for i, name in enumerate(domain_names):
        if i < k:
            renders.append((f"train_{name}", "train", tints[i], name))
        renders.append((f"val_{name}", "val", tints[i], name))

    splits: dict[str, list[SplitEntry]] = {}
    meta_rows: list[dict] = []
    for split_name, base, tint, domain in renders:
        img_dir = out / "images" / split_name
        lbl_dir = out / "labels" / split_name
        img_dir.mkdir(parents=True, exist_ok=True)
        lbl_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, scene in enumerate(scenes[base]):
            pixels, boxes, rows = _render(scene, tint, cfg)
            img_rel = f"images/{split_name}/{i:04d}.png"
            lbl_rel = f"labels/{split_name}/{i:04d}.txt"
            save_image(out / img_rel, pixels)
            save_annotations(out / lbl_rel, boxes)
            entries.append(SplitEntry(image=img_rel, annotation=lbl_rel, domain=domain))
            for j, row in enumerate(rows):
                meta_rows.append(
                    {
                        "split": split_name,
                        "image": img_rel,
                        "object": j,
                        "domain": domain or "original",
                        "class_id": row["class_id"],
                        "class_name": cfg.classes[row["class_id"]],
                        "hue": row["hue"],
                        "hue_source": row["hue_source"],
                    }
                )
        splits[split_name] = entries

    manifest = DatasetManifest(
        classes=list(cfg.classes), domains=domain_names, splits=splits, root=out
    )
    write_manifest(manifest)
    with open(out / "objects.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(meta_rows[0].keys()))
        writer.writeheader()
        writer.writerows(meta_rows)
    return manifest
