"""Dataset model and on-disk formats.

A dataset lives in one directory: a ``manifest.json`` at the root, PNG
images, and one annotation text file per image ("class_id cx cy w h" per
object, normalized floats). Splits map names to (image, annotation, domain)
entries; the null domain marks samples from the original, untransferred
data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class DatasetError(Exception):
    """Base class for dataset loading/validation failures."""


class ManifestError(DatasetError):
    """Manifest is missing, malformed, or internally inconsistent."""


class AnnotationParseError(DatasetError):
    """An annotation file has a malformed or out-of-range line."""


@dataclass(frozen=True)
class BoxLabel:
    """One ground-truth box, center/size normalized to image dimensions."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size ({self.w}, {self.h}) outside (0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class_id {self.class_id}")

    def to_xyxy(self) -> tuple[float, float, float, float]:
        """Corner coordinates (x1, y1, x2, y2), still normalized."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )


@dataclass(frozen=True)
class DomainId:
    """A registered domain: dense index plus human-readable name."""

    index: int
    name: str


_BOUNDS_TOL = 1e-9


@dataclass
class AnnotatedImage:
    """Image pixels in [0, 1] plus box labels and an optional domain."""

    pixels: np.ndarray
    boxes: list[BoxLabel] = field(default_factory=list)
    domain: DomainId | None = None
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"pixels must be nonempty HxWx3, got shape {px.shape}")
        if px.min() < -_BOUNDS_TOL or px.max() > 1.0 + _BOUNDS_TOL:
            raise ValueError("pixel values outside [0, 1]")
        self.pixels = px
        for b in self.boxes:
            x1, y1, x2, y2 = b.to_xyxy()
            if x1 < -_BOUNDS_TOL or y1 < -_BOUNDS_TOL or x2 > 1 + _BOUNDS_TOL or y2 > 1 + _BOUNDS_TOL:
                raise ValueError(f"box {b} extends outside image bounds")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SplitEntry:
    """One manifest row: image path, annotation path, domain name or None."""

    image: str
    annotation: str
    domain: str | None = None


@dataclass
class DatasetManifest:
    """Classes, registered domains, and named splits of a dataset.

    Paths in split entries are relative to ``root`` (the directory holding
    the manifest file).
    """

    classes: list[str]
    domains: list[str]
    splits: dict[str, list[SplitEntry]]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        if len(set(self.classes)) != len(self.classes):
            raise ManifestError("duplicate class names")
        if len(set(self.domains)) != len(self.domains):
            raise ManifestError("duplicate domain names")
        for split_name, entries in self.splits.items():
            for e in entries:
                if e.domain is not None and e.domain not in self.domains:
                    raise ManifestError(
                        f"split '{split_name}' references unregistered domain '{e.domain}'"
                    )

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def domain_id(self, name: str) -> DomainId:
        try:
            return DomainId(index=self.domains.index(name), name=name)
        except ValueError:
            raise ManifestError(f"unregistered domain '{name}'") from None

    def training_domains(self) -> list[str]:
        """Domain names that occur in at least one split named train*."""
        seen = []
        for split_name, entries in self.splits.items():
            if not split_name.startswith("train"):
                continue
            for e in entries:
                if e.domain is not None and e.domain not in seen:
                    seen.append(e.domain)
        return sorted(seen, key=self.domains.index)

    def held_out_domains(self) -> list[str]:
        """Registered domains that never occur in any training split."""
        in_training = set(self.training_domains())
        return [d for d in self.domains if d not in in_training]


def load_image(path: str | Path) -> np.ndarray:
    """Read an image file into an HxWx3 float array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path: str | Path, pixels: np.ndarray) -> None:
    """Write [0, 1] float pixels as an 8-bit PNG."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path, format="PNG")


def load_annotations(path: str | Path, num_classes: int | None = None) -> list[BoxLabel]:
    """Parse one annotation file; raises with file and line on bad input."""
    path = Path(path)
    boxes: list[BoxLabel] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise AnnotationParseError(
                    f"{path}:{lineno}: expected 5 fields, got {len(parts)}"
                )
            try:
                class_id = int(parts[0])
                cx, cy, w, h = (float(v) for v in parts[1:])
                box = BoxLabel(cx=cx, cy=cy, w=w, h=h, class_id=class_id)
            except ValueError as exc:
                raise AnnotationParseError(f"{path}:{lineno}: {exc}") from None
            if num_classes is not None and class_id >= num_classes:
                raise AnnotationParseError(
                    f"{path}:{lineno}: class_id {class_id} out of range [0, {num_classes})"
                )
            boxes.append(box)
    return boxes


def save_annotations(path: str | Path, boxes: list[BoxLabel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in boxes:
            fh.write(f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Load and validate a manifest JSON file.

    Every referenced image/annotation file must exist when ``check_files``
    is set. Split entries naming unregistered domains are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from None
    for key in ("classes", "domains", "splits"):
        if key not in raw:
            raise ManifestError(f"{path}: missing '{key}'")
    splits: dict[str, list[SplitEntry]] = {}
    for split_name, entries in raw["splits"].items():
        parsed = []
        for e in entries:
            parsed.append(
                SplitEntry(image=e["image"], annotation=e["annotation"], domain=e.get("domain"))
            )
        splits[split_name] = parsed
    manifest = DatasetManifest(
        classes=list(raw["classes"]),
        domains=list(raw["domains"]),
        splits=splits,
        root=path.parent,
    )
    if check_files:
        for split_name, entries in manifest.splits.items():
            for e in entries:
                for rel in (e.image, e.annotation):
                    if not (manifest.root / rel).is_file():
                        raise ManifestError(
                            f"split '{split_name}' references missing file {rel}"
                        )
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path | None = None) -> Path:
    """Serialize a manifest to JSON (default: <root>/manifest.json)."""
    path = Path(path) if path is not None else manifest.root / "manifest.json"
    payload = {
        "classes": manifest.classes,
        "domains": manifest.domains,
        "splits": {
            name: [
                {"image": e.image, "annotation": e.annotation, "domain": e.domain}
                for e in entries
            ]
            for name, entries in manifest.splits.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    return path


def load_sample(manifest: DatasetManifest, entry: SplitEntry) -> tuple[AnnotatedImage, DomainId | None]:
    """Load one split entry into an AnnotatedImage plus its domain label."""
    pixels = load_image(manifest.root / entry.image)
    boxes = load_annotations(manifest.root / entry.annotation, manifest.num_classes)
    domain = manifest.domain_id(entry.domain) if entry.domain is not None else None
    img = AnnotatedImage(
        pixels=pixels, boxes=boxes, domain=domain, source_id=Path(entry.image).stem
    )
    return img, domain


def assign_domain_labels(
    manifest: DatasetManifest, split: str
) -> list[tuple[AnnotatedImage, DomainId | None]]:
    """Load a split; original-data samples get a null domain label."""
    if split not in manifest.splits:
        raise ManifestError(f"unknown split '{split}'")
    return [load_sample(manifest, e) for e in manifest.splits[split]]
