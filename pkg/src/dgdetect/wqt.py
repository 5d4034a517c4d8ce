"""Water Quality Transfer: restyle a dataset into K water-quality domains.

Two interchangeable restyling backends are provided. The default matches
image color statistics to a style exemplar with a whitening-coloring
transform in RGB space; the alternative pushes pixels through a parametric
underwater attenuation/veiling model. Both preserve geometry, so box labels
carry over unchanged. Pairwise style distances between domains are measured
with Gram matrices over a fixed multi-scale feature stack.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol, Sequence, Union

import numpy as np

from .data import (
    AnnotatedImage,
    DatasetManifest,
    SplitEntry,
    load_annotations,
    load_image,
    save_annotations,
    save_image,
    write_manifest,
)

_SYM_TOL = 1e-10


@dataclass(frozen=True)
class ColorStats:
    """Per-image RGB mean and population covariance."""

    mean: np.ndarray  # (3,)
    covariance: np.ndarray  # (3, 3), symmetric PSD

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        cov = np.asarray(self.covariance, dtype=np.float64).reshape(3, 3)
        if np.abs(cov - cov.T).max() > _SYM_TOL:
            raise ValueError("covariance not symmetric")
        if np.linalg.eigvalsh(cov).min() < -_SYM_TOL:
            raise ValueError("covariance has negative eigenvalues")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class WaterParams:
    """Parametric water model: per-channel attenuation, veiling light, and
    a global transmission factor."""

    attenuation: tuple[float, float, float]
    veiling_light: tuple[float, float, float]
    transmission: float

    def __post_init__(self):
        if not all(0.0 < a <= 1.0 for a in self.attenuation):
            raise ValueError(f"attenuation outside (0, 1]: {self.attenuation}")
        if not all(0.0 <= v <= 1.0 for v in self.veiling_light):
            raise ValueError(f"veiling_light outside [0, 1]: {self.veiling_light}")
        if not (0.0 < self.transmission <= 1.0):
            raise ValueError(f"transmission outside (0, 1]: {self.transmission}")


@dataclass(frozen=True)
class StyleDistanceMatrix:
    """Symmetric zero-diagonal matrix of pairwise style distances."""

    names: tuple[str, ...]
    d: np.ndarray  # (K, K)

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        k = len(self.names)
        if d.shape != (k, k):
            raise ValueError(f"distance matrix shape {d.shape} != ({k}, {k})")
        if not np.allclose(d, d.T):
            raise ValueError("distance matrix not symmetric")
        if np.abs(np.diag(d)).max() > 1e-12:
            raise ValueError("distance matrix diagonal not zero")
        if d.min() < 0.0:
            raise ValueError("negative style distance")
        object.__setattr__(self, "d", d)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("," + ",".join(self.names) + "\n")
            for name, row in zip(self.names, self.d):
                fh.write(name + "," + ",".join(f"{v:.6g}" for v in row) + "\n")


def color_stats(img: AnnotatedImage | np.ndarray) -> ColorStats:
    """Mean and population covariance over all pixels (divide by count)."""
    pixels = img.pixels if isinstance(img, AnnotatedImage) else np.asarray(img, dtype=np.float64)
    flat = pixels.reshape(-1, 3)
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / flat.shape[0]
    cov = (cov + cov.T) / 2.0
    return ColorStats(mean=mean, covariance=cov)


def _sym_power(mat: np.ndarray, power: float) -> np.ndarray:
    """Matrix power via symmetric eigendecomposition, eigenvalues clamped
    at 0 (inverse powers require a regularized input)."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals**power) @ vecs.T


def transfer_color(
    content: AnnotatedImage,
    style_stats: ColorStats,
    eps: float = 1e-6,
    clip: bool = True,
) -> AnnotatedImage:
    """Whitening-coloring color transfer toward the style statistics.

    Pixels map through sqrt(cov_s) @ inv_sqrt(cov_c + eps*I) @ (x - mu_c)
    + mu_s; eps keeps degenerate content covariances invertible. Boxes are
    copied unchanged. With clip=False the raw pre-clipping pixels are
    returned (their mean/covariance match the style statistics up to eps).
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    stats_c = color_stats(content)
    whiten = _sym_power(stats_c.covariance + eps * np.eye(3), -0.5)
    color = _sym_power(style_stats.covariance, 0.5)
    transform = color @ whiten
    flat = content.pixels.reshape(-1, 3)
    out = (flat - stats_c.mean) @ transform.T + style_stats.mean
    out = out.reshape(content.pixels.shape)
    if clip:
        out = np.clip(out, 0.0, 1.0)
        return replace(content, pixels=out, boxes=list(content.boxes))
    result = replace(content, pixels=np.zeros_like(out), boxes=list(content.boxes))
    result.pixels = out  # bypass the [0, 1] check; caller asked for raw values
    return result


def simulate_water(img: AnnotatedImage, p: WaterParams) -> AnnotatedImage:
    """Attenuation/veiling water model; geometry and boxes unchanged."""
    att = np.asarray(p.attenuation)
    veil = np.asarray(p.veiling_light)
    out = img.pixels * att[None, None, :] * p.transmission + veil[None, None, :] * (
        1.0 - p.transmission
    )
    return replace(img, pixels=np.clip(out, 0.0, 1.0), boxes=list(img.boxes))


class StyleBackend(Protocol):
    """A restyling backend: maps an image to its domain-styled variant."""

    def restyle(self, image: AnnotatedImage) -> AnnotatedImage: ...


@dataclass(frozen=True)
class ColorTransferBackend:
    """Default backend: match color statistics of a style exemplar."""

    stats: ColorStats
    eps: float = 1e-6

    def restyle(self, image: AnnotatedImage) -> AnnotatedImage:
        return transfer_color(image, self.stats, eps=self.eps)


@dataclass(frozen=True)
class WaterSimBackend:
    """Alternative backend: parametric attenuation/veiling model."""

    params: WaterParams

    def restyle(self, image: AnnotatedImage) -> AnnotatedImage:
        return simulate_water(image, self.params)


StyleSpec = Union[AnnotatedImage, np.ndarray, ColorStats, WaterParams, StyleBackend]


def make_backend(style: StyleSpec) -> StyleBackend:
    """Build a backend from a style exemplar image, precomputed statistics,
    water parameters, or an already-constructed backend."""
    if isinstance(style, WaterParams):
        return WaterSimBackend(params=style)
    if isinstance(style, ColorStats):
        return ColorTransferBackend(stats=style)
    if isinstance(style, (AnnotatedImage, np.ndarray)):
        return ColorTransferBackend(stats=color_stats(style))
    if hasattr(style, "restyle"):
        return style
    raise TypeError(f"cannot build a style backend from {type(style).__name__}")


def synthesize_domains(
    manifest: DatasetManifest,
    styles: Sequence[StyleSpec],
    splits: Sequence[str] = ("train", "val"),
    out_dir: str | Path | None = None,
    domain_prefix: str = "type",
) -> DatasetManifest:
    """Emit one restyled variant of the named splits per style.

    Styles 1..K-1 produce variants of every named split; the last style is
    held out: it only produces variants of non-training splits (split names
    starting with "train" identify training data). Returns the merged
    manifest, which is also written to disk.
    """
    if len(styles) < 2:
        raise ValueError("need at least 2 styles (the last one is held out)")
    for s in splits:
        if s not in manifest.splits:
            raise ValueError(f"unknown split '{s}'")
    out = Path(out_dir) if out_dir is not None else manifest.root
    out.mkdir(parents=True, exist_ok=True)

    backends = [make_backend(s) for s in styles]
    new_domains = [f"{domain_prefix}{k}" for k in range(1, len(styles) + 1)]
    for name in new_domains:
        if name in manifest.domains:
            raise ValueError(f"domain '{name}' already registered")

    merged_splits = {name: list(entries) for name, entries in manifest.splits.items()}
    for k, (backend, domain) in enumerate(zip(backends, new_domains), start=1):
        held_out = k == len(styles)
        for split in splits:
            if held_out and split.startswith("train"):
                continue
            variant = f"{split}_{domain}"
            img_dir = out / "images" / variant
            lbl_dir = out / "labels" / variant
            img_dir.mkdir(parents=True, exist_ok=True)
            lbl_dir.mkdir(parents=True, exist_ok=True)
            entries = []
            for e in manifest.splits[split]:
                try:
                    src = AnnotatedImage(
                        pixels=load_image(manifest.root / e.image),
                        boxes=load_annotations(manifest.root / e.annotation),
                        source_id=Path(e.image).stem,
                    )
                    styled = backend.restyle(src)
                    stem = Path(e.image).stem
                    img_rel = f"images/{variant}/{stem}.png"
                    lbl_rel = f"labels/{variant}/{stem}.txt"
                    save_image(out / img_rel, styled.pixels)
                    save_annotations(out / lbl_rel, styled.boxes)
                except OSError as exc:
                    raise OSError(f"while restyling {e.image} into {variant}: {exc}") from exc
                entries.append(SplitEntry(image=img_rel, annotation=lbl_rel, domain=domain))
            merged_splits[variant] = entries

    merged = DatasetManifest(
        classes=list(manifest.classes),
        domains=list(manifest.domains) + new_domains,
        splits=merged_splits,
        root=out,
    )
    write_manifest(merged)
    return merged


def _box_pool(img: np.ndarray, k: int = 3) -> np.ndarray:
    """k x k box filter with edge clamping, per channel."""
    pad = k // 2
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    csum = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0), (0, 0)))
    h, w = img.shape[:2]
    out = (
        csum[k : k + h, k : k + w]
        - csum[0:h, k : k + w]
        - csum[k : k + h, 0:w]
        + csum[0:h, 0:w]
    )
    return out / float(k * k)


def _downscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool by an integer factor (trailing remainder dropped)."""
    if factor == 1:
        return img
    h, w = img.shape[:2]
    h2, w2 = h // factor, w // factor
    trimmed = img[: h2 * factor, : w2 * factor]
    return trimmed.reshape(h2, factor, w2, factor, 3).mean(axis=(1, 3))


def _gram_stack(pixels: np.ndarray) -> list[np.ndarray]:
    """Normalized Gram matrices of the fixed feature stack: raw RGB plus
    3x3-average-pooled RGB at downscale factors 1, 2, 4."""
    feats = [pixels]
    for factor in (1, 2, 4):
        feats.append(_box_pool(_downscale(pixels, factor)))
    grams = []
    for f in feats:
        flat = f.reshape(-1, 3).T  # (channels, locations)
        grams.append(flat @ flat.T / float(flat.shape[0] * flat.shape[1]))
    return grams


def style_distance(a: AnnotatedImage | np.ndarray, b: AnnotatedImage | np.ndarray) -> float:
    """Mean squared difference of normalized Gram matrices; symmetric,
    non-negative, zero for identical images."""
    pa = a.pixels if isinstance(a, AnnotatedImage) else np.asarray(a, dtype=np.float64)
    pb = b.pixels if isinstance(b, AnnotatedImage) else np.asarray(b, dtype=np.float64)
    ga, gb = _gram_stack(pa), _gram_stack(pb)
    return float(np.mean([np.mean((x - y) ** 2) for x, y in zip(ga, gb)]))


def build_distance_matrix(
    images: Sequence[AnnotatedImage | np.ndarray], names: Sequence[str]
) -> StyleDistanceMatrix:
    """Pairwise style distances between domain exemplars."""
    if len(images) != len(names):
        raise ValueError(f"{len(images)} images but {len(names)} names")
    if len(images) < 2:
        raise ValueError("need at least 2 exemplars")
    k = len(images)
    d = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            d[i, j] = d[j, i] = style_distance(images[i], images[j])
    return StyleDistanceMatrix(names=tuple(names), d=d)
