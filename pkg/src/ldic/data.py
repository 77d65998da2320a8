"""Image / depth-map types, dataset scanning, and the synthetic generator.

Disk layout of a dataset root::

    <root>/<split>/<id>_rgb.png     8-bit RGB
    <root>/<split>/<id>_depth.png   16-bit grayscale, millimeters

Depth maps live at their native (lower) resolution; :func:`upsample_depth`
aligns one to an image grid bilinearly and normalizes by a fixed 10 m range
to [0, 1].  Zero (invalid) readings stay zero after normalization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

DEPTH_MAX_METERS = 10.0


class DataError(ValueError):
    """Unreadable or malformed dataset content."""


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class RgbImage:
    """(H, W, 3) float32 in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[2] != 3:
            raise DataError(f"RGB image must be (H, W, 3), got {v.shape}")
        if v.dtype != np.float32:
            raise DataError("RGB image must be float32")
        if not np.isfinite(v).all() or v.min() < 0 or v.max() > 1:
            raise DataError("RGB values must be finite and within [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.values * 255.0), 0, 255).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "RgbImage":
        return cls((np.asarray(arr, dtype=np.float32) / 255.0).astype(np.float32))


@dataclass(frozen=True)
class DepthMap:
    """(h, w) float32 distances in meters at native sensor resolution."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise DataError(f"depth map must be 2-D, got shape {v.shape}")
        if v.dtype != np.float32:
            raise DataError("depth map must be float32")
        if not np.isfinite(v).all() or v.min() < 0:
            raise DataError("depth values must be finite and non-negative")


@dataclass(frozen=True)
class AlignedDepth:
    """(H, W) float32 in [0, 1]: depth on the image grid, range-normalized."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.dtype != np.float32:
            raise DataError("aligned depth must be 2-D float32")
        if not np.isfinite(v).all() or v.min() < 0 or v.max() > 1:
            raise DataError("aligned depth must lie in [0, 1]")


@dataclass(frozen=True)
class RgbdPair:
    image: RgbImage
    depth: DepthMap
    pair_id: str = ""


# ---------------------------------------------------------------------------
# file io


def load_rgb(path) -> RgbImage:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise DataError(f"cannot read RGB image {path}: {e}") from e
    return RgbImage.from_uint8(arr)


def save_rgb(path, image: RgbImage) -> None:
    Image.fromarray(image.to_uint8(), mode="RGB").save(path)


def load_depth(path) -> DepthMap:
    """Read a 16-bit grayscale PNG of millimeter distances."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("I", "I;16", "I;16B"):
                raise DataError(
                    f"{path}: depth must be 16-bit grayscale, got mode {img.mode}"
                )
            arr = np.asarray(img, dtype=np.int64)
    except FileNotFoundError:
        raise
    except DataError:
        raise
    except Exception as e:
        raise DataError(f"cannot read depth map {path}: {e}") from e
    if arr.min() < 0 or arr.max() > 0xFFFF:
        raise DataError(f"{path}: depth samples outside the 16-bit range")
    return DepthMap((arr.astype(np.float32) / 1000.0).astype(np.float32))


def save_depth(path, depth: DepthMap) -> None:
    mm = np.clip(np.rint(depth.values * 1000.0), 0, 0xFFFF).astype(np.uint16)
    Image.fromarray(mm).save(path)


# ---------------------------------------------------------------------------
# geometry


def upsample_depth(depth: DepthMap, target_hw: tuple[int, int]) -> AlignedDepth:
    """Bilinearly resize to the image grid, then normalize by 10 m, clamped."""
    h, w = target_hw
    if h < 1 or w < 1:
        raise DataError("target size must be positive")
    t = torch.from_numpy(depth.values).unsqueeze(0).unsqueeze(0)
    if t.shape[-2:] != (h, w):
        t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    aligned = np.clip(t.squeeze(0).squeeze(0).numpy() / DEPTH_MAX_METERS, 0.0, 1.0)
    return AlignedDepth(aligned.astype(np.float32))


def random_aligned_crop(
    image: RgbImage,
    aligned: AlignedDepth,
    size: int,
    rng: np.random.Generator,
) -> tuple[RgbImage, AlignedDepth]:
    """Crop the same random window from an image and its aligned depth."""
    if aligned.values.shape != (image.height, image.width):
        raise DataError("aligned depth does not match the image grid")
    if size > image.height or size > image.width:
        raise DataError(
            f"crop {size} exceeds image {image.height}x{image.width}"
        )
    top = int(rng.integers(0, image.height - size + 1))
    left = int(rng.integers(0, image.width - size + 1))
    return (
        RgbImage(image.values[top : top + size, left : left + size].copy()),
        AlignedDepth(aligned.values[top : top + size, left : left + size].copy()),
    )


# ---------------------------------------------------------------------------
# synthetic scenes


def _palette(d: np.ndarray) -> np.ndarray:
    """Smooth deterministic color map over normalized depth."""
    return np.stack(
        [
            0.5 + 0.5 * np.sin(2 * np.pi * (1.0 * d + 0.00)),
            0.5 + 0.5 * np.sin(2 * np.pi * (1.3 * d + 0.33)),
            0.5 + 0.5 * np.sin(2 * np.pi * (0.7 * d + 0.67)),
        ],
        axis=-1,
    )


def _voronoi_regions(rng, hw: tuple[int, int], k: int) -> np.ndarray:
    h, w = hw
    cx = rng.uniform(0, 1, k)
    cy = rng.uniform(0, 1, k)
    yy, xx = np.mgrid[0:h, 0:w]
    xx = xx / max(w - 1, 1)
    yy = yy / max(h - 1, 1)
    d2 = (xx[..., None] - cx) ** 2 + (yy[..., None] - cy) ** 2
    return np.argmin(d2, axis=-1)


def synth_rgbd(
    seed: int,
    size: int = 64,
    informativeness: float = 0.9,
    depth_factor: int = 4,
) -> RgbdPair:
    """Generate one synthetic RGB-D pair.

    The depth map is piecewise planar (Voronoi cells with sloped planes) at
    ``size / depth_factor`` native resolution.  The image blends a
    depth-determined rendering (region structure and colors are functions of
    depth) with an independently drawn scene: ``informativeness`` of 1 means
    the image is fully determined by depth, 0 means the two are unrelated.
    """
    if not 0.0 <= informativeness <= 1.0:
        raise DataError("informativeness must lie in [0, 1]")
    if size % depth_factor:
        raise DataError("size must be divisible by depth_factor")
    rng = np.random.default_rng(seed)
    h = w = size // depth_factor

    # piecewise-planar depth in meters
    k = int(rng.integers(3, 7))
    region = _voronoi_regions(rng, (h, w), k)
    base = rng.uniform(0.8, 9.2, k)
    slope = rng.uniform(-1.5, 1.5, (2, k))
    yy, xx = np.mgrid[0:h, 0:w]
    xx = xx / max(w - 1, 1)
    yy = yy / max(h - 1, 1)
    depth_m = (
        base[region] + slope[0][region] * xx + slope[1][region] * yy
    )
    depth_m = np.clip(depth_m, 0.05, DEPTH_MAX_METERS).astype(np.float32)
    depth = DepthMap(depth_m)

    aligned = upsample_depth(depth, (size, size))
    region_full = np.repeat(np.repeat(region, depth_factor, 0), depth_factor, 1)
    region_norm = (base / DEPTH_MAX_METERS)[region_full]
    img_dep = 0.6 * _palette(region_norm) + 0.4 * _palette(aligned.values)

    # independent scene: its own regions, flat colors, low-frequency waves
    k2 = int(rng.integers(3, 7))
    region2 = _voronoi_regions(rng, (size, size), k2)
    colors2 = rng.uniform(0.1, 0.9, (k2, 3))
    img_ind = colors2[region2]
    yy2, xx2 = np.mgrid[0:size, 0:size] / size
    for _ in range(3):
        fx, fy = rng.uniform(-6, 6, 2)
        phase = rng.uniform(0, 1)
        wave = 0.12 * np.sin(2 * np.pi * (fx * xx2 + fy * yy2 + phase))
        img_ind = img_ind + wave[..., None]

    blend = informativeness * img_dep + (1.0 - informativeness) * img_ind
    image = RgbImage(np.clip(blend, 0.0, 1.0).astype(np.float32))
    return RgbdPair(image=image, depth=depth, pair_id=f"synth{seed:08d}")


def synth_dataset(
    root,
    split: str,
    count: int,
    size: int = 64,
    informativeness: float = 0.9,
    seed: int = 0,
) -> list[str]:
    """Write ``count`` synthetic pairs under ``root/split``; returns the ids."""
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(count)
    ids = []
    for i, child in enumerate(children):
        pair = synth_rgbd(
            int(child.generate_state(1)[0]), size=size, informativeness=informativeness
        )
        pair_id = f"{split}{i:05d}"
        save_rgb(out / f"{pair_id}_rgb.png", pair.image)
        save_depth(out / f"{pair_id}_depth.png", pair.depth)
        ids.append(pair_id)
    return ids


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    pair_id: str
    rgb_path: str
    depth_path: str


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    split: str
    entries: tuple[ManifestEntry, ...]
    skipped: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(root, split: str) -> DatasetManifest:
    """Scan ``root/split`` for ``*_rgb.png`` files with matching depth maps.

    Images without a depth file are reported in ``skipped`` (with a warning)
    rather than failing the scan; an empty directory yields an empty
    manifest.
    """
    base = Path(root) / split
    if not base.is_dir():
        raise DataError(f"dataset split directory {base} does not exist")
    entries = []
    skipped = []
    for rgb in sorted(base.glob("*_rgb.png")):
        pair_id = rgb.name[: -len("_rgb.png")]
        depth = base / f"{pair_id}_depth.png"
        if not depth.is_file():
            skipped.append(pair_id)
            continue
        entries.append(
            ManifestEntry(
                pair_id=pair_id, rgb_path=str(rgb), depth_path=str(depth)
            )
        )
    if skipped:
        log.warning(
            "%s/%s: skipped %d image(s) without depth maps", root, split, len(skipped)
        )
    if not entries:
        log.warning("%s/%s: no usable pairs found", root, split)
    return DatasetManifest(
        root=str(root), split=split, entries=tuple(entries), skipped=tuple(skipped)
    )


def save_manifest_cache(manifest: DatasetManifest, path) -> None:
    lines = [f"# root={manifest.root} split={manifest.split}"]
    for e in manifest.entries:
        lines.append(f"{e.pair_id}\t{e.rgb_path}\t{e.depth_path}")
    for s in manifest.skipped:
        lines.append(f"!{s}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest_cache(path) -> DatasetManifest:
    text = Path(path).read_text().rstrip("\n")
    lines = text.split("\n")
    header = lines[0]
    if not header.startswith("# root="):
        raise DataError(f"{path} is not a manifest cache")
    meta, split_part = header[len("# root=") :].rsplit(" split=", 1)
    entries = []
    skipped = []
    for line in lines[1:]:
        if not line:
            continue
        if line.startswith("!"):
            skipped.append(line[1:])
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"malformed manifest line: {line!r}")
        entries.append(ManifestEntry(*parts))
    return DatasetManifest(
        root=meta, split=split_part, entries=tuple(entries), skipped=tuple(skipped)
    )


def load_pair(entry: ManifestEntry) -> RgbdPair:
    return RgbdPair(
        image=load_rgb(entry.rgb_path),
        depth=load_depth(entry.depth_path),
        pair_id=entry.pair_id,
    )
