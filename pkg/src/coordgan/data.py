"""Datasets: folder ingestion and the synthetic shape corpus.

The synthetic corpus renders anti-aliased Gaussian blobs or soft-edged
ellipses at analytically known centers, so geometric probes (keypoint
regression, flip consistency) have exact ground truth without any
pretrained detector. Images are float32 (H, W, 3) in [0, 1]; pixel (i, j)
corresponds to the unit-square coordinate ((j+0.5)/W, (i+0.5)/H).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class DataError(RuntimeError):
    """Dataset ingestion failure (missing/undecodable inputs)."""


@dataclass(frozen=True)
class SyntheticShapeSpec:
    """Recipe for the synthetic corpus.

    With ``distinct_channels`` each shape's color is dominant in its own RGB
    channel, so a per-channel argmax recovers the matching center.
    """

    resolution: int = 32
    min_shapes: int = 1
    max_shapes: int = 3
    kind: str = "gaussian"  # gaussian | ellipse | mixed
    position_range: tuple[float, float] = (0.2, 0.8)
    radius_range: tuple[float, float] = (0.1, 0.25)
    color_range: tuple[float, float] = (0.6, 1.0)
    distinct_channels: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.resolution < 1:
            raise ValueError("resolution must be positive")
        if not (1 <= self.min_shapes <= self.max_shapes <= 3):
            raise ValueError("shape count range must satisfy 1 <= min <= max <= 3")
        if self.kind not in ("gaussian", "ellipse", "mixed"):
            raise ValueError(f"unknown shape kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["position_range"] = list(self.position_range)
        d["radius_range"] = list(self.radius_range)
        d["color_range"] = list(self.color_range)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SyntheticShapeSpec":
        d = dict(d)
        for key in ("position_range", "radius_range", "color_range"):
            d[key] = tuple(d[key])
        return SyntheticShapeSpec(**d)


@dataclass
class ImageDataset:
    """In-memory image collection with optional analytic keypoints.

    ``keypoints`` rows are flattened shape centers (x0, y0, x1, y1, ...) in
    [0, 1]^2, NaN-padded up to the per-corpus maximum shape count.
    """

    images: torch.Tensor  # (N, R, R, 3) float32 in [0, 1]
    resolution: int
    augment_hflip: bool = False
    keypoints: np.ndarray | None = None
    source: str = "memory"

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"expected (N, R, R, 3) images, got {tuple(self.images.shape)}")
        if self.images.shape[1] != self.resolution or self.images.shape[2] != self.resolution:
            raise ValueError("image shape disagrees with declared resolution")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, idx: int) -> torch.Tensor:
        return self.images[idx]

    def sample(self, count: int, rng: np.random.Generator) -> torch.Tensor:
        """Random batch with horizontal-flip augmentation driven by ``rng``."""
        idx = rng.integers(0, len(self), size=count)
        batch = self.images[torch.as_tensor(idx, dtype=torch.long)]
        if self.augment_hflip:
            flips = rng.random(count) < 0.5
            if flips.any():
                mask = torch.as_tensor(flips)
                batch = batch.clone()
                batch[mask] = torch.flip(batch[mask], dims=[2])
        return batch


def hflip_image(image: torch.Tensor) -> torch.Tensor:
    """Mirror around the vertical axis (x -> 1-x); accepts (..., H, W, 3)."""
    return torch.flip(image, dims=[-2])


def hflip_keypoints(keypoints: np.ndarray) -> np.ndarray:
    """Flip keypoint x coordinates: columns 0, 2, 4, ... become 1-x."""
    out = keypoints.copy()
    out[..., 0::2] = 1.0 - out[..., 0::2]
    return out


def _pixel_centers(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    return np.meshgrid(c, c)  # xx (varies along columns), yy (along rows)


def _render_image(resolution: int, shapes: list[dict]) -> np.ndarray:
    xx, yy = _pixel_centers(resolution)
    img = np.zeros((resolution, resolution, 3), dtype=np.float64)
    px = 1.0 / resolution
    for shape in shapes:
        cx, cy = shape["center"]
        rx, ry = shape["radii"]
        if shape["kind"] == "gaussian":
            # radii act as Gaussian sigmas; smooth falloff is inherently AA
            intensity = np.exp(-0.5 * (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2))
        else:
            q = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
            dist = (1.0 - q) * min(rx, ry)  # approx. signed distance to the edge
            intensity = np.clip(0.5 + dist / px, 0.0, 1.0)
        img += intensity[..., None] * np.asarray(shape["color"])[None, None, :]
    return np.clip(img, 0.0, 1.0)


def make_synthetic(spec: SyntheticShapeSpec, count: int) -> ImageDataset:
    """Render ``count`` images; keypoints are the sampled shape centers."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(spec.seed)
    lo_p, hi_p = spec.position_range
    lo_r, hi_r = spec.radius_range
    lo_c, hi_c = spec.color_range
    images = np.empty((count, spec.resolution, spec.resolution, 3), dtype=np.float32)
    keypoints = np.full((count, 2 * spec.max_shapes), np.nan)
    for i in range(count):
        n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        shapes = []
        for s in range(n):
            kind = spec.kind
            if kind == "mixed":
                kind = "gaussian" if rng.random() < 0.5 else "ellipse"
            center = rng.uniform(lo_p, hi_p, size=2)
            radii = rng.uniform(lo_r, hi_r, size=2)
            if spec.distinct_channels:
                # pure one-channel color: per-channel argmax stays exact
                color = np.zeros(3)
                color[s % 3] = rng.uniform(max(lo_c, 0.7), hi_c)
            else:
                color = rng.uniform(lo_c, hi_c, size=3)
            shapes.append({"kind": kind, "center": center, "radii": radii, "color": color})
            keypoints[i, 2 * s : 2 * s + 2] = center
        images[i] = _render_image(spec.resolution, shapes)
    return ImageDataset(
        images=torch.from_numpy(images),
        resolution=spec.resolution,
        keypoints=keypoints,
        source=f"synthetic(seed={spec.seed})",
    )


def write_keypoints_csv(path, keypoints: np.ndarray) -> None:
    n_cols = keypoints.shape[1]
    header = "image_index," + ",".join(
        f"kp{i // 2}_{'x' if i % 2 == 0 else 'y'}" for i in range(n_cols)
    )
    with open(path, "w") as f:
        f.write(header + "\n")
        for i, row in enumerate(keypoints):
            f.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")


# keypoint oracles -------------------------------------------------------------

def centroid_keypoints(images: torch.Tensor) -> np.ndarray:
    """Luminance-weighted centroid per image, (N, 2) in unit coordinates."""
    arr = images.detach().cpu().double().numpy()
    lum = arr.mean(axis=-1)  # (N, H, W)
    n, h, w = lum.shape
    xx, yy = _pixel_centers(h)
    mass = lum.sum(axis=(1, 2)) + 1e-12
    cx = (lum * xx[None]).sum(axis=(1, 2)) / mass
    cy = (lum * yy[None]).sum(axis=(1, 2)) / mass
    return np.stack([cx, cy], axis=1)


def argmax_keypoints(images: torch.Tensor, n_shapes: int) -> np.ndarray:
    """Brightest pixel of each shape's dominant channel, (N, 2*n_shapes)."""
    arr = images.detach().cpu().numpy()
    n, h, w, _ = arr.shape
    out = np.empty((n, 2 * n_shapes))
    for i in range(n):
        for s in range(n_shapes):
            chan = arr[i, :, :, s % 3]
            row, col = np.unravel_index(int(chan.argmax()), chan.shape)
            out[i, 2 * s] = (col + 0.5) / w
            out[i, 2 * s + 1] = (row + 0.5) / h
    return out


# folder ingestion --------------------------------------------------------------

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


def load_folder(path, resolution: int, hflip: bool = False) -> ImageDataset:
    """Load every decodable image under ``path``: center-crop to square, then
    bilinear-resize to ``resolution``. Iteration order is sorted by filename."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    images = []
    skipped = []
    for file in sorted(root.iterdir()):
        if not file.is_file():
            continue
        try:
            with Image.open(file) as im:
                im = im.convert("RGB")
                side = min(im.size)
                left = (im.width - side) // 2
                top = (im.height - side) // 2
                im = im.crop((left, top, left + side, top + side))
                if im.size != (resolution, resolution):
                    im = im.resize((resolution, resolution), Image.BILINEAR)
                images.append(np.asarray(im, dtype=np.float32) / 255.0)
        except Exception:
            skipped.append(file.name)
    if skipped:
        warnings.warn(f"skipped undecodable files: {', '.join(skipped)}")
    if not images:
        raise DataError(
            f"no decodable images in {root}"
            + (f" (skipped: {', '.join(skipped)})" if skipped else "")
        )
    stack = torch.from_numpy(np.stack(images))
    return ImageDataset(
        images=stack, resolution=resolution, augment_hflip=hflip, source=str(root)
    )


# PNG emission -------------------------------------------------------------------

def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().clamp(0.0, 1.0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def save_png(path, image: torch.Tensor) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def _tile(images: torch.Tensor, rows: int, cols: int, pad: int) -> np.ndarray:
    n, h, w, _ = images.shape
    canvas = np.zeros(
        (rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad, 3), dtype=np.uint8
    )
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = r * (h + pad), c * (w + pad)
        canvas[y : y + h, x : x + w] = to_uint8(images[i])
    return canvas


def save_image_grid(path, images: torch.Tensor, pad: int = 2) -> None:
    """Tile a batch into a ceil(sqrt(N))-per-side grid with 2px separators."""
    if images.ndim == 3:
        images = images.unsqueeze(0)
    side = math.ceil(math.sqrt(images.shape[0]))
    Image.fromarray(_tile(images, side, side, pad)).save(path, format="PNG")


def save_image_strip(path, images: torch.Tensor, pad: int = 2) -> None:
    """Tile a batch into a single row, left to right."""
    if images.ndim == 3:
        images = images.unsqueeze(0)
    Image.fromarray(_tile(images, 1, images.shape[0], pad)).save(path, format="PNG")
