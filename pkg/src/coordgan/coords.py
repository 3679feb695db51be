"""Coordinate grids and Fourier feature embeddings.

Images are treated as functions sampled on a rectangular grid of pixel
centers. A grid is defined by its resolution and an explicit extent, so the
same decoder can be evaluated on denser grids (superresolution), sparser
grids (cheap low-res inference) or larger extents (zoom-out) without
retraining. Coordinates are lifted into a feature space with a linear map
followed by sine/cosine nonlinearities; the row norms of the frequency
matrix are the spatial frequencies of the embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch


class Extent(NamedTuple):
    """Axis-aligned rectangle (x_min, x_max, y_min, y_max)."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def validate(self) -> "Extent":
        if not all(math.isfinite(v) for v in self):
            raise ValueError(f"extent must be finite, got {tuple(self)}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate extent {tuple(self)}")
        return self

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min


UNIT_EXTENT = Extent(0.0, 1.0, 0.0, 1.0)


@dataclass(frozen=True)
class CoordGrid:
    """Uniform pixel-center grid of 2D evaluation points.

    ``points`` has shape (height*width, 2) in row-major order: the point for
    pixel (row i, column j) sits at index ``i*width + j`` and holds (x_j, y_i).
    """

    height: int
    width: int
    extent: Extent
    points: torch.Tensor = field(repr=False)

    def __len__(self) -> int:
        return self.height * self.width


def make_grid(
    height: int,
    width: int,
    extent: Extent | tuple[float, float, float, float] = UNIT_EXTENT,
    *,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str | None = None,
) -> CoordGrid:
    """Build the pixel-center grid x_j = x_min + (j+0.5)/W * (x_max-x_min).

    Rows follow y analogously. Pure and deterministic; computed in float64
    and cast to ``dtype`` so the uniform-step invariant holds to rounding.
    """
    if height < 1 or width < 1:
        raise ValueError(f"grid dimensions must be positive, got {height}x{width}")
    extent = Extent(*extent).validate()
    xs = extent.x_min + (np.arange(width, dtype=np.float64) + 0.5) / width * extent.width
    ys = extent.y_min + (np.arange(height, dtype=np.float64) + 0.5) / height * extent.height
    xx, yy = np.meshgrid(xs, ys)  # row-major: yy varies along rows
    pts = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    points = torch.as_tensor(pts, dtype=dtype, device=device)
    return CoordGrid(height=height, width=width, extent=extent, points=points)


@dataclass(frozen=True)
class FourierEmbedding:
    """Frequency matrix, global scale and embedding mode.

    ``matrix_u`` has one frequency row per feature; a point p maps to
    concat(sin(gamma*U@p), cos(gamma*U@p)) in ``sincos`` mode or to the sine
    half alone in ``sin`` mode.
    """

    matrix_u: torch.Tensor  # (n_f, 2)
    scale_gamma: float = 1.0
    mode: str = "sincos"

    def __post_init__(self) -> None:
        if self.matrix_u.ndim != 2 or self.matrix_u.shape[-1] != 2:
            raise ValueError(f"frequency matrix must be (n_f, 2), got {tuple(self.matrix_u.shape)}")
        if self.scale_gamma <= 0:
            raise ValueError(f"scale_gamma must be positive, got {self.scale_gamma}")
        if self.mode not in ("sincos", "sin"):
            raise ValueError(f"unknown embedding mode {self.mode!r}")

    @property
    def n_frequencies(self) -> int:
        return self.matrix_u.shape[0]

    @property
    def output_dim(self) -> int:
        return embedding_dim(self.n_frequencies, self.mode)


def embedding_dim(n_frequencies: int, mode: str = "sincos") -> int:
    if mode == "sincos":
        return 2 * n_frequencies
    if mode == "sin":
        return n_frequencies
    raise ValueError(f"unknown embedding mode {mode!r}")


def fourier_features(
    points: torch.Tensor,
    matrix_u: torch.Tensor,
    gamma: float = 1.0,
    mode: str = "sincos",
) -> torch.Tensor:
    """Embed ``points`` (N, 2) with frequency rows ``matrix_u``.

    ``matrix_u`` may carry leading batch dimensions, e.g. (B, n_f, 2) for
    per-sample frequency matrices; the result is then (B, N, out_dim).
    Gradients flow through ``matrix_u``.
    """
    if points.ndim != 2 or points.shape[-1] != 2:
        raise ValueError(f"points must be (N, 2), got {tuple(points.shape)}")
    if matrix_u.shape[-1] != 2:
        raise ValueError(f"frequency matrix must have 2 columns, got {tuple(matrix_u.shape)}")
    # Fold gamma into U so the per-point cost is exactly one (n_f x 2) matvec.
    scaled = matrix_u * gamma
    phase = torch.matmul(points, scaled.transpose(-1, -2))  # (..., N, n_f)
    if mode == "sincos":
        return torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)
    if mode == "sin":
        return torch.sin(phase)
    raise ValueError(f"unknown embedding mode {mode!r}")


def fourier_embed(grid: CoordGrid, emb: FourierEmbedding) -> torch.Tensor:
    """Feature table for every grid point, (height*width, output_dim)."""
    return fourier_features(grid.points, emb.matrix_u, emb.scale_gamma, emb.mode)


def frequency_histogram(
    emb: FourierEmbedding, num_bins: int
) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of frequency-row L2 norms; counts sum to n_frequencies."""
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    norms = torch.linalg.vector_norm(emb.matrix_u.detach().double(), dim=-1).cpu().numpy()
    counts, edges = np.histogram(norms, bins=num_bins)
    return counts, edges
