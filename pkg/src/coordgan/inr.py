"""Multi-scale coordinate decoder.

The decoder is a stack of blocks, each running a per-point MLP on its own
coordinate grid; block resolutions double and the hidden features of a block
are replicated (nearest neighbor) onto the next, denser grid. Every block
starts by concatenating fresh Fourier coordinate features to the upsampled
features, and layers after the first in a block receive the raw (x, y)
coordinates as a skip concatenation. Because each pixel is a pure function
of its own coordinate (given the block features below it), the same
parameters can be evaluated on denser grids, sparser grids or shifted
extents.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F

from .coords import Extent, UNIT_EXTENT, embedding_dim, fourier_features, make_grid
from .fmm import FMMFactors, FMMLayerSpec, apply_affine, init_shared_weight, modulate

LEAKY_SLOPE = 0.2


@dataclass
class BlockSpec:
    """One resolution level: its grid side, layers and feature frequencies."""

    resolution: int
    layers: list[FMMLayerSpec]
    fourier_n_f: int

    def __post_init__(self) -> None:
        if self.resolution < 1:
            raise ValueError(f"block resolution must be positive, got {self.resolution}")
        if not (2 <= len(self.layers) <= 4):
            raise ValueError(f"blocks take 2-4 layers, got {len(self.layers)}")
        if self.fourier_n_f < 1:
            raise ValueError(f"fourier_n_f must be positive, got {self.fourier_n_f}")


@dataclass
class INRArchitecture:
    """Full decoder description: blocks plus global evaluation choices."""

    blocks: list[BlockSpec]
    upsample_mode: str = "nearest"  # nearest | bilinear
    fourier_mode: str = "sincos"  # sincos | sin
    fourier_gamma: float = 1.0
    output_activation: str = "sigmoid_to_unit"  # sigmoid_to_unit | clamp
    output_channels: int = 3

    def __post_init__(self) -> None:
        if not self.blocks:
            raise ValueError("architecture needs at least one block")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample mode {self.upsample_mode!r}")
        if self.output_activation not in ("sigmoid_to_unit", "clamp"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        for prev, cur in zip(self.blocks, self.blocks[1:]):
            if cur.resolution != 2 * prev.resolution:
                raise ValueError(
                    f"block resolutions must double: {prev.resolution} -> {cur.resolution}"
                )
        prev_width = 0
        for k, block in enumerate(self.blocks):
            emb = embedding_dim(block.fourier_n_f, self.fourier_mode)
            expected = emb + prev_width
            first = block.layers[0]
            if first.n_in != expected:
                raise ValueError(
                    f"block {k} first layer expects n_in={expected} "
                    f"(embedding {emb} + carried {prev_width}), got {first.n_in}"
                )
            for i, layer in enumerate(block.layers[1:], start=1):
                if layer.n_in != block.layers[i - 1].n_out + 2:
                    raise ValueError(
                        f"block {k} layer {i} expects n_in="
                        f"{block.layers[i - 1].n_out + 2} (hidden + coords), got {layer.n_in}"
                    )
            prev_width = block.layers[-1].n_out
        if prev_width != self.output_channels:
            raise ValueError(
                f"final layer produces {prev_width} channels, expected {self.output_channels}"
            )

    @property
    def resolution(self) -> int:
        return self.blocks[-1].resolution

    def block_resolutions(self) -> list[int]:
        return [b.resolution for b in self.blocks]


@dataclass
class DirectParams:
    """Per-sample weight and bias of an unfactorized layer."""

    weight: torch.Tensor  # (..., n_out, n_in)
    bias: torch.Tensor  # (..., n_out)


LayerParams = FMMFactors | DirectParams


@dataclass
class INRParams:
    """One parameter set for the decoder: per-layer weights and per-block
    frequency matrices, each with a leading batch dimension."""

    fourier_u: list[torch.Tensor]  # per block, (B, n_f, 2)
    layers: list[list[LayerParams]]  # [block][layer]

    @property
    def batch(self) -> int:
        return self.fourier_u[0].shape[0]

    def tensors(self):
        """All parameter tensors in a fixed traversal order."""
        for u in self.fourier_u:
            yield u
        for block in self.layers:
            for lp in block:
                if isinstance(lp, DirectParams):
                    yield lp.weight
                    yield lp.bias
                else:
                    yield lp.a
                    yield lp.b
                    yield lp.bias

    def map(self, fn) -> "INRParams":
        fourier = [fn(u) for u in self.fourier_u]
        layers = []
        for block in self.layers:
            out = []
            for lp in block:
                if isinstance(lp, DirectParams):
                    out.append(DirectParams(fn(lp.weight), fn(lp.bias)))
                else:
                    out.append(FMMFactors(fn(lp.a), fn(lp.b), fn(lp.bias)))
            layers.append(out)
        return INRParams(fourier_u=fourier, layers=layers)


def lerp_params(p1: INRParams, p2: INRParams, t: float) -> INRParams:
    """Elementwise (1-t)*p1 + t*p2 over every factor, bias and frequency row."""
    t1 = list(p1.tensors())
    t2 = list(p2.tensors())
    if len(t1) != len(t2) or any(a.shape != b.shape for a, b in zip(t1, t2)):
        raise ValueError("parameter sets have mismatched shapes")
    it = iter(t2)
    return p1.map(lambda a: torch.lerp(a, next(it), float(t)))


@dataclass(frozen=True)
class ArchConfig:
    """Serializable recipe for building an INRArchitecture."""

    block_resolutions: tuple[int, ...] = (8, 16, 32)
    widths: tuple[int, ...] = (64, 64, 32)
    layers_per_block: int = 2
    fourier_n_f: int = 32
    rank: int = 10
    upsample_mode: str = "nearest"
    fourier_mode: str = "sincos"
    fourier_gamma: float = 1.0
    fmm_activation: str = "sigmoid"
    output_activation: str = "sigmoid_to_unit"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_resolutions"] = list(self.block_resolutions)
        d["widths"] = list(self.widths)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        d = dict(d)
        d["block_resolutions"] = tuple(d["block_resolutions"])
        d["widths"] = tuple(d["widths"])
        return ArchConfig(**d)

    @property
    def resolution(self) -> int:
        return self.block_resolutions[-1]


def reference_arch_config(resolution: int = 32, rank: int = 10) -> ArchConfig:
    """Desk-scale reference decoder: blocks from 8^2 up to the target
    resolution, wider at low resolutions where points are cheap."""
    if resolution < 8 or resolution & (resolution - 1):
        raise ValueError(f"reference resolution must be a power of two >= 8, got {resolution}")
    resolutions = []
    r = 8
    while r <= resolution:
        resolutions.append(r)
        r *= 2
    width_by_res = {8: 64, 16: 64, 32: 32, 64: 16, 128: 16}
    widths = [width_by_res[r] for r in resolutions]
    if len(resolutions) == 1:
        widths = [64]
    return ArchConfig(block_resolutions=tuple(resolutions), widths=tuple(widths), rank=rank)


def build_architecture(
    cfg: ArchConfig,
    *,
    init_generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
    output_channels: int = 3,
) -> INRArchitecture:
    """Materialize layer specs (and shared matrices) from a recipe.

    The first layer of the whole decoder and its final output layer are
    generated directly; everything else is factorized at ``cfg.rank``
    (clamped per layer to min(n_in, n_out)).
    """
    if len(cfg.block_resolutions) != len(cfg.widths):
        raise ValueError("need one width per block")
    blocks: list[BlockSpec] = []
    prev_width = 0
    n_blocks = len(cfg.block_resolutions)
    for k, (res, width) in enumerate(zip(cfg.block_resolutions, cfg.widths)):
        emb = embedding_dim(cfg.fourier_n_f, cfg.fourier_mode)
        layers: list[FMMLayerSpec] = []
        for i in range(cfg.layers_per_block):
            n_in = emb + prev_width if i == 0 else layers[-1].n_out + 2
            last_layer = k == n_blocks - 1 and i == cfg.layers_per_block - 1
            n_out = output_channels if last_layer else width
            direct = (k == 0 and i == 0) or last_layer
            if direct:
                spec = FMMLayerSpec(n_in=n_in, n_out=n_out, direct=True,
                                    activation=cfg.fmm_activation)
            else:
                rank = min(cfg.rank, n_in, n_out)
                shared = init_shared_weight(n_out, n_in, init_generator, dtype=dtype)
                spec = FMMLayerSpec(n_in=n_in, n_out=n_out, rank=rank,
                                    activation=cfg.fmm_activation, shared_W=shared)
            layers.append(spec)
        blocks.append(BlockSpec(resolution=res, layers=layers, fourier_n_f=cfg.fourier_n_f))
        prev_width = layers[-1].n_out
    return INRArchitecture(
        blocks=blocks,
        upsample_mode=cfg.upsample_mode,
        fourier_mode=cfg.fourier_mode,
        fourier_gamma=cfg.fourier_gamma,
        output_activation=cfg.output_activation,
        output_channels=output_channels,
    )


def _nearest_indices(src: int, dst: int, device=None) -> torch.Tensor:
    # Pixel-center mapping floor((d+0.5)*src/dst) done in exact integer math.
    d = torch.arange(dst, device=device)
    return torch.clamp((2 * d + 1) * src // (2 * dst), max=src - 1)


def _resize_nearest(feats: torch.Tensor, out_res: int) -> torch.Tensor:
    """(B, R, R, C) -> (B, out_res, out_res, C) by index replication."""
    src = feats.shape[1]
    rows = _nearest_indices(src, out_res, feats.device)
    return feats[:, rows][:, :, rows]


def _linear_weights(src: int, dst: int, device, dtype):
    pos = (torch.arange(dst, device=device, dtype=torch.float64) + 0.5) * src / dst - 0.5
    lo = torch.floor(pos)
    frac = (pos - lo).to(dtype)
    i0 = lo.long().clamp(0, src - 1)
    i1 = (lo.long() + 1).clamp(0, src - 1)
    return i0, i1, frac


def _resize_bilinear(feats: torch.Tensor, out_res: int) -> torch.Tensor:
    """Separable pixel-center bilinear resize of (B, R, R, C)."""
    src = feats.shape[1]
    i0, i1, frac = _linear_weights(src, out_res, feats.device, feats.dtype)
    # rows
    f = torch.lerp(feats[:, i0], feats[:, i1], frac.view(1, -1, 1, 1))
    # columns
    f = torch.lerp(f[:, :, i0], f[:, :, i1], frac.view(1, 1, -1, 1))
    return f


def resize_features(feats: torch.Tensor, out_res: int, mode: str) -> torch.Tensor:
    if feats.ndim != 4 or feats.shape[1] != feats.shape[2]:
        raise ValueError(f"expected square (B, R, R, C) features, got {tuple(feats.shape)}")
    if mode == "nearest":
        return _resize_nearest(feats, out_res)
    if mode == "bilinear":
        return _resize_bilinear(feats, out_res)
    raise ValueError(f"unknown upsample mode {mode!r}")


def upsample_features(feats: torch.Tensor, mode: str = "nearest") -> torch.Tensor:
    """Double a square feature map: (..., R, R, C) -> (..., 2R, 2R, C).

    nearest copies each cell into a 2x2 block; bilinear interpolates at
    pixel centers with edge replication.
    """
    squeeze = feats.ndim == 3
    if squeeze:
        feats = feats.unsqueeze(0)
    out = resize_features(feats, 2 * feats.shape[1], mode)
    return out.squeeze(0) if squeeze else out


def scaled_block_resolutions(arch: INRArchitecture, target: int) -> list[int]:
    """Per-block working resolutions for a requested output size ``target``:
    each natural resolution scaled by target/R, floored, never below 1."""
    full = arch.resolution
    if target < 1:
        raise ValueError(f"target resolution must be >= 1, got {target}")
    return [max(1, res * target // full) for res in arch.block_resolutions()]


def _layer_weight(spec: FMMLayerSpec, lp: LayerParams) -> tuple[torch.Tensor, torch.Tensor]:
    if spec.direct:
        if not isinstance(lp, DirectParams):
            raise ValueError("direct layer received factorized parameters")
        if lp.weight.shape[-2:] != (spec.n_out, spec.n_in):
            raise ValueError(
                f"direct weight is {tuple(lp.weight.shape)}, "
                f"expected (..., {spec.n_out}, {spec.n_in})"
            )
        return lp.weight, lp.bias
    if not isinstance(lp, FMMFactors):
        raise ValueError("factorized layer received direct parameters")
    return modulate(spec, lp), lp.bias


def _run_blocks(
    arch: INRArchitecture,
    params: INRParams,
    resolutions: list[int],
    extent: Extent,
    capture: list | None = None,
) -> torch.Tensor:
    if len(params.layers) != len(arch.blocks) or len(params.fourier_u) != len(arch.blocks):
        raise ValueError("parameter set does not match the architecture's block count")
    batch = params.batch
    ref = params.fourier_u[0]
    feats: torch.Tensor | None = None
    n_blocks = len(arch.blocks)
    for k, block in enumerate(arch.blocks):
        res = resolutions[k]
        grid = make_grid(res, res, extent, dtype=ref.dtype, device=ref.device)
        emb = fourier_features(grid.points, params.fourier_u[k],
                               arch.fourier_gamma, arch.fourier_mode)  # (B, N, E)
        if feats is None:
            x = emb
        else:
            up = resize_features(feats, res, arch.upsample_mode)
            x = torch.cat([emb, up.reshape(batch, res * res, -1)], dim=-1)
        if capture is not None:
            capture.append(x.reshape(batch, res, res, -1))
        coords = grid.points.unsqueeze(0).expand(batch, -1, -1)
        if len(block.layers) != len(params.layers[k]):
            raise ValueError(f"block {k} parameter count mismatch")
        for i, (spec, lp) in enumerate(zip(block.layers, params.layers[k])):
            if i > 0:
                x = torch.cat([x, coords], dim=-1)
            weight, bias = _layer_weight(spec, lp)
            x = apply_affine(weight, bias, x)
            last = k == n_blocks - 1 and i == len(block.layers) - 1
            if last:
                if arch.output_activation == "sigmoid_to_unit":
                    x = torch.sigmoid(x)
                else:
                    x = torch.clamp(x, 0.0, 1.0)
            else:
                x = F.leaky_relu(x, LEAKY_SLOPE)
        feats = x.reshape(batch, res, res, -1)
    return feats


def evaluate(
    arch: INRArchitecture,
    params: INRParams,
    extent: Extent | tuple[float, float, float, float] = UNIT_EXTENT,
    *,
    return_features: bool = False,
):
    """Decode ``params`` into an image batch (B, R, R, 3) with values in [0, 1].

    With ``return_features`` the per-block input feature maps (embedding
    concatenated with upsampled carried features, before the block's first
    layer) are returned alongside the image.
    """
    extent = Extent(*extent).validate()
    capture: list | None = [] if return_features else None
    img = _run_blocks(arch, params, arch.block_resolutions(), extent, capture)
    if return_features:
        return img, capture
    return img


def zoom(
    arch: INRArchitecture,
    params: INRParams,
    extent: Extent | tuple[float, float, float, float],
) -> torch.Tensor:
    """Evaluate at the training resolution over an arbitrary finite extent."""
    return evaluate(arch, params, extent)


def superresolve(arch: INRArchitecture, params: INRParams, factor: int) -> torch.Tensor:
    """Evaluate the final block on a grid densified by ``factor``.

    Earlier blocks keep their training resolutions; the replication step
    into the final block simply covers more target pixels per source cell.
    factor=1 reproduces ``evaluate`` exactly.
    """
    if factor < 1:
        raise ValueError(f"superresolution factor must be >= 1, got {factor}")
    resolutions = arch.block_resolutions()
    resolutions[-1] *= factor
    return _run_blocks(arch, params, resolutions, UNIT_EXTENT)


def evaluate_lowres(arch: INRArchitecture, params: INRParams, r_low: int) -> torch.Tensor:
    """Evaluate on a sparser grid: every block's resolution scales down by
    r_low/R (floored, min 1), so the whole stack gets cheaper, not just the
    final readout."""
    if r_low < 1:
        raise ValueError(f"low resolution must be >= 1, got {r_low}")
    if r_low > arch.resolution:
        raise ValueError(
            f"low resolution {r_low} exceeds the native resolution {arch.resolution}"
        )
    return _run_blocks(arch, params, scaled_block_resolutions(arch, r_low), UNIT_EXTENT)
