"""Latent-to-decoder-parameters generator.

A residual MLP maps the latent z to an intermediate code w; a single linear
head then emits every decoder parameter: low-rank factors and biases for
factorized layers, full weights for direct layers, and the per-block
frequency matrices. The head starts near zero (with structured base values
in its bias) so every sample initially decodes through roughly the same
decoder, 0.5 * W_s; training then grows per-sample modulation. The running
mean of w supports truncation: w' = mean + psi * (w - mean).
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .inr import (
    ArchConfig,
    DirectParams,
    INRArchitecture,
    INRParams,
    build_architecture,
    evaluate,
)
from .coords import Extent, UNIT_EXTENT
from .fmm import FMMFactors

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 512
    hidden_dim: int = 1024
    num_layers: int = 3  # nonlinear mapping layers before the linear head
    head_init_scale: float = 0.05
    fourier_init_scale: float = 10.0
    w_ema_decay: float = 0.995

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        return GeneratorConfig(**d)


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    kind: str  # fourier_u | weight | factor_a | factor_b | bias
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def parameter_layout(arch: INRArchitecture) -> list[LayoutEntry]:
    """Flat layout of every generated tensor, in evaluation order."""
    entries: list[LayoutEntry] = []
    offset = 0

    def add(name: str, shape: tuple[int, ...], kind: str):
        nonlocal offset
        entries.append(LayoutEntry(name, shape, kind, offset))
        offset += int(np.prod(shape))

    for k, block in enumerate(arch.blocks):
        add(f"block{k}.fourier_u", (block.fourier_n_f, 2), "fourier_u")
        for i, layer in enumerate(block.layers):
            if layer.direct:
                add(f"block{k}.layer{i}.weight", (layer.n_out, layer.n_in), "weight")
            else:
                add(f"block{k}.layer{i}.factor_a", (layer.n_out, layer.rank), "factor_a")
                add(f"block{k}.layer{i}.factor_b", (layer.rank, layer.n_in), "factor_b")
            add(f"block{k}.layer{i}.bias", (layer.n_out,), "bias")
    return entries


def layout_size(entries: list[LayoutEntry]) -> int:
    return sum(e.size for e in entries)


def sample_latent(
    count: int, z_dim: int = 512, seed: int = 0, *, dtype=torch.float32
) -> torch.Tensor:
    """Deterministic batch of standard normal latents, shape (count, z_dim)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(count, z_dim, generator=gen, dtype=dtype)


def truncate(w: torch.Tensor, psi: float, running_mean_w: torch.Tensor) -> torch.Tensor:
    """Pull w toward its running mean: w' = mean + psi * (w - mean)."""
    if w.shape[-1] != running_mean_w.shape[-1]:
        raise ValueError("w and running mean have mismatched widths")
    return running_mean_w + psi * (w - running_mean_w)


class Generator(nn.Module):
    """Hypernetwork G plus the shared decoder matrices it modulates.

    The shared matrices W_s live here as parameters (they are trained with
    their own learning rate) but are also referenced by the architecture's
    layer specs, so functional evaluation sees the live values.
    """

    def __init__(self, config: GeneratorConfig, arch_cfg: ArchConfig, *, init_seed: int = 0):
        super().__init__()
        self.config = config
        self.arch_cfg = arch_cfg
        gen = torch.Generator().manual_seed(int(init_seed))
        self.arch = build_architecture(arch_cfg, init_generator=gen)
        self.layout = parameter_layout(self.arch)
        self.param_size = layout_size(self.layout)

        self.fc_in = nn.Linear(config.z_dim, config.hidden_dim)
        self.residual = nn.ModuleList(
            nn.Linear(config.hidden_dim, config.hidden_dim)
            for _ in range(config.num_layers - 1)
        )
        self.head = nn.Linear(config.hidden_dim, self.param_size)
        self._init_weights(gen)

        # Shared decoder matrices, registered so they train and checkpoint.
        shared = []
        for block in self.arch.blocks:
            for layer in block.layers:
                if not layer.direct:
                    p = nn.Parameter(layer.shared_W)
                    layer.shared_W = p
                    shared.append(p)
        self.shared_matrices = nn.ParameterList(shared)

        self.register_buffer("w_mean", torch.zeros(config.hidden_dim))
        self.register_buffer("steps", torch.zeros((), dtype=torch.int64))

    def _init_weights(self, gen: torch.Generator) -> None:
        for fc in [self.fc_in, *self.residual]:
            fan_in = fc.weight.shape[1]
            with torch.no_grad():
                fc.weight.copy_(torch.randn(fc.weight.shape, generator=gen)
                                * math.sqrt(2.0 / fan_in))
                fc.bias.zero_()
        cfg = self.config
        with torch.no_grad():
            self.head.weight.copy_(
                torch.randn(self.head.weight.shape, generator=gen)
                * (cfg.head_init_scale / math.sqrt(cfg.hidden_dim))
            )
            bias = torch.zeros(self.param_size)
            for entry in self.layout:
                if entry.kind == "weight":
                    n_in = entry.shape[1]
                    base = torch.randn(entry.size, generator=gen) * math.sqrt(2.0 / n_in)
                elif entry.kind == "fourier_u":
                    base = torch.randn(entry.size, generator=gen) * cfg.fourier_init_scale
                else:  # factors and biases start at zero: sigma(0) = 0.5
                    base = torch.zeros(entry.size)
                bias[entry.offset : entry.offset + entry.size] = base
            self.head.bias.copy_(bias)

    # parameter groups -----------------------------------------------------
    def hyper_parameters(self):
        """Mapping + head parameters (the hypernetwork proper)."""
        for m in [self.fc_in, *self.residual, self.head]:
            yield from m.parameters()

    def shared_parameters(self):
        """Shared decoder matrices, trained at their own learning rate."""
        yield from self.shared_matrices

    def parameter_breakdown(self) -> dict[str, int | float]:
        head = sum(p.numel() for p in self.head.parameters())
        mapping = sum(p.numel() for m in [self.fc_in, *self.residual] for p in m.parameters())
        shared = sum(p.numel() for p in self.shared_matrices)
        total = head + mapping + shared
        return {
            "head": head,
            "mapping": mapping,
            "shared_decoder": shared,
            "total": total,
            "head_fraction": head / total,
        }

    # forward pieces -------------------------------------------------------
    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim == 1:
            z = z.unsqueeze(0)
        x = torch.nn.functional.leaky_relu(self.fc_in(z), LEAKY_SLOPE)
        for fc in self.residual:
            x = (x + torch.nn.functional.leaky_relu(fc(x), LEAKY_SLOPE)) / math.sqrt(2.0)
        return x

    def generate_params(self, w: torch.Tensor) -> INRParams:
        if w.ndim == 1:
            w = w.unsqueeze(0)
        if w.shape[-1] != self.config.hidden_dim:
            raise ValueError(
                f"w has width {w.shape[-1]}, generator expects {self.config.hidden_dim}"
            )
        theta = self.head(w)  # (B, param_size)
        batch = theta.shape[0]
        views: dict[str, torch.Tensor] = {}
        for entry in self.layout:
            views[entry.name] = theta[:, entry.offset : entry.offset + entry.size].reshape(
                batch, *entry.shape
            )
        fourier_u: list[torch.Tensor] = []
        layers: list[list] = []
        for k, block in enumerate(self.arch.blocks):
            fourier_u.append(views[f"block{k}.fourier_u"])
            block_params: list = []
            for i, layer in enumerate(block.layers):
                bias = views[f"block{k}.layer{i}.bias"]
                if layer.direct:
                    block_params.append(
                        DirectParams(views[f"block{k}.layer{i}.weight"], bias)
                    )
                else:
                    block_params.append(
                        FMMFactors(
                            views[f"block{k}.layer{i}.factor_a"],
                            views[f"block{k}.layer{i}.factor_b"],
                            bias,
                        )
                    )
            layers.append(block_params)
        return INRParams(fourier_u=fourier_u, layers=layers)

    def truncate(self, w: torch.Tensor, psi: float) -> torch.Tensor:
        return truncate(w, psi, self.w_mean)

    def update_w_mean(self, w: torch.Tensor) -> None:
        """EMA update of the truncation anchor; training-loop only."""
        with torch.no_grad():
            decay = self.config.w_ema_decay
            self.w_mean.mul_(decay).add_(w.detach().mean(dim=0), alpha=1.0 - decay)

    def generate_images(
        self,
        z: torch.Tensor,
        psi: float | None = None,
        extent: Extent | tuple[float, float, float, float] = UNIT_EXTENT,
    ) -> torch.Tensor:
        w = self.map_latent(z)
        if psi is not None:
            w = self.truncate(w, psi)
        return evaluate(self.arch, self.generate_params(w), extent)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.generate_images(z)


# checkpoint archive --------------------------------------------------------
#
# A checkpoint is a zip holding "manifest.json" plus one raw little-endian
# binary per named array under arrays/. Model tensors are float32; auxiliary
# arrays (optimizer step counters, RNG states) keep their natural dtype,
# recorded in the manifest. Round-trips are bitwise lossless.

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
}


def save_archive(path, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    manifest = {"format_version": 1, "metadata": metadata, "arrays": {}}
    for name, arr in arrays.items():
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported array dtype {dtype} for {name!r}")
        manifest["arrays"][name] = {"shape": list(arr.shape), "dtype": dtype}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
        for name, arr in arrays.items():
            zf.writestr(f"arrays/{name}", np.ascontiguousarray(arr).astype(
                _DTYPES[str(arr.dtype)], copy=False).tobytes())


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        arrays = {}
        for name, info in manifest["arrays"].items():
            raw = zf.read(f"arrays/{name}")
            arr = np.frombuffer(raw, dtype=np.dtype(_DTYPES[info["dtype"]]))
            arrays[name] = arr.reshape(info["shape"]).copy()
    return arrays, manifest["metadata"]


def state_dict_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    return out


def load_state_dict_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint is missing array {key!r}")
        state[name] = torch.as_tensor(arrays[key]).to(tensor.dtype).reshape(tensor.shape)
    module.load_state_dict(state)


def save_generator_checkpoint(
    path,
    generator: Generator,
    *,
    step: int,
    seed: int,
    config_hash: str = "",
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_metadata: dict | None = None,
) -> None:
    arrays = state_dict_arrays(generator, "generator")
    if extra_arrays:
        arrays.update(extra_arrays)
    metadata = {
        "arch": generator.arch_cfg.to_dict(),
        "generator": generator.config.to_dict(),
        "step": int(step),
        "seed": int(seed),
        "config_hash": config_hash,
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    save_archive(path, arrays, metadata)


def load_generator_checkpoint(path) -> tuple[Generator, dict, dict[str, np.ndarray]]:
    """Rebuild a generator from an archive; also returns metadata and the raw
    arrays (training-state extras, if any)."""
    arrays, metadata = load_archive(path)
    gen = Generator(
        GeneratorConfig.from_dict(metadata["generator"]),
        ArchConfig.from_dict(metadata["arch"]),
    )
    load_state_dict_arrays(gen, arrays, "generator")
    return gen, metadata, arrays
