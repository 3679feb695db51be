"""Adversarial training loop.

One step runs a discriminator update (logistic loss plus a zero-centered
gradient penalty on real data, every iteration) followed by a generator
update (non-saturating loss). Three Adam groups carry their own learning
rates: the hypernetwork, the shared decoder matrices, and the
discriminator. Checkpoints capture optimizer moments and RNG states, so a
resumed run continues bit-identically.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import ImageDataset, save_image_grid
from .hypernet import (
    Generator,
    GeneratorConfig,
    load_archive,
    load_state_dict_arrays,
    save_archive,
    state_dict_arrays,
)
from .inr import ArchConfig, DirectParams, INRParams, build_architecture, evaluate
from .fmm import FMMFactors

LEAKY_SLOPE = 0.2


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the diagnostic record."""

    def __init__(self, record: dict):
        self.record = record
        super().__init__(f"non-finite loss at step {record.get('step')}: {record}")


@dataclass(frozen=True)
class TrainConfig:
    lr_g: float = 1e-5
    lr_shared: float = 5e-4
    lr_d: float = 3e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    r1_gamma: float = 10.0
    batch_size: int = 16
    total_steps: int = 3000
    seed: int = 0
    resolution: int = 32
    d_base_channels: int = 32
    d_max_channels: int = 256
    checkpoint_every: int = 1000
    sample_every: int = 1000
    preview_count: int = 16

    def __post_init__(self) -> None:
        # Zero learning rates are allowed so groups can be frozen in tests.
        if min(self.lr_g, self.lr_shared, self.lr_d) < 0 or self.r1_gamma < 0:
            raise ValueError("learning rates and r1_gamma must be nonnegative")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


# losses ---------------------------------------------------------------------

def d_logistic_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """mean softplus(-real) + mean softplus(fake)."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def g_nonsaturating_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """mean softplus(-fake); decreasing in every logit."""
    return F.softplus(-fake_logits).mean()


def r1_penalty(discriminator: nn.Module, real: torch.Tensor, gamma: float) -> torch.Tensor:
    """(gamma/2) * E_batch ||d D(x) / d x||^2 on real data."""
    if gamma == 0.0:
        return real.new_zeros(())
    real = real.detach().requires_grad_(True)
    logits = discriminator(real)
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True)
    return 0.5 * gamma * grad.square().sum(dim=tuple(range(1, grad.ndim))).mean()


# discriminator ---------------------------------------------------------------

class _DownResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_in, 3, padding=1)
        self.conv2 = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=2, bias=False)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        y = F.leaky_relu(self.conv2(y), LEAKY_SLOPE)
        return (y + self.skip(x)) / math.sqrt(2.0)


class Discriminator(nn.Module):
    """Small residual conv stack mapping an image to a single logit.

    Stride-2 stages halve the resolution down to 2x2; channel widths double
    from ``base_channels`` up to ``max_channels``.
    """

    def __init__(
        self,
        resolution: int,
        base_channels: int = 32,
        max_channels: int = 256,
        *,
        init_seed: int = 0,
    ):
        super().__init__()
        if resolution < 4 or resolution & (resolution - 1):
            raise ValueError(f"resolution must be a power of two >= 4, got {resolution}")
        self.resolution = resolution
        n_stages = int(math.log2(resolution)) - 1
        channels = [min(base_channels * 2**i, max_channels) for i in range(n_stages + 1)]
        self.stem = nn.Conv2d(3, channels[0], 3, padding=1)
        self.stages = nn.ModuleList(
            _DownResBlock(channels[i], channels[i + 1]) for i in range(n_stages)
        )
        flat = channels[-1] * 4  # 2x2 spatial tail
        self.fc = nn.Linear(flat, channels[-1])
        self.out = nn.Linear(channels[-1], 1)
        self._init_weights(torch.Generator().manual_seed(int(init_seed)))

    def _init_weights(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen)
                                   * math.sqrt(2.0 / fan_in))
                    if m.bias is not None:
                        m.bias.zero_()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, R, R, 3) in [0, 1] -> logits (B,)."""
        if images.shape[1] != self.resolution or images.shape[-1] != 3:
            raise ValueError(
                f"expected (B, {self.resolution}, {self.resolution}, 3) images, "
                f"got {tuple(images.shape)}"
            )
        x = images.permute(0, 3, 1, 2)
        x = F.leaky_relu(self.stem(x), LEAKY_SLOPE)
        for stage in self.stages:
            x = stage(x)
        x = F.leaky_relu(self.fc(x.flatten(1)), LEAKY_SLOPE)
        return self.out(x).squeeze(-1)


# trainer ---------------------------------------------------------------------

def _split_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(int(seed))
    return [int(s) for s in ss.generate_state(n, dtype=np.uint64).tolist()]


class Trainer:
    """Mutable training state: models, optimizers, RNG streams, step count."""

    def __init__(
        self,
        train_cfg: TrainConfig,
        gen_cfg: GeneratorConfig,
        arch_cfg: ArchConfig,
        *,
        config_hash: str = "",
    ):
        if arch_cfg.resolution != train_cfg.resolution:
            raise ValueError(
                f"architecture resolution {arch_cfg.resolution} != "
                f"training resolution {train_cfg.resolution}"
            )
        self.train_cfg = train_cfg
        self.gen_cfg = gen_cfg
        self.arch_cfg = arch_cfg
        self.config_hash = config_hash
        s_gen, s_disc, s_latent, s_data, s_preview = _split_seeds(train_cfg.seed, 5)
        self.generator = Generator(gen_cfg, arch_cfg, init_seed=s_gen)
        self.discriminator = Discriminator(
            train_cfg.resolution,
            train_cfg.d_base_channels,
            train_cfg.d_max_channels,
            init_seed=s_disc,
        )
        self.opt_g = torch.optim.Adam(
            [
                {"params": list(self.generator.hyper_parameters()), "lr": train_cfg.lr_g},
                {"params": list(self.generator.shared_parameters()), "lr": train_cfg.lr_shared},
            ],
            betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
            eps=train_cfg.adam_eps,
        )
        self.opt_d = torch.optim.Adam(
            self.discriminator.parameters(),
            lr=train_cfg.lr_d,
            betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
            eps=train_cfg.adam_eps,
        )
        self.latent_gen = torch.Generator().manual_seed(s_latent)
        self.data_rng = np.random.default_rng(s_data)
        self.preview_seed = s_preview
        self.step = 0

    def sample_z(self, count: int) -> torch.Tensor:
        return torch.randn(count, self.gen_cfg.z_dim, generator=self.latent_gen)

    def train_step(self, real: torch.Tensor) -> dict:
        cfg = self.train_cfg
        g, d = self.generator, self.discriminator

        # discriminator update: logistic loss + R1, one combined backward
        z = self.sample_z(real.shape[0])
        with torch.no_grad():
            fake = g.generate_images(z)
        real_logits = d(real)
        fake_logits = d(fake)
        loss_d = d_logistic_loss(real_logits, fake_logits)
        r1 = r1_penalty(d, real, cfg.r1_gamma)
        self.opt_d.zero_grad(set_to_none=True)
        (loss_d + r1).backward()
        self.opt_d.step()

        # generator update
        z = self.sample_z(real.shape[0])
        w = g.map_latent(z)
        g.update_w_mean(w)
        fake = evaluate(g.arch, g.generate_params(w))
        loss_g = g_nonsaturating_loss(d(fake))
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()

        record = {
            "step": self.step,
            "loss_d": float(loss_d.detach()),
            "loss_g": float(loss_g.detach()),
            "r1": float(r1.detach()),
        }
        if not all(math.isfinite(v) for k, v in record.items() if k != "step"):
            raise TrainingDiverged(record)
        self.step += 1
        self.generator.steps.fill_(self.step)
        return record

    # checkpointing -----------------------------------------------------------
    def _optimizer_arrays(self, opt, prefix: str) -> tuple[dict, dict]:
        arrays: dict[str, np.ndarray] = {}
        meta: dict[str, str] = {}
        sd = opt.state_dict()
        for idx, state in sd["state"].items():
            for key, value in state.items():
                name = f"{prefix}.s{idx}.{key}"
                if isinstance(value, torch.Tensor):
                    arrays[name] = value.detach().cpu().numpy()
                    meta[name] = "tensor"
                else:
                    arrays[name] = np.asarray(value, dtype=np.int64)
                    meta[name] = "int"
        return arrays, meta

    def _load_optimizer_arrays(self, opt, prefix: str, arrays: dict, meta: dict) -> None:
        sd = opt.state_dict()
        state: dict[int, dict] = {}
        for name, kind in meta.items():
            if not name.startswith(prefix + "."):
                continue
            _, sidx, key = name.split(".", 2)
            idx = int(sidx[1:])
            value = arrays[name]
            entry = state.setdefault(idx, {})
            if kind == "tensor":
                entry[key] = torch.as_tensor(value)
            else:
                entry[key] = int(value)
        sd["state"] = state
        opt.load_state_dict(sd)

    def save(self, path) -> None:
        arrays = state_dict_arrays(self.generator, "generator")
        arrays.update(state_dict_arrays(self.discriminator, "discriminator"))
        opt_meta: dict[str, str] = {}
        for opt, prefix in [(self.opt_g, "opt_g"), (self.opt_d, "opt_d")]:
            a, m = self._optimizer_arrays(opt, prefix)
            arrays.update(a)
            opt_meta.update(m)
        arrays["rng.latent"] = self.latent_gen.get_state().numpy()
        metadata = {
            "arch": self.arch_cfg.to_dict(),
            "generator": self.gen_cfg.to_dict(),
            "train": self.train_cfg.to_dict(),
            "step": self.step,
            "seed": self.train_cfg.seed,
            "config_hash": self.config_hash,
            "optimizer_entry_kinds": opt_meta,
            "data_rng_state": json.dumps(self.data_rng.bit_generator.state),
        }
        save_archive(path, arrays, metadata)

    @classmethod
    def load(cls, path) -> "Trainer":
        arrays, metadata = load_archive(path)
        trainer = cls(
            TrainConfig.from_dict(metadata["train"]),
            GeneratorConfig.from_dict(metadata["generator"]),
            ArchConfig.from_dict(metadata["arch"]),
            config_hash=metadata.get("config_hash", ""),
        )
        load_state_dict_arrays(trainer.generator, arrays, "generator")
        load_state_dict_arrays(trainer.discriminator, arrays, "discriminator")
        kinds = metadata["optimizer_entry_kinds"]
        trainer._load_optimizer_arrays(trainer.opt_g, "opt_g", arrays, kinds)
        trainer._load_optimizer_arrays(trainer.opt_d, "opt_d", arrays, kinds)
        trainer.latent_gen.set_state(torch.from_numpy(arrays["rng.latent"]))
        trainer.data_rng.bit_generator.state = json.loads(metadata["data_rng_state"])
        trainer.step = int(metadata["step"])
        trainer.generator.steps.fill_(trainer.step)
        return trainer


def format_log_row(record: dict, seconds: float) -> str:
    return (
        f"{record['step']},{record['loss_d']!r},{record['loss_g']!r},"
        f"{record['r1']!r},{seconds!r}"
    )


def train_loop(
    train_cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    arch_cfg: ArchConfig,
    dataset: ImageDataset,
    out_dir,
    *,
    resume=None,
    config_hash: str = "",
    initial_checkpoint: bool = True,
) -> Path:
    """Run (or continue) training; returns the final checkpoint path.

    Artifacts under ``out_dir``: train_log.csv, checkpoints/step_*.ckpt and
    samples/step_*.png. With a fixed seed the log's loss columns and every
    checkpoint are reproducible bit for bit.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)

    if resume is not None:
        trainer = Trainer.load(resume)
    else:
        trainer = Trainer(train_cfg, gen_cfg, arch_cfg, config_hash=config_hash)
    cfg = trainer.train_cfg

    preview_z = torch.randn(
        cfg.preview_count,
        trainer.gen_cfg.z_dim,
        generator=torch.Generator().manual_seed(trainer.preview_seed),
    )

    def emit(step: int) -> Path:
        ckpt = out_dir / "checkpoints" / f"step_{step:06d}.ckpt"
        trainer.save(ckpt)
        with torch.no_grad():
            grid = trainer.generator.generate_images(preview_z)
        save_image_grid(out_dir / "samples" / f"step_{step:06d}.png", grid)
        return ckpt

    log_path = out_dir / "train_log.csv"
    fresh_log = resume is None or not log_path.exists()
    final_ckpt = None
    with open(log_path, "w" if fresh_log else "a") as log:
        if fresh_log:
            log.write("step,loss_d,loss_g,r1,seconds_per_step\n")
        if trainer.step == 0 and initial_checkpoint:
            final_ckpt = emit(0)
        while trainer.step < cfg.total_steps:
            t0 = time.perf_counter()
            batch = dataset.sample(cfg.batch_size, trainer.data_rng)
            record = trainer.train_step(batch)
            seconds = time.perf_counter() - t0
            log.write(format_log_row(record, seconds) + "\n")
            step = trainer.step
            if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
                final_ckpt = emit(step)
            elif step % cfg.sample_every == 0:
                with torch.no_grad():
                    grid = trainer.generator.generate_images(preview_z)
                save_image_grid(out_dir / "samples" / f"step_{step:06d}.png", grid)
    if final_ckpt is None:
        final_ckpt = emit(trainer.step)
    return final_ckpt


# rank-ablation fitting harness ------------------------------------------------

def fit_reconstruction(
    images: torch.Tensor,
    rank: int,
    *,
    arch_cfg: ArchConfig | None = None,
    steps: int = 600,
    lr: float = 5e-3,
    seed: int = 0,
) -> float:
    """Fit the decoder to reproduce ``images``; per-image capacity is ONLY
    the low-rank factor pair of each factorized layer.

    Shared matrices, direct layers, biases and frequency matrices are
    learnable but common to all images, so the achievable reconstruction
    error is controlled by the factor rank. Returns the final mean squared
    error.
    """
    if images.ndim != 4 or images.shape[1] != images.shape[2]:
        raise ValueError(f"expected (M, R, R, 3) targets, got {tuple(images.shape)}")
    m, res = images.shape[0], images.shape[1]
    if arch_cfg is None:
        arch_cfg = ArchConfig(
            block_resolutions=(res // 2, res), widths=(32, 32), fourier_n_f=16, rank=rank
        )
    else:
        arch_cfg = ArchConfig(**{**arch_cfg.to_dict(), "rank": rank,
                                 "block_resolutions": tuple(arch_cfg.block_resolutions),
                                 "widths": tuple(arch_cfg.widths)})
    if arch_cfg.resolution != res:
        raise ValueError("architecture resolution must match the target images")
    gen = torch.Generator().manual_seed(int(seed))
    arch = build_architecture(arch_cfg, init_generator=gen)

    shared_params: list[nn.Parameter] = []
    for block in arch.blocks:
        for layer in block.layers:
            if not layer.direct:
                p = nn.Parameter(layer.shared_W)
                layer.shared_W = p
                shared_params.append(p)

    def randn(*shape, scale=1.0):
        return nn.Parameter(torch.randn(*shape, generator=gen) * scale)

    fourier_u = [randn(1, b.fourier_n_f, 2, scale=10.0) for b in arch.blocks]
    per_layer: list[list[dict]] = []
    for block in arch.blocks:
        entries = []
        for layer in block.layers:
            if layer.direct:
                entries.append({
                    "weight": randn(1, layer.n_out, layer.n_in,
                                    scale=math.sqrt(2.0 / layer.n_in)),
                    "bias": nn.Parameter(torch.zeros(1, layer.n_out)),
                })
            else:
                entries.append({
                    "a": randn(m, layer.n_out, layer.rank, scale=0.1),
                    "b": randn(m, layer.rank, layer.n_in, scale=0.1),
                    "bias": nn.Parameter(torch.zeros(1, layer.n_out)),
                })
        per_layer.append(entries)

    def assemble() -> INRParams:
        layers = []
        for block_entries in per_layer:
            row = []
            for e in block_entries:
                if "weight" in e:
                    row.append(DirectParams(e["weight"].expand(m, -1, -1),
                                            e["bias"].expand(m, -1)))
                else:
                    row.append(FMMFactors(e["a"], e["b"], e["bias"].expand(m, -1)))
            layers.append(row)
        return INRParams(fourier_u=[u.expand(m, -1, -1) for u in fourier_u], layers=layers)

    params: list[nn.Parameter] = list(shared_params) + fourier_u
    for block_entries in per_layer:
        for e in block_entries:
            params.extend(e.values())
    opt = torch.optim.Adam(params, lr=lr)
    loss = torch.zeros(())
    for _ in range(steps):
        out = evaluate(arch, assemble())
        loss = F.mse_loss(out, images)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return float(loss.detach())
