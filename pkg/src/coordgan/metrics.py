"""Quantitative evaluation.

Distribution distance uses the Frechet form ||mu1-mu2||^2 +
Tr(S1 + S2 - 2 (S1 S2)^(1/2)) over Gaussian fits of deep features. At desk
scale the feature extractor is a frozen, seed-pinned random conv net, so
absolute values are not comparable to Inception-based scores; relative
comparisons on a fixed extractor are. All reductions run in float64.

Also here: keypoint-regression probing of the latent space (with a
permuted-latent baseline), exact multiply-accumulate accounting for the
decoder and its hypernetwork, and gradient-descent projection of images
into the latent space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .hypernet import Generator, GeneratorConfig, parameter_layout, layout_size, sample_latent
from .inr import (
    ArchConfig,
    INRArchitecture,
    build_architecture,
    evaluate,
    resize_features,
    scaled_block_resolutions,
    superresolve,
)
from .coords import embedding_dim

LEAKY_SLOPE = 0.2


class NumericalStabilityError(RuntimeError):
    """Covariance input failed the PSD tolerance; carries the eigenvalue."""

    def __init__(self, message: str, eigenvalue: float):
        self.eigenvalue = eigenvalue
        super().__init__(f"{message} (offending eigenvalue {eigenvalue:.3e})")


class ProjectionDiverged(RuntimeError):
    """Latent projection hit a non-finite loss; carries the loss history."""

    def __init__(self, history: list[float]):
        self.history = history
        super().__init__(f"projection diverged after {len(history)} steps")


# feature statistics -----------------------------------------------------------

@dataclass(frozen=True)
class FeatureStats:
    """Gaussian fit (mean, covariance) of a feature sample, in float64."""

    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self) -> None:
        if self.sample_count < 2:
            raise ValueError("need at least 2 samples for covariance")
        if self.mean.ndim != 1 or self.covariance.shape != (self.mean.size, self.mean.size):
            raise ValueError("mean/covariance shapes disagree")
        asym = float(np.abs(self.covariance - self.covariance.T).max())
        if asym > 1e-10:
            raise ValueError(f"covariance asymmetric by {asym:.3e}")

    @staticmethod
    def from_features(features: np.ndarray) -> "FeatureStats":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"expected (N, d) features, got {feats.shape}")
        mean = feats.mean(axis=0)
        cov = np.cov(feats, rowvar=False, ddof=1)
        cov = np.atleast_2d((cov + cov.T) / 2.0)
        return FeatureStats(mean=mean, covariance=cov, sample_count=feats.shape[0])


def _psd_eigh(cov: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    sym = (cov + cov.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    tol = 1e-6 * max(1.0, float(np.trace(sym)))
    if eigvals.min() < -tol:
        raise NumericalStabilityError(f"{what} is not PSD within tolerance", float(eigvals.min()))
    return np.clip(eigvals, 0.0, None), eigvecs


def frechet_distance(s1: FeatureStats, s2: FeatureStats) -> float:
    """Squared Frechet distance between two Gaussian fits.

    The cross trace Tr((S1 S2)^(1/2)) is computed as the eigenvalue square
    roots of sqrt(S1) S2 sqrt(S1) (symmetrized, eigenvalues clipped at 0).
    """
    if s1.mean.shape != s2.mean.shape:
        raise ValueError("feature dimensions differ")
    v1, q1 = _psd_eigh(s1.covariance, "first covariance")
    v2, _ = _psd_eigh(s2.covariance, "second covariance")
    sqrt1 = (q1 * np.sqrt(v1)) @ q1.T
    inner = sqrt1 @ ((s2.covariance + s2.covariance.T) / 2.0) @ sqrt1
    cross, _ = _psd_eigh(inner, "covariance product")
    mean_term = float(np.sum((s1.mean - s2.mean) ** 2))
    value = mean_term + float(v1.sum() + v2.sum() - 2.0 * np.sqrt(cross).sum())
    return max(value, 0.0)


# frozen random feature extractor ------------------------------------------------

class FeatureExtractor(nn.Module):
    """Frozen 4-layer strided conv net with global average pooling.

    Weights are drawn once from ``seed``; the module never trains, so the
    induced metric is fixed and reproducible.
    """

    FEATURE_DIM = 128

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        widths = [3, 32, 64, 128, self.FEATURE_DIM]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(4)
        )
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images (B, R, R, 3) in [0, 1] -> features (B, 128)."""
        x = images.permute(0, 3, 1, 2) * 2.0 - 1.0
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
        return x.mean(dim=(2, 3))


def extract_features(
    images: torch.Tensor, extractor: FeatureExtractor, batch_size: int = 64
) -> np.ndarray:
    chunks = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            chunks.append(extractor(images[i : i + batch_size]).double().cpu().numpy())
    return np.concatenate(chunks, axis=0)


def fid_proxy(
    real_images: torch.Tensor,
    fake_images: torch.Tensor,
    extractor_seed: int = 0,
    *,
    min_samples: int = 64,
) -> float:
    """Frechet distance between random-conv features of two image sets."""
    if real_images.shape[0] < min_samples or fake_images.shape[0] < min_samples:
        raise ValueError(
            f"need at least {min_samples} images per side, got "
            f"{real_images.shape[0]} real / {fake_images.shape[0]} fake"
        )
    extractor = FeatureExtractor(extractor_seed)
    s_real = FeatureStats.from_features(extract_features(real_images, extractor))
    s_fake = FeatureStats.from_features(extract_features(fake_images, extractor))
    return frechet_distance(s_real, s_fake)


# upsampling comparison ------------------------------------------------------------

UPSAMPLERS = ("nearest", "bilinear", "bicubic", "inr_superres")


def upsample_images(images: torch.Tensor, factor: int, method: str) -> torch.Tensor:
    if method in ("nearest", "bilinear"):
        return resize_features(images, images.shape[1] * factor, method)
    if method == "bicubic":
        x = images.permute(0, 3, 1, 2)
        x = F.interpolate(x, scale_factor=factor, mode="bicubic", align_corners=False)
        return x.permute(0, 2, 3, 1).clamp(0.0, 1.0)
    raise ValueError(f"unknown upsampling method {method!r}")


def upsampled_fid(
    real_hi: torch.Tensor,
    fake_lo: torch.Tensor,
    upsampler: str,
    *,
    generator: Generator | None = None,
    zs: torch.Tensor | None = None,
    extractor_seed: int = 0,
) -> float:
    """Frechet score of upsampled low-res fakes against high-res reals.

    ``inr_superres`` ignores pixel-space interpolation and re-evaluates the
    generator's decoder on the denser grid (requires ``generator`` and the
    latents ``zs`` that produced ``fake_lo``).
    """
    if upsampler not in UPSAMPLERS:
        raise ValueError(f"unknown upsampler {upsampler!r}; options: {UPSAMPLERS}")
    r_hi, r_lo = real_hi.shape[1], fake_lo.shape[1]
    if r_hi % r_lo != 0:
        raise ValueError(f"low resolution {r_lo} does not divide target {r_hi}")
    factor = r_hi // r_lo
    if upsampler == "inr_superres":
        if generator is None or zs is None:
            raise ValueError("inr_superres needs the generator and its latents")
        with torch.no_grad():
            w = generator.map_latent(zs)
            fake_hi = superresolve(generator.arch, generator.generate_params(w), factor)
    else:
        fake_hi = upsample_images(fake_lo, factor, upsampler)
    return fid_proxy(real_hi, fake_hi, extractor_seed)


# keypoint prediction loss ------------------------------------------------------------

@dataclass(frozen=True)
class KplResult:
    value: float
    random_baseline: float
    latent_space: str
    n_train: int
    n_test: int
    used_ridge: bool
    error_metric: str = "mse"


def linear_probe_mse(
    codes_train: np.ndarray,
    targets_train: np.ndarray,
    codes_test: np.ndarray,
    targets_test: np.ndarray,
    *,
    ridge: float = 1e-6,
) -> tuple[float, bool]:
    """Held-out MSE of an ordinary-least-squares map codes -> targets.

    Falls back to a ridge solve (intercept unpenalized) when the design
    matrix is rank-deficient; returns (mse, used_ridge).
    """
    x_tr = np.concatenate([np.ones((codes_train.shape[0], 1)), codes_train], axis=1)
    x_ts = np.concatenate([np.ones((codes_test.shape[0], 1)), codes_test], axis=1)
    y_tr = np.asarray(targets_train, dtype=np.float64)
    solution, _, rank, _ = np.linalg.lstsq(x_tr, y_tr, rcond=None)
    used_ridge = rank < x_tr.shape[1]
    if used_ridge:
        gram = x_tr.T @ x_tr
        reg = ridge * np.eye(gram.shape[0])
        reg[0, 0] = 0.0  # leave the intercept free
        solution = np.linalg.solve(gram + reg, x_tr.T @ y_tr)
    pred = x_ts @ solution
    return float(np.mean((pred - targets_test) ** 2)), used_ridge


def kpl(
    generator: Generator,
    keypoint_oracle,
    *,
    n_train: int = 1000,
    n_test: int = 256,
    latent_space: str = "Z",
    seed: int = 0,
    batch_size: int = 64,
) -> KplResult:
    """Keypoint-regression probe of the latent space.

    Decodes held-out latents, reads keypoints off the images with
    ``keypoint_oracle`` (images -> (N, k) array), fits codes -> keypoints by
    least squares on the train split and reports the test MSE, alongside the
    same fit re-run on randomly permuted train codes as a variability
    baseline.
    """
    if latent_space not in ("Z", "W"):
        raise ValueError(f"latent space must be Z or W, got {latent_space!r}")
    total = n_train + n_test
    z = sample_latent(total, generator.config.z_dim, seed)
    codes_list, targets_list = [], []
    with torch.no_grad():
        for i in range(0, total, batch_size):
            zb = z[i : i + batch_size]
            wb = generator.map_latent(zb)
            images = evaluate(generator.arch, generator.generate_params(wb))
            codes_list.append((zb if latent_space == "Z" else wb).double().cpu().numpy())
            targets_list.append(np.asarray(keypoint_oracle(images), dtype=np.float64))
    codes = np.concatenate(codes_list, axis=0)
    targets = np.concatenate(targets_list, axis=0)

    codes_tr, codes_ts = codes[:n_train], codes[n_train:]
    y_tr, y_ts = targets[:n_train], targets[n_train:]
    value, ridge_a = linear_probe_mse(codes_tr, y_tr, codes_ts, y_ts)
    perm = np.random.default_rng(seed).permutation(n_train)
    baseline, ridge_b = linear_probe_mse(codes_tr[perm], y_tr, codes_ts, y_ts)
    return KplResult(
        value=value,
        random_baseline=baseline,
        latent_space=latent_space,
        n_train=n_train,
        n_test=n_test,
        used_ridge=ridge_a or ridge_b,
    )


# MAC accounting ----------------------------------------------------------------------

@dataclass(frozen=True)
class MacReport:
    """Multiply-accumulate counts for generating one image.

    Counts cover the per-point affine products and coordinate-embedding
    matvecs at each block's working resolution, plus the hypernetwork's
    mapping and head (paid once, independent of the grid). Interpolation
    (index replication) contributes no multiplies.
    """

    per_layer: tuple[tuple[str, int], ...]
    per_block: tuple[tuple[str, int], ...]
    hypernet: int
    resolution: int

    @property
    def total(self) -> int:
        return sum(v for _, v in self.per_block) + self.hypernet

    def rows(self) -> list[tuple[str, int]]:
        rows = list(self.per_layer)
        rows.append(("hypernet", self.hypernet))
        rows.append(("total", self.total))
        return rows


def count_macs(
    arch: INRArchitecture | ArchConfig,
    gen_config: GeneratorConfig,
    resolution: int | None = None,
) -> MacReport:
    """Analytic MAC count at a requested output resolution.

    Per affine layer at working resolution rho: rho^2 * n_in * n_out; per
    block embedding: rho^2 * 2 * n_f; hypernetwork: z->hidden, residual
    layers, and hidden -> flattened-parameter head, each counted once.
    """
    if isinstance(arch, ArchConfig):
        arch = build_architecture(arch)
    if resolution is None:
        resolution = arch.resolution
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    resolutions = scaled_block_resolutions(arch, resolution)
    per_layer: list[tuple[str, int]] = []
    per_block: list[tuple[str, int]] = []
    for k, (block, rho) in enumerate(zip(arch.blocks, resolutions)):
        block_total = rho * rho * 2 * block.fourier_n_f
        per_layer.append((f"block{k}.fourier", block_total))
        for i, layer in enumerate(block.layers):
            macs = rho * rho * layer.n_in * layer.n_out
            per_layer.append((f"block{k}.layer{i}", macs))
            block_total += macs
        per_block.append((f"block{k}", block_total))
    hyper = gen_config.z_dim * gen_config.hidden_dim
    hyper += (gen_config.num_layers - 1) * gen_config.hidden_dim**2
    hyper += gen_config.hidden_dim * layout_size(parameter_layout(arch))
    return MacReport(
        per_layer=tuple(per_layer),
        per_block=tuple(per_block),
        hypernet=hyper,
        resolution=resolution,
    )


# latent projection ----------------------------------------------------------------------

def project_latent(
    image: torch.Tensor,
    generator: Generator,
    steps: int = 200,
    lr: float = 0.05,
    *,
    init_w: torch.Tensor | None = None,
    feature_weight: float = 0.0,
    extractor_seed: int = 0,
    line_search: bool = False,
) -> tuple[torch.Tensor, list[float]]:
    """Gradient descent on w minimizing pixel MSE against ``image``.

    Starts from the running mean of w unless ``init_w`` is given. With
    ``line_search`` each step backtracks (halving the rate) until the loss
    does not increase, making the returned history nonincreasing. Returns
    the best w found and the per-step loss history.
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    if image.shape[1] != generator.arch.resolution:
        raise ValueError(
            f"image resolution {image.shape[1]} != generator resolution "
            f"{generator.arch.resolution}"
        )
    target = image.detach()
    extractor = FeatureExtractor(extractor_seed) if feature_weight > 0 else None
    target_feats = extractor(target) if extractor is not None else None

    w = (generator.w_mean.clone().unsqueeze(0) if init_w is None else
         init_w.detach().clone().reshape(1, -1))

    def loss_at(w_val: torch.Tensor) -> torch.Tensor:
        out = evaluate(generator.arch, generator.generate_params(w_val))
        loss = F.mse_loss(out, target)
        if extractor is not None:
            loss = loss + feature_weight * F.mse_loss(extractor(out), target_feats)
        return loss

    history: list[float] = []
    best_w, best_loss = w.clone(), float("inf")
    current = None
    for _ in range(steps + 1):
        w = w.detach().requires_grad_(True)
        loss = loss_at(w)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise ProjectionDiverged(history)
        history.append(value)
        if value < best_loss:
            best_loss, best_w = value, w.detach().clone()
        if len(history) == steps + 1:
            break
        (grad,) = torch.autograd.grad(loss, w)
        if line_search:
            rate = lr
            for _ in range(20):
                cand = (w - rate * grad).detach()
                with torch.no_grad():
                    cand_loss = float(loss_at(cand))
                if cand_loss <= value:
                    break
                rate /= 2.0
            else:
                cand = w.detach()  # no improving step found; stay put
            w = cand
            current = cand_loss
        else:
            w = (w - lr * grad).detach()
    return best_w.squeeze(0), history


# report emission ----------------------------------------------------------------------

@dataclass
class MetricReport:
    """Named scalar results plus provenance, serializable as CSV."""

    entries: list[tuple[str, float]] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def add(self, name: str, value: float) -> None:
        self.entries.append((name, float(value)))

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("metric,value,config_hash,seed\n")
            for name, value in self.entries:
                f.write(f"{name},{value!r},{self.config_hash},{self.seed}\n")

    def __str__(self) -> str:
        width = max((len(n) for n, _ in self.entries), default=0)
        lines = [f"{name:<{width}}  {value:.6g}" for name, value in self.entries]
        if self.metadata:
            lines.append(f"metadata: {self.metadata}")
        return "\n".join(lines)
