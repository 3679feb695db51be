"""Factorized multiplicative weight modulation.

A layer's per-sample weight matrix is the elementwise product of a shared,
sample-independent matrix W_s with a bounded modulation sigma(A @ B), where
A and B are low-rank factors emitted by a hypernetwork. The sigmoid keeps
every modulated entry strictly inside (-|W_s|, |W_s|), so a full-rank W_s
stays full rank; a pure low-rank parameterization W = A @ B would instead
force most singular values to zero. Small layers can skip the factorization
and have their weights generated directly (``direct=True``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class FMMLayerSpec:
    """Shape and behavior of one modulated affine layer.

    ``shared_W`` is the learnable shared matrix (n_out, n_in); it is absent
    for direct layers, whose weights come straight from the hypernetwork.
    """

    n_in: int
    n_out: int
    rank: int = 1
    activation: str = "sigmoid"  # applied to A @ B
    direct: bool = False
    shared_W: torch.Tensor | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError(f"layer dims must be positive, got {self.n_out}x{self.n_in}")
        if self.activation not in ("sigmoid", "identity"):
            raise ValueError(f"unknown fmm activation {self.activation!r}")
        if not self.direct:
            if not (1 <= self.rank <= min(self.n_in, self.n_out)):
                raise ValueError(
                    f"rank {self.rank} outside [1, {min(self.n_in, self.n_out)}] "
                    f"for a {self.n_out}x{self.n_in} layer"
                )
            if self.shared_W is not None:
                if tuple(self.shared_W.shape) != (self.n_out, self.n_in):
                    raise ValueError(
                        f"shared matrix is {tuple(self.shared_W.shape)}, "
                        f"expected ({self.n_out}, {self.n_in})"
                    )
                if not torch.isfinite(self.shared_W).all():
                    raise ValueError("shared matrix contains non-finite values")


@dataclass
class FMMFactors:
    """Hypernetwork outputs for one factorized layer.

    ``a`` is (..., n_out, rank), ``b`` is (..., rank, n_in), ``bias`` is
    (..., n_out); leading dimensions are per-sample batches.
    """

    a: torch.Tensor
    b: torch.Tensor
    bias: torch.Tensor


def init_shared_weight(
    n_out: int, n_in: int, generator: torch.Generator | None = None, dtype=torch.float32
) -> torch.Tensor:
    """Zero-mean Gaussian with std sqrt(2/n_in).

    The sigmoid modulation halves entries in expectation, so the extra
    factor of two restores unit-variance forward signal at the start.
    """
    std = (2.0 / n_in) ** 0.5
    return torch.randn(n_out, n_in, generator=generator, dtype=dtype) * std


def modulate(spec: FMMLayerSpec, factors: FMMFactors) -> torch.Tensor:
    """Modulated weight W = shared_W * act(A @ B), shape (..., n_out, n_in)."""
    if spec.direct:
        raise ValueError("direct layers have no factorized modulation")
    if spec.shared_W is None:
        raise ValueError("layer spec has no shared matrix")
    if factors.a.shape[-2:] != (spec.n_out, spec.rank):
        raise ValueError(
            f"factor A is {tuple(factors.a.shape)}, expected (..., {spec.n_out}, {spec.rank})"
        )
    if factors.b.shape[-2:] != (spec.rank, spec.n_in):
        raise ValueError(
            f"factor B is {tuple(factors.b.shape)}, expected (..., {spec.rank}, {spec.n_in})"
        )
    modulating = torch.matmul(factors.a, factors.b)
    if spec.activation == "sigmoid":
        modulating = torch.sigmoid(modulating)
    return spec.shared_W * modulating


def apply_affine(weight: torch.Tensor, bias: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    """Map each input row x to W @ x + bias; rows are independent.

    ``inputs`` is (..., N, n_in), ``weight`` (..., n_out, n_in) and ``bias``
    (..., n_out); leading batch dimensions broadcast. Equivalent to a 1x1
    convolution over the N points.
    """
    if inputs.shape[-1] != weight.shape[-1]:
        raise ValueError(
            f"inputs have {inputs.shape[-1]} columns, layer expects {weight.shape[-1]}"
        )
    if bias.shape[-1] != weight.shape[-2]:
        raise ValueError(
            f"bias has {bias.shape[-1]} entries, layer produces {weight.shape[-2]}"
        )
    return torch.matmul(inputs, weight.transpose(-1, -2)) + bias.unsqueeze(-2)


def simulate_direct_hypernet(spec: FMMLayerSpec, target_w_h: torch.Tensor) -> FMMFactors:
    """Factors reproducing ``target_w_h`` exactly, for rank = min(n_in, n_out).

    With full rank one factor can be the identity and the other carries the
    target, so A @ B equals the target bitwise; this is how a direct
    (unfactorized) hypernetwork embeds into the factorized parameterization.
    """
    full = min(spec.n_in, spec.n_out)
    if spec.rank != full:
        raise ValueError(
            f"direct simulation needs rank {full} (min dimension), spec has rank {spec.rank}"
        )
    if tuple(target_w_h.shape) != (spec.n_out, spec.n_in):
        raise ValueError(
            f"target is {tuple(target_w_h.shape)}, expected ({spec.n_out}, {spec.n_in})"
        )
    eye = torch.eye(full, dtype=target_w_h.dtype, device=target_w_h.device)
    if spec.n_out <= spec.n_in:
        a, b = eye, target_w_h
    else:
        a, b = target_w_h, eye
    if not torch.equal(torch.matmul(a, b), target_w_h):
        raise ValueError("exact reconstruction failed; target must be finite")
    bias = torch.zeros(spec.n_out, dtype=target_w_h.dtype, device=target_w_h.device)
    return FMMFactors(a=a, b=b, bias=bias)
