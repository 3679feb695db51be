import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from coordgan.fmm import (
    FMMFactors,
    FMMLayerSpec,
    apply_affine,
    init_shared_weight,
    modulate,
    simulate_direct_hypernet,
)
from oracles import scalar_affine, scalar_modulate


def make_spec(n_out=3, n_in=2, rank=2, activation="sigmoid", seed=0):
    gen = torch.Generator().manual_seed(seed)
    return FMMLayerSpec(
        n_in=n_in, n_out=n_out, rank=rank, activation=activation,
        shared_W=init_shared_weight(n_out, n_in, gen),
    )


def random_factors(spec, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return FMMFactors(
        a=torch.randn(spec.n_out, spec.rank, generator=gen, dtype=dtype),
        b=torch.randn(spec.rank, spec.n_in, generator=gen, dtype=dtype),
        bias=torch.randn(spec.n_out, generator=gen, dtype=dtype),
    )


class TestModulate:
    def test_zero_factors_give_half_shared(self):
        spec = make_spec(4, 5, 3)
        factors = FMMFactors(
            a=torch.zeros(4, 3), b=torch.zeros(3, 5), bias=torch.zeros(4)
        )
        w = modulate(spec, factors)
        assert torch.allclose(w, 0.5 * spec.shared_W)

    def test_rank_one_is_outer_product(self):
        # W_h[i, j] = A_i * B_j for rank 1
        spec = make_spec(4, 3, 1, activation="identity", seed=2)
        factors = random_factors(spec, seed=3)
        w = modulate(spec, factors)
        for i in range(4):
            for j in range(3):
                expected = spec.shared_W[i, j] * factors.a[i, 0] * factors.b[0, j]
                assert torch.isclose(w[i, j], expected)

    def test_matches_triple_loop_oracle(self):
        spec = make_spec(3, 2, 2, seed=5)
        factors = random_factors(spec, seed=6)
        w = modulate(spec, factors)
        expected = scalar_modulate(
            spec.shared_W.tolist(), factors.a.tolist(), factors.b.tolist()
        )
        np.testing.assert_allclose(w.numpy(), np.array(expected), atol=1e-6)

    def test_batched_matches_per_sample(self):
        spec = make_spec(4, 6, 2, seed=7)
        gen = torch.Generator().manual_seed(8)
        a = torch.randn(5, 4, 2, generator=gen)
        b = torch.randn(5, 2, 6, generator=gen)
        batched = modulate(spec, FMMFactors(a, b, torch.zeros(5, 4)))
        for s in range(5):
            single = modulate(spec, FMMFactors(a[s], b[s], torch.zeros(4)))
            assert torch.allclose(batched[s], single, atol=1e-6)

    def test_shape_errors(self):
        spec = make_spec(3, 2, 2)
        with pytest.raises(ValueError):
            modulate(spec, FMMFactors(torch.zeros(3, 1), torch.zeros(2, 2), torch.zeros(3)))
        with pytest.raises(ValueError):
            modulate(spec, FMMFactors(torch.zeros(3, 2), torch.zeros(2, 5), torch.zeros(3)))

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_sigmoid_mode_bounds_magnitudes(self, seed):
        spec = make_spec(5, 4, 2, seed=seed % 1000)
        factors = random_factors(spec, seed=seed)
        w = modulate(spec, factors)
        assert (w.abs() <= spec.shared_W.abs()).all()
        nonzero = spec.shared_W != 0
        assert (w.abs()[nonzero] < spec.shared_W.abs()[nonzero]).all()

    def test_rank_bound_of_modulating_matrix(self):
        spec = make_spec(8, 7, 3, seed=9)
        factors = random_factors(spec, seed=10)
        sv = torch.linalg.svdvals(factors.a.double() @ factors.b.double())
        assert (sv[3:] < 1e-8 * sv[0]).all()

    def test_full_rank_preserved_under_sigmoid(self):
        # the pure low-rank alternative would zero most singular values
        spec = make_spec(6, 6, 2, seed=11)
        factors = random_factors(spec, seed=12)
        sv = torch.linalg.svdvals(modulate(spec, factors).double())
        assert sv.min() > 1e-10


class TestApplyAffine:
    def test_identity_map(self):
        w = torch.eye(4)
        x = torch.randn(9, 4, generator=torch.Generator().manual_seed(0))
        assert torch.equal(apply_affine(w, torch.zeros(4), x), x)

    def test_single_row_is_matvec(self):
        gen = torch.Generator().manual_seed(1)
        w = torch.randn(3, 5, generator=gen)
        b = torch.randn(3, generator=gen)
        x = torch.randn(1, 5, generator=gen)
        out = apply_affine(w, b, x)
        assert torch.allclose(out[0], w @ x[0] + b, atol=1e-6)

    def test_matches_per_row_loop_oracle(self):
        gen = torch.Generator().manual_seed(2)
        w = torch.randn(4, 6, generator=gen)
        b = torch.randn(4, generator=gen)
        x = torch.randn(7, 6, generator=gen)
        out = apply_affine(w, b, x)
        expected = scalar_affine(w.tolist(), b.tolist(), x.tolist())
        np.testing.assert_allclose(out.numpy(), np.array(expected), atol=1e-6)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            apply_affine(torch.zeros(3, 4), torch.zeros(3), torch.zeros(2, 5))
        with pytest.raises(ValueError):
            apply_affine(torch.zeros(3, 4), torch.zeros(2), torch.zeros(2, 4))


class TestSimulateDirectHypernet:
    def test_zero_target(self):
        spec = FMMLayerSpec(n_in=4, n_out=3, rank=3)
        factors = simulate_direct_hypernet(spec, torch.zeros(3, 4))
        assert torch.equal(factors.a @ factors.b, torch.zeros(3, 4))

    def test_square_uses_identity_factor(self):
        spec = FMMLayerSpec(n_in=3, n_out=3, rank=3)
        target = torch.randn(3, 3, generator=torch.Generator().manual_seed(4))
        factors = simulate_direct_hypernet(spec, target)
        assert torch.equal(factors.a, torch.eye(3))
        assert torch.equal(factors.b, target)

    def test_tall_target_exact(self):
        spec = FMMLayerSpec(n_in=3, n_out=4, rank=3)
        target = torch.randn(4, 3, generator=torch.Generator().manual_seed(5))
        factors = simulate_direct_hypernet(spec, target)
        assert torch.equal(factors.a @ factors.b, target)

    def test_unsupported_rank(self):
        spec = FMMLayerSpec(n_in=4, n_out=3, rank=2)
        with pytest.raises(ValueError, match="rank"):
            simulate_direct_hypernet(spec, torch.zeros(3, 4))


class TestSpecValidation:
    def test_rank_bounds(self):
        with pytest.raises(ValueError):
            FMMLayerSpec(n_in=3, n_out=2, rank=4)
        with pytest.raises(ValueError):
            FMMLayerSpec(n_in=3, n_out=2, rank=0)

    def test_shared_shape_checked(self):
        with pytest.raises(ValueError):
            FMMLayerSpec(n_in=3, n_out=2, rank=1, shared_W=torch.zeros(3, 2))

    def test_nonfinite_shared_rejected(self):
        bad = torch.full((2, 3), float("nan"))
        with pytest.raises(ValueError):
            FMMLayerSpec(n_in=3, n_out=2, rank=1, shared_W=bad)


class TestGradients:
    def test_gradients_match_central_differences(self):
        # micro layer: 3x2, rank 2 -> 19 parameters, double precision
        torch.manual_seed(0)
        spec = make_spec(3, 2, 2, seed=13)
        spec.shared_W = spec.shared_W.double().requires_grad_(True)
        factors = random_factors(spec, seed=14, dtype=torch.float64)
        for t in (factors.a, factors.b, factors.bias):
            t.requires_grad_(True)
        x = torch.randn(4, 2, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(15))
        probe = torch.randn(4, 3, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(16))

        def loss_fn():
            out = apply_affine(modulate(spec, factors), factors.bias, x)
            return (out * probe).sum() + (out ** 2).sum()

        loss = loss_fn()
        leaves = [factors.a, factors.b, factors.bias, spec.shared_W]
        grads = torch.autograd.grad(loss, leaves)
        eps = 1e-3
        for leaf, grad in zip(leaves, grads):
            flat = leaf.detach().reshape(-1)
            for idx in range(flat.numel()):
                orig = float(flat[idx])
                flat[idx] = orig + eps
                up = float(loss_fn())
                flat[idx] = orig - eps
                down = float(loss_fn())
                flat[idx] = orig
                fd = (up - down) / (2 * eps)
                g = float(grad.reshape(-1)[idx])
                assert abs(g - fd) <= 1e-3 * max(1.0, abs(fd)), (
                    f"grad mismatch at {idx}: autograd {g} vs fd {fd}"
                )
