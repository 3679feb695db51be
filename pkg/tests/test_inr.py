import numpy as np
import pytest
import torch

from coordgan import Generator, GeneratorConfig
from coordgan.coords import UNIT_EXTENT, fourier_features, make_grid
from coordgan.fmm import apply_affine, modulate
from coordgan.inr import (
    ArchConfig,
    DirectParams,
    INRParams,
    build_architecture,
    evaluate,
    evaluate_lowres,
    lerp_params,
    reference_arch_config,
    resize_features,
    scaled_block_resolutions,
    superresolve,
    upsample_features,
    zoom,
)
from conftest import random_params
from oracles import describe_arch, describe_params, scalar_network_eval, scalar_resize_bilinear


def single_block_cfg(res=8, width=6, n_f=3):
    return ArchConfig(block_resolutions=(res,), widths=(width,), fourier_n_f=n_f, rank=2)


def make_generator(cfg, seed=7, z_dim=8, hidden=12):
    return Generator(GeneratorConfig(z_dim=z_dim, hidden_dim=hidden, num_layers=2),
                     cfg, init_seed=seed)


class TestArchitectureValidation:
    def test_reference_resolutions_double(self):
        for res in (16, 32, 64):
            arch = build_architecture(reference_arch_config(res))
            rs = arch.block_resolutions()
            assert rs[0] == 8 and rs[-1] == res
            assert all(b == 2 * a for a, b in zip(rs, rs[1:]))

    def test_non_doubling_rejected(self):
        with pytest.raises(ValueError, match="double"):
            build_architecture(ArchConfig(block_resolutions=(4, 12), widths=(4, 4)))

    def test_first_and_last_layers_direct(self):
        arch = build_architecture(reference_arch_config(32))
        assert arch.blocks[0].layers[0].direct
        assert arch.blocks[-1].layers[-1].direct
        inner = [l for b in arch.blocks for l in b.layers]
        assert sum(l.direct for l in inner) == 2

    def test_layer_width_chain(self):
        arch = build_architecture(ArchConfig(
            block_resolutions=(4, 8), widths=(6, 5), fourier_n_f=3, rank=2))
        # block 0 first layer: embedding only; block 1: embedding + carried 6
        assert arch.blocks[0].layers[0].n_in == 6
        assert arch.blocks[0].layers[1].n_in == 6 + 2
        assert arch.blocks[1].layers[0].n_in == 6 + 6
        assert arch.blocks[1].layers[1].n_in == 5 + 2
        assert arch.blocks[1].layers[1].n_out == 3


class TestEvaluate:
    def test_zero_final_layer_gives_half_gray(self, tiny_generator):
        params = random_params(tiny_generator, batch=1)
        final = params.layers[-1][-1]
        assert isinstance(final, DirectParams)
        params.layers[-1][-1] = DirectParams(
            torch.zeros_like(final.weight), torch.zeros_like(final.bias)
        )
        img = evaluate(tiny_generator.arch, params)
        assert torch.allclose(img, torch.full_like(img, 0.5))

    def test_block_features_replicate_in_2x2_cells(self, tiny_generator):
        params = random_params(tiny_generator, batch=1, seed=3)
        _, feats = evaluate(tiny_generator.arch, params, return_features=True)
        block2_in = feats[1]  # (1, 8, 8, emb + carried)
        emb_dim = 2 * tiny_generator.arch.blocks[1].fourier_n_f
        carried = block2_in[0, :, :, emb_dim:]
        for i in range(8):
            for j in range(8):
                assert torch.equal(carried[i, j], carried[2 * (i // 2), 2 * (j // 2)])

    def test_matches_scalar_whole_network_oracle(self, tiny_generator):
        arch = tiny_generator.arch
        desc = describe_arch(arch)
        for draw in range(3):
            params = random_params(tiny_generator, batch=1, seed=100 + draw)
            img = evaluate(arch, params)
            expected = scalar_network_eval(
                desc, describe_params(params), arch.block_resolutions()
            )
            got = img[0].detach().reshape(-1, 3).numpy()
            np.testing.assert_allclose(got, np.array(expected), atol=1e-5)

    def test_output_in_unit_range(self, tiny_generator):
        params = random_params(tiny_generator, batch=2, seed=9)
        img = evaluate(tiny_generator.arch, params)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_param_arch_mismatch_rejected(self, tiny_generator):
        params = random_params(tiny_generator, batch=1)
        params.layers[0] = params.layers[0][:1]
        with pytest.raises(ValueError):
            evaluate(tiny_generator.arch, params)


class TestUpsampleFeatures:
    def test_1x1_nearest(self):
        f = torch.randn(1, 1, 1, 4, generator=torch.Generator().manual_seed(0))
        up = upsample_features(f, "nearest")
        assert up.shape == (1, 2, 2, 4)
        for i in range(2):
            for j in range(2):
                assert torch.equal(up[0, i, j], f[0, 0, 0])

    def test_2x2_nearest_replication_pattern(self):
        f = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        up = upsample_features(f, "nearest")[0, :, :, 0]
        expected = torch.tensor(
            [[1.0, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        )
        assert torch.equal(up, expected)

    def test_bilinear_matches_separable_oracle(self):
        gen = torch.Generator().manual_seed(2)
        f = torch.randn(1, 4, 4, 3, generator=gen, dtype=torch.float64)
        up = upsample_features(f, "bilinear")
        rows = [list(map(float, f[0].reshape(-1, 3)[i])) for i in range(16)]
        expected = scalar_resize_bilinear(rows, 4, 8)
        np.testing.assert_allclose(
            up[0].reshape(-1, 3).numpy(), np.array(expected), atol=1e-6
        )

    def test_unbatched_input(self):
        f = torch.arange(4.0).reshape(2, 2, 1)
        assert upsample_features(f, "nearest").shape == (4, 4, 1)


class TestSuperresolve:
    def test_factor_one_is_bitwise_evaluate(self, tiny_generator):
        params = random_params(tiny_generator, batch=1, seed=4)
        assert torch.equal(
            superresolve(tiny_generator.arch, params, 1),
            evaluate(tiny_generator.arch, params),
        )

    def test_densified_final_grid(self, tiny_generator):
        params = random_params(tiny_generator, batch=1, seed=5)
        dense = superresolve(tiny_generator.arch, params, 2)
        assert dense.shape == (1, 16, 16, 3)
        assert dense.min() >= 0 and dense.max() <= 1

    def test_invalid_factor(self, tiny_generator):
        with pytest.raises(ValueError):
            superresolve(tiny_generator.arch, random_params(tiny_generator), 0)


class TestZoom:
    def test_unit_extent_is_bitwise_evaluate(self, tiny_generator):
        params = random_params(tiny_generator, batch=1, seed=6)
        assert torch.equal(
            zoom(tiny_generator.arch, params, UNIT_EXTENT),
            evaluate(tiny_generator.arch, params),
        )

    @pytest.mark.parametrize("extent", [(-0.3, 1.3, -0.3, 1.3), (-1.5, 1.5, -1.5, 1.5)])
    def test_out_of_distribution_extents_stay_finite(self, tiny_generator, extent):
        params = random_params(tiny_generator, batch=2, seed=7)
        img = zoom(tiny_generator.arch, params, extent)
        assert torch.isfinite(img).all()
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_quadrant_zoom_matches_dense_subwindow(self):
        # single block: pure per-pixel network, so coincident grid points
        # must decode identically whichever call produced them
        gen = make_generator(single_block_cfg(res=8), seed=21)
        params = random_params(gen, batch=1, seed=8)
        dense = superresolve(gen.arch, params, 2)  # 16x16 over unit square
        quad = zoom(gen.arch, params, (0.0, 0.5, 0.0, 0.5))  # 8x8, same centers
        assert torch.allclose(quad[0], dense[0, :8, :8], atol=1e-6)


class TestPerPixelIndependence:
    def test_subset_equals_manual_pointwise_composition(self):
        gen = make_generator(single_block_cfg(res=8, width=5), seed=22)
        arch = gen.arch
        params = random_params(gen, batch=1, seed=9)
        full = evaluate(arch, params)[0].reshape(-1, 3)
        grid = make_grid(8, 8, UNIT_EXTENT)
        subset = [3, 17, 40, 63]
        pts = grid.points[subset]
        # independent per-pixel affine composition on just those points
        x = fourier_features(pts, params.fourier_u[0][0], arch.fourier_gamma)
        for i, (spec, lp) in enumerate(zip(arch.blocks[0].layers, params.layers[0])):
            if i > 0:
                x = torch.cat([x, pts], dim=-1)
            if spec.direct:
                w, b = lp.weight[0], lp.bias[0]
            else:
                w, b = modulate(spec, lp)[0], lp.bias[0]
            x = apply_affine(w, b, x)
            if i == len(arch.blocks[0].layers) - 1:
                x = torch.sigmoid(x)
            else:
                x = torch.nn.functional.leaky_relu(x, 0.2)
        assert torch.allclose(x, full[subset], atol=1e-6)


class TestEvaluateLowres:
    def test_full_resolution_is_bitwise_evaluate(self, tiny_generator):
        params = random_params(tiny_generator, batch=1, seed=10)
        assert torch.equal(
            evaluate_lowres(tiny_generator.arch, params, 8),
            evaluate(tiny_generator.arch, params),
        )

    def test_resolution_scaling_rule(self):
        arch = build_architecture(reference_arch_config(32))
        assert scaled_block_resolutions(arch, 32) == [8, 16, 32]
        assert scaled_block_resolutions(arch, 16) == [4, 8, 16]
        assert scaled_block_resolutions(arch, 8) == [2, 4, 8]
        assert scaled_block_resolutions(arch, 3) == [1, 1, 3]
        assert scaled_block_resolutions(arch, 1) == [1, 1, 1]

    def test_shape_and_range(self, tiny_generator):
        params = random_params(tiny_generator, batch=1, seed=11)
        img = evaluate_lowres(tiny_generator.arch, params, 4)
        assert img.shape == (1, 4, 4, 3)
        assert img.min() >= 0 and img.max() <= 1

    def test_invalid_resolutions(self, tiny_generator):
        params = random_params(tiny_generator)
        with pytest.raises(ValueError):
            evaluate_lowres(tiny_generator.arch, params, 0)
        with pytest.raises(ValueError):
            evaluate_lowres(tiny_generator.arch, params, 16)

    def test_matches_scalar_oracle_at_low_resolution(self, tiny_generator):
        arch = tiny_generator.arch
        params = random_params(tiny_generator, batch=1, seed=12)
        img = evaluate_lowres(arch, params, 4)
        expected = scalar_network_eval(
            describe_arch(arch), describe_params(params),
            scaled_block_resolutions(arch, 4),
        )
        np.testing.assert_allclose(
            img[0].detach().reshape(-1, 3).numpy(), np.array(expected), atol=1e-5
        )


class TestLerpParams:
    def test_endpoints(self, tiny_generator):
        p1 = random_params(tiny_generator, batch=1, seed=13)
        p2 = random_params(tiny_generator, batch=1, seed=14)
        for got, want in zip(lerp_params(p1, p2, 0.0).tensors(), p1.tensors()):
            assert torch.equal(got, want)
        for got, want in zip(lerp_params(p1, p2, 1.0).tensors(), p2.tensors()):
            assert torch.equal(got, want)

    def test_midpoint_of_negation_is_zero(self, tiny_generator):
        p = random_params(tiny_generator, batch=1, seed=15)
        neg = p.map(lambda t: -t)
        mid = lerp_params(p, neg, 0.5)
        for t in mid.tensors():
            assert torch.allclose(t, torch.zeros_like(t), atol=1e-7)

    def test_decoded_midpoint_differs_from_pixel_midpoint(self, tiny_generator):
        arch = tiny_generator.arch
        p1 = random_params(tiny_generator, batch=1, seed=16)
        p2 = random_params(tiny_generator, batch=1, seed=17)
        decoded_mid = evaluate(arch, lerp_params(p1, p2, 0.5))
        pixel_mid = 0.5 * (evaluate(arch, p1) + evaluate(arch, p2))
        assert torch.linalg.vector_norm(decoded_mid - pixel_mid) > 0

    def test_shape_mismatch_rejected(self, tiny_generator):
        other = make_generator(single_block_cfg(), seed=23)
        with pytest.raises(ValueError):
            lerp_params(random_params(tiny_generator), random_params(other), 0.5)


class TestResizeGradients:
    def test_gradients_flow_through_nearest_resize(self):
        f = torch.randn(1, 2, 2, 3, requires_grad=True)
        resize_features(f, 4, "nearest").sum().backward()
        assert torch.equal(f.grad, torch.full_like(f, 4.0))
