"""Warping, occlusion mask, and flow gradient primitives against independent oracles."""

import math

import numpy as np
import pytest
import torch

from tempoc import backward_warp, flow_noise, flow_spatial_gradient, occlusion_mask
from tempoc.errors import ContractViolation
from tempoc.data import make_synthetic_clip, synthesize_flicker, FlickerSpec


def bilinear_warp_oracle(src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Scalar-loop reference for border-clamped bilinear sampling."""
    c, h, w = src.shape
    out = np.zeros_like(src)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + flow[0, y, x], 0.0), w - 1.0)
            sy = min(max(y + flow[1, y, x], 0.0), h - 1.0)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            wx, wy = sx - x0, sy - y0
            for ch in range(c):
                top = src[ch, y0, x0] * (1 - wx) + src[ch, y0, x1] * wx
                bot = src[ch, y1, x0] * (1 - wx) + src[ch, y1, x1] * wx
                out[ch, y, x] = top * (1 - wy) + bot * wy
    return out


def gradient_oracle(flow: np.ndarray) -> np.ndarray:
    """Elementwise forward differences with zero-padded trailing row/column."""
    _, h, w = flow.shape
    out = np.zeros((4, h, w), dtype=flow.dtype)
    for y in range(h):
        for x in range(w):
            if x + 1 < w:
                out[0, y, x] = flow[0, y, x + 1] - flow[0, y, x]
                out[2, y, x] = flow[1, y, x + 1] - flow[1, y, x]
            if y + 1 < h:
                out[1, y, x] = flow[0, y + 1, x] - flow[0, y, x]
                out[3, y, x] = flow[1, y + 1, x] - flow[1, y, x]
    return out


class TestBackwardWarp:
    def test_zero_flow_is_identity_bit_exact(self):
        frame = torch.rand(3, 13, 17)
        out = backward_warp(frame, torch.zeros(2, 13, 17))
        assert torch.equal(out, frame)

    def test_row_shift_with_border_clamp(self):
        row = torch.tensor([0.0, 1.0, 2.0, 3.0]).view(1, 1, 4).repeat(3, 1, 1)
        flow = torch.zeros(2, 1, 4)
        flow[0] = 1.0
        out = backward_warp(row, flow)
        assert torch.allclose(out[0, 0], torch.tensor([1.0, 2.0, 3.0, 3.0]), atol=1e-6)

    def test_row_half_pixel_shift(self):
        row = torch.tensor([0.0, 1.0, 2.0, 3.0]).view(1, 1, 4).repeat(3, 1, 1)
        flow = torch.zeros(2, 1, 4)
        flow[0] = 0.5
        out = backward_warp(row, flow)
        assert torch.allclose(out[0, 0], torch.tensor([0.5, 1.5, 2.5, 3.0]), atol=1e-6)

    def test_matches_scalar_oracle_on_random_flows(self):
        rng = np.random.default_rng(5)
        src = rng.random((3, 9, 11), dtype=np.float32)
        flow = rng.uniform(-3, 3, size=(2, 9, 11)).astype(np.float32)
        expected = bilinear_warp_oracle(src, flow)
        out = backward_warp(torch.from_numpy(src), torch.from_numpy(flow))
        np.testing.assert_allclose(out.numpy(), expected, atol=1e-6)

    def test_batched_matches_unbatched(self):
        src = torch.rand(2, 3, 8, 8)
        flow = torch.rand(2, 2, 8, 8) - 0.5
        batched = backward_warp(src, flow)
        for b in range(2):
            assert torch.equal(batched[b], backward_warp(src[b], flow[b]))

    def test_gradients_match_finite_differences(self):
        # fractional flow parts kept in [0.1, 0.9]: away from bilinear kinks
        gen = torch.Generator().manual_seed(7)
        src = torch.rand(3, 8, 8, generator=gen, dtype=torch.float64)
        frac = 0.1 + 0.8 * torch.rand(2, 8, 8, generator=gen, dtype=torch.float64)
        flow = torch.randint(-2, 3, (2, 8, 8), generator=gen).double() + frac
        src.requires_grad_(True)
        flow.requires_grad_(True)

        weights = torch.rand(3, 8, 8, generator=gen, dtype=torch.float64)
        loss = (backward_warp(src, flow) * weights).sum()
        gsrc, gflow = torch.autograd.grad(loss, (src, flow))

        step = 1e-4
        rng = np.random.default_rng(9)
        for tensor, grad in ((src, gsrc), (flow, gflow)):
            for _ in range(12):
                idx = tuple(int(rng.integers(s)) for s in tensor.shape)
                plus = tensor.detach().clone()
                plus[idx] += step
                minus = tensor.detach().clone()
                minus[idx] -= step
                if tensor is src:
                    f_plus = (backward_warp(plus, flow.detach()) * weights).sum()
                    f_minus = (backward_warp(minus, flow.detach()) * weights).sum()
                else:
                    f_plus = (backward_warp(src.detach(), plus) * weights).sum()
                    f_minus = (backward_warp(src.detach(), minus) * weights).sum()
                fd = float(f_plus - f_minus) / (2 * step)
                g = float(grad[idx])
                assert abs(fd - g) / max(abs(fd), abs(g), 1e-7) < 1e-3

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            backward_warp(torch.rand(3, 8, 8), torch.zeros(2, 9, 8))

    def test_non_finite_flow_rejected(self):
        flow = torch.zeros(2, 8, 8)
        flow[0, 0, 0] = float("nan")
        with pytest.raises(ContractViolation):
            backward_warp(torch.rand(3, 8, 8), flow)


class TestOcclusionMask:
    def test_identical_after_warp_gives_all_ones(self):
        frame = torch.rand(3, 8, 8)
        mask = occlusion_mask(frame, frame, torch.zeros(2, 8, 8), alpha=50.0)
        assert torch.equal(mask, torch.ones(1, 8, 8))

    def test_scalar_value_matches_closed_form(self):
        target = torch.full((3, 4, 4), 0.5)
        source = torch.full((3, 4, 4), 0.5)
        target[0] += 0.1  # squared channel-norm residual = 0.01
        mask = occlusion_mask(target, source, torch.zeros(2, 4, 4), alpha=50.0)
        assert abs(float(mask[0, 0, 0]) - math.exp(-0.5)) < 1e-6

    def test_large_residual_underflows_to_zero(self):
        target = torch.ones(3, 4, 4)
        source = torch.zeros(3, 4, 4)  # residual 3.0, alpha 50 -> exp(-150)
        mask = occlusion_mask(target, source, torch.zeros(2, 4, 4), alpha=50.0)
        assert float(mask.max()) < 1e-60

    def test_bounded_and_monotone_in_residual(self):
        source = torch.full((3, 6, 6), 0.5)
        previous = None
        for delta in (0.0, 0.05, 0.1, 0.2, 0.4):
            target = source + delta
            mask = occlusion_mask(target, source, torch.zeros(2, 6, 6))
            value = float(mask[0, 0, 0])
            assert 0.0 <= value <= 1.0
            if previous is not None:
                assert value <= previous
            previous = value

    def test_alpha_must_be_positive(self):
        frame = torch.rand(3, 8, 8)
        with pytest.raises(ContractViolation):
            occlusion_mask(frame, frame, torch.zeros(2, 8, 8), alpha=0.0)


class TestFlowSpatialGradient:
    def test_constant_flow_has_zero_gradient(self):
        flow = torch.ones(2, 6, 6) * 2.5
        assert torch.equal(flow_spatial_gradient(flow), torch.zeros(4, 6, 6))

    def test_linear_ramp(self):
        flow = torch.zeros(2, 6, 6)
        flow[0] = torch.arange(6.0).view(1, 6)  # u = x
        grad = flow_spatial_gradient(flow)
        assert torch.equal(grad[0, :, :-1], torch.ones(6, 5))  # du/dx = 1 interior
        assert torch.equal(grad[0, :, -1], torch.zeros(6))  # zero-padded last column
        assert torch.equal(grad[1:], torch.zeros(3, 6, 6))

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(11)
        flow = rng.normal(size=(2, 6, 6)).astype(np.float32)
        expected = gradient_oracle(flow)
        out = flow_spatial_gradient(torch.from_numpy(flow))
        np.testing.assert_allclose(out.numpy(), expected, atol=0)

    def test_linearity(self):
        f = torch.randn(2, 7, 7)
        g = torch.randn(2, 7, 7)
        lhs = flow_spatial_gradient(2.5 * f + 0.5 * g)
        rhs = 2.5 * flow_spatial_gradient(f) + 0.5 * flow_spatial_gradient(g)
        assert torch.allclose(lhs, rhs, atol=1e-6)


class TestFlowNoise:
    def test_identical_flows_give_zero(self):
        flow = torch.randn(2, 8, 8)
        assert torch.equal(flow_noise(flow, flow), torch.zeros(2, 8, 8))

    def test_elementwise_difference(self):
        consistent = torch.zeros(2, 4, 4)
        consistent[0] = 1.0
        inconsistent = torch.zeros(2, 4, 4)
        inconsistent[0] = 1.2
        inconsistent[1] = -0.1
        noise = flow_noise(inconsistent, consistent)
        assert torch.allclose(noise[0], torch.full((4, 4), 0.2))
        assert torch.allclose(noise[1], torch.full((4, 4), -0.1))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            flow_noise(torch.zeros(2, 4, 4), torch.zeros(2, 5, 4))

    def test_noise_concentrates_near_motion_boundaries(self, trained_flow):
        """Flicker-induced flow noise correlates with flow-gradient magnitude."""
        raw = make_synthetic_clip(frames=6, height=48, width=48, seed=21)
        flickered = synthesize_flicker(raw, FlickerSpec(strength=0.6, seed=4))

        weighted, unweighted = [], []
        with torch.no_grad():
            for t in range(1, len(raw)):
                clean = trained_flow.estimate(raw.frame(t), raw.frame(t - 1))
                noisy = trained_flow.estimate(flickered.frame(t), flickered.frame(t - 1))
                noise_mag = flow_noise(noisy, clean).pow(2).sum(0)
                boundary = flow_spatial_gradient(clean).abs().sum(0)
                weighted.append(float((boundary * noise_mag).sum() / boundary.sum().clamp(min=1e-12)))
                unweighted.append(float(noise_mag.mean()))
        assert sum(weighted) > sum(unweighted), (
            "noise energy should be higher near motion boundaries than on average"
        )
