"""Differentiable image/flow primitives: warping, occlusion masks, flow gradients.

All functions accept either unbatched tensors ((C, H, W) images, (2, H, W)
flows) or batched ones with a leading batch dimension, and return the same
rank they were given. Everything is a pure function and differentiable with
respect to its tensor inputs.
"""

from __future__ import annotations

import torch

from .errors import ContractViolation
from .video import check_finite, check_same_spatial

DEFAULT_ALPHA = 50.0


def _ensure_batched(x: torch.Tensor, name: str, channels: int | None = None) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        x = x.unsqueeze(0)
        squeezed = True
    elif x.dim() == 4:
        squeezed = False
    else:
        raise ContractViolation(f"{name} must be 3D or 4D, got {x.dim()}D")
    if channels is not None and x.shape[1] != channels:
        raise ContractViolation(f"{name} must have {channels} channels, got {x.shape[1]}")
    return x, squeezed


def _pixel_grid(height: int, width: int, device, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(height, device=device, dtype=dtype)
    xs = torch.arange(width, device=device, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gx, gy


def backward_warp(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Resample `source` at coordinates displaced by `flow`.

    out(x, y) = bilinear sample of source at (x + u(x, y), y + v(x, y));
    sample coordinates outside the image are clamped to the border. Zero
    flow reproduces the source bit-exactly. Implemented with explicit
    gather/lerp rather than grid_sample so the identity case is exact and
    gradients reach both the source pixels and the flow vectors.
    """
    src, squeeze_src = _ensure_batched(source, "source")
    flo, squeeze_flo = _ensure_batched(flow, "flow", channels=2)
    check_same_spatial(src, flo, "source and flow")
    if src.shape[0] != flo.shape[0]:
        raise ContractViolation(f"batch mismatch: source {src.shape[0]} vs flow {flo.shape[0]}")
    check_finite(flo, "flow")

    b, c, h, w = src.shape
    gx, gy = _pixel_grid(h, w, src.device, src.dtype)
    sx = (gx + flo[:, 0]).clamp(0, w - 1)
    sy = (gy + flo[:, 1]).clamp(0, h - 1)

    x0 = sx.floor()
    y0 = sy.floor()
    wx = (sx - x0).unsqueeze(1)
    wy = (sy - y0).unsqueeze(1)

    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=w - 1)
    y1l = (y0l + 1).clamp(max=h - 1)

    flat = src.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00 = gather(y0l, x0l)
    v01 = gather(y0l, x1l)
    v10 = gather(y1l, x0l)
    v11 = gather(y1l, x1l)

    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    out = top + wy * (bot - top)
    return out.squeeze(0) if squeeze_src and squeeze_flo else out


def occlusion_mask(
    target: torch.Tensor,
    source: torch.Tensor,
    flow: torch.Tensor,
    alpha: float = DEFAULT_ALPHA,
) -> torch.Tensor:
    """Per-pixel warp confidence exp(-alpha * ||target - warp(source, flow)||^2).

    The squared norm runs over the color channels without averaging, so the
    mask is 1 exactly where the photometric residual vanishes and decays
    toward 0 in occluded or de-occluded regions. Returns shape (1, H, W) or
    (B, 1, H, W) matching the input rank.
    """
    if alpha <= 0:
        raise ContractViolation(f"alpha must be positive, got {alpha}")
    tgt, squeezed = _ensure_batched(target, "target")
    check_same_spatial(tgt, source if source.dim() == 4 else source.unsqueeze(0), "target and source")
    warped = backward_warp(source, flow)
    if warped.dim() == 3:
        warped = warped.unsqueeze(0)
    residual_sq = (tgt - warped).pow(2).sum(dim=1, keepdim=True)
    mask = torch.exp(-alpha * residual_sq)
    return mask.squeeze(0) if squeezed else mask


def flow_spatial_gradient(flow: torch.Tensor) -> torch.Tensor:
    """Forward-difference spatial gradient of a flow field.

    Returns 4 channels (du/dx, du/dy, dv/dx, dv/dy); the last column of the
    x-differences and the last row of the y-differences are zero so the
    output keeps the input's spatial size. Linear in the input.
    """
    flo, squeezed = _ensure_batched(flow, "flow", channels=2)
    check_finite(flo, "flow")
    b, _, h, w = flo.shape
    dx = flo.new_zeros(b, 2, h, w)
    dy = flo.new_zeros(b, 2, h, w)
    dx[:, :, :, :-1] = flo[:, :, :, 1:] - flo[:, :, :, :-1]
    dy[:, :, :-1, :] = flo[:, :, 1:, :] - flo[:, :, :-1, :]
    out = torch.stack([dx[:, 0], dy[:, 0], dx[:, 1], dy[:, 1]], dim=1)
    return out.squeeze(0) if squeezed else out


def flow_noise(flow_inconsistent: torch.Tensor, flow_consistent: torch.Tensor) -> torch.Tensor:
    """Residual between a flow estimated from flickered frames and a clean one.

    Diagnostic only; never enters a training loss.
    """
    if flow_inconsistent.shape != flow_consistent.shape:
        raise ContractViolation(
            f"flow shapes differ: {tuple(flow_inconsistent.shape)} vs {tuple(flow_consistent.shape)}"
        )
    return flow_inconsistent - flow_consistent
