"""Training objectives: flow-gradient, warped reconstruction, perceptual,
long-range constancy, and their weighted combination.

Every loss accepts sequences either as VideoSequence objects, (T, 3, H, W)
tensors, or batched (B, T, 3, H, W) tensors, and returns a scalar tensor
(summed over time, averaged over the batch). Gradients reach only the
output frames and, through them, model parameters; flows and masks derived
from raw frames and features of the processed frames are constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ContractViolation
from .flow import FlowEstimator
from .ops import DEFAULT_ALPHA, backward_warp, flow_spatial_gradient, occlusion_mask
from .video import VideoSequence

CONSTANCY_FLOW_MODES = ("index_consistent", "anchor_literal")


@dataclass
class LossWeights:
    """Coefficients of the combined objective plus the mask sharpness alpha."""

    lambda_fg: float = 1.0
    lambda_reconstruction: float = 1.0
    lambda_perceptual: float = 0.1
    lambda_constancy: float = 1.0
    alpha: float = DEFAULT_ALPHA

    def validate(self) -> "LossWeights":
        for name in ("lambda_fg", "lambda_reconstruction", "lambda_perceptual", "lambda_constancy"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ContractViolation(f"{name} must be finite and >= 0, got {v}")
        if self.alpha <= 0:
            raise ContractViolation(f"alpha must be > 0, got {self.alpha}")
        return self


@dataclass
class LossReport:
    """Per-term values (0-dim tensors, graph attached) for one training batch."""

    flow_gradient: torch.Tensor
    reconstruction: torch.Tensor
    perceptual: torch.Tensor
    constancy: torch.Tensor
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def as_dict(self) -> dict[str, float]:
        return {
            "l_fg": float(self.flow_gradient.detach()),
            "l_rec": float(self.reconstruction.detach()),
            "l_p": float(self.perceptual.detach()),
            "l_const": float(self.constancy.detach()),
            "total": float(self.total.detach()),
        }


def _as_batched(x, name: str) -> torch.Tensor:
    if isinstance(x, VideoSequence):
        x = x.frames
    if x.dim() == 4:
        x = x.unsqueeze(0)
    if x.dim() != 5 or x.shape[2] != 3:
        raise ContractViolation(f"{name} must be (T, 3, H, W) or (B, T, 3, H, W)")
    return x


def _check_lengths(a: torch.Tensor, b: torch.Tensor, name_a: str, name_b: str) -> None:
    if a.shape[:2] != b.shape[:2] or a.shape[-2:] != b.shape[-2:]:
        raise ContractViolation(
            f"{name_a} {tuple(a.shape)} and {name_b} {tuple(b.shape)} are not aligned"
        )


def _flatten_pairs(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(B, T, 3, H, W) -> consecutive (previous, current) stacks of shape (B*(T-1), 3, H, W)."""
    b, t = x.shape[:2]
    prev = x[:, :-1].reshape(b * (t - 1), *x.shape[2:])
    curr = x[:, 1:].reshape(b * (t - 1), *x.shape[2:])
    return prev, curr


def loss_flow_gradient(
    outputs,
    raws,
    estimator: FlowEstimator,
    compare: str = "gradient",
) -> torch.Tensor:
    """L1 gap between flow gradients of consecutive output pairs and raw pairs.

    `compare="flow"` switches to the plain flow-matching variant kept only
    for ablations; the default compares spatial gradients, which ignores
    constant flow offsets and concentrates supervision on motion boundaries.
    """
    o = _as_batched(outputs, "outputs")
    i = _as_batched(raws, "raws")
    _check_lengths(o, i, "outputs", "raws")
    if o.shape[1] < 2:
        raise ContractViolation("need at least 2 frames")
    if compare not in ("gradient", "flow"):
        raise ConfigError(f"compare must be 'gradient' or 'flow', got {compare!r}")

    b, t = o.shape[:2]
    o_prev, o_curr = _flatten_pairs(o)
    i_prev, i_curr = _flatten_pairs(i)
    flow_o = estimator.estimate(o_curr, o_prev)
    with torch.no_grad():
        flow_i = estimator.estimate(i_curr, i_prev)
    if compare == "gradient":
        gap = flow_spatial_gradient(flow_o) - flow_spatial_gradient(flow_i)
    else:
        gap = flow_o - flow_i
    per_pair = gap.abs().mean(dim=(1, 2, 3))
    return per_pair.reshape(b, t - 1).sum(dim=1).mean()


def loss_reconstruction(
    outputs,
    raws,
    estimator: FlowEstimator,
    alpha: float = DEFAULT_ALPHA,
) -> torch.Tensor:
    """Occlusion-masked L1 between each output frame and its warped predecessor.

    Flow and mask come from the raw frames and are constants; only the
    output frames receive gradients.
    """
    o = _as_batched(outputs, "outputs")
    i = _as_batched(raws, "raws")
    _check_lengths(o, i, "outputs", "raws")
    if o.shape[1] < 2:
        raise ContractViolation("need at least 2 frames")

    b, t = o.shape[:2]
    o_prev, o_curr = _flatten_pairs(o)
    i_prev, i_curr = _flatten_pairs(i)
    with torch.no_grad():
        flow = estimator.estimate(i_curr, i_prev)
        mask = occlusion_mask(i_curr, i_prev, flow, alpha)
    residual = (o_curr - backward_warp(o_prev, flow)).abs().sum(dim=1)
    per_pair = (mask.squeeze(1) * residual).mean(dim=(1, 2))
    return per_pair.reshape(b, t - 1).sum(dim=1).mean()


def loss_perceptual(outputs, processed, features: nn.Module) -> torch.Tensor:
    """Mean L1 between feature maps of output and processed frames (t >= 2).

    The extractor must be deterministic; its output on the processed frames
    is detached so the processed video never receives gradients.
    """
    o = _as_batched(outputs, "outputs")
    p = _as_batched(processed, "processed")
    _check_lengths(o, p, "outputs", "processed")
    b, t = o.shape[:2]
    if t < 2:
        raise ContractViolation("need at least 2 frames")
    o_curr = o[:, 1:].reshape(b * (t - 1), *o.shape[2:])
    p_curr = p[:, 1:].reshape(b * (t - 1), *p.shape[2:])
    feat_o = features(o_curr)
    with torch.no_grad():
        feat_p = features(p_curr)
    per_frame = (feat_o - feat_p).abs().mean(dim=(1, 2, 3))
    return per_frame.reshape(b, t - 1).sum(dim=1).mean()


def constancy_pairs(t: int) -> list[tuple[int, int]]:
    """All (anchor, target) index pairs with target >= anchor + 2, 0-based."""
    return [(p, q) for p in range(t - 2) for q in range(p + 2, t)]


def loss_constancy(
    outputs,
    raws,
    estimator: FlowEstimator,
    alpha: float = DEFAULT_ALPHA,
    max_pairs: int = 32,
    seed: int = 0,
    flow_mode: str = "index_consistent",
) -> torch.Tensor:
    """Masked L1 between each output frame and warped temporally distant anchors.

    Sums over anchor/target pairs at temporal distance >= 2. When the pair
    count exceeds `max_pairs`, a seeded uniform subsample is evaluated and
    the sum rescaled by the inverse sampling fraction. `flow_mode` selects
    which raw frame indexes the flow toward the anchor: "index_consistent"
    uses the target frame itself, "anchor_literal" the frame before it.
    """
    o = _as_batched(outputs, "outputs")
    i = _as_batched(raws, "raws")
    _check_lengths(o, i, "outputs", "raws")
    if flow_mode not in CONSTANCY_FLOW_MODES:
        raise ConfigError(f"flow_mode must be one of {CONSTANCY_FLOW_MODES}, got {flow_mode!r}")

    b, t = o.shape[:2]
    pairs = constancy_pairs(t)
    if not pairs:
        return o.sum() * 0.0
    scale = 1.0
    if len(pairs) > max_pairs:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(pairs), size=max_pairs, replace=False)
        scale = len(pairs) / max_pairs
        pairs = [pairs[k] for k in sorted(chosen)]

    n = len(pairs)
    anchor_idx = o.new_tensor([p for p, _ in pairs], dtype=torch.long)
    target_idx = o.new_tensor([q for _, q in pairs], dtype=torch.long)
    flow_src_idx = target_idx if flow_mode == "index_consistent" else target_idx - 1

    def take(seq, idx):
        return seq[:, idx].reshape(b * n, *seq.shape[2:])

    o_anchor, o_target = take(o, anchor_idx), take(o, target_idx)
    i_anchor, i_target = take(i, anchor_idx), take(i, target_idx)
    i_flow_src = take(i, flow_src_idx)
    with torch.no_grad():
        flow = estimator.estimate(i_flow_src, i_anchor)
        mask = occlusion_mask(i_target, i_anchor, flow, alpha)
    residual = (o_target - backward_warp(o_anchor, flow)).abs().sum(dim=1)
    per_pair = (mask.squeeze(1) * residual).mean(dim=(1, 2))
    return per_pair.reshape(b, n).sum(dim=1).mean() * scale


def total_loss(
    outputs,
    raws,
    processed,
    estimator: FlowEstimator,
    features: nn.Module,
    weights: LossWeights,
    constancy_max_pairs: int = 32,
    constancy_seed: int = 0,
    constancy_flow_mode: str = "index_consistent",
    flow_compare: str = "gradient",
) -> LossReport:
    """Weighted combination of the four objectives.

    Terms with zero weight are skipped entirely (reported as 0), which is
    how ablations switch losses off without touching the remaining terms.
    """
    weights.validate()
    o = _as_batched(outputs, "outputs")
    zero = o.sum() * 0.0

    l_fg = (
        loss_flow_gradient(outputs, raws, estimator, compare=flow_compare)
        if weights.lambda_fg > 0
        else zero
    )
    l_rec = (
        loss_reconstruction(outputs, raws, estimator, weights.alpha)
        if weights.lambda_reconstruction > 0
        else zero
    )
    l_p = (
        loss_perceptual(outputs, processed, features)
        if weights.lambda_perceptual > 0
        else zero
    )
    l_const = (
        loss_constancy(
            outputs,
            raws,
            estimator,
            weights.alpha,
            max_pairs=constancy_max_pairs,
            seed=constancy_seed,
            flow_mode=constancy_flow_mode,
        )
        if weights.lambda_constancy > 0
        else zero
    )
    total = (
        weights.lambda_fg * l_fg
        + weights.lambda_reconstruction * l_rec
        + weights.lambda_perceptual * l_p
        + weights.lambda_constancy * l_const
    )
    return LossReport(l_fg, l_rec, l_p, l_const, total, weights)


class _RandomConvFeatures(nn.Module):
    """Frozen random convolutional stack used as the desk-scale feature map.

    Weights are drawn once from a seeded generator and never trained, so the
    extractor is deterministic across runs on one platform.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [3, *widths]
        layers: list[nn.Module] = []
        for k, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            conv = nn.Conv2d(cin, cout, 3, stride=2 if k < 2 else 1, padding=1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers += [conv, nn.LeakyReLU(0.1)]
        self.net = nn.Sequential(*layers[:-1])
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net(x)


class _Vgg16Relu43(nn.Module):
    """ImageNet-trained VGG-16 truncated at relu4_3, frozen."""

    def __init__(self):
        super().__init__()
        try:
            from torchvision import models

            vgg = models.vgg16(weights=models.VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:  # pragma: no cover - needs downloaded weights
            raise ConfigError(
                "feature extractor 'vgg16_relu4_3' needs torchvision with the "
                f"ImageNet VGG-16 weights available locally ({exc})"
            ) from exc
        self.net = vgg.features[:23]
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):  # pragma: no cover - needs downloaded weights
        return self.net((x - self.mean) / self.std)


def build_feature_extractor(name: str = "random4", seed: int = 0) -> nn.Module:
    """Registered perceptual feature maps: identity, random4 (default), vgg16_relu4_3."""
    if name == "identity":
        return nn.Identity()
    if name == "random4":
        return _RandomConvFeatures(seed=seed)
    if name == "vgg16_relu4_3":
        return _Vgg16Relu43()
    raise ConfigError(f"unknown feature extractor {name!r}")
