"""Optical-flow estimation behind a pluggable interface.

The default estimator is a small coarse-to-fine residual flow network meant
to be trained from scratch on the target corpus and fine-tuned jointly with
the restoration model. Externally trained estimators can be registered and
selected by identifier without touching the rest of the pipeline.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractViolation
from .ops import backward_warp, flow_spatial_gradient
from .video import VideoSequence, derive_seed


class FlowEstimator(nn.Module):
    """Interface: estimate(target, source) -> flow with warp(source, flow) ~ target."""

    identifier: str = "base"
    pyramid_levels: int = 1

    def estimate(self, target: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class _LevelBlock(nn.Module):
    """Residual-flow predictor for one pyramid level.

    Input is (target, warped source, current flow) = 8 channels; output is a
    2-channel flow correction. The last conv is zero-initialized so an
    untrained estimator predicts exactly zero flow.
    """

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        chans = [8, *widths, 2]
        layers: list[nn.Module] = []
        for i in range(len(chans) - 1):
            layers.append(nn.Conv2d(chans[i], chans[i + 1], 5, padding=2))
            if i < len(chans) - 2:
                layers.append(nn.LeakyReLU(0.1, inplace=True))
        self.net = nn.Sequential(*layers)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x):
        return self.net(x)


class PyramidFlowNet(FlowEstimator):
    """Coarse-to-fine residual flow network (shared interface default).

    Images are downsampled `levels` times by average pooling; flow starts at
    zero on the coarsest level and each level adds a learned correction to
    the upsampled estimate after warping the source toward the target.
    """

    def __init__(self, levels: int = 3, widths: Sequence[int] = (16, 32, 16, 8)):
        super().__init__()
        if levels < 1:
            raise ConfigError(f"need at least one pyramid level, got {levels}")
        self.pyramid_levels = levels
        self.identifier = f"pyramid{levels}"
        self.blocks = nn.ModuleList(_LevelBlock(widths) for _ in range(levels))

    @property
    def stride(self) -> int:
        return 2 ** (self.pyramid_levels - 1)

    def estimate(self, target: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        squeeze = target.dim() == 3
        if squeeze:
            target = target.unsqueeze(0)
            source = source.unsqueeze(0)
        if target.shape != source.shape:
            raise ContractViolation(
                f"frame shapes differ: {tuple(target.shape)} vs {tuple(source.shape)}"
            )
        h, w = target.shape[-2:]
        pad_h = (-h) % self.stride
        pad_w = (-w) % self.stride
        if pad_h or pad_w:
            target = F.pad(target, (0, pad_w, 0, pad_h), mode="replicate")
            source = F.pad(source, (0, pad_w, 0, pad_h), mode="replicate")

        tgt_pyr = [target]
        src_pyr = [source]
        for _ in range(self.pyramid_levels - 1):
            tgt_pyr.append(F.avg_pool2d(tgt_pyr[-1], 2))
            src_pyr.append(F.avg_pool2d(src_pyr[-1], 2))

        flow = None
        for level in range(self.pyramid_levels - 1, -1, -1):
            tgt, src = tgt_pyr[level], src_pyr[level]
            if flow is None:
                flow = tgt.new_zeros(tgt.shape[0], 2, tgt.shape[2], tgt.shape[3])
            else:
                flow = 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)
            warped = backward_warp(src, flow)
            flow = flow + self.blocks[level](torch.cat([tgt, warped, flow], dim=1))

        if pad_h or pad_w:
            flow = flow[:, :, :h, :w]
        return flow.squeeze(0) if squeeze else flow

    def forward(self, target, source):
        return self.estimate(target, source)


_REGISTRY: dict[str, Callable[[], FlowEstimator]] = {}


def register_estimator(name: str, factory: Callable[[], FlowEstimator]) -> None:
    _REGISTRY[name] = factory


def build_estimator(name: str) -> FlowEstimator:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ConfigError(f"unknown flow backbone {name!r}; known: {sorted(_REGISTRY)}") from None


register_estimator("pyramid3", lambda: PyramidFlowNet(levels=3))
register_estimator("pyramid3-wide", lambda: PyramidFlowNet(levels=3, widths=(32, 64, 32, 16)))
register_estimator("pyramid4", lambda: PyramidFlowNet(levels=4))


def pretrain_flow(
    estimator: FlowEstimator,
    clips: Sequence[VideoSequence],
    steps: int,
    lr: float = 2e-4,
    smoothness_weight: float = 0.1,
    batch_size: int = 4,
    seed: int = 0,
) -> FlowEstimator:
    """Photometric warm-up of a flow estimator on unlabeled clips.

    Minimizes |target - warp(source, flow)| plus smoothness_weight * mean
    |grad flow| over randomly drawn adjacent frame pairs. Deterministic for
    a fixed seed; steps = 0 returns the estimator untouched.
    """
    if not clips:
        raise ContractViolation("pretrain_flow needs at least one clip")
    for clip in clips:
        if len(clip) < 2:
            raise ContractViolation(f"clip {clip.clip_id!r} has fewer than 2 frames")
    if steps <= 0:
        return estimator

    device = next(estimator.parameters()).device
    opt = torch.optim.Adam(estimator.parameters(), lr=lr)
    estimator.train()
    for step in range(steps):
        targets, sources = [], []
        for b in range(batch_size):
            rng = np.random.default_rng(derive_seed(seed, step, b))
            clip = clips[int(rng.integers(len(clips)))]
            t = int(rng.integers(len(clip) - 1))
            a, b_ = clip.frame(t).to(device), clip.frame(t + 1).to(device)
            if rng.integers(2):
                a, b_ = b_, a
            targets.append(a)
            sources.append(b_)
        target = torch.stack(targets)
        source = torch.stack(sources)

        flow = estimator.estimate(target, source)
        photometric = (target - backward_warp(source, flow)).abs().mean()
        smooth = flow_spatial_gradient(flow).abs().mean()
        loss = photometric + smoothness_weight * smooth
        opt.zero_grad()
        loss.backward()
        opt.step()
    estimator.eval()
    return estimator
