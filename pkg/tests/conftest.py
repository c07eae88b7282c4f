"""Shared fixtures: small synthetic clips and a briefly pretrained flow net."""

import numpy as np
import pytest
import torch

from tempoc import PyramidFlowNet, Role, VideoSequence, make_synthetic_clip, pretrain_flow
from tempoc.video import seed_everything


@pytest.fixture(autouse=True)
def _seeded():
    seed_everything(1234)


@pytest.fixture
def small_clip() -> VideoSequence:
    return make_synthetic_clip(frames=6, height=32, width=32, seed=3, clip_id="small")


def translation_pair(size: int, shift: tuple[float, float], seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Textured frame and the same frame translated by `shift` pixels (x, y)."""
    from tempoc import backward_warp
    from tempoc.data import _smooth_texture

    rng = np.random.default_rng(seed)
    margin = 16
    big = _smooth_texture(size + margin, size + margin, rng)
    m = margin // 2

    def crop(off_x, off_y):
        flow = torch.tensor([off_x, off_y], dtype=torch.float32).view(2, 1, 1)
        flow = flow.expand(2, size + margin, size + margin)
        return backward_warp(big, flow)[:, m : m + size, m : m + size].clone()

    return crop(0.0, 0.0), crop(shift[0], shift[1])


def translation_clip(frames: int, size: int, velocity: tuple[float, float], seed: int) -> VideoSequence:
    from tempoc import backward_warp
    from tempoc.data import _smooth_texture

    rng = np.random.default_rng(seed)
    margin = 2 * frames + 16
    big = _smooth_texture(size + margin, size + margin, rng)
    m = margin // 2
    out = []
    for t in range(frames):
        flow = torch.tensor([velocity[0] * t, velocity[1] * t], dtype=torch.float32).view(2, 1, 1)
        flow = flow.expand(2, size + margin, size + margin)
        out.append(backward_warp(big, flow)[:, m : m + size, m : m + size].clone())
    return VideoSequence(torch.stack(out), Role.RAW, f"translate-{seed}")


@pytest.fixture(scope="session")
def trained_flow() -> PyramidFlowNet:
    """A flow net pretrained briefly on translating textures; reused across tests."""
    torch.manual_seed(0)
    net = PyramidFlowNet()
    clips = [translation_clip(6, 48, (vx, vy), seed=10 + k) for k, (vx, vy) in enumerate([(1.5, 0.0), (-1.0, 1.0), (0.5, -1.5), (2.0, 1.0)])]
    pretrain_flow(net, clips, steps=250, batch_size=4, seed=0)
    return net
