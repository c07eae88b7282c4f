"""Video containers and frame-level helpers.

A frame is a float32 tensor of shape (3, H, W) with values in [0, 1]. A
flow field is a float32 tensor of shape (2, H, W) whose channel 0 holds the
horizontal displacement u and channel 1 the vertical displacement v, both in
pixels. Batched variants carry a leading batch dimension. Frame timestamps
are implicit: position ``t`` in a sequence is timestamp ``t``.
"""

from __future__ import annotations

import hashlib
import os
import random
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from .errors import ContractViolation

MIN_FRAME_SIZE = 8


class Role(str, Enum):
    RAW = "raw"
    PROCESSED = "processed"
    OUTPUT = "output"


@dataclass
class VideoSequence:
    """An ordered stack of frames of one clip.

    Attributes:
        frames: float32 tensor (T, 3, H, W), values in [0, 1].
        role: whether the clip is raw, per-frame processed, or model output.
        clip_id: optional identifier carried through for reporting.
    """

    frames: torch.Tensor
    role: Role = Role.RAW
    clip_id: str = field(default="")

    def __post_init__(self):
        f = self.frames
        if f.dim() != 4 or f.shape[1] != 3:
            raise ContractViolation(f"expected frames of shape (T, 3, H, W), got {tuple(f.shape)}")
        if f.shape[2] < MIN_FRAME_SIZE or f.shape[3] < MIN_FRAME_SIZE:
            raise ContractViolation(f"frames must be at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}, got {tuple(f.shape)}")
        if not torch.isfinite(f).all():
            raise ContractViolation("frames contain non-finite values")
        self.role = Role(self.role)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    def frame(self, t: int) -> torch.Tensor:
        return self.frames[t]

    def with_role(self, role: Role) -> "VideoSequence":
        return VideoSequence(self.frames, role, self.clip_id)

    def to(self, device) -> "VideoSequence":
        return VideoSequence(self.frames.to(device), self.role, self.clip_id)


def check_same_spatial(a: torch.Tensor, b: torch.Tensor, what: str = "inputs") -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ContractViolation(f"{what} have mismatched spatial sizes {tuple(a.shape[-2:])} vs {tuple(b.shape[-2:])}")


def check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ContractViolation(f"{what} contains non-finite values")


def check_aligned(a: VideoSequence, b: VideoSequence) -> None:
    if len(a) != len(b) or a.height != b.height or a.width != b.width:
        raise ContractViolation(
            f"sequences not aligned: {len(a)}x{a.height}x{a.width} vs {len(b)}x{b.height}x{b.width}"
        )


def resolve_device(spec: str | None = None) -> torch.device:
    """Pick the compute device: explicit arg, then TEMPOC_DEVICE, then auto."""
    name = spec or os.environ.get("TEMPOC_DEVICE", "")
    if name:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings.

    Used so parallel or resumed sampling depends only on (global seed,
    identity, index), never on RNG call order.
    """
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") & (2**63 - 1)
