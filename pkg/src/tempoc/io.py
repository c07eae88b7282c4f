"""Frame directory I/O: 8-bit PNGs named 00000.png, 00001.png, ...

Loading divides by 255 into float32 [0, 1]; saving multiplies by 255 and
rounds half-up so a saved-and-reloaded frame round-trips through the same
quantization bins.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ContractViolation
from .video import Role, VideoSequence

_FRAME_RE = re.compile(r"^\d+\.png$")


def load_frame(path: Path | str) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_frame(frame: torch.Tensor, path: Path | str) -> None:
    if frame.dim() != 3 or frame.shape[0] != 3:
        raise ContractViolation(f"expected a (3, H, W) frame, got {tuple(frame.shape)}")
    arr = frame.detach().cpu().clamp(0, 1).numpy()
    # round-half-up, not banker's rounding
    quant = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(np.transpose(quant, (1, 2, 0))).save(path)


def list_frame_files(directory: Path | str) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ContractViolation(f"frame directory does not exist: {directory}")
    files = sorted(p for p in directory.iterdir() if _FRAME_RE.match(p.name))
    return files


def load_clip(directory: Path | str, role: Role = Role.RAW, clip_id: str = "") -> VideoSequence:
    files = list_frame_files(directory)
    if not files:
        raise ContractViolation(f"no frames found in {directory}")
    frames = torch.stack([load_frame(p) for p in files])
    return VideoSequence(frames, role, clip_id or Path(directory).name)


def save_clip(video: VideoSequence, directory: Path | str) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(len(video)):
        p = directory / f"{t:05d}.png"
        save_frame(video.frame(t), p)
        paths.append(p)
    return paths
