"""Dataset plumbing: clip manifests, synthetic flicker, and window sampling.

The flicker generator stands in for external per-frame processing: each
frame receives an independently seeded global color perturbation (optionally
plus a low-frequency spatial gain field), which is exactly what makes the
result temporally inconsistent. Externally processed clips plug in through
the same manifest schema by filling `processed_dir`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import io as frame_io
from .errors import ConfigError, ContractViolation
from .ops import backward_warp
from .video import Role, VideoSequence, derive_seed

log = logging.getLogger(__name__)

GLOBAL_FAMILIES = ("gamma", "channel_gain", "brightness", "hue", "color_matrix")
ALL_FAMILIES = GLOBAL_FAMILIES + ("spatial_gain",)


@dataclass
class ClipManifest:
    """One clip entry: frame directories plus declared geometry."""

    id: str
    raw_dir: Path
    frames: int
    width: int
    height: int
    processed_dir: Path | None = None

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "raw_dir": str(self.raw_dir),
            "frames": self.frames,
            "width": self.width,
            "height": self.height,
        }
        if self.processed_dir is not None:
            d["processed_dir"] = str(self.processed_dir)
        return d


def _validate_dir(directory: Path, clip_id: str, frames: int, width: int, height: int, kind: str) -> None:
    if not directory.is_dir():
        raise ContractViolation(f"clip {clip_id!r}: {kind} directory missing: {directory}")
    files = frame_io.list_frame_files(directory)
    if len(files) != frames:
        raise ContractViolation(
            f"clip {clip_id!r}: {kind} has {len(files)} frames, manifest says {frames}"
        )
    with Image.open(files[0]) as img:
        w, h = img.size
    if (w, h) != (width, height):
        raise ContractViolation(
            f"clip {clip_id!r}: {kind} resolution {w}x{h} does not match manifest {width}x{height}"
        )


def load_manifest(path: Path | str) -> list[ClipManifest]:
    """Parse and validate a manifest file.

    Clips that fail validation are excluded with a logged warning; a
    malformed document raises ConfigError with the offending line.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    if not isinstance(entries, list):
        raise ConfigError(f"manifest {path} must be a JSON array of clip objects")
    if not entries:
        log.warning("manifest %s lists no clips", path)
        return []

    base = path.parent
    manifests: list[ClipManifest] = []
    for k, entry in enumerate(entries):
        try:
            if not isinstance(entry, dict):
                raise ContractViolation(f"entry {k} is not an object")
            missing = {"id", "raw_dir", "frames", "width", "height"} - entry.keys()
            if missing:
                raise ContractViolation(f"entry {k} missing keys {sorted(missing)}")
            raw_dir = Path(entry["raw_dir"])
            if not raw_dir.is_absolute():
                raw_dir = base / raw_dir
            processed_dir = None
            if entry.get("processed_dir"):
                processed_dir = Path(entry["processed_dir"])
                if not processed_dir.is_absolute():
                    processed_dir = base / processed_dir
            m = ClipManifest(
                id=str(entry["id"]),
                raw_dir=raw_dir,
                frames=int(entry["frames"]),
                width=int(entry["width"]),
                height=int(entry["height"]),
                processed_dir=processed_dir,
            )
            _validate_dir(m.raw_dir, m.id, m.frames, m.width, m.height, "raw")
            if m.processed_dir is not None:
                _validate_dir(m.processed_dir, m.id, m.frames, m.width, m.height, "processed")
            manifests.append(m)
        except ContractViolation as exc:
            log.warning("manifest %s: excluding clip: %s", path, exc)
    return manifests


def write_manifest(manifests: list[ClipManifest], path: Path | str) -> Path:
    path = Path(path)
    path.write_text(json.dumps([m.to_json() for m in manifests], indent=2) + "\n")
    return path


@dataclass
class FlickerSpec:
    """Seeded per-frame perturbation recipe.

    strength 0 is the identity; the same (spec, input) always produces the
    same output because each frame's parameters come from a seed derived
    from (seed, frame index).
    """

    families: tuple[str, ...] = GLOBAL_FAMILIES
    strength: float = 0.5
    seed: int = 0

    def validate(self) -> "FlickerSpec":
        unknown = set(self.families) - set(ALL_FAMILIES)
        if unknown:
            raise ConfigError(f"unknown perturbation families {sorted(unknown)}; known: {ALL_FAMILIES}")
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError(f"strength must be in [0, 1], got {self.strength}")
        return self


def _hue_rotation_matrix(theta: float) -> torch.Tensor:
    # rotation about the gray axis (1,1,1)/sqrt(3)
    a = 1.0 / math.sqrt(3.0)
    k = torch.tensor([[0, -a, a], [a, 0, -a], [-a, a, 0]], dtype=torch.float32)
    eye = torch.eye(3)
    return eye + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def _perturb_frame(frame: torch.Tensor, families: tuple[str, ...], strength: float, rng: np.random.Generator) -> torch.Tensor:
    out = frame
    if "color_matrix" in families:
        mix = torch.eye(3) + strength * torch.from_numpy(rng.normal(0.0, 0.08, size=(3, 3))).float()
        out = torch.einsum("ij,jhw->ihw", mix, out)
    if "hue" in families:
        theta = strength * float(rng.uniform(-0.6, 0.6))
        out = torch.einsum("ij,jhw->ihw", _hue_rotation_matrix(theta), out)
    if "gamma" in families:
        g = math.exp(strength * float(rng.uniform(-0.5, 0.5)))
        out = out.clamp(min=0.0).pow(g)
    if "channel_gain" in families:
        gains = 1.0 + strength * torch.from_numpy(rng.uniform(-0.3, 0.3, size=3)).float()
        out = out * gains.view(3, 1, 1)
    if "brightness" in families:
        out = out + strength * float(rng.uniform(-0.25, 0.25))
    if "spatial_gain" in families:
        coarse = 1.0 + strength * torch.from_numpy(rng.uniform(-0.3, 0.3, size=(1, 1, 4, 4))).float()
        gain = F.interpolate(coarse, size=frame.shape[-2:], mode="bilinear", align_corners=False)
        out = out * gain.squeeze(0)
    return out.clamp(0.0, 1.0)


def synthesize_flicker(raw: VideoSequence, spec: FlickerSpec) -> VideoSequence:
    """Apply an independently seeded perturbation to every frame."""
    spec.validate()
    if spec.strength == 0.0:
        return VideoSequence(raw.frames.clone(), Role.PROCESSED, raw.clip_id)
    frames = [
        _perturb_frame(
            raw.frame(t),
            spec.families,
            spec.strength,
            np.random.default_rng(derive_seed(spec.seed, raw.clip_id, t)),
        )
        for t in range(len(raw))
    ]
    return VideoSequence(torch.stack(frames), Role.PROCESSED, raw.clip_id)


@dataclass
class TrainingSample:
    """Aligned raw/processed windows cropped from one clip."""

    raw: torch.Tensor
    processed: torch.Tensor
    clip_id: str
    start: int
    origin: tuple[int, int] = field(default=(0, 0))


def sample_window_tensors(
    raw: torch.Tensor,
    processed: torch.Tensor,
    window: int,
    patch: int,
    seed: int,
    clip_id: str = "",
) -> TrainingSample:
    """Crop an aligned (window, patch, patch) sample from in-memory clips."""
    n, _, h, w = raw.shape
    if n < window:
        raise ContractViolation(f"clip {clip_id!r} has {n} frames, need {window}")
    if h < patch or w < patch:
        raise ContractViolation(f"clip {clip_id!r} is {h}x{w}, need at least {patch}x{patch}")
    if raw.shape != processed.shape:
        raise ContractViolation(f"clip {clip_id!r}: raw and processed shapes differ")
    rng = np.random.default_rng(seed)
    t0 = int(rng.integers(0, n - window + 1))
    y0 = int(rng.integers(0, h - patch + 1))
    x0 = int(rng.integers(0, w - patch + 1))
    return TrainingSample(
        raw=raw[t0 : t0 + window, :, y0 : y0 + patch, x0 : x0 + patch],
        processed=processed[t0 : t0 + window, :, y0 : y0 + patch, x0 : x0 + patch],
        clip_id=clip_id,
        start=t0,
        origin=(y0, x0),
    )


def sample_window(manifest: ClipManifest, window: int, patch: int, seed: int) -> TrainingSample:
    """Disk-backed variant of sample_window_tensors."""
    if manifest.processed_dir is None:
        raise ContractViolation(f"clip {manifest.id!r} has no processed frames to sample")
    raw = frame_io.load_clip(manifest.raw_dir, Role.RAW, manifest.id)
    processed = frame_io.load_clip(manifest.processed_dir, Role.PROCESSED, manifest.id)
    return sample_window_tensors(raw.frames, processed.frames, window, patch, seed, manifest.id)


def _smooth_texture(height: int, width: int, rng: np.random.Generator, cells: int = 6) -> torch.Tensor:
    coarse = torch.from_numpy(rng.uniform(0.0, 1.0, size=(1, 3, cells, cells))).float()
    tex = F.interpolate(coarse, size=(height, width), mode="bilinear", align_corners=False)
    fine = torch.from_numpy(rng.uniform(-0.08, 0.08, size=(1, 3, height, width))).float()
    return (tex + fine).clamp(0.02, 0.98).squeeze(0)


def make_synthetic_clip(
    frames: int = 16,
    height: int = 64,
    width: int = 64,
    seed: int = 0,
    clip_id: str = "",
) -> VideoSequence:
    """A translating textured background with a separately moving foreground patch.

    The two velocities differ, so motion boundaries with occlusion appear
    along the foreground edge, which is where per-frame processing noise
    concentrates.
    """
    rng = np.random.default_rng(seed)
    margin = 2 * (frames + 4)
    bg = _smooth_texture(height + margin, width + margin, rng)
    fg = _smooth_texture(height, width, rng, cells=4)

    bg_vel = rng.uniform(-2.0, 2.0, size=2)
    fg_vel = rng.uniform(-2.0, 2.0, size=2)
    fg_size = int(rng.integers(height // 4, height // 2))
    fg_pos = rng.uniform(0.25, 0.55, size=2) * np.array([height, width])

    out = []
    base = margin // 2
    for t in range(frames):
        off = bg_vel * t
        flow = torch.tensor([off[1], off[0]], dtype=torch.float32).view(2, 1, 1).expand(2, height + margin, width + margin)
        shifted = backward_warp(bg, flow)
        frame = shifted[:, base : base + height, base : base + width].clone()

        cy, cx = fg_pos + fg_vel * t
        ys = torch.arange(height, dtype=torch.float32).view(-1, 1)
        xs = torch.arange(width, dtype=torch.float32).view(1, -1)
        half = fg_size / 2.0
        inside = (torch.clamp(half - (ys - cy).abs(), 0, 1) * torch.clamp(half - (xs - cx).abs(), 0, 1)).unsqueeze(0)
        frame = frame * (1 - inside) + fg * inside
        out.append(frame.clamp(0.0, 1.0))
    return VideoSequence(torch.stack(out), Role.RAW, clip_id or f"synthetic-{seed}")


def make_synthetic_corpus(
    out_dir: Path | str,
    clips: int = 20,
    frames: int = 16,
    height: int = 64,
    width: int = 64,
    seed: int = 0,
    spec: FlickerSpec | None = None,
) -> Path:
    """Write a raw+processed corpus of synthetic clips and its manifest."""
    out_dir = Path(out_dir)
    spec = (spec or FlickerSpec()).validate()
    manifests = []
    for k in range(clips):
        clip_id = f"clip{k:03d}"
        raw = make_synthetic_clip(frames, height, width, seed=derive_seed(seed, "clip", k), clip_id=clip_id)
        processed = synthesize_flicker(raw, FlickerSpec(spec.families, spec.strength, derive_seed(spec.seed, k)))
        raw_dir = out_dir / clip_id / "raw"
        proc_dir = out_dir / clip_id / "processed"
        frame_io.save_clip(raw, raw_dir)
        frame_io.save_clip(processed, proc_dir)
        manifests.append(
            ClipManifest(id=clip_id, raw_dir=raw_dir, frames=frames, width=width, height=height, processed_dir=proc_dir)
        )
    return write_manifest(manifests, out_dir / "manifest.json")
