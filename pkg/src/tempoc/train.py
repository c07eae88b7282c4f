"""End-to-end joint training, checkpointing, and gradient verification.

Sampling randomness is a pure function of (seed, iteration, slot), so runs
are reproducible and a resumed run sees exactly the batches an
uninterrupted run would have seen. Validation warp error is measured with a
frozen copy of the flow estimator taken right after its photometric
warm-up, which makes validation curves comparable across ablation runs that
share a seed.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io as bytesio
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ClipManifest, sample_window_tensors
from .errors import CheckpointIntegrityError, ConfigError, ContractViolation
from .flow import build_estimator, pretrain_flow
from .io import load_clip
from .losses import (
    LossWeights,
    build_feature_extractor,
    loss_constancy,
    loss_flow_gradient,
    loss_perceptual,
    loss_reconstruction,
    total_loss,
)
from .model import ConsistencyModel
from .evaluate import temporal_warp_error
from .video import Role, VideoSequence, derive_seed, resolve_device, seed_everything

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TMPOCKPT"
CHECKPOINT_VERSION = 1
CSV_FIELDS = ("iteration", "l_fg", "l_rec", "l_p", "l_const", "total", "val_warp_error")


@dataclass
class TrainConfig:
    """Everything a training run depends on; serializes to/from JSON."""

    sequence_length: int = 15
    patch_size: int = 256
    batch_size: int = 1
    iterations: int = 70000
    learning_rate: float = 1e-4
    flow_lr_multiplier: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    use_flow_gradient: bool = True
    use_reconstruction: bool = True
    use_perceptual: bool = True
    use_constancy: bool = True
    flow_compare: str = "gradient"
    constancy_flow_mode: str = "index_consistent"
    constancy_max_pairs: int = 32
    flow_backbone: str = "pyramid3"
    feature_extractor: str = "random4"
    flow_pretrain_steps: int = 300
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 500
    validation_interval: int = 500
    validation_clips: int = 2

    def validate(self) -> "TrainConfig":
        if self.sequence_length < 3:
            raise ConfigError(f"sequence_length must be >= 3, got {self.sequence_length}")
        if self.patch_size % ConsistencyModel.STRIDE != 0:
            raise ConfigError(f"patch_size must be divisible by {ConsistencyModel.STRIDE}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.validation_clips < 0:
            raise ConfigError("validation_clips must be >= 0")
        self.weights.validate()
        return self

    def effective_weights(self) -> LossWeights:
        """Loss weights with the ablation switches applied."""
        w = self.weights
        return LossWeights(
            lambda_fg=w.lambda_fg if self.use_flow_gradient else 0.0,
            lambda_reconstruction=w.lambda_reconstruction if self.use_reconstruction else 0.0,
            lambda_perceptual=w.lambda_perceptual if self.use_perceptual else 0.0,
            lambda_constancy=w.lambda_constancy if self.use_constancy else 0.0,
            alpha=w.alpha,
        )


def config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(data: dict) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data = dict(data)
    if "weights" in data:
        wkeys = {f.name for f in dataclasses.fields(LossWeights)}
        bad = set(data["weights"]) - wkeys
        if bad:
            raise ConfigError(f"unknown config keys: {sorted('weights.' + k for k in bad)}")
        data["weights"] = LossWeights(**data["weights"])
    try:
        return TrainConfig(**data).validate()
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def load_config(path: Path | str) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return config_from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON (line {exc.lineno}): {exc.msg}") from exc


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply dotted key=value strings onto a config dict; unknown keys are rejected."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw_value = item.split("=", 1)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return data


@dataclass
class Checkpoint:
    """Serialized training state: model, optimizer, progress, and config."""

    model_state: dict
    optimizer_state: dict
    iteration: int
    config: TrainConfig
    history: list[dict]
    val_estimator_state: dict | None = None
    val_baseline: float | None = None


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    payload = {
        "model": ckpt.model_state,
        "optimizer": ckpt.optimizer_state,
        "iteration": ckpt.iteration,
        "config": config_to_dict(ckpt.config),
        "history": ckpt.history,
        "val_estimator": ckpt.val_estimator_state,
        "val_baseline": ckpt.val_baseline,
    }
    buf = bytesio.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    header = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + hashlib.sha256(blob).digest()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if raw[:head] != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError(f"{path} is not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", raw[head : head + 4])
    if version != CHECKPOINT_VERSION:
        raise CheckpointIntegrityError(
            f"{path} has checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    digest = raw[head + 4 : head + 36]
    blob = raw[head + 36 :]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointIntegrityError(f"{path} failed its checksum; file is corrupt")
    payload = torch.load(bytesio.BytesIO(blob), weights_only=True)
    return Checkpoint(
        model_state=payload["model"],
        optimizer_state=payload["optimizer"],
        iteration=payload["iteration"],
        config=config_from_dict(payload["config"]),
        history=payload["history"],
        val_estimator_state=payload["val_estimator"],
        val_baseline=payload["val_baseline"],
    )


def _load_pairs(manifests: list[ClipManifest], device) -> list[tuple[torch.Tensor, torch.Tensor, str]]:
    pairs = []
    for m in manifests:
        if m.processed_dir is None:
            raise ConfigError(f"clip {m.id!r} has no processed_dir; training needs raw/processed pairs")
        raw = load_clip(m.raw_dir, Role.RAW, m.id).frames.to(device)
        processed = load_clip(m.processed_dir, Role.PROCESSED, m.id).frames.to(device)
        pairs.append((raw, processed, m.id))
    return pairs


def _sample_batch(pairs, config: TrainConfig, iteration: int):
    raws, procs = [], []
    for b in range(config.batch_size):
        slot_seed = derive_seed(config.seed, "iter", iteration, b)
        rng = np.random.default_rng(slot_seed)
        raw, proc, clip_id = pairs[int(rng.integers(len(pairs)))]
        sample = sample_window_tensors(
            raw, proc, config.sequence_length, config.patch_size,
            seed=derive_seed(slot_seed, clip_id), clip_id=clip_id,
        )
        raws.append(sample.raw)
        procs.append(sample.processed)
    return torch.stack(raws), torch.stack(procs)


def _validation_error(model: ConsistencyModel, val_pairs, estimator, alpha: float) -> float:
    model.eval()
    errors = []
    for raw, proc, clip_id in val_pairs:
        out = model.process_sequence(VideoSequence(proc, Role.PROCESSED, clip_id))
        ref = VideoSequence(raw, Role.RAW, clip_id)
        errors.append(temporal_warp_error(out, estimator, reference=ref, alpha=alpha).mean)
    model.train()
    return sum(errors) / len(errors)


def processed_baseline(val_pairs, estimator, alpha: float) -> float:
    errors = []
    for raw, proc, clip_id in val_pairs:
        seq = VideoSequence(proc, Role.PROCESSED, clip_id)
        ref = VideoSequence(raw, Role.RAW, clip_id)
        errors.append(temporal_warp_error(seq, estimator, reference=ref, alpha=alpha).mean)
    return sum(errors) / len(errors)


def build_model(config: TrainConfig, device) -> ConsistencyModel:
    """Deterministically initialized model for a config seed."""
    seed_everything(config.seed)
    flow_net = build_estimator(config.flow_backbone)
    model = ConsistencyModel(flow_net)
    return model.to(device)


def train(
    config: TrainConfig,
    manifests: list[ClipManifest],
    out_dir: Path | str,
    resume_from: Path | str | None = None,
    device: torch.device | None = None,
) -> Checkpoint:
    """Joint training of the restoration network and its flow estimator.

    Writes a per-iteration CSV log, periodic checkpoints, and a resolved
    config snapshot into out_dir, and returns the final checkpoint.
    """
    config.validate()
    device = device or resolve_device()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config_to_dict(config), indent=2) + "\n")

    if not manifests:
        raise ConfigError("no clips to train on")
    if config.validation_clips >= len(manifests):
        raise ConfigError(
            f"validation_clips={config.validation_clips} leaves no training clips "
            f"(manifest has {len(manifests)})"
        )
    pairs = _load_pairs(manifests, device)
    if config.validation_clips:
        train_pairs, val_pairs = pairs[: -config.validation_clips], pairs[-config.validation_clips :]
    else:
        train_pairs, val_pairs = pairs, []

    model = build_model(config, device)
    features = build_feature_extractor(config.feature_extractor, seed=config.seed).to(device)
    weights = config.effective_weights()

    val_estimator = None
    val_baseline = None
    start_iteration = 0
    history: list[dict] = []

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model.load_state_dict(ckpt.model_state)
        start_iteration = ckpt.iteration
        history = list(ckpt.history)
        val_baseline = ckpt.val_baseline
        if ckpt.val_estimator_state is not None:
            val_estimator = build_estimator(config.flow_backbone).to(device)
            val_estimator.load_state_dict(ckpt.val_estimator_state)
    else:
        if config.flow_pretrain_steps > 0:
            raw_clips = [VideoSequence(raw, Role.RAW, cid) for raw, _, cid in train_pairs]
            pretrain_flow(
                model.flow_net,
                raw_clips,
                config.flow_pretrain_steps,
                seed=derive_seed(config.seed, "flow-pretrain"),
            )
        if val_pairs:
            val_estimator = copy.deepcopy(model.flow_net)

    if val_estimator is not None:
        val_estimator.eval()
        for p in val_estimator.parameters():
            p.requires_grad_(False)
        if val_baseline is None and val_pairs:
            val_baseline = processed_baseline(val_pairs, val_estimator, weights.alpha)

    groups = model.parameter_groups()
    flow_params = groups.pop("flow_net")
    other_params = [p for ps in groups.values() for p in ps]
    optimizer = torch.optim.Adam(
        [
            {"params": other_params, "lr": config.learning_rate},
            {"params": flow_params, "lr": config.learning_rate * config.flow_lr_multiplier},
        ]
    )
    if resume_from is not None:
        optimizer.load_state_dict(ckpt.optimizer_state)

    def snapshot(iteration: int) -> Checkpoint:
        return Checkpoint(
            model_state={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
            optimizer_state=optimizer.state_dict(),
            iteration=iteration,
            config=config,
            history=list(history),
            val_estimator_state=(
                {k: v.detach().cpu().clone() for k, v in val_estimator.state_dict().items()}
                if val_estimator is not None
                else None
            ),
            val_baseline=val_baseline,
        )

    csv_path = out_dir / "train_log.csv"
    csv_mode = "a" if (resume_from is not None and csv_path.exists()) else "w"
    model.train()
    with open(csv_path, csv_mode, newline="") as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=CSV_FIELDS)
        if csv_mode == "w":
            writer.writeheader()

        for iteration in range(start_iteration + 1, config.iterations + 1):
            raw_batch, proc_batch = _sample_batch(train_pairs, config, iteration)
            outputs = model.process_window(proc_batch)
            report = total_loss(
                outputs,
                raw_batch,
                proc_batch,
                model.flow_net,
                features,
                weights,
                constancy_max_pairs=config.constancy_max_pairs,
                constancy_seed=derive_seed(config.seed, "constancy", iteration),
                constancy_flow_mode=config.constancy_flow_mode,
                flow_compare=config.flow_compare,
            )
            row = report.as_dict()
            for term, value in row.items():
                if not math.isfinite(value):
                    raise ContractViolation(
                        f"non-finite loss at iteration {iteration}: {term}={value}"
                    )
            optimizer.zero_grad()
            report.total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()

            record = {"iteration": iteration, **row, "val_warp_error": ""}
            if (
                val_pairs
                and val_estimator is not None
                and (iteration % config.validation_interval == 0 or iteration == config.iterations)
            ):
                record["val_warp_error"] = _validation_error(model, val_pairs, val_estimator, weights.alpha)
            history.append(record)
            writer.writerow(record)
            csv_file.flush()

            if config.checkpoint_interval > 0 and iteration % config.checkpoint_interval == 0:
                save_checkpoint(snapshot(iteration), out_dir / "checkpoint.tmpc")

    final = snapshot(config.iterations if config.iterations > start_iteration else start_iteration)
    save_checkpoint(final, out_dir / "checkpoint.tmpc")
    return final


@dataclass
class GradCheckEntry:
    max_rel_err: float
    max_abs_grad: float
    probes: int


@dataclass
class GradCheckReport:
    entries: dict[str, GradCheckEntry]
    threshold: float = 1e-3

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err < self.threshold for e in self.entries.values())


def _gradcheck_scene(config: TrainConfig, device):
    """Tiny float64 scene plus a smooth, non-degenerate flow estimator."""
    gen = torch.Generator().manual_seed(config.seed)
    size = 8
    t = 3
    shape = (1, t, 3, size, size)
    outputs = torch.rand(shape, generator=gen, dtype=torch.float64, device=device)
    raws = torch.rand(shape, generator=gen, dtype=torch.float64, device=device)
    processed = torch.rand(shape, generator=gen, dtype=torch.float64, device=device)

    estimator = build_estimator(config.flow_backbone).to(device).double()
    with torch.no_grad():
        for p in estimator.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.05)
    estimator.eval()
    features = build_feature_extractor(config.feature_extractor, seed=config.seed).to(device).double()
    return outputs, raws, processed, estimator, features


def gradient_check(config: TrainConfig, probes: int = 32, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic loss gradients against central finite differences.

    Runs in float64 on an 8x8, T=3 random scene with one entry per enabled
    loss term plus the weighted total. Passing means every entry's max
    relative error over the probed output pixels is below the threshold.
    """
    device = torch.device("cpu")
    outputs, raws, processed, estimator, features = _gradcheck_scene(config, device)
    weights = config.effective_weights()
    alpha = weights.alpha

    terms: dict[str, callable] = {}
    if weights.lambda_fg > 0:
        terms["l_fg"] = lambda o: loss_flow_gradient(o, raws, estimator, compare=config.flow_compare)
    if weights.lambda_reconstruction > 0:
        terms["l_rec"] = lambda o: loss_reconstruction(o, raws, estimator, alpha)
    if weights.lambda_perceptual > 0:
        terms["l_p"] = lambda o: loss_perceptual(o, processed, features)
    if weights.lambda_constancy > 0:
        terms["l_const"] = lambda o: loss_constancy(
            o, raws, estimator, alpha,
            max_pairs=config.constancy_max_pairs,
            seed=config.seed,
            flow_mode=config.constancy_flow_mode,
        )
    terms["total"] = lambda o: total_loss(
        o, raws, processed, estimator, features, weights,
        constancy_max_pairs=config.constancy_max_pairs,
        constancy_seed=config.seed,
        constancy_flow_mode=config.constancy_flow_mode,
        flow_compare=config.flow_compare,
    ).total

    rng = np.random.default_rng(config.seed)
    entries: dict[str, GradCheckEntry] = {}
    for name, fn in terms.items():
        leaf = outputs.clone().requires_grad_(True)
        value = fn(leaf)
        (grad,) = torch.autograd.grad(value, leaf)
        max_rel = 0.0
        for _ in range(probes):
            idx = tuple(int(rng.integers(s)) for s in outputs.shape)
            plus = outputs.clone()
            plus[idx] += step
            minus = outputs.clone()
            minus[idx] -= step
            fd = (float(fn(plus)) - float(fn(minus))) / (2 * step)
            g = float(grad[idx])
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-7)
            max_rel = max(max_rel, rel)
        entries[name] = GradCheckEntry(max_rel, float(grad.abs().max()), probes)
    return GradCheckReport(entries)
