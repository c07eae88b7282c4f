"""Quantitative evaluation: temporal warp error, iterative restoration, reports."""

from __future__ import annotations

import csv
import io as stringio
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import ContractViolation
from .flow import FlowEstimator
from .losses import _as_batched
from .model import ConsistencyModel
from .ops import DEFAULT_ALPHA, backward_warp, occlusion_mask
from .video import VideoSequence, check_aligned

# Average warp errors reported for the original full-scale training setup
# (DAVIS / videvo corpora). Context for report readers only; nothing in the
# test suite asserts against these.
FULL_SCALE_REFERENCE = {"davis": 0.0021, "videvo": 0.0015}


@dataclass
class WarpErrorResult:
    """Masked warp error of one clip: per consecutive pair plus the mean."""

    per_pair: list[float]
    mean: float
    mode: str
    clip_id: str = ""


@dataclass
class IterationCurve:
    """Warp error and restored video at each feedback iteration (index 0 = input)."""

    errors: list[float]
    videos: list[VideoSequence]


def temporal_warp_error(
    video: VideoSequence,
    estimator: FlowEstimator,
    reference: VideoSequence | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> WarpErrorResult:
    """Occlusion-masked mean squared error between frames and warped predecessors.

    Flow and mask come from `reference` when given (raw-reference mode) and
    from the evaluated video itself otherwise (self mode). Each pair's error
    is normalized by the mask sum so heavily occluded pairs do not score
    well spuriously.
    """
    if len(video) < 2:
        raise ContractViolation("warp error needs at least 2 frames")
    mode = "self"
    ref = video
    if reference is not None:
        check_aligned(video, reference)
        ref = reference
        mode = "raw-reference"

    with torch.no_grad():
        v = _as_batched(video, "video")[0]
        r = _as_batched(ref, "reference")[0]
        flow = estimator.estimate(r[1:], r[:-1])
        mask = occlusion_mask(r[1:], r[:-1], flow, alpha).squeeze(1)
        residual_sq = (v[1:] - backward_warp(v[:-1], flow)).pow(2).sum(dim=1)
        num = (mask * residual_sq).sum(dim=(1, 2))
        den = mask.sum(dim=(1, 2)).clamp(min=1e-12)
        per_pair = (num / den).tolist()
    return WarpErrorResult(per_pair, sum(per_pair) / len(per_pair), mode, video.clip_id)


def iterate_restore(
    model: ConsistencyModel,
    processed: VideoSequence,
    k: int,
    reference: VideoSequence | None = None,
    estimator: FlowEstimator | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> IterationCurve:
    """Feed the restored video back through the model k times.

    Records the warp error of the input and of every restored stage with
    the same flow source, so the curve is comparable across iterations.
    """
    if k < 0:
        raise ContractViolation(f"k must be >= 0, got {k}")
    estimator = estimator if estimator is not None else model.flow_net
    videos = [processed]
    errors = [temporal_warp_error(processed, estimator, reference, alpha).mean]
    current = processed
    for _ in range(k):
        current = model.process_sequence(current)
        videos.append(current)
        errors.append(temporal_warp_error(current, estimator, reference, alpha).mean)
    return IterationCurve(errors, videos)


@dataclass
class Report:
    """Task x method table of warp errors with per-row best/second markers."""

    tasks: list[str]
    methods: list[str]
    cells: dict[tuple[str, str], WarpErrorResult]
    reference: dict[str, float] = field(default_factory=dict)
    reference_label: str = "reported"

    def to_csv(self) -> str:
        buf = stringio.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["task", "method", "clip", "warp_error", "mode"])
        for task in self.tasks:
            for method in self.methods:
                r = self.cells.get((task, method))
                if r is not None:
                    writer.writerow([task, method, r.clip_id or "all", f"{r.mean:.8f}", r.mode])
        return buf.getvalue()

    def write_csv(self, path: Path | str) -> None:
        Path(path).write_text(self.to_csv())

    def to_text(self) -> str:
        headers = ["task", *self.methods]
        if self.reference:
            headers.append(self.reference_label)
        rows = []
        col_sums = {m: 0.0 for m in self.methods}
        col_counts = {m: 0 for m in self.methods}
        for task in self.tasks:
            values = {m: self.cells[(task, m)].mean for m in self.methods if (task, m) in self.cells}
            ranked = sorted(values.values())
            row = [task]
            for m in self.methods:
                if m not in values:
                    row.append("-")
                    continue
                v = values[m]
                marker = ""
                if len(ranked) > 1 and v == ranked[0]:
                    marker = "*"
                elif len(ranked) > 2 and v == ranked[1]:
                    marker = "+"
                row.append(f"{v:.6f}{marker}")
                col_sums[m] += v
                col_counts[m] += 1
            if self.reference:
                ref = self.reference.get(task)
                row.append(f"{ref:.6f}" if ref is not None else "-")
            rows.append(row)
        avg_row = ["average"]
        for m in self.methods:
            avg_row.append(f"{col_sums[m] / col_counts[m]:.6f}" if col_counts[m] else "-")
        if self.reference:
            avg_row.append("-")
        rows.append(avg_row)

        widths = [max(len(str(r[i])) for r in [headers, *rows]) for i in range(len(headers))]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in [headers, *rows]]
        lines.append("(* best, + second best per row)")
        return "\n".join(lines)


def build_report(
    results: list[tuple[str, str, WarpErrorResult]],
    reference: dict[str, float] | None = None,
    reference_label: str = "reported",
) -> Report:
    """Assemble a per-task x per-method report from evaluation results."""
    if not results:
        raise ContractViolation("cannot build a report from no results")
    tasks: list[str] = []
    methods: list[str] = []
    cells: dict[tuple[str, str], WarpErrorResult] = {}
    for task, method, result in results:
        if (task, method) in cells:
            raise ContractViolation(f"duplicate result for task {task!r}, method {method!r}")
        if task not in tasks:
            tasks.append(task)
        if method not in methods:
            methods.append(method)
        cells[(task, method)] = result
    return Report(tasks, methods, cells, reference or {}, reference_label)
