"""Command-line entry point.

Subcommands: synth-flicker, train, infer, eval, iterate, gradcheck. A JSON
config file is canonical for training; flags and -o key=value overrides
layer on top. Every command that produces files also writes a resolved
parameter snapshot next to them. Exit codes: 0 success, 1 contract
violation, 2 configuration or parse error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import data as data_mod
from . import evaluate as eval_mod
from . import io as frame_io
from . import train as train_mod
from .errors import CheckpointIntegrityError, ConfigError, ContractViolation
from .flow import build_estimator
from .model import ConsistencyModel
from .video import Role, resolve_device


def _write_snapshot(out_dir: Path, params: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(params, indent=2, default=str) + "\n")


def _load_model(ckpt_path: str, device) -> tuple[ConsistencyModel, train_mod.Checkpoint]:
    ckpt = train_mod.load_checkpoint(ckpt_path)
    model = train_mod.build_model(ckpt.config, device)
    model.load_state_dict({k: v.to(device) for k, v in ckpt.model_state.items()})
    model.eval()
    return model, ckpt


def _cmd_synth_flicker(args) -> int:
    out_dir = Path(args.out)
    families = tuple(args.families.split(",")) if args.families else data_mod.GLOBAL_FAMILIES
    spec = data_mod.FlickerSpec(families=families, strength=args.strength, seed=args.seed).validate()
    if args.generate:
        manifest_path = data_mod.make_synthetic_corpus(
            out_dir,
            clips=args.generate,
            frames=args.frames,
            height=args.size,
            width=args.size,
            seed=args.seed,
            spec=spec,
        )
    else:
        if not args.manifest:
            raise ConfigError("synth-flicker needs --manifest or --generate N")
        manifests = data_mod.load_manifest(args.manifest)
        updated = []
        for m in manifests:
            raw = frame_io.load_clip(m.raw_dir, Role.RAW, m.id)
            processed = data_mod.synthesize_flicker(raw, spec)
            proc_dir = out_dir / m.id / "processed"
            frame_io.save_clip(processed, proc_dir)
            updated.append(dataclasses.replace(m, processed_dir=proc_dir))
        manifest_path = data_mod.write_manifest(updated, out_dir / "manifest.json")
    _write_snapshot(out_dir, {"command": "synth-flicker", **vars(args)})
    print(f"wrote manifest {manifest_path}")
    return 0


def _cmd_train(args) -> int:
    if args.config:
        cfg_dict = train_mod.config_to_dict(train_mod.load_config(args.config))
    else:
        cfg_dict = train_mod.config_to_dict(train_mod.TrainConfig())
    cfg = train_mod.config_from_dict(train_mod.apply_overrides(cfg_dict, args.override))
    manifests = data_mod.load_manifest(args.manifest)
    ckpt = train_mod.train(cfg, manifests, args.out, resume_from=args.resume, device=resolve_device())
    print(f"finished at iteration {ckpt.iteration}; checkpoint in {args.out}")
    return 0


def _cmd_infer(args) -> int:
    device = resolve_device()
    model, _ = _load_model(args.ckpt, device)
    video = frame_io.load_clip(args.input, Role.PROCESSED).to(device)
    restored = model.process_sequence(video)
    out_dir = Path(args.out)
    frame_io.save_clip(restored, out_dir / "frames")
    _write_snapshot(out_dir, {"command": "infer", **vars(args)})
    print(f"wrote {len(restored)} frames to {out_dir / 'frames'}")
    return 0


def _cmd_eval(args) -> int:
    device = resolve_device()
    if args.ckpt:
        model, _ = _load_model(args.ckpt, device)
        estimator = model.flow_net
    else:
        estimator = build_estimator(args.flow_backbone).to(device)
        estimator.eval()
    video = frame_io.load_clip(args.video, Role.PROCESSED).to(device)
    reference = frame_io.load_clip(args.reference, Role.RAW).to(device) if args.reference else None
    result = eval_mod.temporal_warp_error(video, estimator, reference, alpha=args.alpha)
    print(f"warp_error {result.mean:.8f} mode {result.mode} pairs {len(result.per_pair)}")
    if args.out:
        out_dir = Path(args.out)
        report = eval_mod.build_report([(args.task, args.method, result)])
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "warp_error.csv")
        (out_dir / "warp_error.txt").write_text(report.to_text() + "\n")
        _write_snapshot(out_dir, {"command": "eval", **vars(args)})
    return 0


def _cmd_iterate(args) -> int:
    device = resolve_device()
    model, _ = _load_model(args.ckpt, device)
    video = frame_io.load_clip(args.input, Role.PROCESSED).to(device)
    reference = frame_io.load_clip(args.reference, Role.RAW).to(device) if args.reference else None
    curve = eval_mod.iterate_restore(model, video, args.k, reference)
    out_dir = Path(args.out)
    for stage, restored in enumerate(curve.videos):
        frame_io.save_clip(restored, out_dir / f"iter{stage}")
    lines = ["iteration,warp_error"] + [f"{i},{e:.8f}" for i, e in enumerate(curve.errors)]
    (out_dir / "curve.csv").write_text("\n".join(lines) + "\n")
    _write_snapshot(out_dir, {"command": "iterate", **vars(args)})
    print("\n".join(lines))
    return 0


def _cmd_gradcheck(args) -> int:
    if args.config:
        cfg_dict = train_mod.config_to_dict(train_mod.load_config(args.config))
    else:
        cfg_dict = train_mod.config_to_dict(train_mod.TrainConfig())
    cfg = train_mod.config_from_dict(train_mod.apply_overrides(cfg_dict, args.override))
    report = train_mod.gradient_check(cfg)
    for name, entry in report.entries.items():
        status = "ok" if entry.max_rel_err < report.threshold else "FAIL"
        print(f"{name}: max_rel_err {entry.max_rel_err:.3e} max_abs_grad {entry.max_abs_grad:.3e} [{status}]")
    if not report.passed:
        print("gradient check failed", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempoc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-flicker", help="flicker a raw corpus or generate a synthetic one")
    p.add_argument("--manifest", help="manifest of raw clips to process")
    p.add_argument("--generate", type=int, default=0, metavar="N", help="generate N synthetic raw clips instead")
    p.add_argument("--out", required=True)
    p.add_argument("--strength", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--families", help="comma-separated perturbation families")
    p.set_defaults(func=_cmd_synth_flicker)

    p = sub.add_parser("train", help="train the restoration model")
    p.add_argument("--config", help="JSON TrainConfig (defaults used when omitted)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="restore one clip with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="directory of processed frames")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="temporal warp error of a clip")
    p.add_argument("--video", required=True, help="directory of frames to evaluate")
    p.add_argument("--reference", help="raw frames for raw-reference mode")
    p.add_argument("--ckpt", help="use the checkpoint's fine-tuned flow estimator")
    p.add_argument("--flow-backbone", default="pyramid3")
    p.add_argument("--alpha", type=float, default=50.0)
    p.add_argument("--task", default="task")
    p.add_argument("--method", default="input")
    p.add_argument("--out", help="directory for CSV/text report")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("iterate", help="repeated restoration feedback experiment")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--reference")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_iterate)

    p = sub.add_parser("gradcheck", help="verify loss gradients against finite differences")
    p.add_argument("--config")
    p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, CheckpointIntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
