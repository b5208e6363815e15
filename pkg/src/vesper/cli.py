"""Command-line entry point.

Conventions: stdout carries exactly one JSON document per invocation,
everything meant for humans goes to stderr, and exit codes are 0 (ok),
2 (config or contract problem), 3 (I/O or parse problem). Argparse's own
usage failures also exit 2.

Seed resolution, everywhere a seed matters: --seed flag, then the
VESPER_SEED environment variable, then the config file or built-in
default.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .audio import (
    SAMPLE_RATE,
    ManifestEntry,
    crop_or_pad,
    energy_profile,
    load_manifest,
    load_wav,
    save_manifest,
    write_wav,
)
from .checkpoint import (
    InitStrategy,
    averaging_map,
    base_metadata,
    extraction_map,
    init_student,
    load_checkpoint,
    random_map,
    save_checkpoint,
    save_state,
    state_from_checkpoint,
)
from .config import load_run_config
from .downstream import (
    ClassifierConfig,
    RepresentationMode,
    SplitMode,
    compute_metrics,
    evaluate,
)
from .encoder import Role, forward, flops_estimate, param_count, preset
from .errors import ConfigError, ContractViolation, IOFailure, ManifestError, VesperError
from .masking import Strategy, build_plan, pitch_change_scores
from .report import read_log, render_run_report
from .trainer import finetune_loop, pretrain_loop

_MODES = {"weighted": RepresentationMode.WEIGHTED, "last": RepresentationMode.LAST_LAYER_ONLY}
_SPLITS = {"speaker": SplitMode.BY_SPEAKER, "random": SplitMode.RANDOM}
_EVAL_SPLITS = {"eval", "test", "dev", "valid"}


def _say(text: str):
    print(text, file=sys.stderr)


def _seed_override(args) -> int | None:
    """--seed beats VESPER_SEED; None means fall through to the config."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("VESPER_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"VESPER_SEED must be an integer, got {env!r}") from exc


def _train_overrides(args) -> dict | None:
    seed = _seed_override(args)
    return {"train": {"seed": seed}} if seed is not None else None


def _load_state(path, trainable: bool = True):
    return state_from_checkpoint(load_checkpoint(path), trainable=trainable)


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_init(args) -> dict:
    n = args.layers
    if n < 2 or n % 2:
        raise ConfigError(f"N must be even and positive, got {n}")
    seed = _seed_override(args) or 0
    ckpt = load_checkpoint(args.teacher)
    teacher_cfg = ckpt.config
    if teacher_cfg is None:
        raise ContractViolation("teacher checkpoint has no embedded config")
    m = teacher_cfg.num_layers
    strategy = InitStrategy(args.strategy)
    if strategy is InitStrategy.EXTRACTION:
        mapping = extraction_map(n, m)
    elif strategy is InitStrategy.AVERAGING:
        mapping = averaging_map(n, m)
    else:
        mapping = random_map(n)
    student_cfg = replace(teacher_cfg, num_layers=n, role=Role.STUDENT)
    state = init_student(ckpt, student_cfg, mapping, seed=seed)
    out = Path(args.out)
    save_state(out, state, kind="encoder", seed=seed, extra={"init_strategy": strategy.value})
    for line in mapping.describe():
        _say(line)
    payload = {
        "strategy": strategy.value,
        "layers": n,
        "teacher_layers": m,
        "out": str(out),
    }
    if mapping.sources is not None:
        payload["sources"] = mapping.sources
    if mapping.ranges is not None:
        payload["ranges"] = [list(r) for r in mapping.ranges]
    return payload


def cmd_pretrain(args) -> dict:
    cfg = load_run_config(args.config, overrides=_train_overrides(args))
    if args.dry_run:
        return {"dry_run": True, "config": cfg.resolved()}
    teacher = _load_state(args.teacher)
    student = _load_state(args.student)
    entries = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    _say(f"pretraining {cfg.train.epochs} epochs over {len(entries)} clips")
    result = pretrain_loop(
        entries, teacher, student, cfg.train, cfg.mask, out_dir=out, log_path=log_path
    )
    steps = [r for r in result.log if r.get("event") == "step"]
    return {
        "out": str(out),
        "log": str(log_path),
        "final_checkpoint": str(result.final_checkpoint),
        "epochs": cfg.train.epochs,
        "steps": len(steps),
        "first_total": steps[0]["total"],
        "final_total": steps[-1]["total"],
    }


def _split_entries(entries: list[ManifestEntry]) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    train = [e for e in entries if e.split == "train"]
    held_out = [e for e in entries if e.split in _EVAL_SPLITS]
    if not train:
        raise ManifestError("manifest has no 'train' entries")
    if not held_out:
        raise ManifestError(
            f"manifest has no held-out entries (split in {sorted(_EVAL_SPLITS)})"
        )
    return train, held_out


def _classifier_config(cfg, backbone, entries, mode_flag) -> ClassifierConfig:
    classes = cfg.downstream.classes or sorted({e.label for e in entries})
    mode = _MODES[mode_flag] if mode_flag else cfg.downstream.mode
    return ClassifierConfig(
        dim=backbone.config.dim,
        class_names=classes,
        hidden=cfg.downstream.hidden,
        mode=mode,
        include_frontend=cfg.downstream.include_frontend,
    )


def cmd_finetune(args) -> dict:
    cfg = load_run_config(args.config, finetune=True, overrides=_train_overrides(args))
    backbone = _load_state(args.student, trainable=False)
    entries = load_manifest(args.manifest)
    train, held_out = _split_entries(entries)
    ccfg = _classifier_config(cfg, backbone, entries, args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "finetune_log.jsonl"
    _say(
        f"fine-tuning on {len(train)} train / {len(held_out)} held-out clips, "
        f"classes {ccfg.class_names}"
    )
    result = finetune_loop(train, held_out, backbone, cfg.train, ccfg, log_path=log_path)
    clf_path = out / "classifier.vspr"
    meta = base_metadata("classifier", seed=cfg.train.seed)
    meta.update(
        {
            "classes": ccfg.class_names,
            "mode": ccfg.mode.value,
            "hidden": ccfg.hidden,
            "dim": ccfg.dim,
            "include_frontend": ccfg.include_frontend,
            "best_epoch": result.best_epoch,
        }
    )
    save_checkpoint(clf_path, {n: p.data for n, p in result.classifier.params.items()}, meta)
    metrics = result.metrics.to_json_dict()
    _write_json(out / "metrics.json", metrics)
    return {
        "out": str(out),
        "classifier": str(clf_path),
        "log": str(log_path),
        "best_epoch": result.best_epoch,
        "metrics": metrics,
    }


def cmd_evaluate(args) -> dict:
    cfg = load_run_config(args.config, finetune=True, overrides=_train_overrides(args))
    backbone = _load_state(args.student, trainable=False)
    entries = load_manifest(args.manifest)
    ccfg = _classifier_config(cfg, backbone, entries, args.mode)
    k = args.k if args.k is not None else cfg.downstream.k
    split = _SPLITS[args.split] if args.split else cfg.downstream.split
    _say(f"{k}-fold {split.value} evaluation over {len(entries)} clips")
    result = evaluate(
        backbone, entries, cfg.train, ccfg, k=k, split=split, seed=cfg.train.seed
    )
    payload = result.to_json_dict()
    if args.out:
        _write_json(Path(args.out), payload)
    return payload


def cmd_inspect_mask(args) -> dict:
    cfg = load_run_config(args.config)
    mask_cfg = cfg.mask
    if args.strategy:
        kw: dict = {"strategy": Strategy(args.strategy)}
        if args.threshold is not None:
            kw["pitch_variation_threshold"] = args.threshold
        mask_cfg = replace(mask_cfg, **kw)
    elif args.threshold is not None:
        mask_cfg = replace(mask_cfg, pitch_variation_threshold=args.threshold)
    seed = _seed_override(args)
    clip = load_wav(args.wav)
    profile = energy_profile(clip)
    scores = (
        pitch_change_scores(clip) if mask_cfg.strategy is Strategy.ENERGY_PITCH else None
    )
    plan = build_plan(mask_cfg, profile, profile.num_frames, seed=seed, scores=scores)
    zone_counts = {z.value: 0 for z in (profile.zones or [])} or {}
    for z in profile.zones or []:
        zone_counts[z.value] += 1
    return {
        "wav": str(args.wav),
        "duration_s": clip.duration_s,
        "frames": profile.num_frames,
        "strategy": mask_cfg.strategy.value,
        "zones": zone_counts,
        "plan": plan.to_json_dict(),
    }


def cmd_export_reps(args) -> dict:
    state = _load_state(args.ckpt, trainable=False)
    clip = load_wav(args.wav)
    if args.duration is not None:
        clip = crop_or_pad(clip, args.duration)
    trace = forward(clip, state)
    tensors = {"x_0": trace.x0.data}
    for i, layer_out in enumerate(trace.layers, start=1):
        tensors[f"layer_{i:02d}"] = layer_out.data
    meta = base_metadata("representations", state.config)
    meta.update({"wav": Path(args.wav).name, "frames": int(trace.x0.data.shape[0])})
    out = Path(args.out)
    save_checkpoint(out, tensors, meta)
    return {
        "out": str(out),
        "tensors": sorted(tensors),
        "frames": int(trace.x0.data.shape[0]),
    }


def cmd_params(args) -> dict:
    if args.preset:
        config = preset(args.preset)
    else:
        config = load_run_config(args.config).encoder
        if config is None:
            raise ConfigError("config has no encoder section")
    samples = round(args.seconds * SAMPLE_RATE)
    frames = config.frame_count(samples)
    params = param_count(config)
    flops = flops_estimate(config, frames)
    _say(f"{params / 1e6:.2f}M parameters, {flops / 1e9:.2f} GFLOPs at {args.seconds} s")
    return {
        "preset": args.preset,
        "layers": config.num_layers,
        "dim": config.dim,
        "seconds": args.seconds,
        "frames": frames,
        "params": params,
        "params_millions": round(params / 1e6, 2),
        "flops": flops,
        "gflops": round(flops / 1e9, 2),
    }


def cmd_report(args) -> dict:
    records = read_log(args.log)
    metrics = None
    if args.metrics:
        try:
            data = json.loads(Path(args.metrics).read_text())
            labels = [c["label"] for c in data["per_class"]]
            confusion = np.array(data["confusion"], dtype=np.int64)
        except OSError as exc:
            raise IOFailure(f"cannot read metrics {args.metrics}: {exc}") from exc
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IOFailure(f"metrics file {args.metrics} is malformed: {exc}") from exc
        metrics = compute_metrics(confusion, labels)
        metrics.mode = data.get("mode")
        metrics.fold = data.get("fold")
    written = render_run_report(records, args.out, metrics=metrics)
    return {"out": str(args.out), "written": [str(p) for p in written]}


def cmd_make_demo(args) -> dict:
    """Self-contained toy corpus: frame-locked tones vs noise, a small
    random teacher, a manifest with train/eval splits, and a matching
    config. Enough to drive every other command end to end."""
    from .encoder import make_state

    if args.clips < 4 or args.clips % 4:
        raise ConfigError(f"--clips must be a positive multiple of 4, got {args.clips}")
    seed = _seed_override(args) or 0
    out = Path(args.out)
    clip_dir = out / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    t = np.arange(int(args.duration * SAMPLE_RATE)) / SAMPLE_RATE
    entries = []
    train_count = args.clips * 3 // 4
    for i in range(args.clips):
        if i % 2 == 0:
            # 250 Hz sits on the 50 Hz frame grid, so the tone survives
            # mean pooling no matter where a frame starts
            amp = 0.5 + 0.05 * (i // 2)
            samples = amp * np.sin(2 * np.pi * 250.0 * t) + 0.01 * rng.standard_normal(len(t))
            label = "tone"
        else:
            samples = 0.35 * rng.standard_normal(len(t))
            label = "noise"
        path = clip_dir / f"clip{i:03d}.wav"
        write_wav(path, np.clip(samples, -0.999, 0.999))
        # relative to the manifest so the directory can move wholesale
        entries.append(
            ManifestEntry(
                path=Path("clips") / path.name,
                label=label,
                speaker=f"spk{i // 2}",
                split="train" if i < train_count else "eval",
            )
        )
    manifest_path = out / "manifest.jsonl"
    save_manifest(manifest_path, entries)

    teacher = make_state(preset("desk-teacher"), seed=seed)
    teacher_path = out / "teacher.vspr"
    save_state(teacher_path, teacher, kind="encoder", seed=seed)

    config = {
        "train": {
            "epochs": 2,
            "warmup_epochs": 1,
            "batch_size": 2,
            "clip_duration_s": args.duration,
            "seed": seed,
        },
        "mask": {
            "phoneme_span_ms": 60,
            "word_span_ms": 100,
            "phoneme_count": 4,
            "word_count": 2,
        },
        "downstream": {"k": 2, "hidden": 16},
    }
    config_path = out / "demo.yaml"
    config_path.write_text(yaml.safe_dump(config, sort_keys=True))
    return {
        "dir": str(out),
        "manifest": str(manifest_path),
        "teacher": str(teacher_path),
        "config": str(config_path),
        "clips": args.clips,
    }


# ---------------------------------------------------------------------------
# parser


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None, help="overrides VESPER_SEED and the config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesper",
        description="Compact emotion-adapted speech encoder toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="compress a teacher checkpoint into a student")
    p.add_argument("--teacher", required=True)
    p.add_argument("--layers", type=int, required=True, help="student layer count N (even)")
    p.add_argument(
        "--strategy",
        choices=[s.value for s in InitStrategy],
        default=InitStrategy.EXTRACTION.value,
    )
    p.add_argument("--out", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("pretrain", help="run masked-prediction adaptation")
    p.add_argument("--config", default=None)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true", help="echo the resolved config and stop")
    _add_seed(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train a classifier head on a frozen backbone")
    p.add_argument("--config", default=None)
    p.add_argument("--student", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=sorted(_MODES), default=None)
    _add_seed(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="k-fold cross-validated classification metrics")
    p.add_argument("--config", default=None)
    p.add_argument("--student", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--split", choices=sorted(_SPLITS), default=None)
    p.add_argument("--mode", choices=sorted(_MODES), default=None)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    _add_seed(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-mask", help="show energy zones and the mask plan for a clip")
    p.add_argument("--wav", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=None)
    p.add_argument("--threshold", type=float, default=None, help="pitch variation threshold")
    _add_seed(p)
    p.set_defaults(func=cmd_inspect_mask)

    p = sub.add_parser("export-reps", help="dump per-layer representations for one clip")
    p.add_argument("--wav", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, default=None, help="crop or pad to this many seconds")
    p.set_defaults(func=cmd_export_reps)

    p = sub.add_parser("params", help="parameter count and analytic FLOPs")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset")
    g.add_argument("--config")
    p.add_argument("--seconds", type=float, default=6.5)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("report", help="render figures and CSV tables from a run log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None, help="metrics JSON for a confusion figure")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-demo", help="write a synthetic corpus, teacher, and config")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--duration", type=float, default=0.5)
    _add_seed(p)
    p.set_defaults(func=cmd_make_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        payload = args.func(args)
    except VesperError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    if payload is not None:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
