"""Command-line entry points: train, enhance, eval, degrade, make-synth.

Runs are driven by a flat TOML config (unknown keys are rejected) plus a
single seed; every command writes a manifest with enough information to
reproduce it. Exit codes: 0 success, 1 usage/config error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .data import DegradationSpec, load_paired_dataset, read_image, write_image
from .metrics import evaluate_pairs
from .nets import ModelConfig
from .sampling import sample
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, build_schedule, select_substeps
from .training import (
    Checkpoint,
    TrainConfig,
    TrainingDiverged,
    restore_models,
    train_stage1,
    train_stage2,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset_root: Path
    checkpoint_dir: Path
    output_dir: Path
    train: TrainConfig
    model: ModelConfig
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END


_PATH_KEYS = ("dataset_root", "checkpoint_dir", "output_dir")
_MODEL_KEYS = ("base_width", "enc_width")
_SCHEDULE_KEYS = ("T", "beta_start", "beta_end")
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def load_run_config(path: Path) -> RunConfig:
    try:
        raw = tomllib.loads(path.read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    known = set(_PATH_KEYS) | set(_MODEL_KEYS) | set(_SCHEDULE_KEYS) | set(_TRAIN_KEYS)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key in _PATH_KEYS:
        if key not in raw:
            raise ConfigError(f"missing required config key: {key}")
    base = path.parent
    train_kwargs = {k: raw[k] for k in _TRAIN_KEYS if k in raw}
    if "lr_milestones" in train_kwargs:
        train_kwargs["lr_milestones"] = tuple(train_kwargs["lr_milestones"])
    model_kwargs = {k: raw[k] for k in _MODEL_KEYS if k in raw}
    sched_kwargs = {k: raw[k] for k in _SCHEDULE_KEYS if k in raw}
    try:
        train = TrainConfig(**train_kwargs)
        model = ModelConfig(**model_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out_dir = Path(os.environ.get("RELIGHT_OUTPUT_DIR", raw["output_dir"]))
    return RunConfig(
        dataset_root=(base / raw["dataset_root"]).resolve(),
        checkpoint_dir=(base / raw["checkpoint_dir"]).resolve(),
        output_dir=(base / out_dir).resolve(),
        train=train,
        model=model,
        **sched_kwargs,
    )


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(directory: Path, name: str, payload: dict):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / name).write_text(json.dumps(payload, indent=2, default=str))


def _pad_to_multiple(y: np.ndarray, multiple: int = 8):
    h, w = y.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        y = np.pad(y, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return y, (h, w)


def cmd_train(args) -> int:
    cfg = load_run_config(Path(args.config))
    dataset = load_paired_dataset(cfg.dataset_root)
    schedule = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    log_path = cfg.checkpoint_dir / f"stage{args.stage}_loss.csv"
    out_path = cfg.checkpoint_dir / f"stage{args.stage}.pt"

    resume = Checkpoint.load(args.resume) if args.resume else None
    if args.stage == 1:
        ckpt, _ = train_stage1(
            cfg.train, dataset, schedule=schedule, model_config=cfg.model,
            resume=resume, log_path=log_path,
        )
    else:
        if resume is None:
            stage1_path = cfg.checkpoint_dir / "stage1.pt"
            if not stage1_path.exists():
                raise FileNotFoundError(
                    f"stage 2 needs a stage-1 checkpoint; none found at {stage1_path}"
                )
            resume = Checkpoint.load(stage1_path)
        ckpt, _ = train_stage2(cfg.train, resume, dataset, log_path=log_path)
    ckpt.save(out_path)
    _write_manifest(
        cfg.checkpoint_dir,
        f"stage{args.stage}_manifest.json",
        {
            "command": "train",
            "stage": args.stage,
            "config": str(Path(args.config).resolve()),
            "seed": cfg.train.seed,
            "iterations": ckpt.iteration,
            "checkpoint": str(out_path),
        },
    )
    print(f"wrote {out_path} at iteration {ckpt.iteration}")
    return 0


def _list_images(directory: Path) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in exts)


def cmd_enhance(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ckpt = Checkpoint.load(ckpt_path)
    encoder, _, denoiser = restore_models(ckpt, use_ema=True)
    schedule = ckpt.schedule()
    steps = select_substeps(schedule.T, min(args.steps, schedule.T))
    in_dir, out_dir = Path(args.input_dir), Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for k, path in enumerate(_list_images(in_dir)):
        y, (h, w) = _pad_to_multiple(read_image(path))
        yt = torch.as_tensor(y.transpose(2, 0, 1), dtype=torch.float32)[None]
        # independent per-image stream derived from (seed, index)
        out = sample(
            yt, encoder, denoiser, schedule, steps, seed=args.seed + k,
            use_color_map=ckpt.train_config.use_color_map,
        )
        img = out[0].numpy().transpose(1, 2, 0)[:h, :w]
        write_image(out_dir / f"{path.stem}.png", img)
        results.append(path.name)
    _write_manifest(
        out_dir,
        "manifest.json",
        {
            "command": "enhance",
            "checkpoint": str(ckpt_path),
            "checkpoint_sha256": _file_hash(ckpt_path),
            "steps": args.steps,
            "seed": args.seed,
            "images": results,
        },
    )
    print(f"enhanced {len(results)} images -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    preds = {p.stem: p for p in _list_images(pred_dir)}
    gts = {p.stem: p for p in _list_images(gt_dir)}
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        raise FileNotFoundError(f"unmatched filenames: {', '.join(missing)}")
    report = evaluate_pairs(
        [(i, read_image(preds[i]), read_image(gts[i])) for i in sorted(preds)]
    )
    out = Path(args.output) if args.output else pred_dir / "metrics.csv"
    out.write_text(report.to_csv())
    print(report.summary())
    return 0


def cmd_degrade(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    encoder, dgnet, _ = restore_models(ckpt)
    pairs = load_paired_dataset(Path(args.input_root))
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        x = torch.as_tensor(pair.high.transpose(2, 0, 1), dtype=torch.float32)[None]
        y = torch.as_tensor(pair.low.transpose(2, 0, 1), dtype=torch.float32)[None]
        with torch.no_grad():
            synth = dgnet(x, encoder(y))
        write_image(out_dir / f"{pair.id}.png", synth[0].numpy().transpose(1, 2, 0))
    _write_manifest(
        out_dir,
        "manifest.json",
        {
            "command": "degrade",
            "checkpoint": str(args.checkpoint),
            "checkpoint_sha256": _file_hash(Path(args.checkpoint)),
            "images": [p.id for p in pairs],
        },
    )
    print(f"degraded {len(pairs)} images -> {out_dir}")
    return 0


def cmd_make_synth(args) -> int:
    spec = DegradationSpec(
        gamma=args.gamma, gain=args.gain, noise_sigma=args.sigma, seed=args.seed
    )
    ids = data_mod.make_synth_dataset(Path(args.clean_dir), Path(args.out_root), spec)
    print(f"wrote {len(ids)} pairs under {args.out_root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relight")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training stage")
    p.add_argument("config")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a directory of low-light images")
    p.add_argument("checkpoint")
    p.add_argument("input_dir")
    p.add_argument("output_dir")
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("degrade", help="run the learned degradation on a paired set")
    p.add_argument("checkpoint")
    p.add_argument("input_root")
    p.add_argument("output_dir")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("make-synth", help="build a synthetic paired dataset")
    p.add_argument("clean_dir")
    p.add_argument("out_root")
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--gain", type=float, default=0.3)
    p.add_argument("--sigma", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synth)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("RELIGHT_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
