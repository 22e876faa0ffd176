"""``condsr`` command line: make-dataset, cache-conditions, train, sample, eval.

Every command writes ``<command>.config.json`` (the effective settings) into
its output directory. Failures exit nonzero after printing one line to
stderr of the form ``condsr-error<TAB><category><TAB><message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from dataclasses import fields
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint
from .conditioning import BICUBIC, EXTERNAL, ConditionError, ConditionSource, cache_conditions, condition_for
from .denoiser import ArchitectureConfig, UNet, UNetDenoiser
from .diffusion import sample
from .image import (ImageLoadError, ManifestEntry, bicubic_resize, load_image,
                    patch_origins, read_manifest, save_image, to_unit, write_manifest,
                    ImageTensor)
from .metrics import Protocol, evaluate, write_report
from .plotting import plot_eval_report, plot_loss_curve
from .schedule import make_cosine_schedule, subsample_timesteps
from .training import TrainConfig, TrainingError, train_loop

log = logging.getLogger("condsr")

EXIT_CODES = {"usage": 2, "input": 3, "checkpoint": 4, "training": 5, "io": 6}


class CommandError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def snapshot(out_dir: Path, command: str, settings: dict) -> Path:
    path = Path(out_dir) / f"{command}.config.json"
    path.write_text(json.dumps(settings, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")
    return path


def cmd_make_dataset(hr_dir, scale: int, patch: int, stride: int, out_dir) -> Path:
    """Crop HR patches, bicubic-downscale them, write pairs and a manifest."""
    hr_dir, out_dir = Path(hr_dir), Path(out_dir)
    if scale < 2 or patch % scale:
        raise CommandError("input", f"patch {patch} must be a multiple of scale {scale} >= 2")
    sources = sorted(hr_dir.glob("*.png"))
    (out_dir / "hr").mkdir(parents=True, exist_ok=True)
    (out_dir / "lr").mkdir(parents=True, exist_ok=True)
    entries, bad = [], []
    for src in sources:
        try:
            img = load_image(src)
            origins = patch_origins(img.height, img.width, patch, stride)
        except (ImageLoadError, ValueError) as exc:
            bad.append(f"{src.name} ({exc})")
            continue
        for r, c in origins:
            pid = f"{src.stem}_{r:04d}_{c:04d}"
            hr = ImageTensor(img.data[:, r:r + patch, c:c + patch], img.range_tag)
            lr = bicubic_resize(hr, patch // scale, patch // scale)
            hr_path, lr_path = out_dir / "hr" / f"{pid}.png", out_dir / "lr" / f"{pid}.png"
            save_image(hr, hr_path)
            save_image(lr, lr_path)
            entries.append(ManifestEntry(pid, hr_path, lr_path, scale))
    if bad:
        raise CommandError("input", "unreadable inputs: " + "; ".join(bad))
    if not entries:
        raise CommandError("input", f"no patches produced from {hr_dir}")
    snapshot(out_dir, "make-dataset", {"hr_dir": hr_dir, "scale": scale, "patch": patch,
                                       "stride": stride, "out_dir": out_dir})
    return write_manifest(entries, out_dir / "manifest.tsv")


def cmd_cache_conditions(manifest, source: ConditionSource, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot(out_dir, "cache-conditions", {"manifest": manifest, "condition": source.describe()})
    return cache_conditions(source, read_manifest(manifest), out_dir)


def cmd_train(config: TrainConfig, arch: ArchitectureConfig, manifest, source: ConditionSource,
              out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot(out_dir, "train", {"train": config.to_dict(), "arch": arch.to_dict(),
                                "manifest": manifest, "condition": source.describe(),
                                "threads": torch.get_num_threads()})
    ckpt = train_loop(config, arch, manifest, source, out_dir)
    plot_loss_curve(out_dir / "loss.log", out_dir / "loss.png")
    return ckpt


def cmd_sample(checkpoint, lr_dir, source: ConditionSource, inference_steps: int, seed: int,
               out_dir, scale: int = 4) -> list[Path]:
    """Super-resolve every PNG in ``lr_dir``; outputs keep the input stem."""
    out_dir = Path(out_dir)
    try:
        arch, T, params = load_checkpoint(checkpoint)
    except (CheckpointError, OSError) as exc:
        raise CommandError("checkpoint", str(exc)) from exc
    schedule = make_cosine_schedule(T)
    steps = subsample_timesteps(schedule, inference_steps)
    denoiser = UNetDenoiser(UNet(arch, T), params)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot(out_dir, "sample", {"checkpoint": checkpoint, "lr_dir": lr_dir, "scale": scale,
                                 "condition": source.describe(), "inference_steps": inference_steps,
                                 "seed": seed, "T": T, "arch": arch.to_dict(),
                                 "threads": torch.get_num_threads()})
    outputs, missing = [], []
    for path in sorted(Path(lr_dir).glob("*.png")):
        lr = load_image(path)
        if lr.channels != arch.image_channels:
            raise CommandError("checkpoint", f"{path.name} has {lr.channels} channels, "
                               f"checkpoint expects {arch.image_channels}")
        try:
            cond = condition_for(source, lr, scale, path.stem)
        except ConditionError as exc:
            missing.append(str(exc))
            continue
        sr = sample(denoiser, cond, schedule, steps, seed)
        target = out_dir / f"{path.stem}.png"
        save_image(to_unit(sr), target)
        outputs.append(target)
    if missing:
        raise CommandError("input", "; ".join(missing))
    return outputs


def cmd_eval(sr_dir, hr_dir, protocol: Protocol, out_dir, lpips_command=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate(sr_dir, hr_dir, protocol, lpips_command)
    write_report(report, out_dir)
    plot_eval_report(report, out_dir / "report.png")
    snapshot(out_dir, "eval", {"sr_dir": sr_dir, "hr_dir": hr_dir, "color": protocol.color,
                               "crop": protocol.crop, "lpips_command": lpips_command})
    return report


def _add_condition_args(p):
    p.add_argument("--condition", choices=[BICUBIC, EXTERNAL], default=BICUBIC)
    p.add_argument("--condition-dir", type=Path, help="directory of <id>.png condition images")
    p.add_argument("--condition-map", type=Path, help="TSV of id<TAB>path overriding --condition-dir")


def _source(args) -> ConditionSource:
    if args.condition == BICUBIC:
        return ConditionSource(BICUBIC)
    return ConditionSource.external(args.condition_dir, args.condition_map)


TRAIN_FLAGS = {
    "steps": "total_steps", "batch_size": "batch_size", "lr": "learning_rate",
    "seed": "seed", "checkpoint_every": "checkpoint_every", "scale": "scale",
    "patch_size": "patch_size", "T": "T", "grad_clip": "grad_clip",
    "adam_beta1": "adam_beta1", "adam_beta2": "adam_beta2", "adam_eps": "adam_eps",
}
ARCH_FLAGS = ("base_channels", "channel_multipliers", "num_res_blocks",
              "time_embedding_dim", "image_channels")


def _train_configs(args) -> tuple[TrainConfig, ArchitectureConfig]:
    """Config file values, then flags on top."""
    raw = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    train_raw, arch_raw = dict(raw.get("train", {})), dict(raw.get("arch", {}))
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(train_raw) - known
    if unknown:
        raise CommandError("input", f"unknown train config keys: {sorted(unknown)}")
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            train_raw[key] = value
    for key in ARCH_FLAGS:
        value = getattr(args, key)
        if value is not None:
            arch_raw[key] = value
    return TrainConfig(**train_raw), ArchitectureConfig(**arch_raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condsr", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1,
                        help="torch intra-op threads (results are reproducible per thread count)")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="crop HR patches and synthesize bicubic LR pairs")
    p.add_argument("--hr-dir", type=Path, required=True)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--stride", type=int, default=64)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("cache-conditions", help="materialize condition images for a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    _add_condition_args(p)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("train", help="train the conditional denoiser")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--config", type=Path, help='JSON file {"train": {...}, "arch": {...}}')
    _add_condition_args(p)
    for flag in TRAIN_FLAGS:
        kind = int if flag in ("steps", "batch_size", "seed", "checkpoint_every", "scale",
                               "patch_size", "T") else float
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=kind)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--channel-multipliers", type=lambda s: tuple(int(v) for v in s.split(",")))
    p.add_argument("--num-res-blocks", type=int)
    p.add_argument("--time-embedding-dim", type=int)
    p.add_argument("--image-channels", type=int)

    p = sub.add_parser("sample", help="super-resolve LR images with a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--lr-dir", type=Path, required=True)
    p.add_argument("--scale", type=int, default=4)
    _add_condition_args(p)
    p.add_argument("--inference-steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("eval", help="PSNR/SSIM report for SR images against HR references")
    p.add_argument("--sr-dir", type=Path, required=True)
    p.add_argument("--hr-dir", type=Path, required=True)
    p.add_argument("--color", choices=["rgb", "y"], default="rgb")
    p.add_argument("--scale", type=int, default=4, help="default border crop")
    p.add_argument("--crop", type=int, help="border crop in pixels (default: --scale)")
    p.add_argument("--lpips-cmd", help="external LPIPS command; called with SR and HR paths appended")
    p.add_argument("--out-dir", type=Path, required=True)
    return parser


def run(args) -> None:
    if args.command == "make-dataset":
        print(cmd_make_dataset(args.hr_dir, args.scale, args.patch, args.stride, args.out_dir))
    elif args.command == "cache-conditions":
        print(cmd_cache_conditions(args.manifest, _source(args), args.out_dir))
    elif args.command == "train":
        config, arch = _train_configs(args)
        print(cmd_train(config, arch, args.manifest, _source(args), args.out_dir))
    elif args.command == "sample":
        for path in cmd_sample(args.checkpoint, args.lr_dir, _source(args), args.inference_steps,
                               args.seed, args.out_dir, args.scale):
            print(path)
    elif args.command == "eval":
        crop = args.scale if args.crop is None else args.crop
        lpips = shlex.split(args.lpips_cmd) if args.lpips_cmd else None
        report = cmd_eval(args.sr_dir, args.hr_dir, Protocol(args.color, crop), args.out_dir, lpips)
        sys.stdout.write(report.human_text())


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    try:
        run(args)
    except CommandError as exc:
        category, message = exc.category, str(exc)
    except CheckpointError as exc:
        category, message = "checkpoint", str(exc)
    except TrainingError as exc:
        category, message = "training", str(exc)
    except (ValueError, LookupError, ImageLoadError, FileNotFoundError) as exc:
        category, message = "input", str(exc)
    except OSError as exc:
        category, message = "io", str(exc)
    else:
        return 0
    print(f"condsr-error\t{category}\t{' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
