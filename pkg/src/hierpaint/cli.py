"""
hierpaint command line: phantom generation, per-stage training, hierarchical
inpainting and masked-region evaluation.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
The default torch device comes from HIERPAINT_DEVICE (falls back to cpu).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import BackboneConfig
from .data import (
    PairSettings,
    generate_lesion_mask,
    generate_phantom,
    load_volume,
    read_manifest,
    save_volume,
    transplant_mask,
    write_manifest,
)
from .errors import ConfigurationError, DataError, NumericalError
from .metrics import evaluate_suite
from .orient import AXIAL, CORONAL
from .pipeline import InpaintRequest, run_hierarchical_inpaint
from .resampling import DEFAULT_MARGIN, DEFAULT_Z_MAX
from .training import FULL_ITERATIONS, LR_SCHEDULES, TrainConfig, train_stage

log = logging.getLogger("hierpaint")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
DEVICE_ENV = "HIERPAINT_DEVICE"
NIFTI_SUFFIXES = (".nii", ".nii.gz")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def default_device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")


def _write_config(path: Path, command: str, config: dict) -> Path:
    doc = {"command": command, "version": __version__, "config": config}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _config_path(out: Path) -> Path:
    return out.with_name(out.name + ".config.json")


# -- phantom -------------------------------------------------------------------

def cmd_phantom(args) -> int:
    out = Path(args.out)
    try:
        for sub in ("images", "masks", "labels"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    shape = tuple(args.shape)
    entries = []
    for i, child in enumerate(np.random.SeedSequence(args.seed).spawn(args.count)):
        phantom_seed = int(child.generate_state(1)[0])
        vol, labels = generate_phantom(phantom_seed, shape, tuple(args.spacing))
        rng = np.random.default_rng(child)
        mask = transplant_mask(vol, generate_lesion_mask(shape, rng), rng)
        name = f"phantom_{i:03d}.nii.gz"
        save_volume(vol, out / "images" / name)
        save_volume(vol.with_array(mask), out / "masks" / name)
        save_volume(labels, out / "labels" / name)
        entries.append({"image": f"images/{name}", "mask": f"masks/{name}", "labels": f"labels/{name}", "seed": phantom_seed})
    write_manifest(out / "manifest.json", entries)
    _write_config(out / "run_config.json", "phantom", vars(args) | {"func": None})
    log.info("wrote %d phantoms to %s", args.count, out)
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _load_training_set(manifest):
    entries = read_manifest(manifest)
    vols = [load_volume(e["image"]) for e in entries]
    masks = [load_volume(e["mask"]).array > 0 for e in entries]
    return vols, masks


def build_train_config(args) -> TrainConfig:
    if args.use_tam and args.stage != CORONAL:
        raise UsageError("--use-tam applies to the coronal stage only")
    backbone = BackboneConfig(base_channels=args.base_channels, use_tam=bool(args.use_tam))
    pairs = PairSettings(
        z_max=args.zmax, chunk=args.chunk, margin=args.margin, factor_range=(args.factor_min, args.factor_max)
    )
    return TrainConfig(
        stage=args.stage,
        iterations=args.iterations,
        learning_rate=args.lr,
        lr_schedule=args.lr_schedule,
        seed=args.seed,
        save_every=args.save_every,
        blur_sigma=args.blur_sigma,
        pairs=pairs,
        backbone=backbone,
    )


def cmd_train(args) -> int:
    config = build_train_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    loss_log = Path(args.loss_log) if args.loss_log else out.with_name(out.name + ".loss.csv")
    vols, masks = _load_training_set(args.manifest)
    _write_config(
        _config_path(out),
        "train",
        {"train": config.to_dict(), "manifest": str(args.manifest), "device": args.device, "loss_log": str(loss_log)},
    )
    train_stage(vols, masks, config, checkpoint=out, loss_log=loss_log, resume=args.resume, device=args.device)
    log.info("checkpoint written to %s", out)
    return EXIT_OK


# -- inpaint -------------------------------------------------------------------

def cmd_inpaint(args) -> int:
    if not args.stage1_only and not args.stage2:
        raise UsageError("--stage2 is required unless --stage1-only is given")
    vol = load_volume(args.input)
    mask = load_volume(args.mask).array > 0
    request = InpaintRequest(
        vol,
        mask,
        stage1=args.stage1,
        stage2=None if args.stage1_only else args.stage2,
        steps=args.steps,
        z_max=args.zmax,
        chunk=args.chunk,
        overlap=args.overlap,
        margin=args.margin,
        refine_blur=args.refine_blur,
        seed=args.seed,
        stage1_only=args.stage1_only,
        device=args.device,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    _write_config(_config_path(out), "inpaint", config)
    truth = load_volume(args.truth) if args.truth else None
    labels = load_volume(args.labels).array if args.labels else None
    result = run_hierarchical_inpaint(request, truth=truth, truth_labels=labels)
    save_volume(result.volume, out)
    if result.report is not None and args.report:
        result.report.save(args.report)
    log.info("inpainted volume written to %s", out)
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def _nifti_files(directory: Path) -> list:
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.name.endswith(NIFTI_SUFFIXES))


def _partner(directory: Path, name: str, role: str) -> Path:
    path = directory / name
    if not path.exists():
        raise DataError(f"missing {role} file for {name}: {path}")
    return path


def cmd_eval(args) -> int:
    pred_dir, truth_dir, mask_dir = Path(args.pred_dir), Path(args.truth_dir), Path(args.mask_dir)
    labels_dir = Path(args.labels_dir) if args.labels_dir else None
    preds = _nifti_files(pred_dir)
    if not preds:
        raise DataError(f"{pred_dir}: no NIfTI predictions found")
    p_arrs, t_arrs, m_arrs, l_arrs, names = [], [], [], [], []
    for p in preds:
        p_arrs.append(load_volume(p).array)
        t_arrs.append(load_volume(_partner(truth_dir, p.name, "truth")).array)
        m_arrs.append(load_volume(_partner(mask_dir, p.name, "mask")).array > 0)
        if labels_dir is not None:
            l_arrs.append(load_volume(_partner(labels_dir, p.name, "labels")).array)
        names.append(p.name)
    report = evaluate_suite(p_arrs, t_arrs, m_arrs, l_arrs if labels_dir else None, names=names, peak=args.peak)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    _write_config(_config_path(out), "eval", {k: v for k, v in vars(args).items() if k != "func"})
    for key, agg in report.aggregate.items():
        log.info("%s: %.5f +/- %.5f", key, agg["mean"], agg["std"])
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hierpaint", description="Hierarchical axial/coronal diffusion inpainting of 3D volumes.")
    parser.add_argument("--version", action="version", version=f"hierpaint {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write synthetic phantoms, lesion masks and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--shape", type=int, nargs=3, default=[64, 64, 48], metavar=("X", "Y", "Z"))
    p.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 1.0], metavar=("SX", "SY", "SZ"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one stage's denoiser")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", required=True, choices=[AXIAL, CORONAL])
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--iterations", type=int, default=2000, help=f"desk-scale default; the full schedule is {FULL_ITERATIONS}")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-schedule", choices=LR_SCHEDULES, default="constant")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--use-tam", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--zmax", type=int, default=DEFAULT_Z_MAX)
    p.add_argument("--chunk", type=int, default=16)
    p.add_argument("--margin", type=int, default=DEFAULT_MARGIN)
    p.add_argument("--factor-min", type=float, default=1.0)
    p.add_argument("--factor-max", type=float, default=2.0)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--blur-sigma", type=float, default=1.0)
    p.add_argument("--save-every", type=int, default=500)
    p.add_argument("--loss-log")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--device", default=default_device())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inpaint", help="run hierarchical inpainting on one volume")
    p.add_argument("--input", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--stage1", required=True, help="axial checkpoint")
    p.add_argument("--stage2", help="coronal checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None, help="reverse steps per stage (default: every timestep)")
    p.add_argument("--zmax", type=int, default=DEFAULT_Z_MAX)
    p.add_argument("--chunk", type=int, default=16)
    p.add_argument("--overlap", type=int, default=4)
    p.add_argument("--margin", type=int, default=DEFAULT_MARGIN)
    p.add_argument("--refine-blur", type=float, default=1.0, help="sigma of the blur applied to the coarse result (0 disables)")
    p.add_argument("--stage1-only", action="store_true")
    p.add_argument("--truth", help="ground-truth volume for an inline metrics report")
    p.add_argument("--labels", help="ground-truth tissue labels for Dice")
    p.add_argument("--report", help="where to write the inline metrics report")
    p.add_argument("--device", default=default_device())
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("eval", help="masked metrics over a directory of predictions")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--truth-dir", required=True)
    p.add_argument("--mask-dir", required=True)
    p.add_argument("--labels-dir")
    p.add_argument("--report", required=True)
    p.add_argument("--peak", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"hierpaint: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"hierpaint: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"hierpaint: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
