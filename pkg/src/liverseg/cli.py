"""Command-line entry points: phantom, train, infer, eval, dump-config.

Exit codes: 0 success, 2 usage error (bad flags or config keys), 3 data
error (missing or inconsistent files, stage order violations, per-case
failures), 4 numeric failure (non-finite gradients).
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from liverseg import checkpoint, metrics
from liverseg.config import ConfigError, RunConfig
from liverseg.fusion import HybridModel
from liverseg.nets import PRESETS, DenseUNet
from liverseg.phantom import PhantomSpec, generate_phantom
from liverseg.pipeline import InferenceSettings, infer_case
from liverseg.train import (
    ALL_STAGES,
    NumericError,
    checkpoint_path,
    split_checkpoint_arrays,
    train_command,
)
from liverseg.volume import (
    CaseEntry,
    VolumeError,
    hu_window,
    normalize_windowed,
    read_manifest,
    read_volume,
    write_manifest,
    write_volume,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.apply_file(args.config)
    cfg.apply(getattr(args, "set", None) or [])
    return cfg


def cmd_phantom(args):
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    extents = tuple(int(v) for v in args.extents.split(","))
    spacing = tuple(float(v) for v in args.spacing.split(","))
    cases = []
    for i in range(args.count):
        spec = PhantomSpec(
            seed=args.seed + i,
            extents=extents,
            spacing=spacing,
            noise_hu=args.noise_hu,
            blur_fraction=args.blur_fraction,
        )
        image, labels = generate_phantom(spec)
        case_id = f"case_{i:03d}"
        write_volume(image, os.path.join(args.out, case_id + ".img"))
        write_volume(labels, os.path.join(args.out, case_id + ".seg"))
        cases.append(CaseEntry(case_id, case_id + ".img", case_id + ".seg", args.split))
    write_manifest(os.path.join(args.out, "manifest.tsv"), cases)
    print(f"wrote {args.count} cases to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    train_command(args.manifest, cfg, args.stage, args.out, max_iterations=args.max_iterations)
    return EXIT_OK


def load_inference_bundle(model_dir, run_cfg):
    """Best available fine model (hybrid preferred) plus the optional coarse
    localizer, built from the configs recorded in their checkpoints."""
    order = ["joint", "stage3d_hff", "stage2d", "warmup2d"]
    fine_path = None
    for stage in order:
        p = checkpoint_path(model_dir, stage)
        if os.path.exists(p):
            fine_path = p
            break
    if fine_path is None:
        raise FileNotFoundError(f"no model checkpoint found in {model_dir} (looked for {order})")
    arrays, meta = checkpoint.load_arrays(fine_path)
    ckpt_cfg = RunConfig.from_dict(meta.get("config", {}))
    bn = dict(bn_epsilon=ckpt_cfg.bn_epsilon, bn_momentum=ckpt_cfg.bn_momentum)
    if meta.get("stage") in ("joint", "stage3d_hff"):
        model = HybridModel(PRESETS[ckpt_cfg.model_2d], PRESETS[ckpt_cfg.model_3d], **bn)
    else:
        model = DenseUNet(PRESETS[ckpt_cfg.model_2d], prefix="2d/", **bn)
    params, _ = split_checkpoint_arrays(arrays)
    model.params.load_arrays(params, strict=True)

    coarse_net = None
    coarse_path = checkpoint_path(model_dir, "coarse")
    if os.path.exists(coarse_path):
        arrays, meta = checkpoint.load_arrays(coarse_path)
        ccfg = RunConfig.from_dict(meta.get("config", {}))
        coarse_net = DenseUNet(
            PRESETS[ccfg.coarse_model], prefix="coarse/",
            bn_epsilon=ccfg.bn_epsilon, bn_momentum=ccfg.bn_momentum,
        )
        params, _ = split_checkpoint_arrays(arrays)
        coarse_net.params.load_arrays(params, strict=True)
    return model, coarse_net


_ENGINE = None


def _infer_one(task):
    case_id, image_path, out_dir, overlays, settings = task
    model, coarse_net = _ENGINE
    image = read_volume(image_path)
    labels, info = infer_case(image, model, settings, coarse_net=coarse_net)
    write_volume(labels, os.path.join(out_dir, case_id + ".seg"))
    if overlays:
        _write_overlays(image, labels.data, os.path.join(out_dir, "overlays", case_id), settings)
    return case_id, info


def _write_overlays(image, labels, out_dir, settings):
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    windowed = hu_window(image, settings.hu_lo, settings.hu_hi)
    gray = (normalize_windowed(windowed.data, settings.hu_lo, settings.hu_hi) * 255).astype(np.uint8)
    for z in range(gray.shape[2]):
        rgb = np.stack([gray[:, :, z]] * 3, axis=-1).astype(np.float32)
        liver = labels[:, :, z] == 1
        tumor = labels[:, :, z] == 2
        rgb[liver] = 0.5 * rgb[liver] + 0.5 * np.array([255.0, 0.0, 0.0])
        rgb[tumor] = 0.5 * rgb[tumor] + 0.5 * np.array([0.0, 255.0, 0.0])
        Image.fromarray(rgb.astype(np.uint8)).save(os.path.join(out_dir, f"slice_{z:03d}.png"))


def cmd_infer(args):
    global _ENGINE
    cfg = _load_config(args)
    manifest = read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    _ENGINE = load_inference_bundle(args.model, cfg)
    settings = InferenceSettings(
        tau_liver=cfg.tau_liver,
        tau_tumor=cfg.tau_tumor,
        decide_mode=cfg.decide_mode,
        roi_margin=cfg.roi_margin,
        connectivity=cfg.connectivity,
        fill_holes=cfg.fill_holes,
        coarse_spacing=cfg.coarse_spacing,
        hu_lo=cfg.hu_window_lo,
        hu_hi=cfg.hu_window_hi,
    )
    tasks = [(c.case_id, c.image, args.out, args.overlays, settings) for c in manifest.cases]
    failures = 0
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for task, result in zip(tasks, pool.map(_try_infer_one, tasks)):
                failures += _report_case(task[0], result)
    else:
        for task in tasks:
            failures += _report_case(task[0], _try_infer_one(task))
    if failures:
        print(f"{failures} case(s) failed", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _try_infer_one(task):
    try:
        return _infer_one(task)
    except Exception as e:  # keep the run going; nonzero exit at the end
        return e


def _report_case(case_id, result):
    if isinstance(result, Exception):
        print(f"{case_id}: FAILED: {result}", file=sys.stderr)
        return 1
    _, info = result
    print(f"{case_id}: ok ({info['roi']})")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    manifest = read_manifest(args.manifest)
    entries = []
    spacing = {}
    mismatched = []
    for c in manifest.cases:
        truth = read_volume(c.label)
        pred_path = os.path.join(args.pred, c.case_id + ".seg")
        try:
            pred = read_volume(pred_path)
        except (FileNotFoundError, VolumeError) as e:
            mismatched.append((c.case_id, str(e)))
            continue
        if pred.extents != truth.extents:
            mismatched.append(
                (c.case_id, f"prediction extents {pred.extents} != truth {truth.extents}")
            )
            continue
        spacing[c.case_id] = truth.spacing
        entries.append((c.case_id, truth.data, pred.data))
    report = metrics.evaluate_cases(entries, spacing) if entries else None
    with open(args.out, "w") as f:
        if report is not None:
            f.write(metrics.format_report(report))
        for case_id, why in mismatched:
            f.write(f"# skipped {case_id}: {why}\n")
    print(f"wrote {args.out}")
    for case_id, why in mismatched:
        print(f"{case_id}: skipped: {why}", file=sys.stderr)
    return EXIT_DATA if mismatched else EXIT_OK


def cmd_dump_config(args):
    cfg = _load_config(args)
    sys.stdout.write(cfg.dump())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="liverseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_config_flags(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config value (repeatable)")

    sp = sub.add_parser("phantom", help="generate synthetic cases and a manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--extents", default="64,64,16")
    sp.add_argument("--spacing", default="1.0,1.0,2.5")
    sp.add_argument("--noise-hu", type=float, default=8.0)
    sp.add_argument("--blur-fraction", type=float, default=0.3)
    sp.add_argument("--split", default="train")
    add_config_flags(sp)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("train", help="train one stage")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stage", required=True, choices=ALL_STAGES)
    sp.add_argument("--max-iterations", type=int, default=None,
                    help="stop after this many iterations (resumable)")
    add_config_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="segment every case in a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--model", required=True, help="directory holding stage checkpoints")
    sp.add_argument("--out", required=True)
    sp.add_argument("--overlays", action="store_true",
                    help="write per-slice PNGs, liver red / tumor green")
    add_config_flags(sp)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score predictions against a manifest")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    add_config_flags(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("dump-config", help="print every config default")
    add_config_flags(sp)
    sp.set_defaults(func=cmd_dump_config)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, VolumeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        traceback.print_exc()
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
