"""Command-line surface tying the pipeline together.

Subcommands: gen-data, train, finetune, reenact, novel-view, eval,
grad-check. On failure a machine-readable JSON error is written to stderr
and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import torch

from . import metrics, plotting
from .appearance import IdentityEmbedder
from .config import (load_run_config, make_dataset_config, make_model_config,
                     make_stage_config)
from .geometry import (CameraPose, apply_rectification, pose_from_orbit,
                       rectify_translation)
from .motionmodel import control_signal
from .pipeline import AvatarModel, load_model
from .ppm import read_ppm, write_ppm
from .synthdata import Dataset, generate_dataset, load_dataset, scene_sampling
from .training import (find_frame, finetune_oneshot, train_compensation,
                       train_general, train_teeth)

EVAL_SAMPLES = 128


class CliError(RuntimeError):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint", help="checkpoint file (.nofa)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32",
                   help="numeric precision (f64 is honored by grad-check)")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="volface",
                                 description="one-shot volumetric face avatars on synthetic scenes")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="run a training stage")
    p.add_argument("--stage", required=True, choices=("general", "teeth", "comp"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("finetune", help="one-shot fine-tuning of the compensation network")
    p.add_argument("--source", required=True, help="source frame image path")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("reenact", help="drive a source identity with a clip's motion")
    p.add_argument("--source", required=True)
    p.add_argument("--driving", required=True, help="driving clip id (e.g. 3 or clip_0003)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rectify", action="store_true",
                   help="apply keypoint-based head-translation rectification")
    _add_common(p)

    p = sub.add_parser("novel-view", help="orbit the camera around a reconstruction")
    p.add_argument("--source", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--yaw-range", default="-0.5,0.5")
    p.add_argument("--frames", type=int, default=8)
    _add_common(p)

    p = sub.add_parser("eval", help="score prediction frames against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--data", default=None, help="dataset root for expression recovery")
    p.add_argument("--out", default=None, help="report directory (default <pred>/report)")
    p.add_argument("--no-aed", action="store_true", help="skip expression recovery")
    _add_common(p)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--render-size", type=int, default=4)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--coords", type=int, default=4)
    _add_common(p)
    return ap


def _seed(args, doc) -> int:
    if args.seed is not None:
        return args.seed
    return doc.get("seed", 0)


def _load_required_checkpoint(args) -> tuple[AvatarModel, object]:
    if not args.checkpoint:
        raise CliError("--checkpoint is required for this command")
    return load_model(args.checkpoint)


def cmd_gen_data(args) -> int:
    doc = load_run_config(args.config)
    cfg = make_dataset_config(doc, seed=args.seed)
    ds = generate_dataset(cfg, args.out, progress=not args.quiet)
    if not args.quiet:
        print(f"wrote {len(ds.frames)} frames to {ds.root} (config hash {cfg.hash()})")
    return 0


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    seed = _seed(args, doc)
    stage_name = {"general": "general", "teeth": "refine", "comp": "comp"}[args.stage]
    cfg = make_stage_config(stage_name, doc, steps=args.steps, seed=seed)
    ds = load_dataset(args.data)
    if args.checkpoint and args.stage != "general":
        model, _ = load_model(args.checkpoint)
        if args.stage == "teeth":
            path = train_teeth(model, ds, cfg, args.out, args.checkpoint, quiet=args.quiet)
        else:
            path = train_compensation(model, ds, cfg, args.out, args.checkpoint,
                                      quiet=args.quiet)
    elif args.stage == "general":
        model = AvatarModel(make_model_config(doc, seed))
        path = train_general(model, ds, cfg, args.out, resume_from=args.checkpoint,
                             quiet=args.quiet)
    else:
        raise CliError(f"stage {args.stage!r} requires --checkpoint with the base model")
    if not args.quiet:
        print(f"checkpoint: {path}")
    return 0


def cmd_finetune(args) -> int:
    doc = load_run_config(args.config)
    seed = _seed(args, doc)
    cfg = make_stage_config("finetune", doc, steps=args.steps, seed=seed)
    ds = load_dataset(args.data)
    model, _ = _load_required_checkpoint(args)
    record = find_frame(ds, args.source)
    path = finetune_oneshot(model, ds, record, cfg, args.out, quiet=args.quiet)
    if not args.quiet:
        print(f"checkpoint: {path}")
    return 0


def _parse_clip(ds: Dataset, raw: str) -> int:
    name = raw.removeprefix("clip_")
    try:
        clip = int(name)
    except ValueError as exc:
        raise CliError(f"cannot parse clip id {raw!r}") from exc
    if clip not in ds.clips:
        raise CliError(f"clip {clip} not in dataset ({len(ds.clips)} clips)")
    return clip


def cmd_reenact(args) -> int:
    ds = load_dataset(args.data)
    model, _ = _load_required_checkpoint(args)
    src = find_frame(ds, args.source)
    clip = _parse_clip(ds, args.driving)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    src_img = ds.load_image(src)
    frames_meta = []
    with torch.no_grad():
        for i, frame_idx in enumerate(ds.clips[clip]):
            drv = ds.frames[frame_idx]
            pose = drv.pose
            if args.rectify:
                depth = float(src.pose.translation.norm())
                offset = rectify_translation(src.landmarks, drv.landmarks,
                                             ds.intrinsics, depth)
                pose = apply_rectification(pose, offset)
            signal = control_signal(src.alpha, drv.beta).to(torch.float32)
            cfg = scene_sampling(pose, EVAL_SAMPLES)
            res = model.reenact(src_img, signal, ds.intrinsics, pose, cfg)
            name = f"frame_{i:04d}.ppm"
            write_ppm(out / name, res.rgb)
            frames_meta.append({
                "file": name, "driving_frame": drv.image_path,
                "driving_beta": drv.beta.tolist(),
                "driving_pose": drv.pose.as_vector().tolist(),
                "render_pose": pose.as_vector().tolist(),
            })
    (out / "reenact.json").write_text(json.dumps({
        "kind": "reenact", "dataset_root": str(ds.root.resolve()),
        "source": src.image_path, "source_identity": src.identity_index,
        "driving_clip": clip, "rectified": bool(args.rectify),
        "frames": frames_meta,
    }, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(f"wrote {len(frames_meta)} frames to {out}")
    return 0


def cmd_novel_view(args) -> int:
    ds = load_dataset(args.data)
    model, _ = _load_required_checkpoint(args)
    src = find_frame(ds, args.source)
    try:
        lo, hi = (float(x) for x in args.yaw_range.split(","))
    except ValueError as exc:
        raise CliError(f"--yaw-range must be 'lo,hi', got {args.yaw_range!r}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    src_img = ds.load_image(src)
    radius = float(src.pose.translation.norm())
    signal = control_signal(src.alpha, src.beta).to(torch.float32)
    frames_meta = []
    with torch.no_grad():
        for i in range(args.frames):
            yaw = lo + (hi - lo) * i / max(args.frames - 1, 1)
            pose = pose_from_orbit(yaw, 0.0, radius)
            cfg = scene_sampling(pose, EVAL_SAMPLES)
            res = model.reenact(src_img, signal, ds.intrinsics, pose, cfg)
            name = f"frame_{i:04d}.ppm"
            write_ppm(out / name, res.rgb)
            frames_meta.append({"file": name, "yaw": yaw})
    (out / "novel_view.json").write_text(json.dumps({
        "kind": "novel-view", "source": src.image_path, "frames": frames_meta,
    }, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(f"wrote {len(frames_meta)} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    preds = sorted(pred_dir.glob("*.ppm"))
    refs = sorted(ref_dir.glob("*.ppm"))
    if not preds:
        raise CliError(f"no .ppm frames in {pred_dir}")
    if len(preds) != len(refs):
        raise CliError(f"frame count mismatch: {len(preds)} predictions vs {len(refs)} references")

    manifest = None
    manifest_path = pred_dir / "reenact.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    ds = None
    data_root = args.data or (manifest or {}).get("dataset_root")
    if data_root is not None and Path(data_root, "manifest.json").exists():
        ds = load_dataset(data_root)

    embedder = IdentityEmbedder()
    source_img = None
    if manifest is not None and ds is not None:
        source_img = ds.load_image(find_frame(ds, str(Path(data_root) / manifest["source"])))

    per_frame = []
    for i, (pp, rp) in enumerate(zip(preds, refs)):
        pred, ref = read_ppm(pp), read_ppm(rp)
        row = {"frame": pp.name,
               "psnr": metrics.psnr(ref, pred),
               "ssim": metrics.ssim(ref, pred),
               "csim": metrics.csim(source_img if source_img is not None else ref,
                                    pred, embedder)}
        if manifest is not None and ds is not None and not args.no_aed:
            fm = manifest["frames"][i]
            ident = manifest["source_identity"]
            drv_pose = torch.tensor(fm["driving_pose"], dtype=torch.float64)
            ren_pose = torch.tensor(fm["render_pose"], dtype=torch.float64)
            # expression recovery renders with the camera actually used
            pose = CameraPose(ren_pose[:9].reshape(3, 3), ren_pose[9:])
            beta_fit = metrics.fit_expression(pred, ds.specs[ident], ds.basis,
                                              ds.alphas[ident], ds.intrinsics, pose)
            beta_true = torch.tensor(fm["driving_beta"])
            row["aed"] = float((beta_fit.double() - beta_true.double()).abs().sum())
            row["apd"] = float((ren_pose - drv_pose).norm())
        per_frame.append(row)

    config_hash = ds.config.hash() if ds is not None else ""
    report = metrics.build_report(per_frame, config_hash)
    out_dir = Path(args.out) if args.out else pred_dir / "report"
    json_path = metrics.write_report(report, out_dir)
    plotting.save_metric_figures(report, out_dir)
    if not args.quiet:
        print(json.dumps(report.aggregates, indent=2, sort_keys=True))
        print(f"report: {json_path}")
    return 0


def cmd_grad_check(args) -> int:
    from .verification import render_to_loss_gradcheck, summarize
    dtype = torch.float64 if args.precision == "f64" else torch.float32
    t0 = time.time()
    results = render_to_loss_gradcheck(dtype=dtype, render_size=args.render_size,
                                       n_samples=args.samples,
                                       coords_per_tensor=args.coords,
                                       seed=args.seed or 0)
    ok, lines = summarize(results, dtype)
    for line in lines:
        print(line)
    print(f"{'OK' if ok else 'FAILED'} in {time.time() - t0:.1f}s "
          f"({'f64' if dtype == torch.float64 else 'f32'})")
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "reenact": cmd_reenact,
    "novel-view": cmd_novel_view,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
