"""Command-line interface: ``canonsplat <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 geometry
failure (PnP could not produce a pose).  Set ``CANONSPLAT_LOG`` to a
logging level name (``INFO``, ``DEBUG``...) for progress messages.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import evalset, metrics, ply, synthetic
from .imageio import write_pfm, write_png
from .pairs import TargetView, intrinsics_from_dict, intrinsics_to_dict, pose_from_dict, \
    pose_to_dict, read_pair, write_pair
from .pnp import DegenerateGeometry, PnPConfig
from .pose import RefineConfig, align_target_pose, estimate_relative_pose
from .predictor import PoseNoise, PredictorError, oracle_canonical_predict, predictor_from_name, \
    transform_then_fuse_predict
from .rasterizer import render
from .scene import Camera, CameraPose

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_GEOMETRY = 4

DEFAULT_RESOLUTION = (256, 256)
DEFAULT_SEED = 0

log = logging.getLogger("canonsplat")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(text, out):
    if out:
        with open(out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _require_file(path, field):
    if path is None:
        raise CliError(EXIT_CONFIG, f"{field}: required")
    if not os.path.exists(path):
        raise CliError(EXIT_CONFIG, f"{field}: file not found: {path}")


def _load_pair(path, field="--views"):
    _require_file(path, field)
    try:
        return read_pair(path)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(EXIT_IO, f"{field}: cannot read pair at {path}: {e}") from e


def _relative(view_pose, anchor):
    """Pose mapping view 1's camera frame to the camera of ``view_pose``."""
    return view_pose.compose(anchor.inverse())


def _refine_cfg(args):
    cfg = RefineConfig()
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, steps=args.steps)
    if getattr(args, "lr", None) is not None:
        cfg = replace(cfg, learning_rate=args.lr)
    return cfg


# ---------------------------------------------------------------- render

def cmd_render(args):
    _require_file(args.scene, "--scene")
    try:
        scene = ply.read_scene(args.scene)
    except (OSError, ply.PlyError) as e:
        raise CliError(EXIT_IO, f"--scene: cannot read {args.scene}: {e}") from e
    H, W = args.resolution
    pose = CameraPose.identity()
    k = intrinsics_from_dict(None, H, W)
    if args.camera:
        _require_file(args.camera, "--camera")
        with open(args.camera) as f:
            spec = json.load(f)
        if spec.get("pose"):
            pose = pose_from_dict(spec["pose"])
        k = intrinsics_from_dict(spec.get("intrinsics"), H, W)
    if args.intrinsics:
        k = intrinsics_from_dict(dict(zip(("fx", "fy", "cx", "cy"), args.intrinsics)), H, W)
    out = render(scene, Camera(k, pose), tuple(args.background))
    os.makedirs(args.out, exist_ok=True)
    write_png(os.path.join(args.out, "color.png"), out.color)
    write_pfm(os.path.join(args.out, "depth.pfm"), out.depth)
    write_pfm(os.path.join(args.out, "alpha.pfm"), out.alpha)
    summary = {"scene": args.scene, "num_primitives": len(scene), "resolution": [H, W],
               "intrinsics": intrinsics_to_dict(k), "pose": pose_to_dict(pose),
               "mean_alpha": float(out.alpha.mean())}
    _emit(_dump(summary), os.path.join(args.out, "summary.json"))
    return EXIT_OK


# ---------------------------------------------------------- estimate-pose

def _pose_record(pair_id, est, gt):
    rec = {"pair_id": pair_id, "stage": est.stage,
           "rotation_quat": [float(v) for v in est.pose.quat],
           "translation": [float(v) for v in est.pose.translation],
           "inliers": est.inliers, "steps_run": est.steps_run}
    if gt is not None:
        err = metrics.pose_error(est.pose, gt)
        rec["rot_err_deg"] = err.rotation_deg
        rec["trans_err_deg"] = err.translation_dir_deg
    return rec


def _predict(name, views, intrinsic_mode, seed):
    try:
        predictor = predictor_from_name(name, PoseNoise(seed=seed))
        return predictor.predict(views, intrinsic_mode)
    except (PredictorError, ValueError) as e:
        raise CliError(EXIT_CONFIG, f"--predictor: {e}") from e
    except OSError as e:
        raise CliError(EXIT_IO, f"--predictor: {e}") from e


def estimate_pair(path, pair_id, predictor, intrinsic_mode, pnp_cfg, refine_cfg, refine):
    views, _ = _load_pair(path)
    scene = _predict(predictor, views, intrinsic_mode, pnp_cfg.seed)
    q = views[1]
    gt = None
    if views[0].pose is not None and q.pose is not None:
        gt = _relative(q.pose, views[0].pose)
    stages = estimate_relative_pose(scene, q.image, q.intrinsics, 2, pnp_cfg, refine_cfg, refine)
    return [_pose_record(pair_id, s, gt) for s in stages]


def cmd_estimate_pose(args):
    pnp_cfg = PnPConfig(seed=args.seed, reprojection_threshold=args.threshold)
    pair_id = args.pair_id or os.path.basename(os.path.normpath(args.views or ""))
    try:
        records = estimate_pair(args.views, pair_id, args.predictor, args.intrinsic_mode,
                                pnp_cfg, _refine_cfg(args), not args.no_refine)
    except DegenerateGeometry as e:
        raise CliError(EXIT_GEOMETRY, f"pose estimation failed: {e}") from e
    _emit("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), args.out)
    return EXIT_OK


# -------------------------------------------------------------- evaluate

def _read_eval_manifest(path):
    _require_file(path, "--manifest")
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    try:
        with open(path) as f:
            for n, line in enumerate(f, 1):
                if not line.strip():
                    continue
                e = json.loads(line)
                pid = str(e["pair_id"])
                entries.append({"pair_id": pid,
                                "path": os.path.join(root, e.get("path", pid)),
                                "bin": e.get("bin", "unbinned")})
    except (OSError, ValueError, KeyError) as e:
        raise CliError(EXIT_IO, f"--manifest: malformed manifest {path}: {e}") from e
    return entries


def evaluate_pair(entry, predictor, intrinsic_mode, pnp_cfg, refine_cfg, refine):
    """Metrics for one manifest entry, or ``{"pair_id", "skipped": reason}``."""
    pid = entry["pair_id"]
    try:
        views, target = read_pair(entry["path"])
    except (OSError, ValueError, KeyError) as e:
        log.warning("skipping %s: %s", pid, e)
        return {"pair_id": pid, "skipped": str(e)}
    if target is None or target.pose is None or views[0].pose is None:
        log.warning("skipping %s: no posed target view", pid)
        return {"pair_id": pid, "skipped": "no posed target view"}
    scene = _predict(predictor, views, intrinsic_mode, pnp_cfg.seed)
    rec = {"pair_id": pid, "bin": entry["bin"]}

    q = views[1]
    try:
        stages = estimate_relative_pose(scene, q.image, q.intrinsics, 2, pnp_cfg, refine_cfg,
                                        refine)
        err = metrics.pose_error(stages[-1].pose, _relative(q.pose, views[0].pose))
        rec["rot_err_deg"] = err.rotation_deg
        rec["trans_err_deg"] = err.translation_dir_deg
        rec["pose_err_deg"] = err.combined_deg
    except DegenerateGeometry as e:
        log.warning("%s: pose estimation failed (%s); counted as 180 deg", pid, e)
        rec["rot_err_deg"] = rec["trans_err_deg"] = rec["pose_err_deg"] = 180.0

    init = _relative(target.pose, views[0].pose)
    aligned, _ = align_target_pose(scene, target.image, target.intrinsics, init, refine_cfg)
    img = render(scene, Camera(target.intrinsics, aligned), refine_cfg.background).color
    rec["psnr"] = metrics.psnr(img, target.image)
    rec["ssim"] = metrics.ssim(img, target.image)
    return rec


def aggregate(records, thresholds):
    scored = [r for r in records if "skipped" not in r]
    bins = {}
    for name in sorted({r["bin"] for r in scored}) + ["all"]:
        rs = [r for r in scored if name == "all" or r["bin"] == name]
        bins[name] = {"count": len(rs),
                      "psnr": float(np.mean([r["psnr"] for r in rs])),
                      "ssim": float(np.mean([r["ssim"] for r in rs]))}
    out = {"bins": bins, "num_pairs": len(records), "num_skipped": len(records) - len(scored)}
    if scored:
        auc = metrics.pose_auc([r["pose_err_deg"] for r in scored], thresholds)
        for t, v in zip(thresholds, auc):
            out[f"auc{t:g}"] = v
    return out


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*items)))


def cmd_evaluate(args):
    entries = _read_eval_manifest(args.manifest)
    pnp_cfg = PnPConfig(seed=args.seed, reprojection_threshold=args.threshold)
    cfg = _refine_cfg(args)
    items = [(e, args.predictor, args.intrinsic_mode, pnp_cfg, cfg, not args.no_refine)
             for e in entries]
    records = _map(evaluate_pair, items, args.jobs)
    result = {"pairs": records}
    if any("skipped" not in r for r in records):
        result.update(aggregate(records, tuple(args.thresholds_deg)))
    else:
        result.update({"bins": {}, "num_pairs": len(records), "num_skipped": len(records)})
    _emit(_dump(result), args.out)
    if records and result["num_skipped"] > 0.1 * len(records):
        log.error("%d of %d pairs skipped", result["num_skipped"], len(records))
        return EXIT_IO
    return EXIT_OK


# ---------------------------------------------------------- make-evalset

def _map_pairs(directory):
    names = sorted(os.listdir(directory))
    ids = sorted({n[:-len("_12.mmap")] for n in names if n.endswith("_12.mmap")}
                 | {n[:-len("_21.mmap")] for n in names if n.endswith("_21.mmap")})
    return ids


def cmd_make_evalset(args):
    if args.maps is None or not os.path.isdir(args.maps):
        raise CliError(EXIT_CONFIG, f"--maps: not a directory: {args.maps}")
    records = []
    for pid in _map_pairs(args.maps):
        try:
            m12 = evalset.read_matchmap(os.path.join(args.maps, f"{pid}_12.mmap"))
            m21 = evalset.read_matchmap(os.path.join(args.maps, f"{pid}_21.mmap"))
        except (OSError, evalset.MatchMapError) as e:
            raise CliError(EXIT_IO, f"unreadable match map for pair {pid}: {e}") from e
        records.append(evalset.overlap_ratio(m12, m21, args.threshold, pair_id=pid))
    if not records:
        log.warning("no match maps found in %s; writing an empty manifest", args.maps)
    manifest = "".join(r.to_json() + "\n" for r in records)
    stats = "".join(f"{name}: {n}\n" for name, n in evalset.bin_counts(records).items())
    if args.out:
        _emit(manifest, args.out)
        sys.stdout.write(stats)
    else:
        sys.stdout.write(manifest)
        sys.stderr.write(stats)
    return EXIT_OK


# --------------------------------------------------------- ablate-fusion

ABLATION_SIZE = 256
ABLATION_MAX_FREQ = 4.0


def ablation_trial(seed, size=ABLATION_SIZE, levels=(0.0, 1.0), max_freq=ABLATION_MAX_FREQ):
    """Target-view PSNR of the canonical scene and of the baseline at each noise level.

    Large images with fine texture keep a 1 degree misalignment (several
    pixels) well above the sub-pixel occlusion bias of pixel-aligned splats
    seen from a new viewpoint, which otherwise lets small noise look helpful.
    """
    pair = synthetic.make_pair(seed, size=size, max_freq=max_freq)
    cam = Camera(pair.views[0].intrinsics, pair.target_pose)
    canon = metrics.psnr(render(oracle_canonical_predict(pair.views), cam).color,
                         pair.target_image)
    base = []
    for lvl in levels:
        scene = transform_then_fuse_predict(pair.views, PoseNoise(lvl, 0.0, seed))
        base.append(metrics.psnr(render(scene, cam).color, pair.target_image))
    return canon, base


def cmd_ablate_fusion(args):
    levels = [float(v) for v in args.noise_deg]
    seeds = [args.seed + i for i in range(args.trials)]
    results = _map(ablation_trial, [(s, args.size, levels, args.max_freq) for s in seeds],
                   args.jobs)
    report = {"seeds": seeds, "size": args.size, "max_freq": args.max_freq, "levels": []}
    for j, lvl in enumerate(levels):
        canon = [r[0] for r in results]
        base = [r[1][j] for r in results]
        report["levels"].append({
            "noise_deg": lvl,
            "canonical_psnr": canon,
            "baseline_psnr": base,
            "mean_canonical_psnr": float(np.mean(canon)),
            "mean_baseline_psnr": float(np.mean(base)),
            "mean_delta_db": float(np.mean(np.subtract(canon, base))),
        })
    _emit(_dump(report), args.out)
    return EXIT_OK


# ----------------------------------------------------------------- synth

def cmd_synth(args):
    pair = synthetic.make_pair(args.seed, size=args.size, num_views=args.num_views,
                               max_freq=args.max_freq)
    views = list(pair.views)
    k = views[0].intrinsics
    target = TargetView(pair.target_image, k, pair.target_pose)
    if args.render_recover:
        # every image but view 1's becomes a render of the stored oracle scene
        scene = oracle_canonical_predict(views)
        os.makedirs(args.out, exist_ok=True)
        ply.write_scene(scene, os.path.join(args.out, "scene.ply"))
        for i in range(1, len(views)):
            img = render(scene, Camera(k, views[i].pose)).color
            views[i] = replace(views[i], image=img)
        target = replace(target, image=render(scene, Camera(k, pair.target_pose)).color)
    write_pair(args.out, views, target)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p, out_help="output path (stdout when omitted)"):
    p.add_argument("--config", help="key = value file; flags override its entries")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", help=out_help)


def _pose_flags(p):
    p.add_argument("--predictor", default="oracle-canonical",
                   help="oracle-canonical | oracle-transform-fuse | from-file:<ply>")
    p.add_argument("--intrinsic-mode", default="global-token",
                   choices=["global-add", "global-token", "dense-ray"])
    p.add_argument("--no-refine", action="store_true", help="stop after PnP")
    p.add_argument("--threshold", type=float, default=PnPConfig().reprojection_threshold,
                   help="RANSAC reprojection threshold in pixels")
    p.add_argument("--steps", type=int, help="refinement steps (default 200)")
    p.add_argument("--lr", type=float, help="refinement learning rate (default 5e-3)")


def build_parser():
    parser = argparse.ArgumentParser(prog="canonsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a PLY scene to PNG/PFM")
    _common(p, "output directory")
    p.add_argument("--scene", help="scene PLY")
    p.add_argument("--camera", help="JSON with optional 'pose' and 'intrinsics'")
    p.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"),
                   default=list(DEFAULT_RESOLUTION))
    p.add_argument("--intrinsics", type=float, nargs=4, metavar=("FX", "FY", "CX", "CY"))
    p.add_argument("--background", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.set_defaults(func=cmd_render, required_flags=["scene", "out"])

    p = sub.add_parser("estimate-pose", help="PnP (+ photometric refinement) for a pair")
    _common(p)
    p.add_argument("--views", help="pair directory")
    p.add_argument("--pair-id")
    _pose_flags(p)
    p.set_defaults(func=cmd_estimate_pose, required_flags=["views"])

    p = sub.add_parser("evaluate", help="novel-view and pose metrics over a manifest")
    _common(p)
    p.add_argument("--manifest", help="JSON lines with pair_id, optional path and bin")
    p.add_argument("--thresholds-deg", type=float, nargs="+",
                   default=list(metrics.AUC_THRESHOLDS))
    p.add_argument("--jobs", type=int, default=1)
    _pose_flags(p)
    p.set_defaults(func=cmd_evaluate, required_flags=["manifest"])

    p = sub.add_parser("make-evalset", help="overlap ratios and bins from match maps")
    _common(p, "manifest path (stdout when omitted)")
    p.add_argument("--maps", help="directory of <pair>_12.mmap / <pair>_21.mmap")
    p.add_argument("--threshold", type=float, default=evalset.DEFAULT_THRESHOLD,
                   help="match score threshold (strict >)")
    p.set_defaults(func=cmd_make_evalset, required_flags=["maps"])

    p = sub.add_parser("ablate-fusion", help="canonical vs transform-then-fuse under pose noise")
    _common(p)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--noise-deg", type=float, nargs="+", default=[0.0, 0.5, 1.0, 2.0])
    p.add_argument("--size", type=int, default=ABLATION_SIZE, help="synthetic view size in pixels")
    p.add_argument("--max-freq", type=float, default=ABLATION_MAX_FREQ,
                   help="texture frequency bound of the synthetic scenes")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate_fusion, required_flags=[])

    p = sub.add_parser("synth", help="write a synthetic pair directory")
    _common(p, "output directory")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--num-views", type=int, default=2)
    p.add_argument("--max-freq", type=float, default=1.0)
    p.add_argument("--render-recover", action="store_true",
                   help="also write scene.ply and replace later views by its renders")
    p.set_defaults(func=cmd_synth, required_flags=["out"])
    return parser


def _load_config(path):
    if not os.path.exists(path):
        raise CliError(EXIT_CONFIG, f"--config: file not found: {path}")
    cp = configparser.ConfigParser()
    with open(path) as f:
        text = f.read()
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as e:
        raise CliError(EXIT_CONFIG, f"--config: cannot parse {path}: {e}") from e
    return {k.replace("-", "_"): v for k, v in cp["config"].items()}


def _apply_config(parser, argv, cfg):
    """Re-parse with config entries inserted before the real flags, so flags win."""
    sub = argv[0]
    subparser = parser._subparsers._group_actions[0].choices[sub]
    known = {a.dest: a for a in subparser._actions}
    extra = []
    for key, value in cfg.items():
        a = known.get(key)
        if a is None or not a.option_strings:
            raise CliError(EXIT_CONFIG, f"--config: unknown key '{key}'")
        flag = a.option_strings[-1]
        if a.nargs == 0:
            if value.strip().lower() in ("1", "true", "yes", "on"):
                extra.append(flag)
        else:
            extra += [flag] + value.split()
    return parser.parse_args([sub] + extra + argv[1:])


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("CANONSPLAT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config(parser, argv, _load_config(args.config))
        for name in args.required_flags:
            if getattr(args, name) is None:
                raise CliError(EXIT_CONFIG, f"--{name.replace('_', '-')}: required")
        return args.func(args)
    except CliError as e:
        print(f"canonsplat: error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
