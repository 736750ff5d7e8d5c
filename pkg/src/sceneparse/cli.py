"""Command-line entry point: synth, align, layout, compose and eval subcommands."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .alignment import FitWeights, align_model
from .composition import SelectionProblem, SelectionWeights, compose_scene
from .evaluation import evaluate_scene
from .fileio import read_depth, read_float_map, write_depth_png, write_pfm
from .geometry import CameraIntrinsics
from .layout import LayoutConfig, detect_planes, plane_extent
from .scene_io import (
    SceneFile,
    default_config,
    hypothesis_to_scene,
    load_config,
    load_pool,
    load_scene,
    resolve_ref,
    save_pool,
    save_scene,
)
from .synth import SynthParams, synth_scene
from .validation import InputError

log = logging.getLogger("sceneparse")


def _rel(target: Path, base: Path) -> str:
    return os.path.relpath(target, base.parent)


def _scene_depth(scene: SceneFile, scene_path: Path):
    ref = scene.metadata.get("depth")
    if ref is None:
        raise InputError(f"{scene_path}: metadata.depth is not set")
    return read_depth(resolve_ref(scene_path, ref))


def _camera(args, cfg) -> CameraIntrinsics:
    if args.camera:
        doc = json.loads(Path(args.camera).read_text())
        return CameraIntrinsics.from_dict(doc.get("camera", doc))
    if "camera" not in cfg:
        raise InputError("no camera intrinsics: pass --camera or add a 'camera' section to the config")
    return CameraIntrinsics.from_dict(cfg["camera"])


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = SynthParams(
        seed=args.seed,
        n_objects=(args.min_objects, args.max_objects),
        doorway=args.doorway,
        perturb_yaw_deg=args.perturb_yaw,
        perturb_translation=args.perturb_translation,
        perturb_scales=tuple(args.perturb_scales),
        n_distractors=args.distractors,
        missing_fraction=args.missing,
    )
    r = synth_scene(params)
    np.save(out / "depth.npy", r.depth)
    write_pfm(r.depth, out / "depth.pfm")
    write_depth_png(r.depth, out / "depth.png")
    np.save(out / "pobject.npy", r.p_object)
    np.save(out / "labels.npy", r.labels)
    scene = replace(r.scene, metadata={**r.scene.metadata, "depth": "depth.npy", "pobject": "pobject.npy",
                                       "labels": "labels.npy"})
    save_scene(scene, out / "scene.json")
    save_pool(r.candidates, out / "pool.json")
    cfg = default_config()
    cfg["camera"] = r.scene.camera.to_dict()
    (out / "config.json").write_text(json.dumps(cfg, indent=1) + "\n")
    print(f"objects: {len(r.scene.objects)}")
    print(f"candidates: {len(r.candidates)}")
    print(f"gt_candidate_ids: {list(r.gt_candidate_ids)}")
    print(f"out: {out}")
    return 0


def cmd_align(args) -> int:
    cfg = load_config(args.config)
    scene_path = Path(args.scene)
    scene = load_scene(scene_path)
    depth = _scene_depth(scene, scene_path)
    presets = cfg["fit_presets"]
    if args.weights not in presets:
        raise InputError(f"unknown weight preset {args.weights!r}")
    w = FitWeights(**presets[args.weights])
    a = cfg["alignment"]
    pool = load_pool(args.candidates)
    aligned = []
    for c in pool:
        res = align_model(c.mesh, c.region, depth, scene.camera, w, c.pose, n_yaws=a["n_yaws"],
                          scales=tuple(a["scales"]), max_iters=a["max_iters"], tol=a["tol"],
                          reject_radius=a["reject_radius"], refine_levels=a["refine_levels"],
                          sample_spacing=a["sample_spacing"], n_jobs=args.jobs)
        aligned.append(replace(c, pose=res.pose, fitting_energy=res.cost))
        print(f"candidate {c.id}: cost {res.cost:.6g} yaw {res.pose.yaw:.6g} scale {res.pose.scale:.6g}")
    out = Path(args.out) if args.out else Path(args.candidates).with_name(
        Path(args.candidates).stem + "_aligned.json")
    save_pool(aligned, out)
    print(f"out: {out}")
    return 0


def cmd_layout(args) -> int:
    cfg = load_config(args.config)
    K = _camera(args, cfg)
    depth_path = Path(args.depth)
    depth = read_depth(depth_path)
    labels = np.load(args.labels) if str(args.labels).endswith(".npy") else None
    if labels is None:
        raise InputError(f"{args.labels}: label probabilities must be an (H, W, 4) .npy array")
    lcfg = LayoutConfig.from_dict(cfg["layout"])
    planes = detect_planes(depth, K, labels, config=lcfg)
    planes = [plane_extent(p, planes, depth, K, lcfg) for p in planes]
    out = Path(args.out) if args.out else depth_path.with_name("layout.json")
    save_scene(SceneFile(K, planes, [], {"depth": _rel(depth_path, out)}), out)
    for p in planes:
        print(f"{p.category}: offset {p.offset:.6g} score {p.score:.6g} holes {len(p.holes)}")
    print(f"out: {out}")
    return 0


def cmd_compose(args) -> int:
    cfg = load_config(args.config)
    scene_path = Path(args.scene)
    scene = load_scene(scene_path)
    depth = _scene_depth(scene, scene_path)
    pobj = read_float_map(args.pobject)
    pool = load_pool(args.pool)
    w = SelectionWeights(**cfg["selection"])
    problem = SelectionProblem(pool, scene.layouts, depth, pobj, w, scene.camera)
    hyp = compose_scene(None, None, None, None, w, n_jobs=args.jobs, problem=problem)
    out = Path(args.out) if args.out else scene_path.with_name("hypothesis.json")
    meta = {"depth": _rel(resolve_ref(scene_path, scene.metadata["depth"]), out)}
    save_scene(hypothesis_to_scene(hyp, problem.candidates, scene.layouts, scene.camera, meta), out)
    print(f"cost: {hyp.cost:.10g}")
    for k, v in hyp.terms.items():
        print(f"term_{k}: {v:.10g}")
    for k, v in enumerate(hyp.stage_costs, start=1):
        print(f"stage{k}_cost: {v:.10g}")
    print("selected_candidates: " + " ".join(str(c.id) for c, s in zip(pool, hyp.selected_candidates) if s))
    print("selected_layouts: " + " ".join(str(i) for i, s in enumerate(hyp.selected_layouts) if s))
    print(f"out: {out}")
    return 0


def cmd_eval(args) -> int:
    pred = load_scene(args.pred)
    gt_path = Path(args.gt)
    gt = load_scene(gt_path)
    observed = None
    if args.depth:
        observed = read_depth(args.depth)
    elif "depth" in gt.metadata:
        observed = _scene_depth(gt, gt_path)
    report = evaluate_scene(pred, gt, args.voxel_res, args.tolerance, observed)
    print(report.format())
    if args.out:
        Path(args.out).write_text(json.dumps(report.values, indent=1, sort_keys=True) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sceneparse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene and candidate pool")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--doorway", action="store_true")
    p.add_argument("--perturb-yaw", type=float, default=0.0, help="degrees")
    p.add_argument("--perturb-translation", type=float, default=0.0, help="meters")
    p.add_argument("--perturb-scales", type=float, nargs="+", default=[1.0])
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--missing", type=float, default=0.0, help="fraction of missing depth pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("align", help="align candidate poses to the observed depth")
    p.add_argument("--scene", required=True, help="scene file with camera and metadata.depth")
    p.add_argument("--candidates", required=True, help="candidate pool file")
    p.add_argument("--weights", choices=["annotation", "retrieval"], default="retrieval")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("layout", help="detect layout planes with extents and holes")
    p.add_argument("--depth", required=True)
    p.add_argument("--labels", required=True, help="(H, W, 4) floor/wall/ceiling/object .npy")
    p.add_argument("--config", required=True)
    p.add_argument("--camera", help="camera JSON or scene file (default: config camera section)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("compose", help="select candidates and layouts")
    p.add_argument("--scene", required=True, help="scene file with camera, layouts and metadata.depth")
    p.add_argument("--pool", required=True)
    p.add_argument("--pobject", required=True, help="object probability map (.npy or .pfm)")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("eval", help="score a predicted scene against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--voxel-res", type=float, default=0.03)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--depth", help="observed depth (default: gt metadata.depth)")
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
