"""Scene, candidate-pool and configuration files.

A scene file is JSON with a ``schema_version`` field. Meshes are stored as OBJ
side files and region masks as PNG side files, referenced by paths relative to
the scene file. Non-finite layout extents are written as ``Infinity``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .alignment import FIT_PRESETS
from .composition import Candidate, SceneHypothesis, SelectionWeights
from .fileio import read_mask, read_obj, write_mask, write_obj
from .geometry import CameraIntrinsics, PoseTransform, TriangleMesh
from .layout import LayoutConfig, LayoutPlane
from .validation import InputError

SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class SceneObject:
    id: int
    mesh: TriangleMesh
    pose: PoseTransform
    class_id: int | None = None
    region: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, SceneObject):
            return NotImplemented
        if (self.region is None) != (other.region is None):
            return False
        return (
            self.id == other.id
            and self.mesh == other.mesh
            and self.pose == other.pose
            and self.class_id == other.class_id
            and (self.region is None or np.array_equal(self.region, other.region))
        )


@dataclass(eq=False)
class SceneFile:
    camera: CameraIntrinsics
    layouts: list = field(default_factory=list)
    objects: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, SceneFile):
            return NotImplemented
        return (
            self.camera == other.camera
            and list(self.layouts) == list(other.layouts)
            and list(self.objects) == list(other.objects)
            and self.metadata == other.metadata
        )


def _parse_json(path: Path):
    if not path.exists():
        raise InputError(f"{path}: file not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


class _Fields:
    """Field access with path-qualified diagnostics."""

    def __init__(self, path: Path):
        self.path = path

    def get(self, d, key, where, default=KeyError):
        if not isinstance(d, dict):
            raise InputError(f"{self.path}: {where} must be an object")
        if key not in d:
            if default is KeyError:
                raise InputError(f"{self.path}: missing field {where}.{key}")
            return default
        return d[key]

    def build(self, fn, value, where):
        try:
            return fn(value)
        except InputError as exc:
            raise InputError(f"{self.path}: {where}: {exc}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{self.path}: {where}: invalid value ({exc})") from None


def _check_version(doc, path, f: _Fields):
    version = f.get(doc, "schema_version", "$")
    if version != SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported schema_version {version!r}")


def save_scene(scene: SceneFile, path) -> None:
    """Write the scene JSON plus ``<stem>_meshes/`` and ``<stem>_masks/`` side files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    objects = []
    for obj in scene.objects:
        mesh_rel = f"{path.stem}_meshes/object_{obj.id}.obj"
        (path.parent / mesh_rel).parent.mkdir(parents=True, exist_ok=True)
        write_obj(obj.mesh, path.parent / mesh_rel)
        entry = {"id": obj.id, "mesh": mesh_rel, "pose": obj.pose.to_dict(), "class_id": obj.class_id,
                 "region": None}
        if obj.region is not None:
            mask_rel = f"{path.stem}_masks/object_{obj.id}.png"
            (path.parent / mask_rel).parent.mkdir(parents=True, exist_ok=True)
            write_mask(obj.region, path.parent / mask_rel)
            entry["region"] = mask_rel
        objects.append(entry)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "units": "meters",
        "frame": "camera",
        "camera": scene.camera.to_dict(),
        "layouts": [l.to_dict() for l in scene.layouts],
        "objects": objects,
        "metadata": scene.metadata,
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_scene(path) -> SceneFile:
    path = Path(path)
    doc = _parse_json(path)
    f = _Fields(path)
    _check_version(doc, path, f)
    camera = f.build(CameraIntrinsics.from_dict, f.get(doc, "camera", "$"), "camera")
    layouts = [f.build(LayoutPlane.from_dict, l, f"layouts[{i}]")
               for i, l in enumerate(f.get(doc, "layouts", "$"))]
    objects = []
    for i, o in enumerate(f.get(doc, "objects", "$")):
        where = f"objects[{i}]"
        mesh_file = path.parent / f.get(o, "mesh", where)
        if not mesh_file.exists():
            raise InputError(f"{path}: {where}.mesh: unresolvable reference {mesh_file}")
        mesh = read_obj(mesh_file)
        pose = f.build(PoseTransform.from_dict, f.get(o, "pose", where), f"{where}.pose")
        region = None
        region_rel = f.get(o, "region", where, None)
        if region_rel is not None:
            region = read_mask(path.parent / region_rel)
            if region.shape != camera.shape:
                raise InputError(f"{path}: {where}.region does not match the camera size")
        class_id = f.get(o, "class_id", where, None)
        objects.append(SceneObject(int(f.get(o, "id", where)), mesh, pose,
                                   None if class_id is None else int(class_id), region))
    metadata = f.get(doc, "metadata", "$", {})
    return SceneFile(camera, layouts, objects, metadata)


def resolve_ref(scene_path, ref) -> Path:
    """Path of a metadata file reference relative to its scene file."""
    return Path(scene_path).parent / ref


# Candidate pools


def save_pool(candidates, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mesh_dir = f"{path.stem}_meshes"
    mask_dir = f"{path.stem}_masks"
    (path.parent / mesh_dir).mkdir(parents=True, exist_ok=True)
    (path.parent / mask_dir).mkdir(parents=True, exist_ok=True)
    entries = []
    for c in candidates:
        mesh_rel = f"{mesh_dir}/cand_{c.id}.obj"
        mask_rel = f"{mask_dir}/cand_{c.id}.png"
        write_obj(c.mesh, path.parent / mesh_rel)
        write_mask(c.region, path.parent / mask_rel)
        entries.append({
            "id": c.id,
            "mesh": mesh_rel,
            "pose": c.pose.to_dict(),
            "region": mask_rel,
            "class_probs": c.class_probs.tolist(),
            "non_object_prob": c.non_object_prob,
            "fitting_energy": c.fitting_energy,
            "support_height": c.support_height,
            "class_id": c.class_id,
            "region_id": c.region_id,
            "shape_rank": c.shape_rank,
        })
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, "candidates": entries}, indent=1) + "\n")


def load_pool(path) -> list[Candidate]:
    path = Path(path)
    doc = _parse_json(path)
    f = _Fields(path)
    _check_version(doc, path, f)
    out = []
    for i, e in enumerate(f.get(doc, "candidates", "$")):
        where = f"candidates[{i}]"
        mesh_file = path.parent / f.get(e, "mesh", where)
        if not mesh_file.exists():
            raise InputError(f"{path}: {where}.mesh: unresolvable reference {mesh_file}")

        def make(e=e, mesh_file=mesh_file, where=where):
            opt = lambda k: f.get(e, k, where, None)  # noqa: E731
            return Candidate(
                id=int(f.get(e, "id", where)),
                mesh=read_obj(mesh_file),
                pose=PoseTransform.from_dict(f.get(e, "pose", where)),
                region=read_mask(path.parent / f.get(e, "region", where)),
                class_probs=np.asarray(f.get(e, "class_probs", where), dtype=np.float64),
                non_object_prob=float(f.get(e, "non_object_prob", where)),
                fitting_energy=float(f.get(e, "fitting_energy", where, 0.0)),
                support_height=opt("support_height"),
                class_id=opt("class_id"),
                region_id=opt("region_id"),
                shape_rank=opt("shape_rank"),
            )

        out.append(f.build(lambda _: make(), None, where))
    return out


def hypothesis_to_scene(hyp: SceneHypothesis, candidates, layouts, camera: CameraIntrinsics,
                        metadata=None) -> SceneFile:
    """Scene file holding the selected candidates and layouts of a hypothesis."""
    objects = []
    for c, keep in zip(candidates, hyp.selected_candidates):
        if keep:
            cid = c.class_id if c.class_id is not None else int(np.argmax(c.class_probs))
            objects.append(SceneObject(c.id, c.mesh, c.pose, cid, c.region))
    chosen = [l for l, keep in zip(layouts, hyp.selected_layouts) if keep]
    meta = dict(metadata or {})
    meta["cost"] = hyp.cost
    meta["terms"] = dict(hyp.terms)
    return SceneFile(camera, chosen, objects, meta)


# Run configuration


def default_config() -> dict:
    """Every tunable weight and threshold with its default value."""
    return {
        "fit_presets": copy.deepcopy(FIT_PRESETS),
        "alignment": {
            "n_yaws": 16,
            "scales": [1.0, 0.9],
            "max_iters": 30,
            "tol": 1e-4,
            "reject_radius": 0.25,
            "refine_levels": 4,
            "sample_spacing": 0.01,
            "prune_top": None,
        },
        "selection": asdict(SelectionWeights()),
        "pruning": {"target_count": 190, "n_classes": 2, "n_shapes": 5, "n_keep": 2, "iou_threshold": 0.9},
        "layout": LayoutConfig().to_dict(),
        "evaluation": {"voxel_res": 0.03, "tolerance": 0.05, "occlusion_fraction": 0.03},
    }


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("scorers", "table"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None) -> dict:
    """Defaults overridden by the JSON file at ``path`` (if given)."""
    cfg = default_config()
    if path is None:
        return cfg
    doc = _parse_json(Path(path))
    if not isinstance(doc, dict):
        raise InputError(f"{path}: configuration must be a JSON object")
    unknown = set(doc) - set(cfg) - {"camera"}
    if unknown:
        raise InputError(f"{path}: unknown configuration sections {sorted(unknown)}")
    return _merge(cfg, doc)
