"""Synthetic Manhattan rooms with furniture-like objects and candidate pools."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .alignment import FitWeights, fitting_cost
from .composition import Candidate
from .geometry import (
    CameraIntrinsics,
    PoseTransform,
    TriangleMesh,
    box_mesh,
    composite,
    cylinder_mesh,
    l_shape_mesh,
    render_depth,
)
from .layout import LABELS, LayoutPlane, render_layout
from .scene_io import SceneFile, SceneObject
from .validation import InputError

SHAPES = ("box", "cylinder", "lshape")
N_CLASSES = 81
# Class ids drawn for each primitive kind.
_CLASS_RANGES = {"box": (0, 27), "cylinder": (27, 54), "lshape": (54, 81)}


def _check_range(name, r, lo=-math.inf):
    if len(r) != 2 or not (lo <= r[0] <= r[1]):
        raise InputError(f"{name} must be an ordered pair, got {r}")


@dataclass(frozen=True)
class SynthParams:
    """Generator settings. Angles in degrees, lengths in meters."""

    seed: int = 0
    image_size: tuple[int, int] = (80, 60)
    hfov_deg: float = 70.0
    camera_height: tuple[float, float] = (1.2, 1.6)
    room_height: tuple[float, float] = (2.5, 3.0)
    side_wall: tuple[float, float] = (1.2, 2.2)
    front_wall: tuple[float, float] = (3.8, 5.0)
    n_objects: tuple[int, int] = (1, 4)
    shapes: tuple[str, ...] = SHAPES
    min_visible_pixels: int = 25
    doorway: bool = False
    clear_doorway: bool = True
    backdrop_gap: float = 1.5
    perturb_yaw_deg: float = 0.0
    perturb_scales: tuple[float, ...] = (1.0,)
    perturb_translation: float = 0.0
    n_distractors: int = 0
    missing_fraction: float = 0.0
    depth_noise: float = 0.0
    pobject_blur: int = 5
    pobject_clip: tuple[float, float] = (0.05, 0.95)
    true_class_prob: tuple[float, float] = (0.5, 0.95)
    label_confidence: float = 0.85
    max_retries: int = 200

    def __post_init__(self):
        for name in ("camera_height", "room_height", "side_wall", "front_wall", "pobject_clip",
                     "true_class_prob"):
            _check_range(name, getattr(self, name), 0.0)
        _check_range("n_objects", self.n_objects, 0)
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise InputError(f"shapes must be a non-empty subset of {SHAPES}")
        if self.camera_height[1] >= self.room_height[0] - 0.3:
            raise InputError("camera must sit below the ceiling")
        if not 0 <= self.missing_fraction < 1:
            raise InputError("missing_fraction must be in [0, 1)")
        if self.perturb_yaw_deg < 0 or self.perturb_translation < 0 or self.n_distractors < 0:
            raise InputError("perturbation magnitudes and distractor count must be nonnegative")
        if not self.perturb_scales or min(self.perturb_scales) <= 0:
            raise InputError("perturb_scales must hold positive ratios")

    def camera(self) -> CameraIntrinsics:
        w, h = self.image_size
        f = (w / 2) / math.tan(math.radians(self.hfov_deg) / 2)
        return CameraIntrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)


@dataclass(frozen=True, eq=False)
class SynthResult:
    scene: SceneFile
    depth: np.ndarray
    gt_depth: np.ndarray
    p_object: np.ndarray
    labels: np.ndarray
    candidates: list
    gt_candidate_ids: tuple
    room: dict = field(default_factory=dict)


def random_shape(rng: np.random.Generator, kind: str) -> TriangleMesh:
    if kind == "box":
        return box_mesh(rng.uniform(0.3, 0.9), rng.uniform(0.4, 1.2), rng.uniform(0.3, 0.8))
    if kind == "cylinder":
        return cylinder_mesh(rng.uniform(0.15, 0.35), rng.uniform(0.4, 1.0))
    return l_shape_mesh(rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0), rng.uniform(0.4, 0.9))


def _footprint_radius(mesh: TriangleMesh) -> float:
    return float(np.max(np.hypot(mesh.vertices[:, 0], mesh.vertices[:, 2])))


def room_layouts(floor_y, ceil_y, left_x, right_x, front_z, door=None, backdrop_gap=1.5):
    """The five room surfaces, plus the surface seen through ``door`` if given.

    ``door`` is an (x0, y0, x1, y1) rectangle on the front wall.
    """
    walls_y = (ceil_y, floor_y)
    # With a doorway the floor runs on into the adjoining room.
    floor_end = front_z + backdrop_gap if door else front_z
    planes = [
        LayoutPlane("floor", 1, floor_y, (left_x, -math.inf, right_x, floor_end)),
        LayoutPlane("ceiling", 1, ceil_y, (left_x, -math.inf, right_x, front_z)),
        LayoutPlane("left-wall", 0, left_x, (-math.inf, walls_y[0], front_z, walls_y[1])),
        LayoutPlane("right-wall", 0, right_x, (-math.inf, walls_y[0], front_z, walls_y[1])),
        LayoutPlane("front-wall", 2, front_z, (left_x, walls_y[0], right_x, walls_y[1]),
                    holes=(door,) if door else ()),
    ]
    if door:
        planes.append(LayoutPlane("front-wall", 2, front_z + backdrop_gap,
                                  (left_x, walls_y[0], right_x, walls_y[1])))
    return planes


def _confusion(rng, class_id, lo, hi):
    p_true = rng.uniform(lo, hi)
    probs = np.full(N_CLASSES, (1 - p_true) / (N_CLASSES - 1))
    probs[class_id] = p_true
    return probs


def synth_scene(params: SynthParams = SynthParams()) -> SynthResult:
    """Generate a room, its observation and a candidate pool, deterministically from the seed.

    Objects stand on the floor with disjoint footprints, so they never
    intersect. Candidates are the ground-truth objects with perturbed poses
    followed by distractors (wrong shape or wrong pose on a true region); ids
    are shuffled so position in the pool carries no information.
    """
    rng = np.random.default_rng(params.seed)
    K = params.camera()
    H, W = K.shape
    tan_h = (W / 2) / K.fx

    floor_y = rng.uniform(*params.camera_height)
    ceil_y = floor_y - rng.uniform(*params.room_height)
    left_x = -rng.uniform(*params.side_wall)
    right_x = rng.uniform(*params.side_wall)
    front_z = rng.uniform(*params.front_wall)

    door = None
    if params.doorway:
        dw = rng.uniform(0.8, 1.1)
        dh = min(rng.uniform(1.9, 2.1), floor_y - ceil_y - 0.25)
        # Keep the view cone through the door inside the adjoining room.
        shrink = front_z / (front_z + params.backdrop_gap)
        reach = min(right_x * shrink, tan_h * front_z) - dw / 2 - 0.15
        lo = max(left_x * shrink, -tan_h * front_z) + dw / 2 + 0.15
        if reach <= lo:
            raise InputError("room too narrow for a doorway")
        xc = rng.uniform(lo, reach)
        door = (xc - dw / 2, floor_y - dh, xc + dw / 2, floor_y)
    layouts = room_layouts(floor_y, ceil_y, left_x, right_x, front_z, door, params.backdrop_gap)
    layout_renders = [render_layout(l, K) for l in layouts]
    door_px = None
    if door:
        door_px = layout_renders[-1].mask & ~np.isfinite(
            composite(layout_renders[:-1], K.shape)[0]
        )

    n_obj = int(rng.integers(params.n_objects[0], params.n_objects[1] + 1))
    objects, renders = [], []
    placed = []  # (x, z, radius)
    for k in range(n_obj):
        for _ in range(params.max_retries):
            kind = params.shapes[int(rng.integers(len(params.shapes)))]
            mesh = random_shape(rng, kind)
            r = _footprint_radius(mesh)
            z = rng.uniform(1.6, front_z - r - 0.1)
            xlim = min(right_x - r - 0.05, tan_h * z)
            xlo = max(left_x + r + 0.05, -tan_h * z)
            if xlim <= xlo:
                continue
            x = rng.uniform(xlo, xlim)
            if any(math.hypot(x - px, z - pz) < r + pr + 0.05 for px, pz, pr in placed):
                continue
            pose = PoseTransform(rng.uniform(-math.pi, math.pi), 1.0, (x, floor_y, z))
            rend = render_depth(mesh, pose, K)
            if rend.mask.sum() < params.min_visible_pixels:
                continue
            if door_px is not None and params.clear_doorway:
                grown = ndimage.binary_dilation(door_px, iterations=2)
                if (rend.mask & grown).any():
                    continue
            owner = composite(renders + [rend] + layout_renders, K.shape)[1]
            if any((owner == i).sum() < params.min_visible_pixels for i in range(len(renders) + 1)):
                continue
            lo_c, hi_c = _CLASS_RANGES[kind]
            objects.append((kind, mesh, pose, int(rng.integers(lo_c, hi_c))))
            renders.append(rend)
            placed.append((x, z, r))
            break
        else:
            raise InputError(f"could not place object {k} after {params.max_retries} attempts")

    all_renders = renders + layout_renders
    gt_depth, owner = composite(all_renders, K.shape)
    n = len(objects)
    regions = [owner == i for i in range(n)]
    for i, reg in enumerate(regions):
        if reg.sum() < params.min_visible_pixels:
            raise InputError(f"object {i} is hidden by other objects; try another seed")

    depth = gt_depth.copy()
    if params.depth_noise > 0:
        depth = depth * (1 + params.depth_noise * rng.standard_normal(depth.shape))
    if params.missing_fraction > 0:
        depth[rng.random(depth.shape) < params.missing_fraction] = np.nan

    obj_mask = (owner >= 0) & (owner < n)
    pobj = ndimage.uniform_filter(obj_mask.astype(np.float64), size=params.pobject_blur, mode="nearest")
    pobj = np.clip(pobj, *params.pobject_clip)

    label_idx = np.full(K.shape, -1)
    label_idx[obj_mask] = LABELS.index("object")
    for j, l in enumerate(layouts):
        name = {"floor": "floor", "ceiling": "ceiling"}.get(l.category, "wall")
        label_idx[owner == n + j] = LABELS.index(name)
    conf = params.label_confidence
    labels = np.full(K.shape + (4,), 0.25)
    hit = label_idx >= 0
    labels[hit] = (1 - conf) / 4
    labels[hit, label_idx[hit]] += conf

    # Candidate pool
    retrieval = FitWeights.preset("retrieval")
    drafts = []
    for i, (kind, mesh, pose, cls) in enumerate(objects):
        drafts.append(("gt", i, mesh, _perturb(rng, pose, params), cls))
    for _ in range(params.n_distractors):
        if n == 0:
            break
        j = int(rng.integers(n))
        kind, mesh, pose, cls = objects[j]
        if rng.random() < 0.5:
            other = [s for s in params.shapes if s != kind] or [kind]
            wrong = random_shape(rng, other[int(rng.integers(len(other)))])
            drafts.append(("distractor", j, wrong, _perturb(rng, pose, params), cls))
        else:
            ang = math.radians(rng.uniform(60, 120)) * (1 if rng.random() < 0.5 else -1)
            shift = rng.uniform(0.2, 0.4)
            phi = rng.uniform(0, 2 * math.pi)
            t = np.asarray(pose.translation) + shift * np.array([math.cos(phi), 0.0, math.sin(phi)])
            drafts.append(("distractor", j, mesh, PoseTransform(pose.yaw + ang, pose.scale, tuple(t)), cls))

    ids = rng.permutation(len(drafts))
    candidates, gt_ids = [], []
    for (role, j, mesh, pose, cls), cid in zip(drafts, ids):
        lo, hi = params.true_class_prob
        probs = _confusion(rng, cls, lo, hi)
        nonobj = rng.uniform(0.01, 0.1) if role == "gt" else rng.uniform(0.05, 0.3)
        energy = fitting_cost(render_depth(mesh, pose, K), depth, regions[j], retrieval)
        candidates.append(Candidate(int(cid), mesh, pose, regions[j], probs, float(nonobj), energy,
                                    support_height=float(-floor_y), class_id=cls, region_id=j))
        if role == "gt":
            gt_ids.append(int(cid))
    candidates.sort(key=lambda c: c.id)

    scene = SceneFile(
        camera=K,
        layouts=layouts,
        objects=[SceneObject(i, mesh, pose, cls, regions[i]) for i, (_, mesh, pose, cls) in enumerate(objects)],
        metadata={"seed": params.seed},
    )
    room = {"floor_y": floor_y, "ceiling_y": ceil_y, "left_x": left_x, "right_x": right_x,
            "front_z": front_z, "door": door, "kinds": [o[0] for o in objects]}
    return SynthResult(scene, depth, gt_depth, pobj, labels, candidates, tuple(sorted(gt_ids)), room)


def _perturb(rng, pose: PoseTransform, params: SynthParams) -> PoseTransform:
    """Initial pose for a candidate: yaw, scale ratio and translation offsets from truth."""
    dyaw = math.radians(rng.uniform(-params.perturb_yaw_deg, params.perturb_yaw_deg))
    ratio = params.perturb_scales[int(rng.integers(len(params.perturb_scales)))]
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    t = np.asarray(pose.translation) + v * rng.uniform(0, params.perturb_translation)
    return PoseTransform(pose.yaw + dyaw, pose.scale / ratio, tuple(t))


def scene_renders(scene: SceneFile):
    """Per-object RenderResults and per-layout RenderResults of a scene."""
    K = scene.camera
    objs = [render_depth(o.mesh, o.pose, K) for o in scene.objects]
    lays = [render_layout(l, K) for l in scene.layouts]
    return objs, lays


def scene_depth(scene: SceneFile) -> np.ndarray:
    objs, lays = scene_renders(scene)
    return composite(objs + lays, scene.camera.shape)[0]

