"""Depth, voxel occupancy, layout and segmentation-coverage metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, backproject, posed_vertices
from .layout import LayoutPlane, render_layouts
from .validation import InputError, as_depth_array

OCCLUSION_FRACTION = 0.03


@dataclass(frozen=True)
class MetricReport:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def __contains__(self, key):
        return key in self.values

    def merged(self, other: "MetricReport", prefix: str = "") -> "MetricReport":
        out = dict(self.values)
        out.update({prefix + k: v for k, v in other.values.items()})
        return MetricReport(out)

    def format(self) -> str:
        """One ``name: value`` line per metric, sorted by name."""
        return "\n".join(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}"
                         for k, v in sorted(self.values.items()))


def _rate(num, den) -> float:
    # Vacuous rates (nothing predicted / nothing to recall) count as perfect.
    return float(num) / float(den) if den else 1.0


def relative_depth_error(pred, gt) -> float:
    """Mean of |gt - pred| / gt over pixels with valid gt depth.

    Pixels where the prediction is missing count as relative error 1.
    """
    p = as_depth_array(pred)
    g = as_depth_array(gt)
    if p.shape != g.shape:
        raise InputError(f"shape mismatch {p.shape} vs {g.shape}")
    valid = np.isfinite(g)
    if not valid.any():
        raise InputError("ground-truth depth has no valid pixels")
    err = np.where(np.isfinite(p), np.abs(g - p) / np.where(valid, g, 1.0), 1.0)
    return float(err[valid].mean())


# Voxel grids


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Axis-aligned grid in the camera frame; voxel (i, j, k) is centred at origin + res * (i, j, k)."""

    resolution: float
    origin: tuple
    dims: tuple
    occupancy: np.ndarray
    scope: np.ndarray

    def __post_init__(self):
        if not self.resolution > 0:
            raise InputError("voxel resolution must be positive")
        if self.occupancy.shape != tuple(self.dims) or self.scope.shape != tuple(self.dims):
            raise InputError("occupancy and scope must match the grid dimensions")

    def centers(self) -> np.ndarray:
        return grid_centers(self.origin, self.dims, self.resolution)

    def same_frame(self, other: "VoxelGrid") -> bool:
        return (self.resolution == other.resolution and tuple(self.origin) == tuple(other.origin)
                and tuple(self.dims) == tuple(other.dims))

    @property
    def occupied(self) -> np.ndarray:
        """Occupied voxels inside the evaluation scope."""
        return self.occupancy & self.scope

    @property
    def free(self) -> np.ndarray:
        return self.scope & ~self.occupancy


def grid_centers(origin, dims, resolution) -> np.ndarray:
    axes = [origin[k] + resolution * np.arange(dims[k]) for k in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack(g, axis=-1)


def grid_frame(scene, resolution: float):
    """Origin and dims of a grid covering the camera and everything the scene shows.

    The origin is snapped to a multiple of ``resolution`` so grids built for
    the same scene agree exactly.
    """
    from .synth import scene_depth

    K = scene.camera
    pts = [np.zeros((1, 3))]
    d = scene_depth(scene)
    cloud = backproject(d, K)
    if len(cloud):
        pts.append(cloud.points)
    for o in scene.objects:
        pts.append(posed_vertices(o.mesh, o.pose))
    pts = np.vstack(pts)
    lo = np.floor(pts.min(axis=0) / resolution) - 1
    hi = np.ceil(pts.max(axis=0) / resolution) + 1
    origin = tuple(float(x) for x in lo * resolution)
    dims = tuple(int(x) for x in hi - lo + 1)
    return origin, dims


def _ray_hits(centers: np.ndarray, tris: np.ndarray, chunk: int = 4096):
    """Near and far ray parameters of triangle crossings along camera rays through ``centers``.

    The ray is ``t * center``; returns (near, far) with NaN where the ray misses.
    """
    n = len(centers)
    near = np.full(n, np.nan)
    far = np.full(n, np.nan)
    v0, e1, e2 = tris[:, 0], tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]
    for s in range(0, n, chunk):
        d = centers[s:s + chunk, None, :]
        p = np.cross(d, e2[None])
        det = np.einsum("ntk,tk->nt", p, e1)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = -v0[None]
        u = np.einsum("ntk,ntk->nt", np.broadcast_to(tvec, p.shape), p) * inv
        q = np.cross(np.broadcast_to(tvec, p.shape), e1[None])
        v = np.einsum("ntk,ntk->nt", d, q) * inv
        t = np.einsum("tk,ntk->nt", e2, q) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        tn = np.where(hit, t, np.inf).min(axis=1)
        tf = np.where(hit, t, -np.inf).max(axis=1)
        has = hit.any(axis=1)
        near[s:s + chunk] = np.where(has, tn, np.nan)
        far[s:s + chunk] = np.where(has, tf, np.nan)
    return near, far


def _object_occupancy(mesh, pose, centers_flat, origin, dims, res) -> np.ndarray:
    verts = posed_vertices(mesh, pose)
    lo = np.floor((verts.min(axis=0) - np.asarray(origin)) / res).astype(int)
    hi = np.ceil((verts.max(axis=0) - np.asarray(origin)) / res).astype(int)
    lo = np.clip(lo, 0, np.asarray(dims) - 1)
    hi = np.clip(hi, 0, np.asarray(dims) - 1)
    occ = np.zeros(dims, dtype=bool)
    sub = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    c = centers_flat.reshape(tuple(dims) + (3,))[sub].reshape(-1, 3)
    if len(c) == 0:
        return occ
    near, far = _ray_hits(c, verts[mesh.triangles])
    # The centre lies at t = 1 on its own ray.
    inside = (near <= 1.0) & (far >= 1.0)
    occ[sub] = inside.reshape(tuple(b - a + 1 for a, b in zip(lo, hi)))
    return occ


def _plane_coords(plane: LayoutPlane, pts: np.ndarray):
    a0, a1 = plane.in_plane_axes
    return pts[..., a0], pts[..., a1]


def _on_surface(plane: LayoutPlane, pts: np.ndarray) -> np.ndarray:
    """Points whose in-plane coordinates fall on the bounded, holed surface."""
    c0, c1 = _plane_coords(plane, pts)
    lo0, lo1, hi0, hi1 = plane.extent
    ok = (c0 >= lo0) & (c0 <= hi0) & (c1 >= lo1) & (c1 <= hi1)
    for h in plane.holes:
        ok &= ~((c0 >= h[0]) & (c0 <= h[2]) & (c1 >= h[1]) & (c1 <= h[3]))
    return ok


def _layout_occupancy(plane: LayoutPlane, centers: np.ndarray, res: float) -> np.ndarray:
    d = centers[..., plane.axis] - plane.offset
    slab = (d >= -res / 2) & (d < res / 2)
    return slab & _on_surface(plane, centers)


def evaluation_scope(centers: np.ndarray, K: CameraIntrinsics, layouts, res: float) -> np.ndarray:
    """Voxels in view and not behind a solid ground-truth layout surface.

    A voxel is behind a surface when the segment from the camera to its
    centre crosses the surface (inside its extent, outside its holes) and the
    centre lies more than half a voxel beyond the plane.
    """
    z = centers[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * centers[..., 0] / z + K.cx
        v = K.fy * centers[..., 1] / z + K.cy
    scope = (z > 0) & (u >= -0.5) & (u < K.width - 0.5) & (v >= -0.5) & (v < K.height - 0.5)
    for plane in layouts:
        comp = centers[..., plane.axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = plane.offset / comp
        beyond = (np.sign(comp) == np.sign(plane.offset)) & (np.abs(comp) - abs(plane.offset) > res / 2)
        crossing = beyond & (s > 0) & (s < 1)
        if not crossing.any():
            continue
        hit = centers * np.where(crossing, s, 0.0)[..., None]
        scope &= ~(crossing & _on_surface(plane, hit))
    return scope


def voxelize_scene(scene, resolution: float = 0.03, reference=None) -> VoxelGrid:
    """Solid occupancy of a scene's objects and layout surfaces.

    Each voxel centre is tested against every object along the camera ray
    through it: the voxel is filled when it lies between the nearest and
    farthest surface crossings. Layout surfaces fill a one-voxel slab. The
    grid frame and evaluation scope come from ``reference`` (the ground-truth
    scene; defaults to ``scene``).
    """
    ref = reference if reference is not None else scene
    if ref.camera != scene.camera:
        raise InputError("scene and reference use different cameras")
    origin, dims = grid_frame(ref, resolution)
    centers = grid_centers(origin, dims, resolution)
    flat = centers.reshape(-1, 3)
    occ = np.zeros(dims, dtype=bool)
    for o in scene.objects:
        occ |= _object_occupancy(o.mesh, o.pose, flat, origin, dims, resolution)
    for l in scene.layouts:
        occ |= _layout_occupancy(l, centers, resolution)
    scope = evaluation_scope(centers, ref.camera, ref.layouts, resolution)
    return VoxelGrid(resolution, origin, dims, occ, scope)


def _precise(pred_pts, gt_pts, tf: float) -> np.ndarray:
    """Whether each predicted point has a gt point within ``tf`` times its depth."""
    if len(pred_pts) == 0:
        return np.zeros(0, dtype=bool)
    if len(gt_pts) == 0:
        return np.zeros(len(pred_pts), dtype=bool)
    dist, _ = cKDTree(gt_pts).query(pred_pts)
    return dist <= tf * np.abs(pred_pts[:, 2])


def _recalled(gt_pts, pred_pts, tf: float) -> np.ndarray:
    """Whether each gt point lies within ``tf`` times the depth of some predicted point."""
    if len(gt_pts) == 0:
        return np.zeros(0, dtype=bool)
    if len(pred_pts) == 0:
        return np.zeros(len(gt_pts), dtype=bool)
    eps_pred = tf * np.abs(pred_pts[:, 2])
    # A match v of g has z_v <= z_g + |v - g|, so it lies within tf * z_g / (1 - tf).
    if tf >= 1:
        reach = np.full(len(gt_pts), np.inf)
    else:
        reach = tf * np.abs(gt_pts[:, 2]) / (1 - tf) + 1e-12
    tree = cKDTree(pred_pts)
    k = min(8, len(pred_pts))
    d, idx = tree.query(gt_pts, k=k)
    d = d.reshape(len(gt_pts), k)
    idx = idx.reshape(len(gt_pts), k)
    recalled = (d <= eps_pred[idx]).any(axis=1)
    # All k nearest failed but farther candidates may still qualify.
    for g in np.flatnonzero(~recalled & (d[:, -1] <= reach)):
        cand = np.asarray(tree.query_ball_point(gt_pts[g], reach[g]), dtype=np.int64)
        if len(cand):
            dd = np.linalg.norm(pred_pts[cand] - gt_pts[g], axis=1)
            recalled[g] = bool((dd <= eps_pred[cand]).any())
    return recalled


def _set_report(pred: np.ndarray, gt: np.ndarray, centers: np.ndarray, tf: float, name: str) -> dict:
    both = pred & gt
    inter = np.count_nonzero(both)
    npred, ngt = np.count_nonzero(pred), np.count_nonzero(gt)
    # Shared voxels match at distance zero; only the differences need a search.
    correct = inter + np.count_nonzero(_precise(centers[pred & ~gt], centers[gt], tf))
    recalled = inter + np.count_nonzero(_recalled(centers[gt & ~pred], centers[pred], tf))
    return {
        f"{name}_precision": _rate(inter, npred),
        f"{name}_recall": _rate(inter, ngt),
        f"{name}_precision_tol": _rate(correct, npred),
        f"{name}_recall_tol": _rate(recalled, ngt),
    }


def occupancy_metrics(pred: VoxelGrid, gt: VoxelGrid, tolerance_factor: float = 0.05) -> MetricReport:
    """Strict and tolerant precision/recall of occupied and free voxels in the gt scope."""
    if not pred.same_frame(gt):
        raise InputError("voxel grids are in different frames")
    if tolerance_factor < 0:
        raise InputError("tolerance_factor must be nonnegative")
    scope = gt.scope
    centers = gt.centers()
    po, go = pred.occupancy & scope, gt.occupancy & scope
    out = _set_report(po, go, centers, tolerance_factor, "occupancy")
    out.update(_set_report(scope & ~pred.occupancy, scope & ~gt.occupancy, centers, tolerance_factor,
                           "freespace"))
    out["scope_voxels"] = int(np.count_nonzero(scope))
    return MetricReport(out)


# Layout metrics


def _splits(gt_depth, observed, evaluated, occlusion_fraction):
    if observed is None:
        occluded = np.zeros_like(evaluated)
    else:
        obs = as_depth_array(observed)
        if obs.shape != gt_depth.shape:
            raise InputError("observed depth does not match the camera")
        with np.errstate(invalid="ignore"):
            occluded = evaluated & np.isfinite(obs) & (obs * (1 + occlusion_fraction) < gt_depth)
    return occluded, evaluated & ~occluded


def layout_pixel_error(pred_layouts, gt_layouts, K: CameraIntrinsics, observed=None,
                       occlusion_fraction: float = OCCLUSION_FRACTION) -> MetricReport:
    """Fraction of pixels whose 5-way layout label differs from the ground truth.

    Pixels are evaluated where the ground-truth layout renders; a pixel is
    occluded when the observed depth is nearer than the gt layout by more than
    ``occlusion_fraction``.
    """
    gd, gl = render_layouts(gt_layouts, K)
    _, pl = render_layouts(pred_layouts, K)
    evaluated = gl >= 0
    occluded, visible = _splits(gd, observed, evaluated, occlusion_fraction)
    wrong = pl != gl
    out = {}
    for name, m in (("all", evaluated), ("visible", visible), ("occluded", occluded)):
        out[f"pixel_error_{name}"] = float(wrong[m].mean()) if m.any() else 0.0
        out[f"pixels_{name}"] = int(m.sum())
    return MetricReport(out)


def layout_depth_error(pred_layouts, gt_layouts, K: CameraIntrinsics, observed=None,
                       occlusion_fraction: float = OCCLUSION_FRACTION) -> MetricReport:
    """Mean absolute depth difference (meters) between predicted and gt layout renders.

    Evaluated where both render. With ``observed`` the visible/occluded split
    is reported, along with the sensor error (|observed - gt layout|) on the
    same pixels.
    """
    gd, gl = render_layouts(gt_layouts, K)
    pd, _ = render_layouts(pred_layouts, K)
    evaluated = np.isfinite(gd) & np.isfinite(pd)
    occluded, visible = _splits(gd, observed, evaluated, occlusion_fraction)
    err = np.abs(pd - gd)
    out = {}
    for name, m in (("all", evaluated), ("visible", visible), ("occluded", occluded)):
        out[f"depth_error_{name}"] = float(err[m].mean()) if m.any() else 0.0
    if observed is not None:
        obs = as_depth_array(observed)
        sensor = np.abs(obs - gd)
        for name, m in (("all", evaluated), ("visible", visible), ("occluded", occluded)):
            m = m & np.isfinite(obs)
            out[f"sensor_error_{name}"] = float(sensor[m].mean()) if m.any() else 0.0
    out["layout_coverage"] = _rate(np.count_nonzero(evaluated), np.count_nonzero(np.isfinite(gd)))
    return MetricReport(out)


# Segmentation coverage


def _class_of(instances, classes):
    if classes is None:
        return np.where(instances > 0, 0, -1)
    lut = np.full(int(instances.max(initial=0)) + 1, -1)
    for k, c in classes.items():
        if 0 < k < len(lut):
            lut[k] = c
    return np.where(instances > 0, lut[instances], -1)


def coverage_metrics(pred_instances, gt_instances, pred_classes=None, gt_classes=None) -> MetricReport:
    """Instance coverage and semantic accuracy averages.

    Instance maps are integer label images with 0 as background; the class
    dicts map instance id to class id (all instances share one class when
    omitted). Each gt instance is covered by its best IoU against predicted
    instances of the same class.
    """
    pi = np.asarray(pred_instances, dtype=np.int64)
    gi = np.asarray(gt_instances, dtype=np.int64)
    if pi.shape != gi.shape:
        raise InputError("instance maps differ in shape")
    pc = _class_of(pi, pred_classes)
    gc = _class_of(gi, gt_classes)

    gt_ids = [int(k) for k in np.unique(gi) if k > 0]
    pred_ids = [int(k) for k in np.unique(pi) if k > 0]
    pred_class = {k: (pred_classes or {}).get(k, 0) for k in pred_ids}
    covs, areas = [], []
    for g in gt_ids:
        gm = gi == g
        cls = (gt_classes or {}).get(g, 0)
        best = 0.0
        for p in pred_ids:
            if pred_class[p] != cls:
                continue
            pm = pi == p
            inter = np.count_nonzero(gm & pm)
            if inter:
                best = max(best, inter / np.count_nonzero(gm | pm))
        covs.append(best)
        areas.append(np.count_nonzero(gm))
    out = {
        "coverage_unweighted": float(np.mean(covs)) if covs else 1.0,
        "coverage_weighted": float(np.dot(covs, areas) / np.sum(areas)) if covs else 1.0,
    }

    labeled = gc >= 0
    right = (pc == gc) & labeled
    out["avg_pixel"] = _rate(np.count_nonzero(right), np.count_nonzero(labeled))
    per_class = [_rate(np.count_nonzero(right & (gc == c)), np.count_nonzero(gc == c))
                 for c in np.unique(gc[labeled])]
    out["avg_class"] = float(np.mean(per_class)) if per_class else 1.0
    per_inst = [_rate(np.count_nonzero(right & (gi == g)), np.count_nonzero(gi == g)) for g in gt_ids]
    out["avg_instance"] = float(np.mean(per_inst)) if per_inst else 1.0
    return MetricReport(out)


def instance_map(scene):
    """Visible-instance label image (object id + 1, 0 elsewhere) and id -> class mapping."""
    from .geometry import composite
    from .synth import scene_renders

    objs, lays = scene_renders(scene)
    _, owner = composite(objs + lays, scene.camera.shape)
    inst = np.zeros(scene.camera.shape, dtype=np.int64)
    classes = {}
    for i, o in enumerate(scene.objects):
        inst[owner == i] = i + 1
        classes[i + 1] = -1 if o.class_id is None else o.class_id
    return inst, classes


def evaluate_scene(pred, gt, resolution: float = 0.03, tolerance: float = 0.05, observed=None,
                   occlusion_fraction: float = OCCLUSION_FRACTION) -> MetricReport:
    """Every metric for a predicted scene file against a ground-truth scene file."""
    from .synth import scene_depth

    if pred.camera != gt.camera:
        raise InputError("predicted and ground-truth scenes use different cameras")
    K = gt.camera
    gt_depth = scene_depth(gt) if observed is None else as_depth_array(observed)
    report = MetricReport({"relative_depth_error": relative_depth_error(scene_depth(pred), gt_depth)})
    report = report.merged(occupancy_metrics(voxelize_scene(pred, resolution, gt),
                                             voxelize_scene(gt, resolution, gt), tolerance))
    if gt.layouts:
        report = report.merged(layout_pixel_error(pred.layouts, gt.layouts, K, gt_depth, occlusion_fraction))
        report = report.merged(layout_depth_error(pred.layouts, gt.layouts, K, gt_depth, occlusion_fraction))
    pi, pcls = instance_map(pred)
    gi, gcls = instance_map(gt)
    return report.merged(coverage_metrics(pi, gi, pcls, gcls))


__all__ = [
    "MetricReport", "VoxelGrid", "relative_depth_error", "voxelize_scene", "occupancy_metrics",
    "layout_pixel_error", "layout_depth_error", "coverage_metrics", "evaluate_scene",
    "evaluation_scope", "grid_frame", "grid_centers", "instance_map"
]
