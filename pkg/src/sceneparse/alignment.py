"""Depth-fitting cost and yaw/scale grid search with translational ICP."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    CameraIntrinsics,
    PointCloud,
    PoseTransform,
    RenderResult,
    TriangleMesh,
    backproject,
    render_depth,
    sample_surface,
)
from .validation import InputError, as_depth_array, check_mask


@dataclass(frozen=True)
class FitWeights:
    c_depth: float = 1.0
    c_missing: float = 0.9
    c_occ: float = 0.5
    # "closer": penalize rendered pixels in front of the observed surface
    # (model sticking into observed free space). "farther": the opposite sign.
    protrusion: str = "closer"

    def __post_init__(self):
        if min(self.c_depth, self.c_missing, self.c_occ) < 0:
            raise InputError("fit weights must be nonnegative")
        if self.protrusion not in ("closer", "farther"):
            raise InputError(f"protrusion must be 'closer' or 'farther', got {self.protrusion!r}")

    @classmethod
    def preset(cls, name: str) -> "FitWeights":
        try:
            return cls(**FIT_PRESETS[name])
        except KeyError:
            raise InputError(f"unknown fit weight preset {name!r}") from None


# Annotation-time and retrieval-time weight profiles.
FIT_PRESETS = {
    "annotation": {"c_depth": 1.0, "c_missing": 0.9, "c_occ": 0.5},
    "retrieval": {"c_depth": 1.0, "c_missing": 0.6, "c_occ": 0.9},
}


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    pose: PoseTransform
    cost: float
    render: RenderResult


def fitting_cost(render: RenderResult, observed, region, w: FitWeights) -> float:
    """Depth-fit penalty of a rendered model against observed depth over a region.

    Sums ``c_depth * |observed - rendered|`` over rendered region pixels,
    ``c_missing`` per unrendered region pixel, and ``c_occ`` times the
    protrusion over rendered pixels outside the region. Protrusion is
    ``max(observed - rendered, 0)`` by default (model in front of the observed
    surface); ``w.protrusion == "farther"`` uses ``max(rendered - observed, 0)``.
    Pixels with missing observed depth only count through the
    unrendered-region term.
    """
    obs = as_depth_array(observed)
    region = check_mask(region, obs.shape, "region")
    mask = check_mask(render.mask, obs.shape, "render mask")
    have = np.isfinite(obs)
    rd = np.where(mask, render.depth, 0.0)
    od = np.where(have, obs, 0.0)

    inside = region & mask & have
    depth_term = np.abs(od - rd)[inside].sum()
    missing_term = np.count_nonzero(region & ~mask)
    outside = ~region & mask & have
    gap = od - rd if w.protrusion == "closer" else rd - od
    occ_term = np.maximum(gap, 0.0)[outside].sum()
    return float(w.c_depth * depth_term + w.c_missing * missing_term + w.c_occ * occ_term)


def _as_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def icp_translation(
    model_points,
    target_points,
    init_t=(0.0, 0.0, 0.0),
    max_iters: int = 30,
    tol: float = 1e-4,
    reject_radius: float = 0.25,
) -> np.ndarray:
    """Translation-only point-to-point ICP.

    Each target point is matched to its nearest translated model point, so a
    dense model sampling approximates point-to-surface matching. Returns the
    total translation (``init_t`` plus accumulated updates) to add to
    ``model_points``. Matches farther than ``reject_radius`` are dropped from
    the update. Iteration continues through occasional uphill steps, but the
    returned translation is the iterate with the lowest mean nearest-neighbour
    distance (truncated at ``reject_radius``), so accepted iterates never get
    worse.
    """
    model = _as_points(model_points)
    target = _as_points(target_points)
    if len(model) == 0 or len(target) == 0:
        raise InputError("ICP needs non-empty model and target clouds")
    return _icp(cKDTree(model), model, np.eye(3), 1.0, target, init_t, max_iters, tol, reject_radius)


def _icp(tree, model, R, scale, target, init_t, max_iters, tol, reject_radius):
    """ICP against ``scale * R @ model + t`` with the tree built on unposed ``model``."""
    t = np.asarray(init_t, dtype=np.float64).copy()

    def matches(shift):
        # Map targets into the model frame instead of re-posing the model.
        q = ((target - shift) @ R) / scale
        dist, idx = tree.query(q, distance_upper_bound=reject_radius / scale)
        ok = np.isfinite(dist)
        return dist * scale, idx, ok

    def score(dist, ok):
        # Truncated mean over all targets, so newly admitted matches cannot
        # make a better alignment look worse.
        return np.where(ok, dist, reject_radius).mean()

    dist, idx, ok = matches(t)
    if not ok.any():
        return t
    err = score(dist, ok)
    best_t, best_err = t, err
    for _ in range(max_iters):
        posed = scale * (model[idx[ok]] @ R.T)
        step = (target[ok] - (posed + t)).mean(axis=0)
        if np.linalg.norm(step) < tol:
            break
        t = t + step
        dist, idx, ok = matches(t)
        if not ok.any():
            break
        err = score(dist, ok)
        # Iterates may wander briefly uphill; only improvements are accepted.
        if err < best_err:
            best_t, best_err = t, err
    return best_t


def yaw_grid(n: int = 16) -> np.ndarray:
    """Equally spaced yaw offsets from -pi ascending (n values, -pi included)."""
    return -math.pi + 2 * math.pi * np.arange(n) / n


@dataclass
class _Observation:
    observed: np.ndarray
    region: np.ndarray
    K: CameraIntrinsics
    weights: FitWeights
    target: np.ndarray

    @property
    def target_center(self) -> np.ndarray:
        return self.target.mean(axis=0)


def _prepare(observed, region, K, w) -> _Observation:
    obs = as_depth_array(observed)
    if obs.shape != K.shape:
        raise InputError(f"observed depth shape {obs.shape} does not match camera {K.shape}")
    region = check_mask(region, obs.shape, "region")
    cloud = backproject(np.where(region, obs, np.nan), K)
    if len(cloud) == 0:
        raise InputError("region has no observed depth to align against")
    return _Observation(obs, region, K, w, cloud.points)


def _evaluate_branch(mesh, yaw, scale, init_t, ob: _Observation, max_iters, tol, reject_radius,
                     surface=None):
    """Seed translation from mass centres, run ICP, and score with the fitting cost.

    ``surface`` is an optional (points, tree) pair of model-frame surface samples.
    """
    pose = PoseTransform(yaw, scale, tuple(init_t))
    seed_render = render_depth(mesh, pose, ob.K)
    if seed_render.mask.any():
        visible = backproject(seed_render.depth, ob.K).points
        seed_t = np.asarray(init_t) + (ob.target_center - visible.mean(axis=0))
        if max_iters > 0:
            if surface is None:
                pts = sample_surface(mesh)
                surface = (pts, cKDTree(pts))
            pts, tree = surface
            t = _icp(tree, pts, pose.rotation(), pose.scale, ob.target, seed_t,
                     max_iters, tol, reject_radius)
        else:
            t = seed_t
        pose = pose.with_translation(t)
    render = render_depth(mesh, pose, ob.K)
    cost = fitting_cost(render, ob.observed, ob.region, ob.weights)
    return AlignmentResult(pose, cost, render)


def align_model(
    mesh: TriangleMesh,
    region,
    observed,
    K: CameraIntrinsics,
    w: FitWeights,
    init: PoseTransform,
    n_yaws: int = 16,
    scales=(1.0, 0.9),
    max_iters: int = 30,
    tol: float = 1e-4,
    reject_radius: float = 0.25,
    refine_levels: int = 4,
    sample_spacing: float = 0.01,
    n_jobs: int = 1,
) -> AlignmentResult:
    """Search yaw x scale around ``init``, solving translation with ICP at each node.

    The grid visits yaw offsets from -180 degrees ascending with scale ratios in
    the given order; the lowest fitting cost wins, earlier grid nodes on ties.
    ``refine_levels`` halves the yaw step around the winner that many times
    (0 disables refinement and keeps the pure grid result). ICP matches the
    region's backprojected points against the posed mesh surface sampled every
    ``sample_spacing`` meters.
    """
    ob = _prepare(observed, region, K, w)
    nodes = [(init.yaw + dy, init.scale * s) for dy in yaw_grid(n_yaws) for s in scales]
    pts = sample_surface(mesh, sample_spacing / init.scale)
    surface = (pts, cKDTree(pts))

    def run(node):
        return _evaluate_branch(mesh, node[0], node[1], init.translation, ob, max_iters, tol,
                                reject_radius, surface)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(run, nodes))
    else:
        results = [run(n) for n in nodes]
    costs = np.array([r.cost for r in results])
    best = results[int(np.argmin(costs))]

    # Refine yaw separately within each scale branch so a coarse yaw error
    # cannot lock in the wrong scale.
    for k, sc in enumerate(scales):
        branch = [i for i in range(len(nodes)) if i % len(scales) == k]
        i0 = min(branch, key=lambda i: (costs[i], i))
        b_res, b_yaw = results[i0], nodes[i0][0]
        step = 2 * math.pi / n_yaws
        for _ in range(refine_levels):
            step /= 2
            for yaw in (b_yaw - step, b_yaw + step):
                r = _evaluate_branch(mesh, yaw, init.scale * sc, init.translation, ob, max_iters,
                                     tol, reject_radius, surface)
                if r.cost < b_res.cost:
                    b_res, b_yaw = r, yaw
        if b_res.cost < best.cost:
            best = b_res

    # ICP may drift from a good initial translation; never return worse than
    # init, and keep init when nothing beats it.
    init_render = render_depth(mesh, init, K)
    init_cost = fitting_cost(init_render, ob.observed, ob.region, w)
    if init_cost <= best.cost:
        best = AlignmentResult(init, init_cost, init_render)
    return best


def align_candidates(
    meshes: list[TriangleMesh],
    region,
    observed,
    K: CameraIntrinsics,
    w: FitWeights,
    inits: list[PoseTransform],
    prune_top: int | None = None,
    n_jobs: int = 1,
    **kwargs,
) -> list[AlignmentResult]:
    """Align several candidate meshes to one region.

    With ``prune_top`` set, each mesh is first scored over the yaw grid at its
    seeded translation without ICP, and only the ``prune_top`` cheapest are
    fully aligned; the rest get their pre-ICP best as the result.
    """
    ob = _prepare(observed, region, K, w)
    n_yaws = kwargs.get("n_yaws", 16)
    order = list(range(len(meshes)))
    coarse = {}
    if prune_top is not None and prune_top < len(meshes):
        for i in order:
            best = None
            for dy in yaw_grid(n_yaws):
                r = _evaluate_branch(meshes[i], inits[i].yaw + dy, inits[i].scale,
                                     inits[i].translation, ob, 0, 0.0, 0.0)
                if best is None or r.cost < best.cost:
                    best = r
            coarse[i] = best
        ranked = sorted(order, key=lambda i: (coarse[i].cost, i))
        full = set(ranked[:prune_top])
    else:
        full = set(order)

    def run(i):
        if i in full:
            return align_model(meshes[i], region, observed, K, w, inits[i], **kwargs)
        return coarse[i]

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(run, order))
    return [run(i) for i in order]
