"""Axis-aligned layout plane proposals, scoring, suppression, extents and holes.

Planes live in the camera frame, which is assumed Manhattan-aligned: floor and
ceiling are y = const (y points down), side walls x = const, front walls z = const.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, PointCloud, RenderResult, backproject
from .validation import InputError, as_depth_array

logger = logging.getLogger(__name__)

CATEGORIES = ("floor", "ceiling", "left-wall", "right-wall", "front-wall")
LABELS = ("floor", "wall", "ceiling", "object")

SIGMA_P = 0.025
SIGMA_N = 0.0799


def category_for(axis: int, offset: float) -> str | None:
    """Layout category of the plane X[axis] = offset, or None if not a layout surface."""
    if axis == 1:
        return "floor" if offset > 0 else "ceiling"
    if axis == 0:
        return "right-wall" if offset > 0 else "left-wall"
    return "front-wall" if offset > 0 else None


def _in_plane_axes(axis: int) -> tuple[int, int]:
    return {0: (2, 1), 1: (0, 2), 2: (0, 1)}[axis]


@dataclass(frozen=True, eq=False)
class LayoutPlane:
    """Plane X[axis] = offset with a normal facing the camera.

    ``extent`` is (lo0, lo1, hi0, hi1) in the two in-plane axes given by
    ``in_plane_axes``; holes use the same layout.
    """

    category: str
    axis: int
    offset: float
    extent: tuple[float, float, float, float] = (-math.inf, -math.inf, math.inf, math.inf)
    holes: tuple[tuple[float, float, float, float], ...] = ()
    score: float = 0.0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise InputError(f"unknown layout category {self.category!r}")
        if self.axis not in (0, 1, 2):
            raise InputError(f"axis must be 0, 1 or 2, got {self.axis}")
        expected = category_for(self.axis, self.offset)
        if expected != self.category:
            raise InputError(
                f"category {self.category!r} inconsistent with axis {self.axis} offset {self.offset}"
            )
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "extent", tuple(float(x) for x in self.extent))
        object.__setattr__(self, "holes", tuple(tuple(float(x) for x in h) for h in self.holes))

    @property
    def normal(self) -> np.ndarray:
        n = np.zeros(3)
        n[self.axis] = -math.copysign(1.0, self.offset)
        return n

    @property
    def in_plane_axes(self) -> tuple[int, int]:
        return _in_plane_axes(self.axis)

    def __eq__(self, other):
        if not isinstance(other, LayoutPlane):
            return NotImplemented
        return (
            self.category == other.category
            and self.axis == other.axis
            and self.offset == other.offset
            and self.extent == other.extent
            and self.holes == other.holes
            and self.score == other.score
        )

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "axis": self.axis,
            "offset": self.offset,
            "extent": list(self.extent),
            "holes": [list(h) for h in self.holes],
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutPlane":
        return cls(
            category=d["category"],
            axis=int(d["axis"]),
            offset=float(d["offset"]),
            extent=tuple(float(x) for x in d.get("extent", (-math.inf, -math.inf, math.inf, math.inf))),
            holes=tuple(tuple(float(x) for x in h) for h in d.get("holes", ())),
            score=float(d.get("score", 0.0)),
        )


@dataclass(frozen=True)
class PlaneFeatures:
    values: tuple[float, ...]

    def __getitem__(self, k: int) -> float:
        """1-based feature access: ``feats[1]`` is f1."""
        return self.values[k - 1]

    def as_array(self) -> np.ndarray:
        return np.array(self.values)


@dataclass(frozen=True)
class PositionPrior:
    """Piecewise-constant prior over plane offsets, per category.

    ``table[category]`` is a list of (lo, hi, value) bins; offsets outside all
    bins get ``default``.
    """

    table: dict = field(default_factory=dict)
    default: float = 0.0

    def __call__(self, category: str, offset: float) -> float:
        for lo, hi, val in self.table.get(category, ()):
            if lo <= offset < hi:
                return float(val)
        return self.default

    @classmethod
    def standard(cls) -> "PositionPrior":
        return cls(
            table={
                "floor": [(0.6, 2.2, 1.0)],
                "ceiling": [(-2.5, -0.2, 1.0)],
                "left-wall": [(-8.0, -0.3, 1.0)],
                "right-wall": [(0.3, 8.0, 1.0)],
                "front-wall": [(0.8, 12.0, 1.0)],
            },
            default=0.0,
        )

    def to_dict(self) -> dict:
        return {"table": {k: [list(b) for b in v] for k, v in self.table.items()}, "default": self.default}

    @classmethod
    def from_dict(cls, d: dict) -> "PositionPrior":
        return cls({k: [tuple(b) for b in v] for k, v in d["table"].items()}, float(d.get("default", 0.0)))


@dataclass(frozen=True)
class PlaneScorer:
    """Linear score ``weights . features + bias`` for one category."""

    weights: tuple[float, ...]
    bias: float = 0.0

    def __call__(self, feats: np.ndarray) -> float:
        return float(np.dot(self.weights, feats) + self.bias)


_LABEL_FOR = {"floor": 0, "ceiling": 2, "left-wall": 1, "right-wall": 1, "front-wall": 1}


def default_scorers() -> dict[str, PlaneScorer]:
    """Hand-set weights: own-label support up, object support down, position prior.

    Features are scored with counts expressed as fractions of the cloud size.
    """
    scorers = {}
    for cat in CATEGORIES:
        w = np.zeros(12)
        w[1 + _LABEL_FOR[cat]] = 60.0  # f2..f4: own surface label
        w[4] = -60.0  # f5: object label
        w[5] = -2.0  # f6: points behind the plane
        w[11] = 1.0  # f12: position prior
        scorers[cat] = PlaneScorer(tuple(w), bias=-1.2)
    return scorers


def point_plane_probability(point, normal, plane: LayoutPlane, sigma_p: float = SIGMA_P,
                            sigma_n: float = SIGMA_N):
    """Gaussian affinity of an oriented point to a plane, 1 at zero distance.

    Works elementwise on (N, 3) arrays; NaN normals give probability 0.
    """
    point = np.asarray(point, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    dist = point[..., plane.axis] - plane.offset
    cosang = np.clip(normal @ plane.normal, -1.0, 1.0)
    ang = np.arccos(cosang)
    p = np.exp(-0.5 * (dist / sigma_p) ** 2) * np.exp(-0.5 * (ang / sigma_n) ** 2)
    return np.where(np.isfinite(p), p, 0.0)


def plane_depth_along_rays(plane: LayoutPlane, rays: np.ndarray) -> np.ndarray:
    """Depth (z) where each ray (unit-z direction) meets the infinite plane; NaN if not in front."""
    comp = rays[..., plane.axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = plane.offset / comp
    return np.where(np.isfinite(z) & (z > 0), z, np.nan)


def _rays_for(cloud: PointCloud) -> np.ndarray:
    pts = cloud.points
    return pts / pts[:, 2:3]


def plane_features(plane: LayoutPlane, cloud: PointCloud, labels, prior=None,
                   sigma_p: float = SIGMA_P, sigma_n: float = SIGMA_N,
                   behind_fraction: float = 0.03) -> PlaneFeatures:
    """Twelve plane detection features.

    ``labels`` is an (H, W, 4) map of floor/wall/ceiling/object probabilities
    for the image the cloud came from (or an (N, 4) array aligned with the
    cloud). ``prior`` is a callable ``(category, offset) -> float``.
    """
    lab = np.asarray(labels, dtype=np.float64)
    if lab.ndim == 3:
        lab = lab.reshape(-1, lab.shape[-1])[cloud.pixel_index]
    if len(lab) != len(cloud):
        raise InputError("label probabilities do not align with the point cloud")
    p = point_plane_probability(cloud.points, cloud.normals, plane, sigma_p, sigma_n)
    f1 = p.sum()
    f2_5 = p @ lab
    zp = plane_depth_along_rays(plane, _rays_for(cloud)) if len(cloud) else np.zeros(0)
    f6 = float(np.count_nonzero(cloud.points[:, 2] >= (1 + behind_fraction) * zp))
    head = np.concatenate([[f1], f2_5])
    ratios = head / f6 if f6 > 0 else np.zeros(5)
    f12 = prior(plane.category, plane.offset) if prior is not None else 0.0
    return PlaneFeatures(tuple(float(x) for x in np.concatenate([head, [f6], ratios, [f12]])))


def nms_planes(planes: list[LayoutPlane], radius: float = 0.15) -> list[LayoutPlane]:
    """Greedy suppression of same-category planes within ``radius`` of a stronger one."""
    order = sorted(range(len(planes)), key=lambda i: (-planes[i].score, i))
    kept: list[LayoutPlane] = []
    for i in order:
        p = planes[i]
        if any(k.category == p.category and k.axis == p.axis and abs(k.offset - p.offset) <= radius
               for k in kept):
            continue
        kept.append(p)
    return kept


@dataclass
class LayoutConfig:
    sigma_p: float = SIGMA_P
    sigma_n: float = SIGMA_N
    sweep_step: float = 0.05
    nms_radius: float = 0.15
    threshold: float = 0.0
    behind_fraction: float = 0.03
    hole_fraction: float = 0.05
    min_hole_pixels: int = 50
    scorers: dict = field(default_factory=default_scorers)
    prior: PositionPrior = field(default_factory=PositionPrior.standard)

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutConfig":
        kw = {k: v for k, v in d.items() if k not in ("scorers", "prior")}
        cfg = cls(**kw)
        if "scorers" in d:
            cfg.scorers = {c: PlaneScorer(tuple(s["weights"]), float(s.get("bias", 0.0)))
                           for c, s in d["scorers"].items()}
        if "prior" in d:
            cfg.prior = PositionPrior.from_dict(d["prior"])
        return cfg

    def to_dict(self) -> dict:
        return {
            "sigma_p": self.sigma_p,
            "sigma_n": self.sigma_n,
            "sweep_step": self.sweep_step,
            "nms_radius": self.nms_radius,
            "threshold": self.threshold,
            "behind_fraction": self.behind_fraction,
            "hole_fraction": self.hole_fraction,
            "min_hole_pixels": self.min_hole_pixels,
            "scorers": {c: {"weights": list(s.weights), "bias": s.bias} for c, s in self.scorers.items()},
            "prior": self.prior.to_dict(),
        }


def _normalized(feats: np.ndarray, n: int) -> np.ndarray:
    out = feats.copy()
    out[:6] /= max(n, 1)
    return out


def _sweep_axis(cloud, lab, axis, cfg: LayoutConfig, rays):
    """Score every sweep offset on one axis; returns list of (offset, f1, score, category)."""
    coords = cloud.points[:, axis]
    lo, hi = coords.min(), coords.max()
    # One step of padding on each side so boundary peaks have two neighbours.
    start = (math.floor(lo / cfg.sweep_step) - 1) * cfg.sweep_step
    count = int(math.ceil((hi - start) / cfg.sweep_step)) + 2
    offsets = start + cfg.sweep_step * np.arange(count)
    rows = []
    for off in offsets:
        cat = category_for(axis, off)
        if cat is None or abs(off) < 1e-9:
            continue
        plane = LayoutPlane(cat, axis, float(off))
        f = _features_fast(plane, cloud, lab, rays, cfg)
        rows.append((float(off), f[0], cfg.scorers[cat](_normalized(f, len(cloud))), cat))
    return rows


def _features_fast(plane, cloud, lab, rays, cfg: LayoutConfig) -> np.ndarray:
    p = point_plane_probability(cloud.points, cloud.normals, plane, cfg.sigma_p, cfg.sigma_n)
    head = np.concatenate([[p.sum()], p @ lab])
    zp = plane_depth_along_rays(plane, rays)
    f6 = float(np.count_nonzero(cloud.points[:, 2] >= (1 + cfg.behind_fraction) * zp))
    ratios = head / f6 if f6 > 0 else np.zeros(5)
    f12 = cfg.prior(plane.category, plane.offset)
    return np.concatenate([head, [f6], ratios, [f12]])


def _refine_offset(offsets: np.ndarray, support: np.ndarray, i: int, step: float) -> float:
    """Sub-step peak of the support curve via a parabola through log-support."""
    if i == 0 or i == len(offsets) - 1:
        return float(offsets[i])
    y = support[i - 1:i + 2]
    if np.any(y <= 0):
        return float(offsets[i])
    a, b, c = np.log(y)
    denom = a - 2 * b + c
    if denom >= 0:
        return float(offsets[i])
    delta = 0.5 * (a - c) / denom
    return float(offsets[i] + np.clip(delta, -0.5, 0.5) * step)


def _polish_offset(cloud, axis, offset, cfg: LayoutConfig, iters: int = 3) -> float:
    """Affinity-weighted mean coordinate of the points supporting a plane."""
    for _ in range(iters):
        cat = category_for(axis, offset)
        if cat is None:
            return offset
        plane = LayoutPlane(cat, axis, offset)
        p = point_plane_probability(cloud.points, cloud.normals, plane, cfg.sigma_p, cfg.sigma_n)
        p = np.where(np.abs(cloud.points[:, axis] - offset) <= 2 * cfg.sigma_p, p, 0.0)
        if p.sum() <= 0:
            return offset
        offset = float(p @ cloud.points[:, axis] / p.sum())
    return offset


def detect_planes(depth, K: CameraIntrinsics, labels, scorers=None, config: LayoutConfig | None = None):
    """Propose, score and suppress axis-aligned layout planes.

    Offsets are swept along each axis over the point-cloud range; the best
    offset of each surviving detection is refined to sub-step accuracy (a
    parabola through log-support, then the affinity-weighted mean coordinate of
    nearby supporting points) and rescored. Features f1..f6 are divided by the cloud size before scoring.
    """
    cfg = config or LayoutConfig()
    if scorers is not None:
        cfg = replace(cfg, scorers=scorers)
    d = as_depth_array(depth)
    cloud = backproject(d, K)
    if len(cloud) == 0:
        raise InputError("depth image has no valid pixels")
    lab = np.asarray(labels, dtype=np.float64)
    if lab.shape[:2] != d.shape or lab.shape[-1] != 4:
        raise InputError(f"label map must be (H, W, 4), got {lab.shape}")
    lab = lab.reshape(-1, 4)[cloud.pixel_index]
    rays = _rays_for(cloud)

    detections = []
    for axis in range(3):
        rows = _sweep_axis(cloud, lab, axis, cfg, rays)
        if not rows:
            continue
        offs = np.array([r[0] for r in rows])
        support = np.array([r[1] for r in rows])
        for i, (off, _, score, cat) in enumerate(rows):
            detections.append((score, i, axis, off, cat, offs, support))

    candidates = [LayoutPlane(cat, axis, off, score=score)
                  for score, _, axis, off, cat, _, _ in detections]
    kept = nms_planes(candidates, cfg.nms_radius)
    lookup = {(p.axis, p.offset): det for p, det in zip(candidates, detections)}

    out = []
    for p in kept:
        if p.score <= cfg.threshold:
            continue
        _, i, axis, off, cat, offs, support = lookup[(p.axis, p.offset)]
        ref = _refine_offset(offs, support, i, cfg.sweep_step)
        ref = _polish_offset(cloud, axis, ref, cfg)
        if category_for(axis, ref) != cat:
            ref = off
        plane = LayoutPlane(cat, axis, ref)
        f = _features_fast(plane, cloud, lab, rays, cfg)
        out.append(replace(plane, score=cfg.scorers[cat](_normalized(f, len(cloud)))))
    out = [p for p in nms_planes(out, cfg.nms_radius) if p.score > cfg.threshold]
    logger.debug("detected %d layout planes", len(out))
    return out


def _bounds_from(plane: LayoutPlane, others, inliers: np.ndarray | None, slack: float = 0.05):
    """Clip the plane's in-plane axes by perpendicular planes facing into the room."""
    lo = [-math.inf, -math.inf]
    hi = [math.inf, math.inf]
    for k, ax in enumerate(plane.in_plane_axes):
        uppers, lowers = [], []
        for q in others:
            if q.axis != ax:
                continue
            # Interior of q is the side its normal points to.
            (uppers if q.normal[ax] < 0 else lowers).append(q.offset)
        if inliers is not None and len(inliers):
            pmin, pmax = inliers[:, ax].min(), inliers[:, ax].max()
            uppers = [u for u in uppers if u >= pmax - slack] or uppers
            lowers = [v for v in lowers if v <= pmin + slack] or lowers
        if uppers:
            hi[k] = min(uppers)
        if lowers:
            lo[k] = max(lowers)
    return (lo[0], lo[1], hi[0], hi[1])


def plane_hits(plane: LayoutPlane, K: CameraIntrinsics):
    """Per-pixel depth and in-plane coordinates where each pixel ray meets the plane."""
    rays = K.ray_directions()
    z = plane_depth_along_rays(plane, rays)
    pts = rays * z[..., None]
    a0, a1 = plane.in_plane_axes
    return z, pts[..., a0], pts[..., a1]


def _inside(c0, c1, box, strict=False):
    lo0, lo1, hi0, hi1 = box
    if strict:
        return (c0 > lo0) & (c0 < hi0) & (c1 > lo1) & (c1 < hi1)
    return (c0 >= lo0) & (c0 <= hi0) & (c1 >= lo1) & (c1 <= hi1)


def plane_extent(plane: LayoutPlane, all_planes, depth, K: CameraIntrinsics,
                 config: LayoutConfig | None = None) -> LayoutPlane:
    """Bound a plane by its perpendicular neighbours and cut out holes.

    Holes come from connected components of pixels observed at least
    ``hole_fraction`` behind the plane; each component's ray hits on the plane
    are boxed, padded by half a pixel footprint, snapped to extent edges less
    than a footprint away and clipped to the extent. Components smaller than
    ``min_hole_pixels`` are ignored.
    """
    cfg = config or LayoutConfig()
    d = as_depth_array(depth)
    if d.shape != K.shape:
        raise InputError("depth does not match camera")
    others = [q for q in all_planes if q.axis != plane.axis]

    cloud = backproject(d, K)
    p = point_plane_probability(cloud.points, cloud.normals, plane, cfg.sigma_p, cfg.sigma_n)
    inliers = cloud.points[p > 0.5]
    extent = _bounds_from(plane, others, inliers)

    z, c0, c1 = plane_hits(plane, K)
    on_plane = np.isfinite(z) & _inside(c0, c1, extent)
    behind = on_plane & np.isfinite(d) & (d >= (1 + cfg.hole_fraction) * z)
    labels, n = ndimage.label(behind)
    # In-plane size of one pixel, per axis.
    with np.errstate(invalid="ignore"):
        foot = [np.fmax(np.abs(np.gradient(c, axis=1)), np.abs(np.gradient(c, axis=0))) for c in (c0, c1)]
    holes = []
    for k in range(1, n + 1):
        comp = labels == k
        if comp.sum() < cfg.min_hole_pixels:
            continue
        # Pixel centres sit half a pixel inside the true boundary; edges within
        # one pixel of the extent are taken to reach it (a doorway meets the floor).
        f0, f1 = (float(np.nanmedian(f[comp])) for f in foot)
        h = [c0[comp].min() - f0 / 2, c1[comp].min() - f1 / 2, c0[comp].max() + f0 / 2, c1[comp].max() + f1 / 2]
        for j, f in ((0, f0), (1, f1)):
            if h[j] - extent[j] <= f:
                h[j] = extent[j]
            if extent[j + 2] - h[j + 2] <= f:
                h[j + 2] = extent[j + 2]
        h = (max(h[0], extent[0]), max(h[1], extent[1]), min(h[2], extent[2]), min(h[3], extent[3]))
        if h[0] < h[2] and h[1] < h[3]:
            holes.append(h)
    holes.sort()
    return replace(plane, extent=extent, holes=tuple(holes))


def render_layout(plane: LayoutPlane, K: CameraIntrinsics) -> RenderResult:
    """Exact per-pixel depth of the bounded plane with its holes removed."""
    z, c0, c1 = plane_hits(plane, K)
    covered = np.isfinite(z) & _inside(c0, c1, plane.extent)
    for h in plane.holes:
        covered &= ~_inside(c0, c1, h)
    return RenderResult(np.where(covered, z, np.nan), covered)


def render_layouts(planes, K: CameraIntrinsics):
    """Composite depth and per-pixel category index (into CATEGORIES, -1 where empty)."""
    depth = np.full(K.shape, np.inf)
    label = np.full(K.shape, -1, dtype=np.int64)
    for p in planes:
        r = render_layout(p, K)
        d = np.where(r.mask, r.depth, np.inf)
        closer = d < depth
        depth[closer] = d[closer]
        label[closer] = CATEGORIES.index(p.category)
    return np.where(np.isfinite(depth), depth, np.nan), label


def support_height_candidates(cloud: PointCloud, bin_size: float = 0.03,
                              max_tilt_deg: float = 15.0, min_fraction: float = 0.02):
    """Heights (up positive, i.e. -y) of horizontal-surface histogram peaks, heaviest first.

    Only points whose normal is within ``max_tilt_deg`` of vertical vote. A
    peak must hold at least ``min_fraction`` of those points; its height is
    the mean of the points in the peak bin and its two neighbours.
    """
    if len(cloud) == 0:
        return []
    n = cloud.normals
    ok = np.isfinite(n).all(axis=1) & (np.abs(n[:, 1]) >= math.cos(math.radians(max_tilt_deg)))
    h = -cloud.points[ok, 1]
    if len(h) == 0:
        return []
    lo = math.floor(h.min() / bin_size) * bin_size
    idx = np.floor((h - lo) / bin_size + 1e-9).astype(int)
    counts = np.bincount(idx)
    padded = np.concatenate([[0], counts, [0]])
    peaks = []
    for b in range(len(counts)):
        c = padded[b + 1]
        if c == 0 or c < min_fraction * len(h):
            continue
        # Plateaus resolve to their leftmost bin.
        if c > padded[b] and c >= padded[b + 2]:
            near = np.abs(idx - b) <= 1
            peaks.append((int(counts[max(b - 1, 0):b + 2].sum()), float(h[near].mean())))
    peaks.sort(key=lambda t: (-t[0], t[1]))
    return [height for _, height in peaks]
