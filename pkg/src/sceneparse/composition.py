"""Candidate ranking, proposal pruning and scene selection search."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, PoseTransform, RenderResult, TriangleMesh, render_with_range
from .validation import InputError, as_depth_array, check_mask, check_probability_map

logger = logging.getLogger(__name__)

LOG_FLOOR = math.log(1e-6)


@dataclass(frozen=True, eq=False)
class Candidate:
    """A posed shape hypothesis for one region proposal.

    ``class_probs`` is renormalized to sum to one on construction. ``render``
    and ``depth_range`` are filled by :meth:`rendered`.
    """

    id: int
    mesh: TriangleMesh
    pose: PoseTransform
    region: np.ndarray
    class_probs: np.ndarray
    non_object_prob: float
    fitting_energy: float = 0.0
    support_height: float | None = None
    class_id: int | None = None
    region_id: int | None = None
    shape_rank: int | None = None
    render: RenderResult | None = None
    depth_range: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=np.float64)
        total = probs.sum()
        if probs.ndim != 1 or total <= 0 or probs.min() < 0:
            raise InputError(f"candidate {self.id}: class_probs must be a nonnegative vector")
        object.__setattr__(self, "class_probs", probs / total)
        if not 0.0 <= self.non_object_prob <= 1.0:
            raise InputError(f"candidate {self.id}: non_object_prob outside [0, 1]")
        object.__setattr__(self, "region", check_mask(self.region))

    def rendered(self, K: CameraIntrinsics) -> "Candidate":
        render, rng = render_with_range(self.mesh, self.pose, K)
        return replace(self, render=render, depth_range=rng)

    @property
    def class_prob(self) -> float:
        """Highest class probability of the region."""
        return float(self.class_probs.max())


@dataclass(frozen=True)
class SelectionWeights:
    depth_clip_base: float = math.log2(1.03)
    greedy_depth_factor: float = 10.0
    w_f: float = 1.0
    w_c: float = -1500.0
    w_b: float = 1300.0
    overlap_stride: int = 2
    stage3_top: int = 30

    def __post_init__(self):
        if self.greedy_depth_factor < 1:
            raise InputError("greedy_depth_factor must be >= 1")
        if self.overlap_stride < 1:
            raise InputError("overlap_stride must be >= 1")


@dataclass(frozen=True, eq=False)
class SceneHypothesis:
    """Selection over candidates (first) then layouts, with its cost breakdown."""

    selected: np.ndarray
    n_candidates: int
    composite_render: np.ndarray
    cost: float
    terms: dict = field(default_factory=dict)
    stage_costs: tuple = ()

    @property
    def selected_candidates(self) -> np.ndarray:
        return self.selected[: self.n_candidates]

    @property
    def selected_layouts(self) -> np.ndarray:
        return self.selected[self.n_candidates:]


def _safe_log(p: float) -> float:
    return math.log(p) if p > 1e-6 else LOG_FLOOR


def candidate_energy(c: Candidate, w: SelectionWeights = SelectionWeights()) -> float:
    """Fitting energy plus weighted log class and non-object probabilities."""
    return w.w_f * c.fitting_energy + w.w_c * _safe_log(c.class_prob) + w.w_b * _safe_log(c.non_object_prob)


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def prune_proposals(candidates, target_count: int = 190, n_classes: int = 2, n_shapes: int = 5,
                    n_keep: int = 2, iou_threshold: float = 0.9,
                    w: SelectionWeights = SelectionWeights()):
    """Reduce a candidate pool to a few promising shapes per surviving region.

    Regions are grouped by ``region_id`` (each candidate is its own region when
    unset). Regions are suppressed at IoU above ``iou_threshold`` in favour of
    lower non-object probability, the ``target_count`` least non-object-like
    survive, and each keeps candidates from its top ``n_classes`` classes with
    shape rank below ``n_shapes``, of which the best ``n_keep`` by
    :func:`candidate_energy` are returned (ordered by id).
    """
    groups: dict = {}
    for c in candidates:
        key = c.region_id if c.region_id is not None else ("cand", c.id)
        groups.setdefault(key, []).append(c)
    regions = []
    for key, members in groups.items():
        rep = min(members, key=lambda c: c.id)
        regions.append((rep.non_object_prob, rep.id, key, rep.region, rep.class_probs))
    regions.sort(key=lambda r: (r[0], r[1]))

    kept = []
    for r in regions:
        if any(_iou(r[3], k[3]) > iou_threshold for k in kept):
            continue
        kept.append(r)
    kept = kept[:target_count]

    out = []
    for _, _, key, _, probs in kept:
        top_classes = list(np.argsort(-probs, kind="stable")[:n_classes])
        pool = []
        for c in groups[key]:
            if c.class_id is not None and c.class_id not in top_classes:
                continue
            if c.shape_rank is not None and c.shape_rank >= n_shapes:
                continue
            pool.append(c)
        pool.sort(key=lambda c: (candidate_energy(c, w), c.id))
        out.extend(pool[:n_keep])
    out.sort(key=lambda c: c.id)
    return out


def _layout_render(layout, K):
    if isinstance(layout, RenderResult):
        return layout
    if K is None:
        raise InputError("rendering layout planes requires camera intrinsics")
    from .layout import render_layout

    return render_layout(layout, K)


class SelectionProblem:
    """Precomputed per-model arrays for fast selection cost evaluation.

    Model ``i < n_candidates`` is candidate ``i``; the rest are layouts.
    """

    def __init__(self, candidates, layouts, observed, p_object, w: SelectionWeights = SelectionWeights(),
                 camera: CameraIntrinsics | None = None, exact_overlap: bool = False):
        obs = as_depth_array(observed)
        shape = obs.shape
        self.shape = shape
        self.w = w
        self.candidates = list(candidates)
        self.layouts = [_layout_render(l, camera) for l in layouts]
        self.n_candidates = len(self.candidates)
        self.n = self.n_candidates + len(self.layouts)
        pobj = check_probability_map(p_object, shape, "p_object")
        P = obs.size

        renders = []
        for c in self.candidates:
            if c.render is None:
                if camera is None:
                    raise InputError(f"candidate {c.id} has no cached render and no camera was given")
                c = c.rendered(camera)
            renders.append(c)
        self.candidates = renders
        for c in self.candidates:
            if c.render.depth.shape != shape or c.region.shape != shape:
                raise InputError(f"candidate {c.id} does not match the observed image size")
        for r in self.layouts:
            if r.depth.shape != shape:
                raise InputError("layout render does not match the observed image size")

        depth = np.full((self.n, P), np.inf)
        for i, c in enumerate(self.candidates):
            m = c.render.mask.ravel()
            depth[i, m] = c.render.depth.ravel()[m]
        for k, r in enumerate(self.layouts):
            m = r.mask.ravel()
            depth[self.n_candidates + k, m] = r.depth.ravel()[m]
        self.depth = depth
        self.masks = np.isfinite(depth)
        self.is_object = np.zeros(self.n, dtype=bool)
        self.is_object[: self.n_candidates] = True
        self.obs = obs.ravel()
        self.valid = np.isfinite(self.obs)
        self.pobj = pobj.ravel()
        self.regions = np.array([c.region.ravel() for c in self.candidates], dtype=bool).reshape(
            self.n_candidates, P
        )
        self.overlap = self._pair_overlap(1 if exact_overlap else w.overlap_stride)
        self.tie_rank = self._tie_rank()

    def _tie_rank(self) -> np.ndarray:
        ids = [c.id for c in self.candidates]
        rank = np.empty(self.n, dtype=np.int64)
        rank[: self.n_candidates] = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
        rank[self.n_candidates:] = self.n_candidates + np.arange(len(self.layouts))
        return rank

    def _pair_overlap(self, stride: int) -> np.ndarray:
        n = self.n_candidates
        out = np.zeros((n, n))
        if n < 2:
            return out
        H, W = self.shape
        sub = np.zeros((H, W), dtype=bool)
        sub[::stride, ::stride] = True
        sub = sub.ravel()
        near = np.full((n, sub.sum()), np.nan)
        far = np.full((n, sub.sum()), np.nan)
        for i, c in enumerate(self.candidates):
            lo, hi = c.depth_range if c.depth_range is not None else (c.render.depth, c.render.depth)
            near[i] = lo.ravel()[sub]
            far[i] = hi.ravel()[sub]
        cover = np.isfinite(near)
        for i in range(n - 1):
            idx = np.flatnonzero(cover[i])
            if len(idx) == 0:
                continue
            lo = np.maximum(near[i + 1:, idx], near[i, idx])
            hi = np.minimum(far[i + 1:, idx], far[i, idx])
            ov = np.where(cover[i + 1:, idx], np.maximum(hi - lo, 0.0), 0.0)
            out[i, i + 1:] = ov.sum(axis=1) * stride * stride
        return out

    def _check_y(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=bool)
        if y.shape != (self.n,):
            raise InputError(f"selection vector must have length {self.n}, got {y.shape}")
        return y

    def front(self, y) -> np.ndarray:
        """Index of the frontmost selected model per pixel (-1 where none)."""
        y = self._check_y(y)
        sel = np.flatnonzero(y)
        if len(sel) == 0:
            return np.full(self.depth.shape[1], -1)
        d = self.depth[sel]
        k = np.argmin(d, axis=0)
        f = sel[k]
        return np.where(np.isfinite(d[k, np.arange(d.shape[1])]), f, -1)

    def pixel_terms(self, front: np.ndarray):
        """Per-pixel depth term and object-probability term for a front map."""
        has = front >= 0
        d = np.where(has, self.depth[np.maximum(front, 0), np.arange(len(front))], np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.abs(np.log2(d / self.obs)) - self.w.depth_clip_base
        a = np.where(has, np.clip(err, 0.0, 1.0), 1.0)
        a = np.where(self.valid, a, 0.0)
        is_obj = np.where(has, self.is_object[np.maximum(front, 0)], False)
        b = np.abs(is_obj.astype(np.float64) - self.pobj)
        return a, b

    def terms(self, y) -> dict:
        y = self._check_y(y)
        a, b = self.pixel_terms(self.front(y))
        yo = y[: self.n_candidates]
        counts = yo.astype(np.int64) @ self.regions if self.n_candidates else np.zeros(len(self.obs))
        c = np.maximum(counts - 1, 0).sum()
        yf = yo.astype(np.float64)
        d = float(yf @ self.overlap @ yf)
        return {"depth": float(a.sum()), "object": float(b.sum()), "region": float(c), "overlap": d}

    def cost(self, y, depth_factor: float = 1.0) -> float:
        t = self.terms(y)
        return depth_factor * t["depth"] + t["object"] + t["region"] + t["overlap"]

    def composite(self, y) -> np.ndarray:
        f = self.front(y)
        d = np.where(f >= 0, self.depth[np.maximum(f, 0), np.arange(len(f))], np.nan)
        return d.reshape(self.shape)

    # Batched evaluation for exhaustive search.

    def _groups(self, depth_factor: float):
        order = np.argsort(self.depth, axis=0, kind="stable").T  # (P, n)
        covered = np.take_along_axis(self.masks.T, order, axis=1)
        sig = np.where(covered, order, -1)
        uniq, inverse = np.unique(sig, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        G = len(uniq)
        contrib = np.zeros((G, self.n + 1))
        P = len(self.obs)
        for m in range(-1, self.n):
            front = np.full(P, m)
            if m >= 0:
                front = np.where(self.masks[m], m, -1)
            a, b = self.pixel_terms(front)
            vals = depth_factor * a + b
            col = self.n if m < 0 else m
            contrib[:, col] = np.bincount(inverse, weights=vals, minlength=G)
        rank = np.full((G, self.n), self.n)
        for g in range(G):
            row = uniq[g]
            row = row[row >= 0]
            rank[g, row] = np.arange(len(row))
        padded = np.concatenate([np.where(uniq >= 0, uniq, self.n), np.full((G, 1), self.n)], axis=1)
        return contrib, rank, padded

    def batch_costs(self, Y: np.ndarray, depth_factor: float = 1.0, chunk: int = 512) -> np.ndarray:
        Y = np.asarray(Y, dtype=bool)
        contrib, rank, padded = self._groups(depth_factor)
        G = len(rank)
        nc = self.n_candidates
        if nc:
            reg_sig, reg_inv = np.unique(self.regions.T, axis=0, return_inverse=True)
            reg_w = np.bincount(reg_inv.ravel(), minlength=len(reg_sig))
        out = np.empty(len(Y))
        gi = np.arange(G)[None, :]
        for s in range(0, len(Y), chunk):
            Yc = Y[s:s + chunk]
            masked = np.where(Yc[:, None, :], rank[None], self.n)
            pos = masked.min(axis=2)
            model = padded[gi, pos]
            ab = contrib[gi, model].sum(axis=1)
            if nc:
                yo = Yc[:, :nc].astype(np.int64)
                counts = yo @ reg_sig.T.astype(np.int64)
                creg = (np.maximum(counts - 1, 0) * reg_w).sum(axis=1)
                yf = yo.astype(np.float64)
                dov = np.einsum("bi,ij,bj->b", yf, self.overlap, yf)
            else:
                creg = dov = 0.0
            out[s:s + chunk] = ab + creg + dov
        return out

    def hypothesis(self, y, stage_costs=()) -> SceneHypothesis:
        y = self._check_y(y).copy()
        t = self.terms(y)
        cost = t["depth"] + t["object"] + t["region"] + t["overlap"]
        return SceneHypothesis(y, self.n_candidates, self.composite(y), cost, t, tuple(stage_costs))


def selection_cost(y, candidates, layouts, observed, p_object, w: SelectionWeights = SelectionWeights(),
                   camera: CameraIntrinsics | None = None, exact_overlap: bool = False) -> float:
    """Scene selection cost of ``y`` (candidates first, then layouts).

    Sum of the clipped log-depth error of the composite render (unrendered
    pixels count 1, missing observations 0), the disagreement between the
    frontmost-is-object map and ``p_object``, the region over-coverage of
    selected candidates, and their pairwise depth-interval overlap.
    ``layouts`` may be LayoutPlanes (with ``camera``) or RenderResults.
    """
    problem = SelectionProblem(candidates, layouts, observed, p_object, w, camera, exact_overlap)
    return problem.cost(y)


def _improves(new: float, old: float) -> bool:
    return new < old - 1e-12 * max(1.0, abs(old))


class _Search:
    def __init__(self, problem: SelectionProblem, n_jobs: int):
        self.p = problem
        self.n_jobs = n_jobs

    def _eval_all(self, ys, factor):
        if self.n_jobs > 1 and len(ys) > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                return list(pool.map(lambda y: self.p.cost(y, factor), ys))
        return [self.p.cost(y, factor) for y in ys]

    def _best(self, moves, ys, factor):
        costs = self._eval_all(ys, factor)
        best = min(range(len(moves)), key=lambda k: (costs[k], self.p.tie_rank[moves[k]]))
        return moves[best], ys[best], costs[best]

    def greedy(self, y, factor):
        cur = self.p.cost(y, factor)
        while True:
            moves = [i for i in range(self.p.n) if not y[i]]
            if not moves:
                return y
            ys = []
            for i in moves:
                t = y.copy()
                t[i] = True
                ys.append(t)
            _, ny, nc = self._best(moves, ys, factor)
            if not _improves(nc, cur):
                return y
            y, cur = ny, nc

    def hill_climb(self, y):
        cur = self.p.cost(y)
        while True:
            moves = list(range(self.p.n))
            ys = []
            for i in moves:
                t = y.copy()
                t[i] = not t[i]
                ys.append(t)
            _, ny, nc = self._best(moves, ys, 1.0)
            if not _improves(nc, cur):
                return y
            y, cur = ny, nc

    def swap_in(self, y, energies):
        p = self.p
        nc = p.n_candidates
        mask_f = p.masks.astype(np.float32)
        touches = (mask_f @ mask_f.T) > 0
        objs = [i for i in range(nc) if not y[i]]
        objs.sort(key=lambda i: (energies[i], p.tie_rank[i]))
        order = list(range(nc, p.n)) + objs[: p.w.stage3_top]
        cur = p.cost(y)
        for i in order:
            if y[i]:
                continue
            t = y.copy()
            t[touches[i] & y] = False
            t[i] = True
            c = p.cost(t)
            if _improves(c, cur):
                y, cur = t, c
        return y


def compose_scene(candidates, layouts, observed, p_object, w: SelectionWeights = SelectionWeights(),
                  camera: CameraIntrinsics | None = None, n_jobs: int = 1,
                  exact_overlap: bool = False, problem: SelectionProblem | None = None) -> SceneHypothesis:
    """Choose candidates and layouts by greedy addition, hill climbing, then swap-in.

    Starts from the empty selection. Stage one adds the model with the largest
    cost drop under a depth term weighted by ``greedy_depth_factor``; stage two
    flips single models on the unweighted cost; stage three tries each
    unselected layout and the ``stage3_top`` best unselected candidates,
    dropping every selected model whose render overlaps it. Every stage only
    accepts strict improvements; ties go to the lowest candidate id.
    """
    p = problem or SelectionProblem(candidates, layouts, observed, p_object, w, camera, exact_overlap)
    search = _Search(p, n_jobs)
    y = np.zeros(p.n, dtype=bool)
    y = search.greedy(y, w.greedy_depth_factor)
    c1 = p.cost(y)
    y = search.hill_climb(y)
    c2 = p.cost(y)
    energies = [candidate_energy(c, w) for c in p.candidates]
    y = search.swap_in(y, energies)
    c3 = p.cost(y)
    logger.debug("stage costs %.6g %.6g %.6g", c1, c2, c3)
    return p.hypothesis(y, (c1, c2, c3))


def brute_force_compose(candidates, layouts, observed, p_object, w: SelectionWeights = SelectionWeights(),
                        camera: CameraIntrinsics | None = None, exact_overlap: bool = False,
                        max_models: int = 20, problem: SelectionProblem | None = None) -> SceneHypothesis:
    """Exact minimizer over all selections; ties go to the lexicographically smallest y."""
    p = problem or SelectionProblem(candidates, layouts, observed, p_object, w, camera, exact_overlap)
    n = p.n
    if n > max_models:
        raise InputError(f"exhaustive search over {n} models exceeds the limit of {max_models}")
    codes = np.arange(2 ** n, dtype=np.int64)
    # Model 0 is the most significant bit so integer order is lexicographic order.
    Y = ((codes[:, None] >> (n - 1 - np.arange(n))[None, :]) & 1).astype(bool)
    costs = p.batch_costs(Y)
    lo = costs.min()
    near = np.flatnonzero(costs <= lo + 1e-9 * max(1.0, abs(lo)))
    exact = [(p.cost(Y[k]), k) for k in near]
    best_cost = min(c for c, _ in exact)
    k = min(k for c, k in exact if c == best_cost)
    return p.hypothesis(Y[k])
