"""Slow reference implementations used as test oracles.

Everything here is written with plain loops and closed-form geometry so it
shares no code paths with the vectorized library.
"""

import math

import numpy as np


def fitting_cost_loops(render_depth, render_mask, observed, region, c_depth, c_missing, c_occ, closer=True):
    total_d = total_m = total_o = 0.0
    H, W = observed.shape
    for v in range(H):
        for u in range(W):
            obs = observed[v, u]
            have = math.isfinite(obs)
            if region[v, u]:
                if not render_mask[v, u]:
                    total_m += 1
                elif have:
                    total_d += abs(obs - render_depth[v, u])
            elif render_mask[v, u] and have:
                gap = obs - render_depth[v, u] if closer else render_depth[v, u] - obs
                total_o += max(gap, 0.0)
    return c_depth * total_d + c_missing * total_m + c_occ * total_o


def candidate_energy_formula(fitting_energy, class_probs, non_object_prob, w_f=1.0, w_c=-1500.0, w_b=1300.0):
    def lg(p):
        return math.log(p) if p > 1e-6 else math.log(1e-6)

    probs = [p / sum(class_probs) for p in class_probs]
    return w_f * fitting_energy + w_c * lg(max(probs)) + w_b * lg(non_object_prob)


def selection_cost_loops(y, depths, nears, fars, is_object, regions, observed, p_object,
                         base=math.log2(1.03), depth_factor=1.0):
    """Four-term selection cost with per-pixel, per-model loops.

    ``depths[i]`` is model i's rendered depth (NaN uncovered); ``nears``/``fars``
    exist for object models only (index aligned with ``regions``).
    """
    H, W = observed.shape
    n = len(depths)
    a = b = c = d = 0.0
    n_obj = len(regions)
    for v in range(H):
        for u in range(W):
            best, owner = math.inf, -1
            for i in range(n):
                if y[i] and math.isfinite(depths[i][v, u]) and depths[i][v, u] < best:
                    best, owner = depths[i][v, u], i
            obs = observed[v, u]
            if math.isfinite(obs):
                if owner < 0:
                    a += 1.0
                else:
                    a += min(max(abs(math.log2(best / obs)) - base, 0.0), 1.0)
            isobj = 1.0 if owner >= 0 and is_object[owner] else 0.0
            b += abs(isobj - p_object[v, u])
            cnt = sum(1 for i in range(n_obj) if y[i] and regions[i][v, u])
            c += max(cnt - 1, 0)
            for i in range(n_obj):
                for k in range(i + 1, n_obj):
                    if not (y[i] and y[k]):
                        continue
                    if not (math.isfinite(nears[i][v, u]) and math.isfinite(nears[k][v, u])):
                        continue
                    lo = max(nears[i][v, u], nears[k][v, u])
                    hi = min(fars[i][v, u], fars[k][v, u])
                    d += max(hi - lo, 0.0)
    return depth_factor * a + b + c + d


def ray_triangle(direction, tri):
    """Ray parameter t of the hit of ray t*direction with a triangle, or None."""
    d = np.asarray(direction, dtype=float)
    p0, p1, p2 = (np.asarray(p, dtype=float) for p in tri)
    n = np.cross(p1 - p0, p2 - p0)
    denom = n @ d
    if abs(denom) < 1e-14:
        return None
    t = (n @ p0) / denom
    if t <= 0:
        return None
    x = t * d
    # Inside test via same-side barycentric signs.
    s = [np.cross(q1 - q0, x - q0) @ n for q0, q1 in ((p0, p1), (p1, p2), (p2, p0))]
    if all(v >= -1e-12 for v in s) or all(v <= 1e-12 for v in s):
        return t
    return None


def ray_box_interval(direction, lo, hi, pose):
    """Slab-method [t_near, t_far] of ray t*direction with a posed axis-aligned box."""
    R = pose.rotation()
    origin = -np.asarray(pose.translation) @ R / pose.scale
    d = np.asarray(direction, dtype=float) @ R / pose.scale
    t0, t1 = -math.inf, math.inf
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if not (lo[k] <= origin[k] <= hi[k]):
                return None
            continue
        a = (lo[k] - origin[k]) / d[k]
        b = (hi[k] - origin[k]) / d[k]
        t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
    if t0 > t1 or t1 <= 0:
        return None
    return t0, t1


def point_triangle_distance(p, tri):
    """Closest-point distance from p to a triangle (brute force over regions)."""
    a, b, c = (np.asarray(x, dtype=float) for x in tri)
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - (p - a) @ n * n
    inside = True
    for u, v in ((a, b), (b, c), (c, a)):
        if np.cross(v - u, q - u) @ n < 0:
            inside = False
    if inside:
        return abs((p - a) @ n)

    def seg(u, v):
        t = np.clip((p - u) @ (v - u) / ((v - u) @ (v - u)), 0, 1)
        return np.linalg.norm(p - (u + t * (v - u)))

    return min(seg(a, b), seg(b, c), seg(c, a))


def nms_oracle(planes, radius=0.15):
    """Repeatedly take the best remaining plane and drop its neighbours."""
    remaining = list(range(len(planes)))
    kept = []
    while remaining:
        best = remaining[0]
        for i in remaining:
            if planes[i].score > planes[best].score:
                best = i
        kept.append(planes[best])
        remaining = [i for i in remaining if i != best and not (
            planes[i].category == planes[best].category
            and abs(planes[i].offset - planes[best].offset) <= radius)]
    return kept


def plane_features_loops(plane, points, normals, labels, prior_value, sigma_p=0.025, sigma_n=0.0799):
    f1 = 0.0
    f2_5 = [0.0] * 4
    f6 = 0
    nvec = plane.normal
    for p, n, lab in zip(points, normals, labels):
        dist = p[plane.axis] - plane.offset
        if np.all(np.isfinite(n)):
            ang = math.acos(max(-1.0, min(1.0, float(n @ nvec))))
            prob = math.exp(-0.5 * (dist / sigma_p) ** 2) * math.exp(-0.5 * (ang / sigma_n) ** 2)
        else:
            prob = 0.0
        f1 += prob
        for k in range(4):
            f2_5[k] += prob * lab[k]
        ray_comp = p[plane.axis] / p[2]
        if ray_comp != 0:
            zp = plane.offset / ray_comp
            if zp > 0 and p[2] >= 1.03 * zp:
                f6 += 1
    head = [f1] + f2_5
    ratios = [h / f6 for h in head] if f6 else [0.0] * 5
    return head + [float(f6)] + ratios + [prior_value]


def tolerant_linear_scan(pred_pts, gt_pts, tf):
    """Pairwise tolerant matching: (correct count, recalled count)."""
    correct = 0
    recalled = [False] * len(gt_pts)
    for p in pred_pts:
        eps = tf * abs(p[2])
        hit = False
        for j, g in enumerate(gt_pts):
            if math.dist(p, g) <= eps:
                hit = True
                recalled[j] = True
        correct += hit
    return correct, sum(recalled)


def coverage_pairs(pred, gt):
    """Mean best IoU per gt region (single class), unweighted and area weighted."""
    covs, areas = [], []
    for g in sorted(set(np.unique(gt)) - {0}):
        gm = gt == g
        best = 0.0
        for p in sorted(set(np.unique(pred)) - {0}):
            pm = pred == p
            inter = np.logical_and(gm, pm).sum()
            union = np.logical_or(gm, pm).sum()
            best = max(best, inter / union)
        covs.append(best)
        areas.append(gm.sum())
    return float(np.mean(covs)), float(np.dot(covs, areas) / np.sum(areas))
