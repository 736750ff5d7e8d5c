"""Estimator-style wrappers around alignment, layout detection and scene composition.

They follow the scikit-learn conventions (constructor arguments are plain
hyperparameters, ``fit`` returns ``self``, learned state ends in ``_``) so
they can be configured and cloned with the usual tooling. The functional API
underneath remains the reference.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .alignment import FitWeights, align_model
from .composition import SelectionProblem, SelectionWeights, compose_scene
from .layout import LayoutConfig, detect_planes, plane_extent, render_layouts
from .validation import InputError, as_depth_array


class ModelAligner(BaseEstimator):
    """Align candidate meshes to an observed depth image.

    Args:
        weights: preset name (``"annotation"`` or ``"retrieval"``) or a FitWeights.
        n_yaws: yaw grid size.
        scales: scale ratios tried relative to each initial pose.
        refine_levels: yaw halving steps after the grid search.
        n_jobs: threads used for grid branches.
    """

    def __init__(self, weights="retrieval", n_yaws=16, scales=(1.0, 0.9), max_iters=30, tol=1e-4,
                 reject_radius=0.25, refine_levels=4, n_jobs=1):
        self.weights = weights
        self.n_yaws = n_yaws
        self.scales = scales
        self.max_iters = max_iters
        self.tol = tol
        self.reject_radius = reject_radius
        self.refine_levels = refine_levels
        self.n_jobs = n_jobs

    def _weights(self) -> FitWeights:
        return FitWeights.preset(self.weights) if isinstance(self.weights, str) else self.weights

    def fit(self, observed, camera):
        self.observed_ = as_depth_array(observed)
        if self.observed_.shape != camera.shape:
            raise InputError("observed depth does not match the camera")
        self.camera_ = camera
        self.fit_weights_ = self._weights()
        return self

    def align(self, mesh, region, init):
        check_is_fitted(self)
        return align_model(mesh, region, self.observed_, self.camera_, self.fit_weights_, init,
                           n_yaws=self.n_yaws, scales=tuple(self.scales), max_iters=self.max_iters,
                           tol=self.tol, reject_radius=self.reject_radius,
                           refine_levels=self.refine_levels, n_jobs=self.n_jobs)

    def transform(self, candidates):
        """Candidates with aligned poses and their fitting cost as ``fitting_energy``."""
        out = []
        for c in candidates:
            res = self.align(c.mesh, c.region, c.pose)
            out.append(replace(c, pose=res.pose, fitting_energy=res.cost, render=None, depth_range=None))
        return out

    def predict(self, candidates):
        """Aligned poses, one per candidate."""
        return [c.pose for c in self.transform(candidates)]


class LayoutDetector(BaseEstimator):
    """Detect bounded layout planes from depth and per-pixel label probabilities.

    Args:
        config: LayoutConfig (defaults used when None).
        with_extent: also compute extents and holes.
    """

    def __init__(self, config=None, with_extent=True):
        self.config = config
        self.with_extent = with_extent

    def fit(self, depth, labels, camera):
        cfg = self.config or LayoutConfig()
        planes = detect_planes(depth, camera, labels, config=cfg)
        if self.with_extent:
            planes = [plane_extent(p, planes, depth, camera, cfg) for p in planes]
        self.planes_ = planes
        self.camera_ = camera
        return self

    def predict(self, X=None):
        check_is_fitted(self)
        return list(self.planes_)

    def transform(self, X=None):
        """Composite layout depth and category index images."""
        check_is_fitted(self)
        return render_layouts(self.planes_, self.camera_)


class SceneComposer(BaseEstimator):
    """Select candidates and layouts minimizing the scene selection cost.

    Args:
        greedy_depth_factor: depth-term weight during greedy addition.
        overlap_stride: pixel stride for the volume-overlap term (1 is exact).
        stage3_top: unselected candidates revisited in the swap stage.
        n_jobs: threads for evaluating moves.
    """

    def __init__(self, greedy_depth_factor=10.0, w_f=1.0, w_c=-1500.0, w_b=1300.0, overlap_stride=2,
                 stage3_top=30, n_jobs=1):
        self.greedy_depth_factor = greedy_depth_factor
        self.w_f = w_f
        self.w_c = w_c
        self.w_b = w_b
        self.overlap_stride = overlap_stride
        self.stage3_top = stage3_top
        self.n_jobs = n_jobs

    def _weights(self) -> SelectionWeights:
        return SelectionWeights(greedy_depth_factor=self.greedy_depth_factor, w_f=self.w_f, w_c=self.w_c,
                                w_b=self.w_b, overlap_stride=self.overlap_stride, stage3_top=self.stage3_top)

    def fit(self, candidates, layouts, observed, p_object, camera=None):
        w = self._weights()
        self.problem_ = SelectionProblem(candidates, layouts, observed, p_object, w, camera)
        self.hypothesis_ = compose_scene(None, None, None, None, w, n_jobs=self.n_jobs,
                                         problem=self.problem_)
        self.selected_ = self.hypothesis_.selected.copy()
        return self

    def predict(self, X=None) -> np.ndarray:
        check_is_fitted(self)
        return self.selected_.copy()

    def transform(self, X=None) -> np.ndarray:
        """Composite depth render of the selection."""
        check_is_fitted(self)
        return self.hypothesis_.composite_render

    def score(self, y=None) -> float:
        """Negative selection cost of ``y`` (the fitted selection by default)."""
        check_is_fitted(self)
        return -self.problem_.cost(self.selected_ if y is None else y)
