import numpy as np
import pytest

from sceneparse.geometry import render_depth
from sceneparse.synth import SynthParams, scene_depth, synth_scene
from sceneparse.validation import InputError


def test_deterministic_for_seed():
    a = synth_scene(SynthParams(seed=9, n_distractors=3, perturb_yaw_deg=10))
    b = synth_scene(SynthParams(seed=9, n_distractors=3, perturb_yaw_deg=10))
    assert a.scene == b.scene
    np.testing.assert_array_equal(a.depth, b.depth)
    assert [c.pose for c in a.candidates] == [c.pose for c in b.candidates]
    assert a.gt_candidate_ids == b.gt_candidate_ids


def test_observation_matches_scene_render():
    r = synth_scene(SynthParams(seed=4, doorway=True))
    np.testing.assert_array_equal(r.gt_depth, scene_depth(r.scene))
    np.testing.assert_array_equal(r.depth, r.gt_depth)
    assert len(r.scene.layouts) == 6
    assert np.isfinite(r.depth).all()


def test_probability_maps_valid():
    r = synth_scene(SynthParams(seed=1))
    assert r.p_object.min() >= 0.05 and r.p_object.max() <= 0.95
    np.testing.assert_allclose(r.labels.sum(axis=-1), 1.0)
    for c in r.candidates:
        assert c.class_probs.sum() == pytest.approx(1.0)


def test_zero_perturbation_candidates_are_truth():
    r = synth_scene(SynthParams(seed=6))
    gt_ids = set(r.gt_candidate_ids)
    gt_poses = sorted(o.pose.translation for o in r.scene.objects)
    assert sorted(c.pose.translation for c in r.candidates if c.id in gt_ids) == gt_poses


def test_regions_are_visible_and_disjoint():
    r = synth_scene(SynthParams(seed=8, n_objects=(3, 4), min_visible_pixels=40))
    regions = [o.region for o in r.scene.objects]
    assert all(reg.sum() >= 40 for reg in regions)
    assert (np.sum(regions, axis=0) <= 1).all()
    for o in r.scene.objects:
        rend = render_depth(o.mesh, o.pose, r.scene.camera)
        assert (rend.mask >= o.region).all()


def test_missing_depth_fraction():
    r = synth_scene(SynthParams(seed=3, missing_fraction=0.2))
    frac = np.isnan(r.depth).mean()
    assert 0.12 < frac < 0.28


def test_parameter_validation():
    with pytest.raises(InputError):
        SynthParams(missing_fraction=1.0)
    with pytest.raises(InputError):
        SynthParams(shapes=("sphere",))
    with pytest.raises(InputError):
        SynthParams(perturb_scales=())
