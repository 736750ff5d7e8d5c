import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sceneparse.composition import (
    Candidate,
    SelectionProblem,
    brute_force_compose,
    candidate_energy,
    compose_scene,
    prune_proposals,
    selection_cost,
)
from sceneparse.geometry import PoseTransform, RenderResult, box_mesh
from sceneparse.validation import InputError

from cases import random_selection_case
from oracles import candidate_energy_formula, selection_cost_loops


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_selection_cost_matches_loops(seed):
    case = random_selection_case(np.random.default_rng(seed), max_side=12)
    got = selection_cost(case["y"], case["candidates"], case["layouts"], case["observed"], case["p_object"],
                         exact_overlap=True)
    want = selection_cost_loops(case["y"], case["depths"], case["nears"], case["fars"], case["is_object"],
                                case["regions"], case["observed"], case["p_object"])
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_batch_costs_match_single(seed):
    case = random_selection_case(np.random.default_rng(seed), max_side=10, max_objects=4, max_layouts=2)
    p = SelectionProblem(case["candidates"], case["layouts"], case["observed"], case["p_object"])
    Y = np.array(list(itertools.product([False, True], repeat=p.n)))
    batch = p.batch_costs(Y)
    single = np.array([p.cost(y) for y in Y])
    np.testing.assert_allclose(batch, single, rtol=1e-9, atol=1e-9)


def _pixel_problem(obs, render, pobj=0.0):
    obs = np.array([[obs]])
    c = Candidate(0, box_mesh(1, 1, 1), PoseTransform(), np.zeros((1, 1), bool), [1.0], 0.5,
                  render=RenderResult(np.array([[render]])))
    return SelectionProblem([c], [], obs, np.full((1, 1), pobj))


def test_depth_term_clip_boundaries():
    assert _pixel_problem(2.0, 2.0 * 1.03).terms([True])["depth"] == 0.0
    assert _pixel_problem(2.0, 2.0 / 1.03).terms([True])["depth"] == pytest.approx(0.0, abs=1e-15)
    assert _pixel_problem(1.0, 2.0).terms([True])["depth"] == pytest.approx(1 - math.log2(1.03), abs=1e-12)
    assert _pixel_problem(1.0, 10.0).terms([True])["depth"] == 1.0
    # Unrendered observed pixels score the maximum, missing observations nothing.
    assert _pixel_problem(1.0, np.nan).terms([True])["depth"] == 1.0
    assert _pixel_problem(np.nan, 1.0).terms([True])["depth"] == 0.0


def test_object_term_uses_front_model():
    obs = np.full((1, 2), 2.0)
    c = Candidate(0, box_mesh(1, 1, 1), PoseTransform(), np.zeros((1, 2), bool), [1.0], 0.5,
                  render=RenderResult(np.array([[1.0, 3.0]])))
    wall = RenderResult(np.array([[2.0, 2.0]]))
    p = SelectionProblem([c], [wall], obs, np.array([[0.9, 0.9]]))
    # Object in front at pixel 0, wall in front at pixel 1.
    assert p.terms([True, True])["object"] == pytest.approx(0.1 + 0.9)
    assert p.terms([False, False])["object"] == pytest.approx(1.8)


@given(st.floats(0.0, 1.0), st.floats(0, 100),
       st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6).filter(lambda v: sum(v) > 0))
def test_candidate_energy_formula(b, fe, probs):
    c = Candidate(1, box_mesh(1, 1, 1), PoseTransform(), np.zeros((2, 2), bool), probs, b, fitting_energy=fe)
    assert candidate_energy(c) == pytest.approx(candidate_energy_formula(fe, probs, b), rel=1e-12)


def test_candidate_validation():
    with pytest.raises(InputError):
        Candidate(0, box_mesh(1, 1, 1), PoseTransform(), np.zeros((2, 2), bool), [0.0, 0.0], 0.5)
    with pytest.raises(InputError):
        Candidate(0, box_mesh(1, 1, 1), PoseTransform(), np.zeros((2, 2), bool), [1.0], 1.5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_search_stages_monotone_and_near_optimal(seed):
    case = random_selection_case(np.random.default_rng(seed), max_side=16, max_objects=5, max_layouts=3)
    p = SelectionProblem(case["candidates"], case["layouts"], case["observed"], case["p_object"])
    h = compose_scene(None, None, None, None, problem=p)
    b = brute_force_compose(None, None, None, None, problem=p)
    s1, s2, s3 = h.stage_costs
    assert s2 <= s1 and s3 <= s2
    assert b.cost <= h.cost + 1e-9
    assert h.cost == pytest.approx(p.cost(h.selected))


def test_brute_force_is_exhaustive_minimum():
    case = random_selection_case(np.random.default_rng(11), max_side=8, max_objects=3, max_layouts=2)
    p = SelectionProblem(case["candidates"], case["layouts"], case["observed"], case["p_object"])
    best = min(p.cost(np.array(y)) for y in itertools.product([False, True], repeat=p.n))
    assert brute_force_compose(None, None, None, None, problem=p).cost == pytest.approx(best, rel=1e-12)


def test_brute_force_limit():
    case = random_selection_case(np.random.default_rng(0), max_side=4, max_objects=5, max_layouts=3)
    p = SelectionProblem(case["candidates"], case["layouts"], case["observed"], case["p_object"])
    with pytest.raises(InputError):
        brute_force_compose(None, None, None, None, problem=p, max_models=1)


def test_compose_threads_identical():
    case = random_selection_case(np.random.default_rng(5), max_side=20, max_objects=5, max_layouts=3)
    p = SelectionProblem(case["candidates"], case["layouts"], case["observed"], case["p_object"])
    a = compose_scene(None, None, None, None, problem=p, n_jobs=1)
    b = compose_scene(None, None, None, None, problem=p, n_jobs=4)
    np.testing.assert_array_equal(a.selected, b.selected)
    assert a.cost == b.cost and a.stage_costs == b.stage_costs


def test_selection_vector_length_checked():
    case = random_selection_case(np.random.default_rng(1), max_side=4)
    p = SelectionProblem(case["candidates"], case["layouts"], case["observed"], case["p_object"])
    with pytest.raises(InputError):
        p.cost(np.zeros(p.n + 1, bool))


def _cand(i, region, b, class_id=None, rank=None, region_id=None, fe=0.0, probs=(0.7, 0.2, 0.1)):
    return Candidate(i, box_mesh(1, 1, 1), PoseTransform(), region, list(probs), b, fitting_energy=fe,
                     class_id=class_id, region_id=region_id, shape_rank=rank)


def test_prune_keeps_best_per_region_and_suppresses_duplicates():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    b = a.copy()  # identical region: suppressed
    c = np.zeros((4, 4), bool)
    c[2:] = True
    pool = [
        _cand(1, a, 0.1, class_id=0, rank=0, region_id=0, fe=5),
        _cand(2, a, 0.1, class_id=0, rank=1, region_id=0, fe=1),
        _cand(3, a, 0.1, class_id=2, rank=0, region_id=0, fe=0),  # not a top-2 class
        _cand(4, a, 0.1, class_id=1, rank=6, region_id=0, fe=0),  # shape rank too high
        _cand(5, a, 0.1, class_id=1, rank=0, region_id=0, fe=9),
        _cand(6, b, 0.3, region_id=1),
        _cand(7, c, 0.2, region_id=2),
    ]
    out = prune_proposals(pool, n_keep=2)
    assert [x.id for x in out] == [1, 2, 7]
    assert [x.id for x in prune_proposals(pool, target_count=1)] == [1, 2]
