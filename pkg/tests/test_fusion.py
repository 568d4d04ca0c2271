import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import N_STUFF, N_THING, brute_force_centers, literal_merge, make_scene
from paps.fusion import (
    CONF_THRESHOLD,
    NMS_KERNEL,
    SEG_THRESHOLD,
    TOP_K,
    FusionConfig,
    FusionShapeError,
    HeadOutputs,
    InstanceCandidate,
    PredictedInstance,
    assign_and_group_amodal,
    finalize,
    find_centers,
    fuse,
    group_inmodal,
    merge_semantics,
    vote_labels,
)
from paps.ideal import LayeredInstance, encode_ideal_outputs, ideal_outputs_for_prediction, ideal_outputs_for_scene
from paps.ordering import ordering_for_scene
from paps.predio import decode_prediction, encode_prediction, read_prediction, summary_lines, write_prediction
from paps.scenegen import SceneFormatError, SceneGenConfig, generate_scene

N_LAYERS = 4
GEN_STUFF = SceneGenConfig().n_stuff  # generated scenes use the toy vocabulary


def random_head(seed, h=24, w=24, n_layers=N_LAYERS, n_stuff=N_STUFF, n_thing=N_THING):
    rng = np.random.default_rng(seed)
    return HeadOutputs(
        sem_logits=rng.normal(size=(n_stuff + n_thing, h, w)),
        roo_seg_logits=rng.normal(size=(n_layers, h, w)),
        occ_seg_logits=rng.normal(size=(1, h, w)),
        thing_sem_logits=rng.normal(size=(1 + n_thing, h, w)),
        center_heatmap=rng.random((1, h, w)),
        center_occ_logits=rng.normal(size=(1, h, w)),
        inmodal_offsets=rng.normal(scale=4, size=(2, h, w)),
        amodal_center_offsets=rng.normal(scale=3, size=(2, h, w)),
        roo_amodal_offsets=rng.normal(scale=4, size=(n_layers, 2, h, w)),
    )


def round_trip_scenes(count, start=0, n_layers=N_LAYERS, max_instances=6):
    """Generated scenes with every instance partly visible and within ``n_layers``."""
    cfg = SceneGenConfig(max_instances=max_instances)
    seed = start
    while count:
        scene = generate_scene(cfg, seed)
        seed += 1
        if any(i.fully_occluded for i in scene.instances):
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            try:
                ordering_for_scene(scene, n_layers)
            except UserWarning:
                continue
        count -= 1
        yield scene


def by_inmodal(pred):
    return {inst.inmodal_mask.tobytes(): inst for inst in pred.instances}


# --- merge_semantics -----------------------------------------------------------------


def test_void_dominance_leaves_stuff_channels_in_charge():
    rng = np.random.default_rng(0)
    sem = rng.normal(size=(N_STUFF + N_THING, 8, 8))
    thing = np.full((1 + N_THING, 8, 8), -50.0)
    thing[0] = 50.0
    semantic, fg = merge_semantics(sem, thing)
    assert np.array_equal(semantic, sem[:N_STUFF].argmax(0))
    assert not fg.any()


def test_agreeing_heads_label_thing_region():
    sem = np.zeros((N_STUFF + N_THING, 6, 6))
    thing = np.zeros((1 + N_THING, 6, 6))
    sem[N_STUFF + 1, 2:4, 2:4] = 5.0
    thing[2, 2:4, 2:4] = 5.0
    thing[0] = 1.0
    semantic, fg = merge_semantics(sem, thing)
    assert (semantic[2:4, 2:4] == N_STUFF + 1).all()
    assert fg[2:4, 2:4].all() and fg.sum() == 4


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_merge_matches_literal_reimplementation(seed):
    rng = np.random.default_rng(seed)
    sem = rng.normal(size=(N_STUFF + N_THING, 7, 5))
    thing = rng.normal(size=(1 + N_THING, 7, 5))
    expect = literal_merge(sem, thing)
    semantic, fg = merge_semantics(sem, thing)
    assert np.array_equal(semantic, expect)
    assert np.array_equal(fg, expect >= N_STUFF)


def test_merge_rejects_channel_mismatch():
    with pytest.raises(FusionShapeError):
        merge_semantics(np.zeros((5, 4, 4)), np.zeros((6, 4, 4)))
    with pytest.raises(FusionShapeError):
        merge_semantics(np.zeros((5, 4, 4)), np.zeros((4, 4, 3)))


# --- find_centers ----------------------------------------------------------------------


def test_defaults():
    assert (CONF_THRESHOLD, TOP_K, SEG_THRESHOLD, NMS_KERNEL) == (0.1, 200, 0.5, 7)
    cfg = FusionConfig()
    assert (cfg.conf_threshold, cfg.top_k, cfg.seg_threshold) == (0.1, 200, 0.5)


def test_single_gaussian_peak():
    yy, xx = np.mgrid[0:32, 0:32]
    heat = 0.9 * np.exp(-((yy - 11) ** 2 + (xx - 20) ** 2) / (2 * 3.0**2))
    centers = find_centers(heat)
    assert len(centers) == 1
    y, x, s = centers[0]
    assert (y, x) == (11, 20) and s == pytest.approx(0.9)


def test_empty_heatmap_has_no_centers():
    assert find_centers(np.zeros((16, 16))) == []


@settings(max_examples=60)
@given(st.integers(0, 100_000), st.sampled_from([3, 5, 7]), st.integers(1, 40), st.floats(0.0, 0.9))
def test_find_centers_matches_brute_force(seed, kernel, k_max, thr):
    rng = np.random.default_rng(seed)
    heat = np.round(rng.random((32, 32)), 2)  # coarse values create plateaus and ties
    got = find_centers(heat, k_max, thr, kernel)
    assert got == brute_force_centers(heat, k_max, thr, kernel)
    scores = [s for _, _, s in got]
    assert scores == sorted(scores, reverse=True)


# --- inmodal grouping and voting ----------------------------------------------------------


def test_one_center_takes_all_foreground():
    fg = np.zeros((10, 10), dtype=bool)
    fg[2:8, 3:9] = True
    yy, xx = np.mgrid[0:10, 0:10]
    offsets = np.stack([5 - yy, 6 - xx]).astype(float)
    id_map, masks = group_inmodal([(5, 6, 0.8)], offsets, fg)
    assert np.array_equal(id_map == 1, fg) and list(masks) == [1]


def test_zero_centers_leave_map_empty():
    fg = np.ones((6, 6), dtype=bool)
    id_map, masks = group_inmodal([], np.zeros((2, 6, 6)), fg)
    assert masks == {} and not id_map.any()


def test_distant_centers_recover_inmodal_masks():
    scene = make_scene([("rectangle", 0, (8, 8), (8, 8), 0), ("ellipse", 2, (22, 22), (10, 10), 1)])
    head = ideal_outputs_for_scene(scene, N_STUFF, N_THING, N_LAYERS)
    _, fg = merge_semantics(head.sem_logits, head.thing_sem_logits)
    centers = find_centers(head.center_heatmap)
    _, masks = group_inmodal(centers, head.inmodal_offsets, fg)
    got = sorted(m.tobytes() for m in masks.values())
    assert got == sorted(i.inmodal_mask.tobytes() for i in scene.instances)


def test_vote_uniform_majority_and_tie():
    ids = np.zeros((4, 5), dtype=np.int64)
    ids[0] = 1
    ids[1:3] = 2
    ids[3, :4] = 3
    sem = np.zeros((4, 5), dtype=np.int64)
    sem[0] = 4
    sem[1, :] = 5
    sem[2, :2] = 5
    sem[2, 2:] = 6  # instance 2: 7 pixels of 5, 3 of 6
    sem[3, :2] = 5
    sem[3, 2:4] = 3  # instance 3: 2 vs 2 between ids 3 and 5
    assert vote_labels(ids, sem) == {1: 4, 2: 5, 3: 3}


def test_vote_drops_empty_instance_with_warning():
    ids = np.ones((3, 3), dtype=np.int64)
    with pytest.warns(UserWarning, match="no pixels"):
        labels = vote_labels(ids, np.zeros((3, 3), dtype=np.int64), ids=[1, 2])
    assert labels == {1: 0}


# --- amodal assignment ----------------------------------------------------------------------


def test_unoccluded_instance_goes_to_layer_zero():
    scene = make_scene([("ellipse", 1, (16, 16), (12, 10), 0)])
    pred = fuse(ideal_outputs_for_scene(scene, N_STUFF, N_THING, N_LAYERS))
    (inst,) = pred.instances
    assert inst.layer_index == 0
    assert np.array_equal(inst.amodal_mask, inst.inmodal_mask)
    assert not inst.occluded_mask.any()


def test_missing_layer_falls_back_to_inmodal_mask():
    mask = np.zeros((12, 12), dtype=bool)
    mask[3:7, 3:7] = True
    cand = InstanceCandidate(1, (5, 5), 0.9, mask, N_STUFF)
    roo = np.full((3, 12, 12), -5.0)
    roo[2, 9:, 9:] = 5.0  # only layer 2 has pixels, far from the center
    amodal, layers, _, msgs = assign_and_group_amodal(
        [cand], np.zeros((2, 12, 12)), roo, np.zeros((3, 2, 12, 12))
    )
    assert np.array_equal(amodal[1], mask)
    assert layers[1] == 2
    assert msgs and "no layer" in msgs[0]


def test_multi_layer_containment_prefers_consistent_regression():
    mask = np.zeros((12, 12), dtype=bool)
    mask[4:8, 4:8] = True
    cand = InstanceCandidate(1, (6, 6), 0.9, mask, N_STUFF)
    roo = np.full((2, 12, 12), 5.0)
    off = np.zeros((2, 2, 12, 12))
    off[0, 0] = 3.0  # layer 0 points three rows away from the center
    amodal, layers, _, _ = assign_and_group_amodal([cand], np.zeros((2, 12, 12)), roo, off)
    assert layers[1] == 1
    off[0, 0] = 0.0  # equal agreement: the lower layer wins
    _, layers, _, _ = assign_and_group_amodal([cand], np.zeros((2, 12, 12)), roo, off)
    assert layers[1] == 0


def test_round_trip_recovers_scene_exactly():
    for scene in round_trip_scenes(40):
        stack = ordering_for_scene(scene, N_LAYERS)
        pred = fuse(ideal_outputs_for_scene(scene, GEN_STUFF, N_THING, N_LAYERS))
        assert pred.warnings == []
        assert np.array_equal(pred.semantic_map, scene.semantic_map)
        got = by_inmodal(pred)
        assert len(got) == len(scene.instances)
        for inst in scene.instances:
            p = got[inst.inmodal_mask.tobytes()]
            assert p.class_id == inst.class_id
            assert np.array_equal(p.amodal_mask, inst.amodal_mask)
            assert p.layer_index == stack.layer_assignment[inst.instance_id]


def test_layer_assignment_is_idempotent():
    for scene in round_trip_scenes(30, start=500):
        first = fuse(ideal_outputs_for_scene(scene, GEN_STUFF, N_THING, N_LAYERS))
        second = fuse(ideal_outputs_for_prediction(first, GEN_STUFF, N_THING, N_LAYERS))
        a, b = by_inmodal(first), by_inmodal(second)
        assert a.keys() == b.keys()
        for key in a:
            assert a[key].layer_index == b[key].layer_index
            assert np.array_equal(a[key].amodal_mask, b[key].amodal_mask)


def test_encoder_marks_occluded_centers():
    scene = make_scene([("rectangle", 0, (12, 12), (10, 10), 0), ("rectangle", 1, (16, 16), (10, 10), 1)])
    pred = fuse(ideal_outputs_for_scene(scene, N_STUFF, N_THING, N_LAYERS))
    occ = {p.class_id: p.occlusion_score for p in pred.instances}
    assert occ[N_STUFF] < 0.5 < occ[N_STUFF + 1]


# --- finalize and invariants -----------------------------------------------------------------


def test_finalize_set_difference_by_counting():
    inm = np.zeros((8, 8), dtype=bool)
    inm[2:5, 2:5] = True
    amo = np.zeros((8, 8), dtype=bool)
    amo[2:7, 2:6] = True
    inst = PredictedInstance(1, N_STUFF, inm, amo, inm, inm, (3.0, 3.0), (4.0, 3.5), 1)
    pred = finalize(np.zeros((8, 8), dtype=np.int64), [inst])
    occ = pred.instances[0].occluded_mask
    assert occ.sum() == 20 - 9
    assert not (occ & inm).any() and (occ | inm).sum() == 20
    assert pred.check_invariants() == []


@settings(max_examples=100)
@given(st.integers(0, 1_000_000))
def test_random_heads_satisfy_invariants(seed):
    head = random_head(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pred = fuse(head, FusionConfig(conf_threshold=0.5))
    assert pred.check_invariants() == []
    _, fg = merge_semantics(head.sem_logits, head.thing_sem_logits)
    union = np.zeros_like(fg)
    for inst in pred.instances:
        assert not (inst.inmodal_mask & ~fg).any()
        assert not (inst.inmodal_mask & union).any()
        union |= inst.inmodal_mask


def test_fusion_is_deterministic():
    head = random_head(3)
    a, b = fuse(head), fuse(head)
    assert encode_prediction(a) == encode_prediction(b)


def test_encoder_skips_invisible_instances():
    empty = np.zeros((8, 8), dtype=bool)
    amo = np.zeros((8, 8), dtype=bool)
    amo[:3, :3] = True
    head = encode_ideal_outputs(
        np.zeros((8, 8), dtype=np.int64), [LayeredInstance(N_STUFF, empty, amo, 1)], N_STUFF, N_THING, 2
    )
    assert head.center_heatmap.max() == 0.0


# --- prediction files -------------------------------------------------------------------------


def test_prediction_file_round_trip(tmp_path):
    scene = next(round_trip_scenes(1, start=42))
    pred = fuse(ideal_outputs_for_scene(scene, GEN_STUFF, N_THING, N_LAYERS))
    write_prediction(pred, tmp_path / "p.appr")
    back = read_prediction(tmp_path / "p.appr")
    assert np.array_equal(back.semantic_map, pred.semantic_map)
    assert len(back.instances) == len(pred.instances)
    for a, b in zip(pred.instances, back.instances):
        assert (a.instance_id, a.class_id, a.layer_index) == (b.instance_id, b.class_id, b.layer_index)
        assert np.array_equal(a.inmodal_mask, b.inmodal_mask) and np.array_equal(a.amodal_mask, b.amodal_mask)
        assert a.amodal_center == b.amodal_center and a.score == b.score
    assert back.check_invariants() == []
    assert encode_prediction(back) == encode_prediction(pred)
    assert summary_lines("p", pred)[0].startswith("p")


def test_truncated_prediction_is_rejected():
    pred = fuse(random_head(5))
    data = encode_prediction(pred)
    with pytest.raises(SceneFormatError):
        decode_prediction(data[: len(data) // 2])
