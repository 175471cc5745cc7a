import json

import numpy as np
import pytest

from ard3d.config import GrammarConfig
from ard3d.grammar import (
    COLORS,
    RELATION_PHRASES,
    SHAPES,
    GrammarError,
    ObjectSpec,
    SceneScript,
    _split_by_hash,
    assembly_plan,
    check_relation,
    export_dataset,
    full_scene,
    grammar_corpus,
    instruction_text,
    load_script,
    rasterize_shape,
    realize,
    refine_instruction,
    sample_script,
    sample_single_object,
    script_from_json,
    script_to_json,
)
from ard3d.textcodec import build_vocab
from ard3d.voxel import Aabb, OccupancyGrid, bbox, embed_object, empty_grid, iou, read_vox1

CFG = GrammarConfig()


def test_same_seed_same_script():
    a = sample_script(7, CFG)
    b = sample_script(7, CFG)
    assert a == b


def test_different_seeds_differ():
    assert sample_script(1, CFG) != sample_script(2, CFG)


def test_short_script_rejected():
    with pytest.raises(GrammarError, match="at least 2"):
        sample_script(0, CFG, n_steps=1)
    with pytest.raises(GrammarError, match="capped"):
        sample_script(0, CFG, n_steps=16)


def test_script_structure():
    for seed in range(10):
        s = sample_script(seed, CFG)
        assert CFG.n_min <= s.N <= CFG.n_max
        assert s.steps[0].relation is None and s.steps[0].offset[1] == 0
        pairs = [(o.color, o.shape) for o in s.steps]
        assert len(set(pairs)) == len(pairs)  # anchors are unambiguous
        for t, o in enumerate(s.steps[1:], start=1):
            assert o.anchor is not None and o.anchor < t


def test_ground_truth_satisfies_own_relations():
    # oracle self-consistency must be exact over many scripts
    checked = 0
    for seed in range(40):
        script = sample_script(seed, CFG)
        steps = realize(script)
        for t, spec in enumerate(script.steps):
            if spec.relation is None:
                continue
            assert check_relation(spec.relation, steps[spec.anchor].box, steps[t].box)
            checked += 1
    assert checked > 40


def test_rasterize_box_bbox_exact():
    bits = rasterize_shape("box", (5, 3, 4), (2, 6, 7), 32)
    b = bbox(OccupancyGrid(bits))
    assert b.lo == (2, 6, 7) and b.hi == (7, 9, 11)


def test_rasterize_sphere_bbox_within_one():
    bits = rasterize_shape("sphere", (9, 9, 9), (10, 10, 10), 32)
    b = bbox(OccupancyGrid(bits))
    for ax in range(3):
        assert abs(b.lo[ax] - 10) <= 1 and abs(b.hi[ax] - 19) <= 1


def test_rasterize_lshape_quadrant_removed():
    bits = rasterize_shape("l-shape", (8, 8, 4), (0, 0, 0), 16)
    assert bits[1, 1, 1] and bits[1, 6, 1] and bits[6, 1, 1]
    assert not bits[6, 6, 1]  # upper-right quadrant cut


def test_union_of_steps_equals_full_rasterization():
    for seed in (3, 11):
        script = sample_script(seed, CFG)
        steps = realize(script)
        acc = empty_grid(script.M)
        for st in steps:
            acc = OccupancyGrid(acc.bits | st.scene_grid.bits)
        assert (acc.bits == full_scene(script).bits).all()


def test_object_space_grid_embeds_back_exactly():
    script = sample_script(5, CFG)
    for st in realize(script):
        back = embed_object(empty_grid(script.M), st.object_grid, st.cube)
        assert iou(back, st.scene_grid) >= 0.98


def test_instruction_contains_required_words():
    for seed in range(8):
        script = sample_script(seed, CFG)
        for t, spec in enumerate(script.steps):
            text = instruction_text(script, t)
            assert spec.shape in text and spec.color in text
            if spec.relation is not None:
                assert RELATION_PHRASES[spec.relation] in text
                anchor = script.steps[spec.anchor]
                assert f"the {anchor.color} {anchor.shape}" in text
        assert script.steps[0].color in refine_instruction(script.steps[0])


def test_clipped_object_rejected_in_realize():
    spec = ObjectSpec("box", "large", "red", None, None, (10, 10, 10), (-5, 0, 0))
    script = SceneScript((spec,), 0, 32)
    with pytest.raises(GrammarError, match="clipped"):
        realize(script)


# -- relation predicate oracle ----------------------------------------------


def relation_reference(rel, a, o):
    """Independent recomputation of the predicate geometry."""
    acx, acy, acz = [(a.lo[i] + a.hi[i]) / 2 for i in range(3)]
    ocx, ocy, ocz = [(o.lo[i] + o.hi[i]) / 2 for i in range(3)]

    def ov(ax):
        length = min(a.hi[ax], o.hi[ax]) - max(a.lo[ax], o.lo[ax])
        return max(0, length) / min(a.hi[ax] - a.lo[ax], o.hi[ax] - o.lo[ax])

    if rel == "on-top-of":
        return (0 <= o.lo[1] - a.hi[1] <= 2 and a.lo[0] <= ocx < a.hi[0]
                and a.lo[2] <= ocz < a.hi[2])
    if rel == "left-of":
        return ocx < acx and ov(1) >= 0.25 and ov(2) >= 0.25
    if rel == "right-of":
        return ocx > acx and ov(1) >= 0.25 and ov(2) >= 0.25
    if rel == "in-front-of":
        return ocz > acz and ov(0) >= 0.25 and ov(1) >= 0.25
    if rel == "behind":
        return ocz < acz and ov(0) >= 0.25 and ov(1) >= 0.25
    gx = max(0, max(a.lo[0], o.lo[0]) - min(a.hi[0], o.hi[0]))
    gz = max(0, max(a.lo[2], o.lo[2]) - min(a.hi[2], o.hi[2]))
    return max(gx, gz) <= 3 and ov(1) >= 0.5


def test_predicates_match_reference_on_random_boxes():
    rng = np.random.default_rng(0)
    for _ in range(500):
        def rand_box():
            lo = rng.integers(0, 24, 3)
            e = rng.integers(1, 9, 3)
            return Aabb(tuple(int(v) for v in lo), tuple(int(l + s) for l, s in zip(lo, e)))

        a, o = rand_box(), rand_box()
        for rel in RELATION_PHRASES:
            assert check_relation(rel, a, o) == relation_reference(rel, a, o)


def test_predicate_examples():
    anchor = Aabb((8, 0, 8), (16, 6, 16))
    atop = Aabb((10, 6, 10), (14, 10, 14))
    assert check_relation("on-top-of", anchor, atop)
    far = Aabb((8, 0, 28), (12, 4, 31))
    assert not check_relation("beside", anchor, far)
    with pytest.raises(GrammarError, match="unknown relation"):
        check_relation("inside", anchor, atop)


# -- vocabulary closure ------------------------------------------------------


def test_vocabulary_closed_over_generated_instructions():
    vocab = build_vocab(grammar_corpus())
    for seed in range(30):
        script = sample_script(seed, CFG)
        for t in range(script.N):
            vocab.encode_text(instruction_text(script, t))  # must not raise
            vocab.encode_text(refine_instruction(script.steps[t]))


# -- plans / export ----------------------------------------------------------


def test_assembly_plan_schema():
    script = sample_script(9, CFG)
    plan = assembly_plan(script, np.random.default_rng(1))
    assert [row["assembly_idx"] for row in plan] == list(range(script.N))
    assert sorted(row["part_idx"] for row in plan) == list(range(script.N))
    for row in plan:
        assert set(row) == {"instructions", "part_idx", "assembly_idx"}


def test_script_json_roundtrip():
    script = sample_script(4, CFG)
    assert script_from_json(script_to_json(script)) == script


def test_single_object_mode():
    s = sample_single_object(3, CFG)
    assert s.N == 1 and s.steps[0].relation is None


def test_export_layout_and_determinism(tmp_path):
    m1 = export_dataset(4, tmp_path / "d1", CFG, base_seed=11)
    m2 = export_dataset(4, tmp_path / "d2", CFG, base_seed=11)
    assert m1 == m2
    assert (tmp_path / "d1" / "manifest.json").read_bytes() == \
           (tmp_path / "d2" / "manifest.json").read_bytes()
    assert len(m1["scenes"]) == 4
    for entry in m1["scenes"]:
        sdir = tmp_path / "d1" / entry["id"]
        plan = json.loads((sdir / "plan.json").read_text())
        assert len(plan) == entry["n_steps"]
        assert (sdir / "plan.json").read_bytes() == \
               (tmp_path / "d2" / entry["id"] / "plan.json").read_bytes()
        for t in range(entry["n_steps"]):
            g, sidecar = read_vox1(sdir / f"step_{t}_scene.vox1")
            assert g.space_tag == "scene" and sidecar["step_index"] == t
            o, _ = read_vox1(sdir / f"step_{t}_object.vox1")
            assert o.space_tag == "object"
        script = load_script(tmp_path / "d1", entry["id"])
        assert script.N == entry["n_steps"]


def test_split_fractions_exact_at_200():
    splits = _split_by_hash(list(range(200)))
    counts = {s: splits.count(s) for s in ("train", "val", "test")}
    assert abs(counts["train"] - 180) <= 1
    assert abs(counts["val"] - 10) <= 1
    assert abs(counts["test"] - 10) <= 1
