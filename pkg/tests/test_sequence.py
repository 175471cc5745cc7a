"""Sequence assembly: patch rows, lattice/time features, block builder,
and the attention mask checked against an independent rule interpreter."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ard3d.sequence import (
    SegmentKind,
    SeqBuilder,
    SequenceError,
    SequenceOverflow,
    TokenSegment,
    build_mask,
    dump_mask_pbm,
    mask_rows,
    patchify,
    pos_embed_3d,
    segment_table_json,
    time_embed,
    unpatchify,
)
from ard3d.textcodec import build_vocab


def small_vocab():
    return build_vocab(["add a red box", "place a blue sphere on the box"])


# -- independent mask oracle: per-pair interpretation of the visibility rules


def mask_oracle(segments, length):
    owner = {}
    for k, seg in enumerate(segments):
        for t in range(seg.start, seg.start + seg.length):
            owner[t] = k
    allow = np.zeros((length, length), bool)
    for i in range(length):
        si = segments[owner[i]]
        for j in range(length):
            sj = segments[owner[j]]
            if si.group != sj.group:
                continue
            if owner[i] == owner[j]:
                if si.kind in (SegmentKind.UND3D, SegmentKind.GEN3D):
                    allow[i, j] = True
                else:
                    allow[i, j] = j <= i
            else:
                ends_before = (sj.start + sj.length) <= si.start
                allow[i, j] = ends_before and sj.kind != SegmentKind.GEN3D
    return allow


def random_layout(rng, max_segments=12, max_tokens=96):
    n_seg = rng.integers(1, max_segments + 1)
    lengths = rng.integers(1, 9, size=n_seg)
    while lengths.sum() > max_tokens:
        lengths = rng.integers(1, 9, size=n_seg)
    kinds = rng.choice(
        [SegmentKind.TEXT, SegmentKind.UND3D, SegmentKind.GEN3D, SegmentKind.SPECIAL],
        size=n_seg,
    )
    n_groups = rng.integers(1, 4)
    bounds = np.sort(rng.integers(0, n_seg + 1, size=n_groups - 1))
    segments = []
    pos = 0
    for k in range(n_seg):
        group = int(np.searchsorted(bounds, k, side="right"))
        segments.append(
            TokenSegment(SegmentKind(kinds[k]), step=k, substep="coarse",
                         start=pos, length=int(lengths[k]), group=group)
        )
        pos += int(lengths[k])
    return segments, pos


# -- patch rows --------------------------------------------------------------


@pytest.mark.parametrize("p,D,C", [(1, 8, 4), (2, 8, 4), (2, 4, 3), (4, 8, 2)])
def test_patchify_roundtrip(p, D, C):
    rng = np.random.default_rng(5)
    vol = rng.standard_normal((D, D, D, C)).astype(np.float32)
    rows, coords = patchify(vol, p)
    d = D // p
    assert rows.shape == (d**3, C * p**3)
    assert coords.shape == (d**3, 3)
    np.testing.assert_array_equal(unpatchify(rows, p, D, C), vol)


def test_patchify_row_order_and_coords():
    # patch (ix,iy,iz) lands at row ix*d^2 + iy*d + iz with min-corner coords
    D, p, C = 8, 2, 4
    vol = np.zeros((D, D, D, C), np.float32)
    vol[2, 4, 6, 0] = 7.0  # patch (1, 2, 3)
    rows, coords = patchify(vol, p)
    d = D // p
    r = 1 * d * d + 2 * d + 3
    assert rows[r].sum() == 7.0
    assert (rows.sum(axis=1) != 0).sum() == 1
    np.testing.assert_array_equal(coords[r], [2, 4, 6])
    np.testing.assert_array_equal(coords[0], [0, 0, 0])


def test_patchify_rejects_bad_patch():
    with pytest.raises(SequenceError):
        patchify(np.zeros((8, 8, 8, 4), np.float32), 3)


def test_patch_row_channel_layout_p1():
    # at p=1 each row is exactly the channel vector of its voxel
    vol = np.arange(8**3 * 4, dtype=np.float32).reshape(8, 8, 8, 4)
    rows, coords = patchify(vol, 1)
    for r in [0, 17, 500]:
        x, y, z = coords[r]
        np.testing.assert_array_equal(rows[r], vol[x, y, z])


# -- lattice / time features -------------------------------------------------


def test_pos_embed_origin_is_unit_cosines():
    e = pos_embed_3d(np.zeros((1, 3), np.int64), 48)
    np.testing.assert_array_equal(e[0, 0:48:2], np.zeros(24))
    np.testing.assert_array_equal(e[0, 1:48:2], np.ones(24))


def test_pos_embed_injective_on_16_lattice():
    g = np.arange(16)
    gx, gy, gz = np.meshgrid(g, g, g, indexing="ij")
    coords = np.stack([gx, gy, gz], -1).reshape(-1, 3)
    emb = pos_embed_3d(coords, 48)
    assert len(np.unique(emb, axis=0)) == 16**3


def test_pos_embed_pads_remainder_with_zeros():
    e = pos_embed_3d(np.array([[3, 5, 7]]), 50)
    assert e.shape == (1, 50)
    np.testing.assert_array_equal(e[0, 48:], [0.0, 0.0])


def test_pos_embed_axes_independent():
    a = pos_embed_3d(np.array([[4, 0, 0]]), 48)
    b = pos_embed_3d(np.array([[0, 4, 0]]), 48)
    np.testing.assert_array_equal(a[0, :16], b[0, 16:32])
    assert not np.array_equal(a, b)


def test_time_embed_range_and_distinctness():
    with pytest.raises(SequenceError):
        time_embed(1.2, 16)
    with pytest.raises(SequenceError):
        time_embed(-0.01, 16)
    grid = [1.0 - k / 50 for k in range(50)]
    feats = np.stack([time_embed(s, 64) for s in grid])
    assert len(np.unique(feats, axis=0)) == 50
    z = time_embed(0.0, 16)
    np.testing.assert_array_equal(z[0::2], np.zeros(8))
    np.testing.assert_array_equal(z[1::2], np.ones(8))


# -- builder -----------------------------------------------------------------


def build_one_step(vocab, retained=True, D=8):
    rng = np.random.default_rng(0)
    b = SeqBuilder(vocab)
    words = vocab.encode_text("add a red box")
    b.text_block(words, step=0)
    if retained:
        rows = rng.standard_normal((D**3, 4)).astype(np.float32)
        tgt = rng.standard_normal((D**3, 4)).astype(np.float32)
        b.gen_block(rows, p=1, D=D, step=0, substep="coarse", time_s=0.5,
                    target_rows=tgt)
    latent = rng.standard_normal((D // 2, D // 2, D // 2, 4 * 8)).astype(np.float32)
    b.und_block(latent, p=2, step=0)
    return b.build()


def test_single_step_layout_lengths():
    vocab = small_vocab()
    seq = build_one_step(vocab)
    text, gen, und = seq.segments
    assert [s.kind for s in seq.segments] == [SegmentKind.TEXT, SegmentKind.GEN3D,
                                              SegmentKind.UND3D]
    assert text.length == 4 + 2        # BOS + 4 words + EOS
    assert gen.length == 8**3 + 2
    assert und.length == 2**3 + 2      # (4/2)^3 patches of the 4^3 volume
    assert seq.length == text.length + gen.length + und.length


def test_loss_mask_covers_exactly_gen_latents():
    seq = build_one_step(small_vocab())
    gen = seq.segments[1]
    assert seq.loss_mask.sum() == 8**3
    assert seq.loss_mask[gen.start] == False  # noqa: E712  bracket excluded
    assert seq.loss_mask[gen.stop - 1] == False  # noqa: E712
    assert seq.loss_mask[gen.start + 1:gen.stop - 1].all()


def test_unretained_gen_block_has_no_loss():
    vocab = small_vocab()
    b = SeqBuilder(vocab)
    b.text_block(vocab.encode_text("add a red box"), step=0)
    rows = np.zeros((512, 4), np.float32)
    b.gen_block(rows, p=1, D=8, step=0, substep="coarse", time_s=0.3)
    seq = b.build()
    assert seq.loss_mask.sum() == 0
    assert seq.segments[1].loss is False
    assert 1 not in seq.target_rows


def test_positions_skip_gen_blocks():
    vocab = small_vocab()
    with_gen = build_one_step(vocab, retained=True)
    without = build_one_step(vocab, retained=False)
    text, gen, und = with_gen.segments
    np.testing.assert_array_equal(with_gen.pos_index[text.start:text.stop],
                                  np.arange(text.length))
    # every gen token shares the counter value at its location
    assert (with_gen.pos_index[gen.start:gen.stop] == text.length).all()
    np.testing.assert_array_equal(
        with_gen.pos_index[und.start:und.stop],
        np.arange(text.length, text.length + und.length))
    # removing the gen block leaves all other positions unchanged
    t2, u2 = without.segments
    np.testing.assert_array_equal(without.pos_index[u2.start:u2.stop],
                                  with_gen.pos_index[und.start:und.stop])


def test_positions_restart_per_group():
    vocab = small_vocab()
    b = SeqBuilder(vocab)
    b.text_block(vocab.encode_text("add a red box"), step=0)
    b.begin_group()
    b.text_block(vocab.encode_text("place a blue sphere"), step=0)
    seq = b.build()
    s0, s1 = seq.segments
    assert s0.group == 0 and s1.group == 1
    assert seq.pos_index[s1.start] == 0
    np.testing.assert_array_equal(seq.groups, [0] * s0.length + [1] * s1.length)


def test_refinement_text_uses_bracket_pair():
    vocab = small_vocab()
    b = SeqBuilder(vocab)
    b.text_block(vocab.encode_text("red box"), step=1, substep="fine",
                 refinement=True)
    seq = b.build()
    assert seq.tok_ids[0] == vocab.special("BOR")
    assert seq.tok_ids[-1] == vocab.special("EOR")


def test_build_overflow_is_structured():
    vocab = small_vocab()
    b = SeqBuilder(vocab)
    b.text_block(vocab.encode_text("add a red box"), step=0)
    with pytest.raises(SequenceOverflow) as exc:
        b.build(max_len=3)
    assert exc.value.needed == 6
    assert exc.value.limit == 3


def test_gen_block_rejects_wrong_row_count():
    vocab = small_vocab()
    b = SeqBuilder(vocab)
    with pytest.raises(SequenceError):
        b.gen_block(np.zeros((100, 4), np.float32), p=1, D=8, step=0,
                    substep="coarse", time_s=0.1)


def test_time_recorded_on_all_gen_tokens():
    seq = build_one_step(small_vocab())
    gen = seq.segments[1]
    assert np.all(seq.time_s[gen.start:gen.stop] == np.float32(0.5))
    assert np.all(seq.time_s[:gen.start] == 0)


# -- attention mask ----------------------------------------------------------


def test_mask_handwritten_six_tokens():
    segs = [
        TokenSegment(SegmentKind.TEXT, 0, "coarse", 0, 2),
        TokenSegment(SegmentKind.GEN3D, 0, "coarse", 2, 2),
        TokenSegment(SegmentKind.UND3D, 0, "coarse", 4, 2),
    ]
    expected = np.array([
        [1, 0, 0, 0, 0, 0],
        [1, 1, 0, 0, 0, 0],
        [1, 1, 1, 1, 0, 0],
        [1, 1, 1, 1, 0, 0],
        [1, 1, 0, 0, 1, 1],
        [1, 1, 0, 0, 1, 1],
    ], bool)
    np.testing.assert_array_equal(build_mask(segs, 6), expected)


def test_mask_matches_oracle_on_random_layouts():
    rng = np.random.default_rng(11)
    for _ in range(200):
        segs, L = random_layout(rng)
        np.testing.assert_array_equal(build_mask(segs, L), mask_oracle(segs, L))


def test_mask_gen_removal_invariance():
    # deleting a gen segment's rows/cols yields the mask of the layout without it
    rng = np.random.default_rng(3)
    for _ in range(50):
        segs, L = random_layout(rng)
        gen_idxs = [k for k, s in enumerate(segs) if s.kind == SegmentKind.GEN3D]
        if not gen_idxs:
            continue
        k = gen_idxs[rng.integers(len(gen_idxs))]
        victim = segs[k]
        keep = np.ones(L, bool)
        keep[victim.start:victim.stop] = False
        reduced = []
        pos = 0
        for s in segs:
            if s is victim:
                continue
            reduced.append(TokenSegment(s.kind, s.step, s.substep, pos, s.length,
                                        group=s.group))
            pos += s.length
        full = build_mask(segs, L)
        np.testing.assert_array_equal(full[np.ix_(keep, keep)],
                                      build_mask(reduced, pos))


def test_mask_group_isolation():
    segs = [
        TokenSegment(SegmentKind.TEXT, 0, "coarse", 0, 3, group=0),
        TokenSegment(SegmentKind.TEXT, 0, "coarse", 3, 3, group=1),
    ]
    m = build_mask(segs, 6)
    assert not m[3:, :3].any()
    assert not m[:3, 3:].any()


def test_mask_prefix_stability():
    # the mask over a segment-aligned prefix equals the top-left block
    rng = np.random.default_rng(7)
    for _ in range(30):
        segs, L = random_layout(rng)
        if len(segs) < 2:
            continue
        cut = rng.integers(1, len(segs))
        prefix = segs[:cut]
        k = prefix[-1].stop
        np.testing.assert_array_equal(build_mask(segs, L)[:k, :k],
                                      build_mask(prefix, k))


def test_mask_rows_slice():
    rng = np.random.default_rng(9)
    segs, L = random_layout(rng)
    full = build_mask(segs, L)
    np.testing.assert_array_equal(mask_rows(segs, L, 2, min(L, 5)),
                                  full[2:min(L, 5)])


def test_mask_rejects_overlapping_segments():
    segs = [
        TokenSegment(SegmentKind.TEXT, 0, "coarse", 0, 4),
        TokenSegment(SegmentKind.TEXT, 0, "coarse", 2, 4),
    ]
    with pytest.raises(SequenceError):
        build_mask(segs, 6)


def test_mask_rejects_gap():
    segs = [TokenSegment(SegmentKind.TEXT, 0, "coarse", 0, 2)]
    with pytest.raises(SequenceError):
        build_mask(segs, 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mask_oracle_property(seed):
    rng = np.random.default_rng(seed)
    segs, L = random_layout(rng, max_segments=8, max_tokens=48)
    np.testing.assert_array_equal(build_mask(segs, L), mask_oracle(segs, L))


# -- debug dumps -------------------------------------------------------------


def test_pbm_dump_roundtrip(tmp_path):
    segs = [
        TokenSegment(SegmentKind.TEXT, 0, "coarse", 0, 2),
        TokenSegment(SegmentKind.UND3D, 0, "coarse", 2, 2),
    ]
    m = build_mask(segs, 4)
    path = tmp_path / "mask.pbm"
    dump_mask_pbm(m, path)
    text = path.read_text().split("\n")
    assert text[0] == "P1"
    assert text[1] == "4 4"
    parsed = np.array([[int(v) for v in row.split()] for row in text[2:6]], bool)
    np.testing.assert_array_equal(parsed, m)
    table = segment_table_json(segs)
    assert '"kind": "TEXT"' in table
