"""Backbone: grouped-query attention against a replicated-head oracle,
block gradients against finite differences, cache/full equivalence, and
embedding composition."""

import numpy as np
import pytest

from ard3d.backbone import ArdModel, BackboneError, TransformerBlock, gqa_attention
from ard3d.config import BackboneConfig
from ard3d.optim import ParamStore
from ard3d.sequence import SeqBuilder
from ard3d.tensor import Tensor, grad_check, mean_square, no_grad
from ard3d.textcodec import build_vocab

D = 4          # latent side used by these tests
C_S = 4
GEN_W = C_S          # patch 1
UND_W = C_S * 8      # patch 2


def small_cfg(**kw):
    base = dict(layers=2, hidden=24, q_heads=2, kv_heads=1, ffn_mult=2, max_seq=256)
    base.update(kw)
    return BackboneConfig(**base)


def make_model(seed=0, **kw):
    vocab = build_vocab(["add a red box", "place a blue sphere on the box"])
    return ArdModel(small_cfg(**kw), vocab, GEN_W, UND_W, seed=seed), vocab


def build_seq(vocab, rng, retained=True, with_und=True, dropped_text=False,
              dropped_und=False, time_s=0.5, und_latent=None):
    b = SeqBuilder(vocab)
    b.text_block(vocab.encode_text("add a red box"), step=0, dropped=dropped_text)
    if retained:
        rows = rng.standard_normal((D**3, GEN_W)).astype(np.float32)
        tgt = rng.standard_normal((D**3, GEN_W)).astype(np.float32)
        b.gen_block(rows, p=1, D=D, step=0, substep="coarse", time_s=time_s,
                    target_rows=tgt)
    if with_und:
        if und_latent is None:
            und_latent = rng.standard_normal((D, D, D, C_S)).astype(np.float32)
        b.und_block(und_latent, p=2, step=0, dropped=dropped_und)
    return b.build()


# -- GQA oracle --------------------------------------------------------------


def softmax_rows(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def mha_replicated(h, wq, wk, wv, wo, mask, q_heads, kv_heads):
    """Reference attention: explicitly replicate each kv head across its
    query group and run plain per-head attention."""
    B, L, Ch = h.shape
    hd = Ch // q_heads
    g = q_heads // kv_heads
    q = (h @ wq).reshape(B, L, q_heads, hd)
    k = (h @ wk).reshape(B, L, kv_heads, hd)
    v = (h @ wv).reshape(B, L, kv_heads, hd)
    heads = []
    for hq in range(q_heads):
        kvh = hq // g
        scores = np.einsum("bld,bmd->blm", q[:, :, hq], k[:, :, kvh]) / np.sqrt(hd)
        scores = np.where(mask, scores, -1e30)
        heads.append(softmax_rows(scores) @ v[:, :, kvh])
    o = np.stack(heads, axis=2).reshape(B, L, Ch)
    return o @ wo


def test_gqa_matches_replicated_oracle():
    rng = np.random.default_rng(2)
    B, L, Ch, q_heads, kv_heads = 2, 7, 12, 4, 2
    h = rng.standard_normal((B, L, Ch)).astype(np.float32)
    ws = [rng.standard_normal((Ch, Ch)).astype(np.float32) * 0.3 for _ in range(2)]
    wk = rng.standard_normal((Ch, kv_heads * 3)).astype(np.float32) * 0.3
    wv = rng.standard_normal((Ch, kv_heads * 3)).astype(np.float32) * 0.3
    mask = rng.random((L, L)) < 0.6
    np.fill_diagonal(mask, True)
    with no_grad():
        out, k_new, v_new = gqa_attention(
            Tensor(h), Tensor(ws[0]), Tensor(wk), Tensor(wv), Tensor(ws[1]),
            mask, q_heads, kv_heads)
    ref = mha_replicated(h, ws[0], wk, wv, ws[1], mask, q_heads, kv_heads)
    np.testing.assert_allclose(out.data, ref, atol=2e-5)
    assert k_new.shape == (B, kv_heads, L, 3)


def test_gqa_rejects_bad_mask_shape():
    with pytest.raises(BackboneError):
        with no_grad():
            gqa_attention(Tensor(np.zeros((1, 4, 12), np.float32)),
                          Tensor(np.eye(12, dtype=np.float32)),
                          Tensor(np.zeros((12, 6), np.float32)),
                          Tensor(np.zeros((12, 6), np.float32)),
                          Tensor(np.eye(12, dtype=np.float32)),
                          np.ones((3, 3), bool), 2, 1)


# -- block gradient ----------------------------------------------------------


def test_transformer_block_grad_check():
    store = ParamStore()
    cfg = small_cfg(layers=1, hidden=12, q_heads=2, kv_heads=1)
    block = TransformerBlock(store, "model.layers.0", cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 6, 12))
    mask = np.tril(np.ones((6, 6), bool))
    mask[2:4, 2:4] = True  # a bidirectional island

    def f(p):
        block.store.params = p
        out, _, _ = block.forward(Tensor(x.astype(p["model.layers.0.wq"].data.dtype)),
                                  mask)
        return mean_square(out)

    err = grad_check(f, store.params, n_samples=6, seed=3)
    assert err <= 1e-3, f"block gradient error {err}"


def test_velocity_head_grad_check_through_model():
    model, vocab = make_model()
    seq = build_seq(vocab, np.random.default_rng(4))

    def f(p):
        model.store.params = p
        h = model.forward_seq(seq)
        out, tgt = model.velocity_flagged(h, seq)
        return mean_square(out - Tensor(tgt.astype(out.data.dtype)))

    check = {k: model.store.params[k] for k in
             ["model.vel_w", "model.vel_b", "model.gen_in_w", "model.time_w1",
              "model.null_und", "model.pos_emb"]}
    full = dict(model.store.params)

    def g(p64):
        merged = {k: Tensor(v.data.astype(np.float64), requires_grad=False,
                            dtype=np.float64) for k, v in full.items()}
        merged.update(p64)
        return f(merged)

    err = grad_check(g, check, n_samples=4, seed=5)
    assert err <= 1e-3, f"model gradient error {err}"


# -- full vs incremental -----------------------------------------------------


def chunked_forward(model, vocab, rng, n_steps=2):
    """Build per-block sequences, feed them through a cache, and compare
    with the one-shot forward over the concatenated layout."""
    full_b = SeqBuilder(vocab)
    chunks = []
    for t in range(n_steps):
        words = vocab.encode_text("add a red box")
        rows = rng.standard_normal((D**3, GEN_W)).astype(np.float32)
        lat = rng.standard_normal((D, D, D, C_S)).astype(np.float32)
        s = float(rng.random())

        full_b.text_block(words, step=t)
        full_b.gen_block(rows, p=1, D=D, step=t, substep="coarse", time_s=s)
        full_b.und_block(lat, p=2, step=t)

        cb = SeqBuilder(vocab)
        cb.text_block(words, step=t)
        chunks.append(cb.build())
        cb = SeqBuilder(vocab)
        cb.gen_block(rows, p=1, D=D, step=t, substep="coarse", time_s=s)
        chunks.append(cb.build())
        cb = SeqBuilder(vocab)
        cb.und_block(lat, p=2, step=t)
        chunks.append(cb.build())
    full_seq = full_b.build()
    with no_grad():
        h_full = model.forward_seq(full_seq).data
        cache = model.new_cache(batch=1)
        outs = [model.forward_seq(ch, cache, commit=True).data for ch in chunks]
    return h_full, np.concatenate(outs, axis=1), cache, full_seq


def test_incremental_matches_full():
    model, vocab = make_model()
    rng = np.random.default_rng(7)
    h_full, h_inc, cache, full_seq = chunked_forward(model, vocab, rng)
    assert h_inc.shape == h_full.shape
    np.testing.assert_allclose(h_inc, h_full, atol=1e-4)
    assert cache.length == full_seq.length
    # persistent positions exclude the two gen blocks
    gen_tokens = sum(s.length for s in full_seq.segments if s.kind.name == "GEN3D")
    assert cache.pos_counter == full_seq.length - gen_tokens


def test_uncommitted_forward_leaves_cache_untouched():
    model, vocab = make_model()
    rng = np.random.default_rng(8)
    cache = model.new_cache(batch=1)
    with no_grad():
        model.forward_seq(build_seq(vocab, rng, retained=False), cache, commit=True)
        k_before = [a.copy() for a in cache.k]
        len_before, pos_before = cache.length, cache.pos_counter
        model.forward_seq(build_seq(vocab, rng), cache, commit=False)
    assert cache.length == len_before
    assert cache.pos_counter == pos_before
    for a, b in zip(cache.k, k_before):
        np.testing.assert_array_equal(a, b)
    assert len(cache.segments) == 2


def test_cache_fork_is_isolated():
    model, vocab = make_model()
    rng = np.random.default_rng(9)
    cache = model.new_cache(batch=1)
    with no_grad():
        model.forward_seq(build_seq(vocab, rng, retained=False), cache, commit=True)
        fork = cache.fork()
        model.forward_seq(build_seq(vocab, rng, retained=False), fork, commit=True)
    assert fork.length > cache.length
    assert len(cache.segments) == 2


def test_speculative_block_then_discard_matches_never_running_it():
    # run a gen block against a fork, drop the fork, continue on the base
    model, vocab = make_model()
    rng = np.random.default_rng(10)
    cache = model.new_cache(batch=1)
    with no_grad():
        model.forward_seq(build_seq(vocab, rng, retained=False), cache, commit=True)
        twin = cache.fork()
        peek = cache.fork()
        model.forward_seq(build_seq(vocab, np.random.default_rng(0), with_und=False),
                          peek, commit=True)
        follow = build_seq(vocab, np.random.default_rng(1), retained=False)
        h_base = model.forward_seq(follow, cache, commit=True).data
        h_twin = model.forward_seq(follow, twin, commit=True).data
    np.testing.assert_array_equal(h_base, h_twin)


# -- trunk properties --------------------------------------------------------


def test_permutation_equivariance():
    model, _ = make_model()
    rng = np.random.default_rng(11)
    L = 10
    x = rng.standard_normal((1, L, 24)).astype(np.float32)
    mask = rng.random((L, L)) < 0.5
    np.fill_diagonal(mask, True)
    perm = rng.permutation(L)
    with no_grad():
        h = model.forward_hidden(Tensor(x), mask).data
        h_p = model.forward_hidden(Tensor(x[:, perm]), mask[np.ix_(perm, perm)]).data
    np.testing.assert_allclose(h_p, h[:, perm], atol=1e-5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_activation_names_layer():
    model, vocab = make_model()
    model.store.params["model.layers.1.w1"].data[0, 0] = np.inf
    with pytest.raises(BackboneError, match="layer 1"):
        with no_grad():
            model.forward_seq(build_seq(vocab, np.random.default_rng(1)))


def test_velocity_head_starts_at_zero():
    model, vocab = make_model()
    with no_grad():
        h = model.forward_seq(build_seq(vocab, np.random.default_rng(2)))
        v = model.velocity_span(h, 1, 3)
    np.testing.assert_array_equal(v.data, np.zeros_like(v.data))


def test_position_overflow_raises():
    model, vocab = make_model(max_seq=8)
    with pytest.raises(BackboneError, match="position"):
        with no_grad():
            model.forward_seq(build_seq(vocab, np.random.default_rng(3)))


# -- embedding composition ---------------------------------------------------


def test_dropped_text_block_uses_null_vector():
    model, vocab = make_model()
    rng = np.random.default_rng(12)
    lat = rng.standard_normal((D, D, D, C_S)).astype(np.float32)
    kept = build_seq(vocab, rng, retained=False, dropped_text=False, und_latent=lat)
    dropped = build_seq(vocab, rng, retained=False, dropped_text=True, und_latent=lat)
    with no_grad():
        e_kept = model.embed(kept).data
        e_drop = model.embed(dropped).data
    text = kept.segments[0]
    null = model.store.params["model.null_text"].data[0]
    pos = model.store.params["model.pos_emb"].data
    for t in range(text.start, text.stop):
        np.testing.assert_allclose(e_drop[t], null + pos[kept.pos_index[t]], atol=1e-6)
    # understanding block unchanged by the text drop
    und = kept.segments[1]
    np.testing.assert_array_equal(e_drop[und.start:und.stop], e_kept[und.start:und.stop])


def test_drop_flags_differ_from_kept_embedding():
    model, vocab = make_model()
    rng = np.random.default_rng(13)
    seq = build_seq(vocab, rng)
    with no_grad():
        full = model.embed(seq).data
        no_text = model.embed(seq, drop_text=True).data
        no_both = model.embed(seq, drop_text=True, drop_und=True).data
    text, gen, und = seq.segments
    assert not np.array_equal(full[text.start:text.stop], no_text[text.start:text.stop])
    np.testing.assert_array_equal(full[und.start:und.stop], no_text[und.start:und.stop])
    assert not np.array_equal(full[und.start:und.stop], no_both[und.start:und.stop])
    # gen block embedding identical on every branch
    np.testing.assert_array_equal(full[gen.start:gen.stop], no_both[gen.start:gen.stop])


def test_time_value_shifts_gen_block_only():
    model, vocab = make_model()
    lat = np.random.default_rng(1).standard_normal(
        (D, D, D, C_S)).astype(np.float32)

    def seq_at(s):
        rng = np.random.default_rng(14)
        return build_seq(vocab, rng, time_s=s, und_latent=lat)

    with no_grad():
        a = model.embed(seq_at(0.25)).data
        b = model.embed(seq_at(0.75)).data
    gen = seq_at(0.25).segments[1]
    assert not np.array_equal(a[gen.start:gen.stop], b[gen.start:gen.stop])
    outside = np.ones(len(a), bool)
    outside[gen.start:gen.stop] = False
    np.testing.assert_array_equal(a[outside], b[outside])


def test_embed_branches_stacks_guidance_variants():
    model, vocab = make_model()
    seq = build_seq(vocab, np.random.default_rng(15))
    with no_grad():
        x = model.embed_branches(seq, [(True, True), (True, False), (False, False)])
    assert x.shape == (3, seq.length, 24)
    assert not np.array_equal(x.data[0], x.data[2])


# -- optimization wiring -----------------------------------------------------


def test_no_dead_parameters_after_two_steps():
    model, vocab = make_model()
    rng = np.random.default_rng(16)
    touched = {name: False for name in model.store.params}
    for step in range(2):
        # a dropped text block, a kept und block, and a dropped und block all
        # precede the final retained gen block so every input map sees loss
        b = SeqBuilder(vocab)
        b.text_block(vocab.encode_text("add a red box"), step=0)
        rows = rng.standard_normal((D**3, GEN_W)).astype(np.float32)
        tgt = rng.standard_normal((D**3, GEN_W)).astype(np.float32)
        b.gen_block(rows, p=1, D=D, step=0, substep="coarse", time_s=0.4,
                    target_rows=tgt)
        lat = rng.standard_normal((D, D, D, C_S)).astype(np.float32)
        b.und_block(lat, p=2, step=0)
        b.text_block(vocab.encode_text("place a blue sphere"), step=1, dropped=True)
        b.und_block(lat, p=2, step=1, dropped=True)
        b.text_block(vocab.encode_text("add a red box"), step=2)
        rows2 = rng.standard_normal((D**3, GEN_W)).astype(np.float32)
        b.gen_block(rows2, p=1, D=D, step=2, substep="coarse", time_s=0.6,
                    target_rows=tgt)
        b.und_block(lat, p=2, step=2)
        seq = b.build()
        model.store.zero_grad()
        h = model.forward_seq(seq)
        out, tgt_rows = model.velocity_flagged(h, seq)
        loss = mean_square(out - Tensor(tgt_rows))
        loss.backward()
        for name, t in model.store.params.items():
            if t.grad is not None and np.any(t.grad != 0):
                touched[name] = True
        model.store.adamw_step(lr=1e-3)
    dead = sorted(n for n, hit in touched.items() if not hit)
    assert not dead, f"parameters with no gradient signal: {dead}"
