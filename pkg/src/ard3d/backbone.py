"""Shared-trunk transformer over mixed text / latent-voxel sequences.

One stack of pre-norm blocks (RMSNorm, grouped-query attention, SiLU FFN)
serves every token; modality enters only through the input maps (word
embedding table, one linear per latent patch width) and leaves through a
single zero-initialized velocity head over generation-block latents.

Conditioning enters at embed time:
  - learned absolute position table indexed by persistent-token position
  - sinusoidal 3-axis lattice code added to latent tokens
  - projected flow-time features added to every generation-block token
  - dropped conditioning blocks swap their content for a learned null
    vector (text and voxel nulls are separate); positions still apply

Incremental decoding reuses per-layer K/V through KvCache; a forward with
commit=False leaves the cache untouched, so speculative blocks can be run
and discarded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import BackboneConfig
from .optim import ParamStore, trunc_normal
from .sequence import SegmentKind, TokenSegment, TokenSequence, build_mask, pos_embed_3d, time_embed
from .tensor import (
    Tensor,
    add,
    concat,
    embedding,
    masked_softmax,
    matmul,
    narrow,
    reshape,
    rms_norm,
    silu,
    transpose,
)
from .textcodec import Vocab


class BackboneError(RuntimeError):
    pass


@dataclass
class KvCache:
    """Per-layer committed keys/values plus the segment metadata needed to
    extend the attention mask and position counter."""

    k: list[np.ndarray]
    v: list[np.ndarray]
    segments: list[TokenSegment] = field(default_factory=list)
    length: int = 0
    pos_counter: int = 0

    @classmethod
    def empty(cls, n_layers: int, batch: int, kv_heads: int, head_dim: int) -> "KvCache":
        shape = (batch, kv_heads, 0, head_dim)
        return cls([np.zeros(shape, np.float32) for _ in range(n_layers)],
                   [np.zeros(shape, np.float32) for _ in range(n_layers)])

    @property
    def batch(self) -> int:
        return self.k[0].shape[0]

    def fork(self) -> "KvCache":
        return KvCache([a.copy() for a in self.k], [a.copy() for a in self.v],
                       [TokenSegment(**vars(s)) for s in self.segments],
                       self.length, self.pos_counter)


def gqa_attention(h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                  mask: np.ndarray, q_heads: int, kv_heads: int,
                  past_k: np.ndarray | None = None,
                  past_v: np.ndarray | None = None):
    """Grouped-query attention via broadcast matmul: queries are grouped
    (kv_heads, q_heads/kv_heads) so keys/values are never replicated.

    h: (B, Ln, C) pre-normed inputs; mask: (Ln, Lk) rows for the new
    tokens over cached-plus-new keys. Returns (out, k_new, v_new) with
    k_new/v_new shaped (B, kv_heads, Ln, head_dim).
    """
    B, Ln, C = h.shape
    hd = C // q_heads
    g = q_heads // kv_heads
    # scale applied to q while it is still (B, Ln, C): the equivalent scale
    # on the score matrix would touch an Ln*Lk array per layer
    q = matmul(h, wq) * (1.0 / math.sqrt(hd))
    q = reshape(q, (B, Ln, q_heads, hd))
    q = transpose(q, (0, 2, 1, 3))                       # (B, Hq, Ln, hd)
    q = reshape(q, (B, kv_heads, g, Ln, hd))
    k_new = transpose(reshape(matmul(h, wk), (B, Ln, kv_heads, hd)), (0, 2, 1, 3))
    v_new = transpose(reshape(matmul(h, wv), (B, Ln, kv_heads, hd)), (0, 2, 1, 3))
    if past_k is not None and past_k.shape[2]:
        k_full = concat([Tensor(past_k), k_new], axis=2)
        v_full = concat([Tensor(past_v), v_new], axis=2)
    else:
        k_full, v_full = k_new, v_new
    Lk = k_full.shape[2]
    if mask.shape != (Ln, Lk):
        raise BackboneError(f"mask shape {mask.shape} vs queries {Ln} keys {Lk}")
    kt = reshape(transpose(k_full, (0, 1, 3, 2)), (B, kv_heads, 1, hd, Lk))
    scores = matmul(q, kt)                               # (B, Hkv, g, Ln, Lk)
    p = masked_softmax(scores, mask, inplace=True)       # scores has no other reader
    vb = reshape(v_full, (B, kv_heads, 1, Lk, hd))
    o = matmul(p, vb)                                    # (B, Hkv, g, Ln, hd)
    o = reshape(transpose(o, (0, 3, 1, 2, 4)), (B, Ln, C))
    return matmul(o, wo), k_new, v_new


class TransformerBlock:
    """Pre-norm residual block: RMSNorm -> GQA -> add, RMSNorm -> SiLU FFN -> add."""

    def __init__(self, store: ParamStore, prefix: str, cfg: BackboneConfig,
                 rng: np.random.Generator):
        C = cfg.hidden
        hd = C // cfg.q_heads
        kv_dim = cfg.kv_heads * hd
        f = C * cfg.ffn_mult
        self.store = store
        self.prefix = prefix
        self.cfg = cfg
        store.add(f"{prefix}.attn_norm", np.ones(C, np.float32))
        store.add(f"{prefix}.wq", trunc_normal(rng, (C, C)))
        store.add(f"{prefix}.wk", trunc_normal(rng, (C, kv_dim)))
        store.add(f"{prefix}.wv", trunc_normal(rng, (C, kv_dim)))
        store.add(f"{prefix}.wo", trunc_normal(rng, (C, C)))
        store.add(f"{prefix}.ffn_norm", np.ones(C, np.float32))
        store.add(f"{prefix}.w1", trunc_normal(rng, (C, f)))
        store.add(f"{prefix}.w2", trunc_normal(rng, (f, C)))

    def forward(self, x: Tensor, mask: np.ndarray,
                past_k: np.ndarray | None = None,
                past_v: np.ndarray | None = None):
        p = self.store.params
        pre = self.prefix
        h = rms_norm(x, p[f"{pre}.attn_norm"])
        attn, k_new, v_new = gqa_attention(
            h, p[f"{pre}.wq"], p[f"{pre}.wk"], p[f"{pre}.wv"], p[f"{pre}.wo"],
            mask, self.cfg.q_heads, self.cfg.kv_heads, past_k, past_v)
        x = add(x, attn)
        h2 = rms_norm(x, p[f"{pre}.ffn_norm"])
        y = matmul(silu(matmul(h2, p[f"{pre}.w1"])), p[f"{pre}.w2"])
        return add(x, y), k_new, v_new


class ArdModel:
    """Trunk plus modality maps over TokenSequence inputs."""

    def __init__(self, cfg: BackboneConfig, vocab: Vocab, gen_width: int,
                 und_width: int, store: ParamStore | None = None, seed: int = 0):
        if cfg.hidden % cfg.q_heads:
            raise BackboneError("hidden must divide into query heads")
        if cfg.q_heads % cfg.kv_heads:
            raise BackboneError("q_heads must be a multiple of kv_heads")
        self.cfg = cfg
        self.vocab = vocab
        self.gen_width = gen_width
        self.und_width = und_width
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        C = cfg.hidden
        s = self.store
        s.add("model.word_emb", trunc_normal(rng, (len(vocab), C)))
        s.add("model.pos_emb", trunc_normal(rng, (cfg.max_seq, C)))
        s.add("model.null_text", trunc_normal(rng, (1, C)))
        s.add("model.null_und", trunc_normal(rng, (1, C)))
        s.add("model.gen_in_w", trunc_normal(rng, (gen_width, C)))
        s.add("model.gen_in_b", np.zeros(C, np.float32))
        s.add("model.und_in_w", trunc_normal(rng, (und_width, C)))
        s.add("model.und_in_b", np.zeros(C, np.float32))
        s.add("model.time_w1", trunc_normal(rng, (C, C)))
        s.add("model.time_b1", np.zeros(C, np.float32))
        s.add("model.time_w2", trunc_normal(rng, (C, C)))
        s.add("model.time_b2", np.zeros(C, np.float32))
        self.blocks = [TransformerBlock(s, f"model.layers.{i}", cfg, rng)
                       for i in range(cfg.layers)]
        s.add("model.final_norm", np.ones(C, np.float32))
        # velocity head starts at zero so the flow starts as the identity map
        s.add("model.vel_w", np.zeros((C, gen_width), np.float32))
        s.add("model.vel_b", np.zeros(gen_width, np.float32))

    # -- embedding -----------------------------------------------------------

    def _time_row(self, s_val: float) -> Tensor:
        p = self.store.params
        feat = Tensor(time_embed(s_val, self.cfg.hidden).reshape(1, -1))
        h = silu(add(matmul(feat, p["model.time_w1"]), p["model.time_b1"]))
        return add(matmul(h, p["model.time_w2"]), p["model.time_b2"])

    def _null_block(self, which: Tensor, n: int) -> Tensor:
        return add(Tensor(np.zeros((n, self.cfg.hidden), np.float32)), which)

    def embed(self, seq: TokenSequence, pos_offset: int = 0,
              drop_text: bool = False, drop_und: bool = False) -> Tensor:
        """(L, C) input embeddings. drop_text / drop_und null out every
        text / understanding block (guidance branches); per-segment
        ``dropped`` flags do the same for training dropout."""
        p = self.store.params
        parts: list[Tensor] = []
        for idx, seg in enumerate(seq.segments):
            span = slice(seg.start, seg.stop)
            if seg.kind == SegmentKind.TEXT:
                if drop_text or seg.dropped:
                    parts.append(self._null_block(p["model.null_text"], seg.length))
                else:
                    parts.append(embedding(p["model.word_emb"], seq.tok_ids[span]))
            elif seg.kind in (SegmentKind.UND3D, SegmentKind.GEN3D):
                is_gen = seg.kind == SegmentKind.GEN3D
                if not is_gen and (drop_und or seg.dropped):
                    parts.append(self._null_block(p["model.null_und"], seg.length))
                else:
                    rows = Tensor(seq.latent_rows[idx])
                    w, b = (("model.gen_in_w", "model.gen_in_b") if is_gen
                            else ("model.und_in_w", "model.und_in_b"))
                    lat = add(matmul(rows, p[w]), p[b])
                    lat_coords = seq.coords[seg.start + 1:seg.stop - 1]
                    lat = add(lat, Tensor(pos_embed_3d(lat_coords, self.cfg.hidden)))
                    bo = embedding(p["model.word_emb"], seq.tok_ids[span][:1])
                    eo = embedding(p["model.word_emb"], seq.tok_ids[span][-1:])
                    block = concat([bo, lat, eo], axis=0)
                    if is_gen:
                        block = add(block, self._time_row(seg.time_s))
                    parts.append(block)
            else:
                parts.append(embedding(p["model.word_emb"], seq.tok_ids[span]))
        x = concat(parts, axis=0) if len(parts) > 1 else parts[0]
        pos = seq.pos_index + pos_offset
        if pos.max(initial=0) >= self.cfg.max_seq:
            raise BackboneError(
                f"position {int(pos.max())} exceeds table size {self.cfg.max_seq}")
        return add(x, embedding(p["model.pos_emb"], pos))

    def embed_branches(self, seq: TokenSequence, drops: list[tuple[bool, bool]],
                       pos_offset: int = 0) -> Tensor:
        rows = [reshape(self.embed(seq, pos_offset, dt, du), (1, seq.length, self.cfg.hidden))
                for dt, du in drops]
        return rows[0] if len(rows) == 1 else concat(rows, axis=0)

    # -- trunk ---------------------------------------------------------------

    def forward_hidden(self, x: Tensor, mask: np.ndarray,
                       cache: KvCache | None = None, commit: bool = False) -> Tensor:
        """Run the trunk over embedded inputs x (B, Ln, C).

        mask holds the Ln query rows against cached+new keys. With a cache
        and commit=True the new K/V are appended after the pass.
        """
        if commit and cache is None:
            raise BackboneError("commit requires a cache")
        pending: list[tuple[np.ndarray, np.ndarray]] = []
        for li, block in enumerate(self.blocks):
            past_k = cache.k[li] if cache is not None else None
            past_v = cache.v[li] if cache is not None else None
            x, k_new, v_new = block.forward(x, mask, past_k, past_v)
            if not np.isfinite(x.data).all():
                raise BackboneError(f"non-finite activations after layer {li}")
            if commit:
                pending.append((k_new.data, v_new.data))
        if commit:
            for li, (kn, vn) in enumerate(pending):
                cache.k[li] = np.concatenate([cache.k[li], kn], axis=2)
                cache.v[li] = np.concatenate([cache.v[li], vn], axis=2)
        return rms_norm(x, self.store.params["model.final_norm"])

    def forward_seq(self, seq: TokenSequence, cache: KvCache | None = None,
                    commit: bool = False,
                    drops: list[tuple[bool, bool]] | None = None) -> Tensor:
        """Embed a block sequence and run it against (and optionally into)
        a cache. Returns final hidden states (B, L, C)."""
        drops = drops or [(False, False)]
        offset = cache.length if cache is not None else 0
        pos_offset = cache.pos_counter if cache is not None else 0
        shifted = [TokenSegment(**{**vars(s), "start": s.start + offset})
                   for s in seq.segments]
        all_segs = (list(cache.segments) + shifted) if cache is not None else shifted
        total = offset + seq.length
        mask = build_mask(all_segs, total)[offset:total]
        x = self.embed_branches(seq, drops, pos_offset)
        h = self.forward_hidden(x, mask, cache, commit)
        if commit:
            cache.segments.extend(shifted)
            cache.length = total
            persist = sum(s.length for s in seq.segments if s.kind != SegmentKind.GEN3D)
            cache.pos_counter += persist
        return h

    # -- heads ---------------------------------------------------------------

    def velocity_span(self, hidden: Tensor, start: int, length: int) -> Tensor:
        """Velocity rows for a contiguous latent span of hidden states."""
        p = self.store.params
        rows = narrow(hidden, 1, start, length)
        return add(matmul(rows, p["model.vel_w"]), p["model.vel_b"])

    def velocity_flagged(self, hidden: Tensor, seq: TokenSequence) -> tuple[Tensor, np.ndarray]:
        """Concatenated velocity rows over every loss-flagged gen segment,
        plus the matching target rows."""
        outs = []
        tgts = []
        for idx, seg in enumerate(seq.segments):
            if not seg.loss:
                continue
            outs.append(self.velocity_span(hidden, seg.start + 1, seg.length - 2))
            tgts.append(seq.target_rows[idx])
        if not outs:
            raise BackboneError("no loss-flagged segments in sequence")
        out = outs[0] if len(outs) == 1 else concat(outs, axis=1)
        return out, np.concatenate(tgts, axis=0)

    def new_cache(self, batch: int = 1) -> KvCache:
        hd = self.cfg.hidden // self.cfg.q_heads
        return KvCache.empty(self.cfg.layers, batch, self.cfg.kv_heads, hd)
