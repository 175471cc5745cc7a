"""Token-sequence assembly: patchification of latent volumes, lattice and
timestep encodings, block construction, and the mixed causal/bidirectional
attention mask.

Sequences are built from bracketed blocks. A text block is [BOS words EOS]
(refinement text uses BOR/EOR); a generation block is [BO3D noised-latent
rows EO3D]; an understanding block is [BO3D clean-latent rows EO3D]. The
brackets belong to their block's segment, so a generation block is one
removable unit: no token outside it may attend any part of it, which is
what lets training drop blocks and inference skip committing them without
shifting anyone else's context.

Mask rule, per query i and key j with segments S(i), S(j) and packing
groups g(i), g(j):
  - g(i) != g(j): disallowed (packed sequences are isolated)
  - S(i) == S(j): bidirectional if the segment kind is Und3D or Gen3D,
    else causal (j <= i)
  - S(i) != S(j): allowed iff j < i and kind(S(j)) != Gen3D

Positions are "persistent-token" indices: generation blocks do not
advance the position counter (their tokens share the counter value at
their location), so inserting or removing a generation block leaves every
other token's position unchanged. Counters restart per packing group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .textcodec import Vocab


class SegmentKind(IntEnum):
    TEXT = 0
    UND3D = 1
    GEN3D = 2
    SPECIAL = 3


class SequenceError(ValueError):
    pass


class SequenceOverflow(RuntimeError):
    """Assembled length exceeds the limit; the caller repacks."""

    def __init__(self, needed: int, limit: int):
        self.needed = needed
        self.limit = limit
        super().__init__(f"sequence needs {needed} tokens, limit {limit}")


@dataclass
class TokenSegment:
    kind: SegmentKind
    step: int                 # object index within its script
    substep: str              # "coarse" | "fine"
    start: int
    length: int
    patch: int = 0            # latent patch size; 0 for text
    loss: bool = False        # generation segments carry the loss
    group: int = 0            # packing group id
    time_s: float | None = None
    dropped: bool = False     # condition-dropout: inputs become the null vector

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass
class TokenSequence:
    length: int
    segments: list[TokenSegment]
    tok_ids: np.ndarray            # (L,) int64; -1 at latent positions
    coords: np.ndarray             # (L,3) int64; -1 at non-3D positions
    pos_index: np.ndarray          # (L,) int64 persistent-token positions
    groups: np.ndarray             # (L,) int64
    time_s: np.ndarray             # (L,) float32; 0 outside gen segments
    latent_rows: dict[int, np.ndarray] = field(default_factory=dict)   # seg idx -> (n, width)
    target_rows: dict[int, np.ndarray] = field(default_factory=dict)   # retained gen -> (n, width)
    loss_mask: np.ndarray = None   # (L,) bool over gen latent positions

    def latent_span(self, seg_idx: int) -> slice:
        seg = self.segments[seg_idx]
        return slice(seg.start + 1, seg.stop - 1)

    def max_position(self) -> int:
        return int(self.pos_index.max()) if self.length else 0


# -- patchification ----------------------------------------------------------


def patchify(values: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """(D,D,D,C) -> ((D/p)^3, C*p^3) rows plus min-corner voxel coords.

    Row order is x-major over the patch lattice; within a row, channel
    varies fastest over the p^3 cell (exact inverse in unpatchify).
    """
    D, _, _, C = values.shape
    if D % p:
        raise SequenceError(f"patch size {p} does not divide D={D}")
    d = D // p
    v = values.reshape(d, p, d, p, d, p, C)
    rows = v.transpose(0, 2, 4, 1, 3, 5, 6).reshape(d**3, p**3 * C)
    g = np.arange(d) * p
    gx, gy, gz = np.meshgrid(g, g, g, indexing="ij")
    coords = np.stack([gx, gy, gz], axis=-1).reshape(d**3, 3)
    return np.ascontiguousarray(rows), coords


def unpatchify(rows: np.ndarray, p: int, D: int, C: int) -> np.ndarray:
    d = D // p
    v = rows.reshape(d, d, d, p, p, p, C).transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(v.reshape(D, D, D, C))


# -- positional / timestep features -----------------------------------------


def _sinusoid(x: np.ndarray, m: int, max_freq: float = 10000.0) -> np.ndarray:
    half = m // 2
    freqs = max_freq ** (-np.arange(half) / half)
    ang = x[:, None].astype(np.float64) * freqs
    out = np.empty((len(x), m), np.float32)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def pos_embed_3d(coords: np.ndarray, dim: int) -> np.ndarray:
    """Split dim into three equal axis segments, sinusoid each; dims past
    3*(dim//3) stay zero."""
    seg = dim // 3
    if seg % 2:
        seg -= 1
    out = np.zeros((len(coords), dim), np.float32)
    for ax in range(3):
        out[:, ax * seg:(ax + 1) * seg] = _sinusoid(coords[:, ax], seg)
    return out


def time_embed(s: float, dim: int) -> np.ndarray:
    """Sinusoidal features of a flow time s in [0,1] (projected to model
    width by a learned map in the backbone)."""
    if not (0.0 <= s <= 1.0):
        raise SequenceError(f"time {s} outside [0, 1]")
    if dim % 2:
        raise SequenceError("time embedding dim must be even")
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(1000.0), half))
    ang = s * freqs
    out = np.empty(dim, np.float32)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


# -- block-wise sequence builder --------------------------------------------


class SeqBuilder:
    """Accumulates bracketed blocks into a TokenSequence."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self.segments: list[TokenSegment] = []
        self._tok_ids: list[np.ndarray] = []
        self._coords: list[np.ndarray] = []
        self._time: list[np.ndarray] = []
        self._latent_rows: dict[int, np.ndarray] = {}
        self._target_rows: dict[int, np.ndarray] = {}
        self._loss: list[np.ndarray] = []
        self._len = 0
        self._group = 0

    def begin_group(self):
        """Start a new packed (isolated) subsequence."""
        if self._len:
            self._group += 1

    def _push(self, seg: TokenSegment, tok_ids, coords, time_s, loss_bits):
        seg.start = self._len
        seg.group = self._group
        self.segments.append(seg)
        self._tok_ids.append(tok_ids)
        self._coords.append(coords)
        self._time.append(time_s)
        self._loss.append(loss_bits)
        self._len += seg.length

    def text_block(self, word_ids: list[int], step: int, substep: str = "coarse",
                   refinement: bool = False, dropped: bool = False) -> int:
        open_id = self.vocab.special("BOR" if refinement else "BOS")
        close_id = self.vocab.special("EOR" if refinement else "EOS")
        ids = np.array([open_id, *word_ids, close_id], np.int64)
        n = len(ids)
        seg = TokenSegment(SegmentKind.TEXT, step, substep, 0, n, dropped=dropped)
        self._push(seg, ids, np.full((n, 3), -1, np.int64),
                   np.zeros(n, np.float32), np.zeros(n, bool))
        return len(self.segments) - 1

    def gen_block(self, noised_rows: np.ndarray, p: int, D: int, step: int,
                  substep: str, time_s: float, target_rows: np.ndarray | None = None) -> int:
        """Noised generation block; rows are patchified x(s)."""
        _, coords = patchify(np.zeros((D, D, D, 1), np.float32), p)
        n_lat = len(noised_rows)
        if n_lat != (D // p) ** 3:
            raise SequenceError(f"gen block expects {(D // p) ** 3} rows, got {n_lat}")
        n = n_lat + 2
        bo, eo = self.vocab.special("BO3D"), self.vocab.special("EO3D")
        ids = np.concatenate([[bo], np.full(n_lat, -1, np.int64), [eo]])
        cds = np.concatenate([np.full((1, 3), -1, np.int64), coords,
                              np.full((1, 3), -1, np.int64)])
        loss_bits = np.zeros(n, bool)
        if target_rows is not None:
            loss_bits[1:-1] = True
        seg = TokenSegment(SegmentKind.GEN3D, step, substep, 0, n, patch=p,
                           loss=target_rows is not None, time_s=float(time_s))
        self._push(seg, ids, cds, np.full(n, time_s, np.float32), loss_bits)
        idx = len(self.segments) - 1
        self._latent_rows[idx] = np.asarray(noised_rows, np.float32)
        if target_rows is not None:
            self._target_rows[idx] = np.asarray(target_rows, np.float32)
        return idx

    def und_block(self, latent_values: np.ndarray, p: int, step: int,
                  substep: str = "coarse", dropped: bool = False) -> int:
        """Clean understanding block from a (D,D,D,C) latent volume."""
        rows, coords = patchify(latent_values, p)
        n_lat = len(rows)
        n = n_lat + 2
        bo, eo = self.vocab.special("BO3D"), self.vocab.special("EO3D")
        ids = np.concatenate([[bo], np.full(n_lat, -1, np.int64), [eo]])
        cds = np.concatenate([np.full((1, 3), -1, np.int64), coords,
                              np.full((1, 3), -1, np.int64)])
        seg = TokenSegment(SegmentKind.UND3D, step, substep, 0, n, patch=p,
                           dropped=dropped)
        self._push(seg, ids, cds, np.zeros(n, np.float32), np.zeros(n, bool))
        idx = len(self.segments) - 1
        self._latent_rows[idx] = rows
        return idx

    def build(self, max_len: int | None = None) -> TokenSequence:
        if max_len is not None and self._len > max_len:
            raise SequenceOverflow(self._len, max_len)
        L = self._len
        tok_ids = np.concatenate(self._tok_ids) if L else np.zeros(0, np.int64)
        coords = np.concatenate(self._coords) if L else np.zeros((0, 3), np.int64)
        time_s = np.concatenate(self._time) if L else np.zeros(0, np.float32)
        loss = np.concatenate(self._loss) if L else np.zeros(0, bool)
        groups = np.zeros(L, np.int64)
        pos = np.zeros(L, np.int64)
        counter = 0
        cur_group = -1
        for seg in self.segments:
            if seg.group != cur_group:
                cur_group = seg.group
                counter = 0
            groups[seg.start:seg.stop] = seg.group
            if seg.kind == SegmentKind.GEN3D:
                pos[seg.start:seg.stop] = counter  # position-transparent
            else:
                pos[seg.start:seg.stop] = np.arange(counter, counter + seg.length)
                counter += seg.length
        return TokenSequence(L, list(self.segments), tok_ids, coords, pos, groups,
                             time_s, dict(self._latent_rows), dict(self._target_rows),
                             loss)


# -- attention mask ----------------------------------------------------------


def _validate_segments(segments: list[TokenSegment], length: int):
    pos = 0
    for seg in segments:
        if seg.start != pos or seg.length < 1:
            raise SequenceError(f"segments must tile the sequence; bad span at {seg.start}")
        pos = seg.stop
    if pos != length:
        raise SequenceError(f"segments cover {pos} tokens, sequence has {length}")


def build_mask(segments: list[TokenSegment], length: int) -> np.ndarray:
    """(L, L) boolean allow matrix implementing the rule in the module
    docstring. Raises on overlapping or non-tiling segments."""
    _validate_segments(segments, length)
    seg_id = np.empty(length, np.int64)
    kind = np.empty(length, np.int64)
    group = np.empty(length, np.int64)
    for idx, seg in enumerate(segments):
        seg_id[seg.start:seg.stop] = idx
        kind[seg.start:seg.stop] = int(seg.kind)
        group[seg.start:seg.stop] = seg.group
    i = np.arange(length)
    same_group = group[:, None] == group[None, :]
    same_seg = seg_id[:, None] == seg_id[None, :]
    causal = i[None, :] <= i[:, None]
    strictly_before = i[None, :] < i[:, None]
    bidir_q = (kind == SegmentKind.UND3D) | (kind == SegmentKind.GEN3D)
    within = same_seg & (bidir_q[:, None] | causal)
    key_visible = kind != SegmentKind.GEN3D
    across = ~same_seg & strictly_before & key_visible[None, :]
    return same_group & (within | across)


def mask_rows(segments: list[TokenSegment], length: int, row_start: int,
              row_stop: int) -> np.ndarray:
    """Rows [row_start, row_stop) of the full mask (incremental attention:
    new-token queries against all cached + new keys)."""
    return build_mask(segments, length)[row_start:row_stop]


# -- debug dumps -------------------------------------------------------------


def dump_mask_pbm(mask: np.ndarray, path: str | Path) -> None:
    """Plain-text PBM bitmap (P1); allowed = black pixel."""
    h, w = mask.shape
    lines = [f"P1\n{w} {h}"]
    for r in range(h):
        lines.append(" ".join("1" if v else "0" for v in mask[r]))
    Path(path).write_text("\n".join(lines) + "\n")


def segment_table_json(segments: list[TokenSegment]) -> str:
    rows = [
        {"kind": seg.kind.name, "step": seg.step, "substep": seg.substep,
         "start": seg.start, "length": seg.length, "patch": seg.patch,
         "loss": seg.loss, "group": seg.group, "dropped": seg.dropped}
        for seg in segments
    ]
    return json.dumps(rows, indent=1, sort_keys=True)
