"""Binary occupancy volumes and placement geometry.

Grids are cubic boolean arrays indexed [x, y, z] (x-major when
flattened). Objects live either in scene space (shared frame, one
resolution per session) or object space (shape alone, filling its own
grid). Placement back into the scene goes through an axis-aligned cube
and nearest-neighbor resampling.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOX_MAGIC = b"VOX1"


class EmptyObjectError(ValueError):
    """Operation needs at least one set voxel."""


class VoxelError(ValueError):
    pass


@dataclass(frozen=True)
class OccupancyGrid:
    """Immutable M^3 boolean volume with a space tag (scene | object)."""

    bits: np.ndarray
    space_tag: str = "scene"

    def __post_init__(self):
        arr = np.asarray(self.bits, dtype=bool)
        if arr.ndim != 3 or len(set(arr.shape)) != 1:
            raise VoxelError(f"grid must be cubic, got shape {arr.shape}")
        if self.space_tag not in ("scene", "object"):
            raise VoxelError(f"unknown space_tag {self.space_tag!r}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def M(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class SparseVoxels:
    """Unique integer voxel positions, sorted lexicographically."""

    positions: np.ndarray  # (L, 3) int64

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).reshape(-1, 3)
        if len(pos) and len(np.unique(pos, axis=0)) != len(pos):
            raise VoxelError("duplicate voxel positions")
        order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0]))
        pos = pos[order]
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)

    @property
    def L(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box in voxel indices, min inclusive, max exclusive."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if not all(l < h for l, h in zip(self.lo, self.hi)):
            raise VoxelError(f"degenerate box {self.lo}..{self.hi}")

    @property
    def edges(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def is_cube(self) -> bool:
        e = self.edges
        return e[0] == e[1] == e[2]


def empty_grid(M: int, space_tag: str = "scene") -> OccupancyGrid:
    return OccupancyGrid(np.zeros((M, M, M), bool), space_tag)


def densify(s: SparseVoxels, M: int, space_tag: str = "scene") -> OccupancyGrid:
    pos = s.positions
    if len(pos):
        bad = (pos < 0) | (pos >= M)
        if bad.any():
            culprit = pos[bad.any(axis=1)][0]
            raise VoxelError(f"voxel {tuple(int(v) for v in culprit)} outside [0, {M})^3")
    bits = np.zeros((M, M, M), bool)
    if len(pos):
        bits[pos[:, 0], pos[:, 1], pos[:, 2]] = True
    return OccupancyGrid(bits, space_tag)


def sparsify(g: OccupancyGrid) -> SparseVoxels:
    return SparseVoxels(np.argwhere(g.bits))


def bbox(g: OccupancyGrid) -> Aabb:
    if not g.bits.any():
        raise EmptyObjectError("bbox of empty grid")
    pos = np.argwhere(g.bits)
    lo = pos.min(axis=0)
    hi = pos.max(axis=0) + 1
    return Aabb(tuple(int(v) for v in lo), tuple(int(v) for v in hi))


def cubeify(b: Aabb, M: int) -> Aabb:
    """Grow a box to a cube: keep the center, extend every edge to the
    longest one, then shift (never shrink) to stay inside [0, M)^3.
    Half-voxel center ties round toward the origin."""
    edge = max(b.edges)
    if edge > M:
        raise VoxelError(f"cube edge {edge} exceeds grid resolution {M}")
    lo = []
    for ax in range(3):
        ideal2 = b.lo[ax] + b.hi[ax] - edge  # twice the ideal min corner
        v = ideal2 // 2  # floor: rounds .5 toward origin
        v = min(max(v, 0), M - edge)
        lo.append(int(v))
    return Aabb(tuple(lo), tuple(l + edge for l in lo))


def _stamp_into(scene: np.ndarray, stamp: np.ndarray, lo, hi) -> None:
    """OR nearest-neighbor resampled ``stamp`` into the box [lo, hi) of
    ``scene``. Box coordinates are floats; a scene voxel participates if
    its center lies inside the box."""
    M = scene.shape[0]
    axes_idx = []
    axes_src = []
    for ax in range(3):
        first = max(0, math.ceil(lo[ax] - 0.5))
        last = min(M, math.ceil(hi[ax] - 0.5))
        if first >= last:
            return
        xs = np.arange(first, last)
        u = (xs + 0.5 - lo[ax]) / (hi[ax] - lo[ax])
        src = np.clip((u * stamp.shape[ax]).astype(np.int64), 0, stamp.shape[ax] - 1)
        axes_idx.append(xs)
        axes_src.append(src)
    scene[np.ix_(*axes_idx)] |= stamp[np.ix_(*axes_src)]


def embed_object(scene: OccupancyGrid, obj: OccupancyGrid, target: Aabb) -> OccupancyGrid:
    """Resample an object-space grid into a cubic scene region, OR-merged."""
    if not target.is_cube():
        raise VoxelError(f"target box {target.edges} is not a cube")
    out = scene.bits.copy()
    _stamp_into(out, obj.bits, target.lo, target.hi)
    return OccupancyGrid(out, scene.space_tag)


def iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    if a.M != b.M:
        raise VoxelError(f"resolution mismatch {a.M} vs {b.M}")
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a.bits, b.bits).sum())
    return inter / union


@dataclass(frozen=True)
class VoxelStamp:
    """A shape stamp plus its world-space box placement."""

    bits: np.ndarray  # (nx, ny, nz) bool
    origin: tuple[float, float, float]
    size: tuple[float, float, float]


def normalize_scene(parts: list[VoxelStamp], M: int) -> list[OccupancyGrid]:
    """Map the joint bounding box of all parts into the unit cube with a
    single isotropic scale (longest axis fills the cube, scene centered),
    then rasterize each part into its own M^3 scene grid."""
    if not parts or all(not p.bits.any() for p in parts):
        raise EmptyObjectError("normalize_scene of empty scene")
    lo_w = np.min([p.origin for p in parts], axis=0).astype(np.float64)
    hi_w = np.max([np.add(p.origin, p.size) for p in parts], axis=0).astype(np.float64)
    extent = hi_w - lo_w
    scale = 1.0 / extent.max()
    offset = (1.0 - extent * scale) / 2.0
    grids = []
    for p in parts:
        lo_n = ((np.asarray(p.origin) - lo_w) * scale + offset) * M
        hi_n = ((np.asarray(p.origin) + np.asarray(p.size) - lo_w) * scale + offset) * M
        bits = np.zeros((M, M, M), bool)
        _stamp_into(bits, np.asarray(p.bits, bool), lo_n, hi_n)
        grids.append(OccupancyGrid(bits, "scene"))
    return grids


def or_merge(a: OccupancyGrid, b: OccupancyGrid) -> OccupancyGrid:
    if a.M != b.M:
        raise VoxelError(f"resolution mismatch {a.M} vs {b.M}")
    return OccupancyGrid(np.logical_or(a.bits, b.bits), a.space_tag)


def pool_any(bits: np.ndarray, factor: int) -> np.ndarray:
    """Downsample by OR over factor^3 blocks (preview decimation)."""
    M = bits.shape[0]
    n = M // factor
    return bits[:n * factor, :n * factor, :n * factor].reshape(
        n, factor, n, factor, n, factor).any(axis=(1, 3, 5))


# -- file format -------------------------------------------------------------


def write_vox1(path: str | Path, grid: OccupancyGrid, step_index: int | None = None) -> None:
    """Write magic + resolution + bit-packed occupancy, plus a JSON
    sidecar at <path>.json carrying space_tag and provenance."""
    path = Path(path)
    packed = np.packbits(grid.bits.reshape(-1), bitorder="little")
    with open(path, "wb") as f:
        f.write(VOX_MAGIC)
        f.write(struct.pack("<I", grid.M))
        f.write(packed.tobytes())
    sidecar = {"space_tag": grid.space_tag, "step_index": step_index}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_vox1(path: str | Path) -> tuple[OccupancyGrid, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != VOX_MAGIC:
        raise VoxelError(f"{path}: not a voxel file")
    (M,) = struct.unpack_from("<I", raw, 4)
    n_bits = M**3
    n_bytes = (n_bits + 7) // 8
    if len(raw) < 8 + n_bytes:
        raise VoxelError(f"{path}: truncated voxel data")
    bits = np.unpackbits(np.frombuffer(raw, np.uint8, n_bytes, offset=8),
                         bitorder="little")[:n_bits].astype(bool).reshape(M, M, M)
    sidecar_path = Path(str(path) + ".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return OccupancyGrid(bits, sidecar.get("space_tag", "scene")), sidecar
