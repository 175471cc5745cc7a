"""Synthetic scene grammar: scripted sequences of primitive objects with
spatial relations, rasterized to per-step occupancy ground truth.

Coordinate convention: +x is right, +y is up, +z is forward (so
"in front of" means larger z). Step 0 is foundational and rests on the
ground plane y=0; every later step is placed relative to an earlier one
and verified against the same relation predicates evaluation uses.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import GrammarConfig
from .voxel import Aabb, OccupancyGrid, bbox, cubeify, write_vox1

SHAPES = ("box", "sphere", "cylinder", "l-shape")
COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "white", "black")
SIZE_CLASSES = ("small", "medium", "large")
RELATIONS = ("on-top-of", "left-of", "right-of", "in-front-of", "behind", "beside")

# per-axis extents as fractions of M
SIZE_RANGES = {"small": (0.125, 0.22), "medium": (0.22, 0.31), "large": (0.31, 0.44)}

RELATION_PHRASES = {
    "on-top-of": "on top of",
    "left-of": "to the left of",
    "right-of": "to the right of",
    "in-front-of": "in front of",
    "behind": "behind",
    "beside": "beside",
}


class GrammarError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    size_class: str
    color: str
    relation: str | None     # None for the foundational step
    anchor: int | None       # index of an earlier step
    dims: tuple[int, int, int]
    offset: tuple[int, int, int]   # min corner, scene space


@dataclass(frozen=True)
class SceneScript:
    steps: tuple[ObjectSpec, ...]
    seed: int
    M: int

    @property
    def N(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class StepRealization:
    scene_grid: OccupancyGrid    # the step's object alone, scene space
    object_grid: OccupancyGrid   # resampled into its cubeified box at M^3
    instruction: str
    box: Aabb                    # tight bounding box, scene space
    cube: Aabb                   # cubeified placement box


# -- analytic rasterization --------------------------------------------------


def rasterize_shape(shape: str, dims: tuple[int, int, int],
                    offset: tuple[int, int, int], M: int) -> np.ndarray:
    """Voxel-center rasterization of one primitive into an M^3 grid.
    Out-of-bounds portions are clipped silently; callers police clipping."""
    dx, dy, dz = dims
    ox, oy, oz = offset
    x0, x1 = max(0, ox), min(M, ox + dx)
    y0, y1 = max(0, oy), min(M, oy + dy)
    z0, z1 = max(0, oz), min(M, oz + dz)
    bits = np.zeros((M, M, M), bool)
    if x0 >= x1 or y0 >= y1 or z0 >= z1:
        return bits
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    zs = np.arange(z0, z1) + 0.5
    cx, cy, cz = ox + dx / 2, oy + dy / 2, oz + dz / 2
    rx, ry, rz = dx / 2, dy / 2, dz / 2
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    if shape == "box":
        inside = np.ones_like(X, bool)
    elif shape == "sphere":
        inside = ((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2 + ((Z - cz) / rz) ** 2 <= 1.0
    elif shape == "cylinder":
        inside = ((X - cx) / rx) ** 2 + ((Z - cz) / rz) ** 2 <= 1.0
    elif shape == "l-shape":
        # box minus its upper-right quadrant in the x-y plane
        inside = ~((X >= ox + dx / 2) & (Y >= oy + dy / 2))
    else:
        raise GrammarError(f"unknown shape {shape!r}")
    bits[x0:x1, y0:y1, z0:z1] = inside
    return bits


def clipped_fraction(dims, offset, M: int) -> float:
    full = dims[0] * dims[1] * dims[2]
    inb = 1
    for d, o in zip(dims, offset):
        inb *= max(0, min(M, o + d) - max(0, o))
    return 1.0 - inb / full


# -- relation predicates -----------------------------------------------------


def _center(b: Aabb) -> tuple[float, float, float]:
    return tuple((l + h) / 2 for l, h in zip(b.lo, b.hi))


def _overlap_frac(b1: Aabb, b2: Aabb, ax: int) -> float:
    """Overlap length / shorter edge along one axis."""
    ov = min(b1.hi[ax], b2.hi[ax]) - max(b1.lo[ax], b2.lo[ax])
    return max(0.0, ov) / min(b1.edges[ax], b2.edges[ax])


def _gap(b1: Aabb, b2: Aabb, ax: int) -> int:
    return max(0, max(b1.lo[ax], b2.lo[ax]) - min(b1.hi[ax], b2.hi[ax]))


def check_relation(rel: str, anchor_box: Aabb, obj_box: Aabb) -> bool:
    ac = _center(anchor_box)
    oc = _center(obj_box)
    if rel == "on-top-of":
        gap = obj_box.lo[1] - anchor_box.hi[1]
        over_anchor = (anchor_box.lo[0] <= oc[0] < anchor_box.hi[0]
                       and anchor_box.lo[2] <= oc[2] < anchor_box.hi[2])
        return 0 <= gap <= 2 and over_anchor
    if rel in ("left-of", "right-of"):
        ordered = oc[0] < ac[0] if rel == "left-of" else oc[0] > ac[0]
        return ordered and _overlap_frac(anchor_box, obj_box, 1) >= 0.25 \
            and _overlap_frac(anchor_box, obj_box, 2) >= 0.25
    if rel in ("in-front-of", "behind"):
        ordered = oc[2] > ac[2] if rel == "in-front-of" else oc[2] < ac[2]
        return ordered and _overlap_frac(anchor_box, obj_box, 0) >= 0.25 \
            and _overlap_frac(anchor_box, obj_box, 1) >= 0.25
    if rel == "beside":
        horiz_gap = max(_gap(anchor_box, obj_box, 0), _gap(anchor_box, obj_box, 2))
        return horiz_gap <= 3 and _overlap_frac(anchor_box, obj_box, 1) >= 0.5
    raise GrammarError(f"unknown relation {rel!r}")


# -- script sampling ---------------------------------------------------------


def _sample_dims(rng: np.random.Generator, shape: str, size_class: str, M: int):
    lo_f, hi_f = SIZE_RANGES[size_class]
    lo, hi = max(3, round(lo_f * M)), max(4, round(hi_f * M))

    def one():
        return int(rng.integers(lo, hi + 1))

    if shape == "sphere":
        d = one()
        return (d, d, d)
    if shape == "cylinder":
        d = one()
        return (d, one(), d)
    return (one(), one(), one())


def _place(rng: np.random.Generator, rel: str, anchor: ObjectSpec,
           dims: tuple[int, int, int], M: int) -> tuple[int, int, int]:
    """Candidate min corner for an object related to an anchor; the caller
    verifies the predicate on actual rasterized boxes."""
    alo = anchor.offset
    ahi = tuple(o + d for o, d in zip(anchor.offset, anchor.dims))
    acx, acy, acz = ((l + h) / 2 for l, h in zip(alo, ahi))

    def jitter_center(c, spread):
        return c + rng.uniform(-spread, spread)

    if rel == "on-top-of":
        oy = ahi[1] + int(rng.integers(0, 3))
        cx = rng.uniform(alo[0] + 0.3 * anchor.dims[0], ahi[0] - 0.3 * anchor.dims[0])
        cz = rng.uniform(alo[2] + 0.3 * anchor.dims[2], ahi[2] - 0.3 * anchor.dims[2])
        return (round(cx - dims[0] / 2), oy, round(cz - dims[2] / 2))
    gap = int(rng.integers(1, 5))
    oy = alo[1]  # align bases with the anchor
    if rel == "left-of":
        return (alo[0] - gap - dims[0], oy, round(jitter_center(acz, 0.2 * anchor.dims[2]) - dims[2] / 2))
    if rel == "right-of":
        return (ahi[0] + gap, oy, round(jitter_center(acz, 0.2 * anchor.dims[2]) - dims[2] / 2))
    if rel == "in-front-of":
        return (round(jitter_center(acx, 0.2 * anchor.dims[0]) - dims[0] / 2), oy, ahi[2] + gap)
    if rel == "behind":
        return (round(jitter_center(acx, 0.2 * anchor.dims[0]) - dims[0] / 2), oy, alo[2] - gap - dims[2])
    # beside: any horizontal side, small gap
    gap = int(rng.integers(0, 4))
    side = rng.integers(0, 4)
    if side == 0:
        return (alo[0] - gap - dims[0], oy, round(jitter_center(acz, 1.0) - dims[2] / 2))
    if side == 1:
        return (ahi[0] + gap, oy, round(jitter_center(acz, 1.0) - dims[2] / 2))
    if side == 2:
        return (round(jitter_center(acx, 1.0) - dims[0] / 2), oy, alo[2] - gap - dims[2])
    return (round(jitter_center(acx, 1.0) - dims[0] / 2), oy, ahi[2] + gap)


def sample_script(seed: int, config: GrammarConfig, n_steps: int | None = None) -> SceneScript:
    """Deterministic script: every placement is rasterized and checked
    against its relation predicate before acceptance."""
    config.validate()
    M = config.M
    rng = np.random.default_rng(seed)
    if n_steps is None:
        n_steps = int(rng.integers(config.n_min, config.n_max + 1))
    if n_steps < 2:
        raise GrammarError(f"scripts need at least 2 steps, got {n_steps}")
    if n_steps > config.max_objects:
        raise GrammarError(f"scripts capped at {config.max_objects} steps, got {n_steps}")
    return _sample_steps(rng, n_steps, M, seed, config)


def sample_single_object(seed: int, config: GrammarConfig) -> SceneScript:
    """One foundational object, no relations (object-level data mode)."""
    rng = np.random.default_rng(seed)
    return _sample_steps(rng, 1, config.M, seed, config)


def _sample_steps(rng, n_steps: int, M: int, seed: int, config: GrammarConfig) -> SceneScript:
    steps: list[ObjectSpec] = []
    boxes: list[Aabb] = []
    occupied = np.zeros((M, M, M), bool)
    used_pairs: set[tuple[str, str]] = set()
    for t in range(n_steps):
        spec = None
        for _ in range(100):
            shape = SHAPES[rng.integers(0, len(SHAPES))]
            color = COLORS[rng.integers(0, len(COLORS))]
            if (color, shape) in used_pairs:
                continue
            size_class = SIZE_CLASSES[rng.integers(0, len(SIZE_CLASSES))] if t else "large"
            dims = _sample_dims(rng, shape, size_class, M)
            if t == 0:
                off = (int(rng.integers(M // 4, M - M // 4 - dims[0] + 1)), 0,
                       int(rng.integers(M // 4, M - M // 4 - dims[2] + 1)))
                rel, anchor = None, None
            else:
                anchor = int(rng.integers(0, t))
                rel = RELATIONS[rng.integers(0, len(RELATIONS))]
                off = _place(rng, rel, steps[anchor], dims, M)
            if clipped_fraction(dims, off, M) > 0.0:
                continue  # sampled scenes stay fully inside the grid
            bits = rasterize_shape(shape, dims, off, M)
            if not bits.any():
                continue
            overlap = int((bits & occupied).sum())
            if overlap > 0.02 * bits.sum():
                continue
            b = bbox(OccupancyGrid(bits))
            if rel is not None and not check_relation(rel, boxes[anchor], b):
                continue
            spec = ObjectSpec(shape, size_class, color, rel, anchor, dims, off)
            occupied |= bits
            boxes.append(b)
            used_pairs.add((color, shape))
            break
        if spec is None:
            raise GrammarError(f"step {t}: no satisfiable placement after 100 attempts (seed {seed})")
        steps.append(spec)
    return SceneScript(tuple(steps), seed, M)


# -- realization -------------------------------------------------------------


def instruction_text(script: SceneScript, t: int) -> str:
    s = script.steps[t]
    if s.relation is None:
        return f"place a {s.size_class} {s.color} {s.shape}"
    a = script.steps[s.anchor]
    return (f"add a {s.size_class} {s.color} {s.shape} "
            f"{RELATION_PHRASES[s.relation]} the {a.color} {a.shape}")


def refine_instruction(spec: ObjectSpec) -> str:
    return f"refine the {spec.color} {spec.shape}"


def _resample_to_object_space(bits: np.ndarray, cube: Aabb, M: int) -> np.ndarray:
    """Crop the cubeified region and nearest-neighbor resample to M^3."""
    lo, hi = cube.lo, cube.hi
    crop = bits[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    e = crop.shape[0]
    src = np.minimum((np.arange(M) + 0.5) * e / M, e - 1).astype(np.int64)
    return crop[np.ix_(src, src, src)]


def realize(script: SceneScript) -> list[StepRealization]:
    M = script.M
    out = []
    for t, s in enumerate(script.steps):
        if clipped_fraction(s.dims, s.offset, M) > 0.2:
            raise GrammarError(f"step {t}: object clipped more than 20% by scene bounds")
        bits = rasterize_shape(s.shape, s.dims, s.offset, M)
        grid = OccupancyGrid(bits, "scene")
        b = bbox(grid)
        cube = cubeify(b, M)
        obj = OccupancyGrid(_resample_to_object_space(bits, cube, M), "object")
        out.append(StepRealization(grid, obj, instruction_text(script, t), b, cube))
    return out


def full_scene(script: SceneScript) -> OccupancyGrid:
    """All-at-once rasterization (oracle for the per-step union)."""
    bits = np.zeros((script.M,) * 3, bool)
    for s in script.steps:
        bits |= rasterize_shape(s.shape, s.dims, s.offset, script.M)
    return OccupancyGrid(bits, "scene")


# -- corpus / vocabulary -----------------------------------------------------


def grammar_corpus() -> list[str]:
    """Sentences covering every word any instruction can produce."""
    lines = []
    for shape in SHAPES:
        for color in COLORS:
            lines.append(f"place a {color} {shape}")
            lines.append(f"refine the {color} {shape}")
    for size in SIZE_CLASSES:
        lines.append(f"add a {size} thing")
    lines = [ln.replace(" thing", " box") for ln in lines]
    for phrase in RELATION_PHRASES.values():
        lines.append(f"add a small red box {phrase} the blue box")
    return lines


# -- dataset export ----------------------------------------------------------


def _spec_to_dict(s: ObjectSpec) -> dict:
    return {
        "shape": s.shape, "size_class": s.size_class, "color": s.color,
        "relation": s.relation, "anchor": s.anchor,
        "dims": list(s.dims), "offset": list(s.offset),
    }


def _spec_from_dict(d: dict) -> ObjectSpec:
    return ObjectSpec(d["shape"], d["size_class"], d["color"], d["relation"],
                      d["anchor"], tuple(d["dims"]), tuple(d["offset"]))


def script_to_json(script: SceneScript) -> str:
    return json.dumps({"seed": script.seed, "M": script.M,
                       "steps": [_spec_to_dict(s) for s in script.steps]},
                      sort_keys=True)


def script_from_json(text: str) -> SceneScript:
    d = json.loads(text)
    return SceneScript(tuple(_spec_from_dict(s) for s in d["steps"]), d["seed"], d["M"])


def assembly_plan(script: SceneScript, rng: np.random.Generator) -> list[dict]:
    """Plan rows with exactly three keys; part_idx is an arbitrary but
    deterministic permutation, assembly_idx the generation order."""
    perm = rng.permutation(script.N)
    return [
        {"instructions": instruction_text(script, t),
         "part_idx": int(perm[t]),
         "assembly_idx": t}
        for t in range(script.N)
    ]


def _split_by_hash(seeds: list[int]) -> list[str]:
    """90/5/5 split: order scenes by seed hash, cut at exact quantiles."""
    digests = [hashlib.sha256(str(s).encode()).hexdigest() for s in seeds]
    order = sorted(range(len(seeds)), key=lambda i: digests[i])
    n = len(seeds)
    n_train = math.ceil(0.90 * n)
    n_val = math.ceil(0.05 * n)
    split = [""] * n
    for rank, i in enumerate(order):
        split[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return split


def export_dataset(n_scenes: int, out_dir: str | Path, config: GrammarConfig,
                   base_seed: int = 0, single_fraction: float = 0.0) -> dict:
    """Write <out>/<scene_id>/{plan.json, script.json, step_k_*.vox1} and a
    root manifest.json. Deterministic per (n_scenes, base_seed, config)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    seeds = [base_seed + i for i in range(n_scenes)]
    splits = _split_by_hash(seeds)
    for i, seed in enumerate(seeds):
        mode_rng = np.random.default_rng(seed ^ 0xA5A5A5)
        single = mode_rng.random() < single_fraction
        script = sample_single_object(seed, config) if single else sample_script(seed, config)
        scene_id = f"scene_{i:05d}"
        sdir = out_dir / scene_id
        sdir.mkdir(exist_ok=True)
        steps = realize(script)
        for t, st in enumerate(steps):
            write_vox1(sdir / f"step_{t}_scene.vox1", st.scene_grid, step_index=t)
            write_vox1(sdir / f"step_{t}_object.vox1", st.object_grid, step_index=t)
        plan = assembly_plan(script, np.random.default_rng(seed ^ 0x5A5A5A))
        (sdir / "plan.json").write_text(json.dumps(plan, sort_keys=True, indent=1))
        (sdir / "script.json").write_text(script_to_json(script))
        entries.append({"id": scene_id, "seed": seed, "split": splits[i],
                        "n_steps": script.N})
    manifest = {"v": 1, "M": config.M, "n_scenes": n_scenes,
                "base_seed": base_seed, "scenes": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_manifest(root: str | Path) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def load_script(root: str | Path, scene_id: str) -> SceneScript:
    return script_from_json((Path(root) / scene_id / "script.json").read_text())
