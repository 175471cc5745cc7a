"""Scene-level evaluation against the script grammar's own predicates.

A "run" here is the list of per-step generated objects in scene space,
either taken from a live session or loaded back from run artifacts.
Relations are scored against the *generated* anchor object, not the
ground-truth one, so the rate measures whether the model builds an
internally coherent scene rather than whether it hit exact coordinates.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .grammar import SceneScript, check_relation, full_scene
from .voxel import Aabb, OccupancyGrid, bbox, read_vox1


class EvalError(RuntimeError):
    pass


# -- run loading -------------------------------------------------------------


def load_run(art_dir: str | Path) -> list[OccupancyGrid]:
    """Per-step coarse grids from a session's artifact directory.

    Step directories must be contiguous from step_0."""
    art = Path(art_dir)
    grids = []
    t = 0
    while (art / f"step_{t}" / "coarse.vox1").exists():
        grid, _ = read_vox1(art / f"step_{t}" / "coarse.vox1")
        grids.append(grid)
        t += 1
    if not grids:
        raise EvalError(f"no step artifacts under {art}")
    return grids


def run_from_state(state) -> list[OccupancyGrid]:
    return [obj.coarse for obj in state.objects]


def ground_truth_run(script: SceneScript) -> list[OccupancyGrid]:
    """The scripted objects themselves; calibrates the metrics at 1.0."""
    from .grammar import realize
    return [s.scene_grid for s in realize(script)]


# -- metrics -----------------------------------------------------------------


def _tight_box(grid: OccupancyGrid) -> Aabb | None:
    if grid.count() == 0:
        return None
    return bbox(grid)


def relation_satisfaction(run: list[OccupancyGrid], script: SceneScript) -> float:
    """Fraction of relation-bearing steps whose generated object satisfies
    its scripted relation against the generated anchor. Empty objects (or
    empty anchors) fail their step. Scripts without any relation step
    score 1.0 vacuously."""
    if len(run) != script.N:
        raise EvalError(f"run has {len(run)} steps, script has {script.N}")
    boxes = [_tight_box(g) for g in run]
    ok = total = 0
    for t, spec in enumerate(script.steps):
        if spec.relation is None:
            continue
        total += 1
        ob, ab = boxes[t], boxes[spec.anchor]
        if ob is not None and ab is not None \
                and check_relation(spec.relation, ab, ob):
            ok += 1
    return ok / total if total else 1.0


def grid_iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    if a.bits.shape != b.bits.shape:
        raise EvalError(f"grid shapes differ: {a.bits.shape} vs {b.bits.shape}")
    union = int((a.bits | b.bits).sum())
    if union == 0:
        return 1.0
    return int((a.bits & b.bits).sum()) / union


def scene_iou(run: list[OccupancyGrid], script: SceneScript) -> float:
    """IoU of the OR-merged generated scene against the all-at-once
    ground-truth rasterization."""
    gt = full_scene(script)
    merged = np.zeros_like(gt.bits)
    for g in run:
        if g.bits.shape != gt.bits.shape:
            raise EvalError(f"run grid is {g.bits.shape}, scene is {gt.bits.shape}")
        merged = merged | g.bits
    return grid_iou(OccupancyGrid(merged, "scene"), gt)


def evaluate_run(run: list[OccupancyGrid], script: SceneScript) -> dict:
    """One run's metric record, the unit the report aggregates over."""
    boxes = [_tight_box(g) for g in run]
    per_step = []
    for t, spec in enumerate(script.steps):
        if spec.relation is None:
            continue
        ob, ab = boxes[t], boxes[spec.anchor]
        per_step.append({
            "step": t,
            "relation": spec.relation,
            "ok": bool(ob is not None and ab is not None
                       and check_relation(spec.relation, ab, ob)),
        })
    return {
        "seed": script.seed,
        "n_steps": script.N,
        "relation_satisfaction": relation_satisfaction(run, script),
        "scene_iou": scene_iou(run, script),
        "per_step": per_step,
    }


# -- random-placement baseline -----------------------------------------------


def random_run(script: SceneScript, rng: np.random.Generator) -> list[Aabb]:
    """Each scripted object's true extents at a uniform in-bounds offset:
    what a generator with correct sizes but no layout sense would place."""
    out = []
    for spec in script.steps:
        off = tuple(int(rng.integers(0, script.M - d + 1)) for d in spec.dims)
        out.append(Aabb(off, tuple(o + d for o, d in zip(off, spec.dims))))
    return out


def random_placement_rate(scripts: list[SceneScript], trials: int = 20,
                          seed: int = 0) -> float:
    """Monte-Carlo relation-satisfaction rate for random placement."""
    rng = np.random.default_rng(seed)
    ok = total = 0
    for script in scripts:
        for _ in range(trials):
            boxes = random_run(script, rng)
            for t, spec in enumerate(script.steps):
                if spec.relation is None:
                    continue
                total += 1
                if check_relation(spec.relation, boxes[spec.anchor], boxes[t]):
                    ok += 1
    if total == 0:
        raise EvalError("no relation-bearing steps to sample")
    return ok / total


# -- aggregation -------------------------------------------------------------


def _mean_stderr(values: list[float]) -> dict:
    n = len(values)
    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {"mean": mean, "stderr": stderr, "n": n,
            "ci95_lo": mean - 1.96 * stderr}


def report(entries: list[dict]) -> dict:
    """Aggregate per-run records into a versioned, deterministic summary."""
    if not entries:
        raise EvalError("report needs at least one run")
    entries = sorted(entries, key=lambda e: (e["seed"], e["n_steps"]))
    by_metric = {
        m: _mean_stderr([e[m] for e in entries])
        for m in ("relation_satisfaction", "scene_iou")
    }
    by_steps: dict[str, list[float]] = {}
    for e in entries:
        by_steps.setdefault(str(e["n_steps"]), []).append(e["relation_satisfaction"])
    by_rel: dict[str, list[float]] = {}
    for e in entries:
        for s in e["per_step"]:
            by_rel.setdefault(s["relation"], []).append(1.0 if s["ok"] else 0.0)
    return {
        "v": 1,
        "n_runs": len(entries),
        "metrics": by_metric,
        "by_step_count": {k: _mean_stderr(v) for k, v in sorted(by_steps.items())},
        "by_relation": {k: _mean_stderr(v) for k, v in sorted(by_rel.items())},
    }


def report_json(rep: dict) -> str:
    return json.dumps(rep, sort_keys=True, indent=1)


def format_table(rep: dict) -> str:
    """Aligned plain-text view of a report."""
    rows = [("metric", "mean", "stderr", "n")]
    for name, st in rep["metrics"].items():
        rows.append((name, f"{st['mean']:.4f}", f"{st['stderr']:.4f}", str(st["n"])))
    for k, st in rep["by_step_count"].items():
        rows.append((f"relation@{k}-step", f"{st['mean']:.4f}",
                     f"{st['stderr']:.4f}", str(st["n"])))
    for k, st in rep["by_relation"].items():
        rows.append((f"relation[{k}]", f"{st['mean']:.4f}",
                     f"{st['stderr']:.4f}", str(st["n"])))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
             for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
