/** Client-side scene state: decoded voxel grids per placed object, a
 * stable color per step, and in-flight denoising progress. */

import type {
  BoxPayload,
  GridPayload,
  ProgressEvent,
  SceneSnapshot,
} from "./api.js";
import { countOnes, rleDecode, type Dims } from "./rle.js";

export interface Grid {
  dims: Dims;
  bits: Uint8Array;
}

export type Rgb = [number, number, number];

/** Step colors, cycled. Chosen for contrast on a dark background. */
export const PALETTE: Rgb[] = [
  [0.91, 0.30, 0.24],
  [0.18, 0.55, 0.91],
  [0.20, 0.78, 0.35],
  [0.95, 0.77, 0.06],
  [0.61, 0.35, 0.71],
  [0.95, 0.55, 0.15],
  [0.90, 0.90, 0.92],
  [0.35, 0.80, 0.80],
];

export function colorForStep(step: number): Rgb {
  return PALETTE[step % PALETTE.length];
}

export function gridFromPayload(p: GridPayload): Grid {
  const dims: Dims = [p.dims[0], p.dims[1], p.dims[2]];
  const bits = rleDecode(p.rle, dims);
  if (p.count !== undefined && countOnes(bits) !== p.count) {
    throw new Error(`payload count ${p.count} disagrees with runs`);
  }
  return { dims, bits };
}

/** Map an object-space grid into the scene-space box it was refined
 * for, nearest-neighbor. Used to draw `fine` grids in place. */
export function resampleIntoBox(fine: Grid, box: BoxPayload, sceneDims: Dims): Grid {
  const out = new Uint8Array(sceneDims[0] * sceneDims[1] * sceneDims[2]);
  const [fx, fy, fz] = fine.dims;
  const ex = box.hi[0] - box.lo[0];
  const ey = box.hi[1] - box.lo[1];
  const ez = box.hi[2] - box.lo[2];
  for (let x = 0; x < ex; x++) {
    const sx = Math.min(fx - 1, Math.floor(((x + 0.5) * fx) / ex));
    for (let y = 0; y < ey; y++) {
      const sy = Math.min(fy - 1, Math.floor(((y + 0.5) * fy) / ey));
      for (let z = 0; z < ez; z++) {
        const sz = Math.min(fz - 1, Math.floor(((z + 0.5) * fz) / ez));
        const v = fine.bits[(sx * fy + sy) * fz + sz];
        if (v) {
          const ox = box.lo[0] + x;
          const oy = box.lo[1] + y;
          const oz = box.lo[2] + z;
          out[(ox * sceneDims[1] + oy) * sceneDims[2] + oz] = 1;
        }
      }
    }
  }
  return { dims: sceneDims, bits: out };
}

export interface SceneObject {
  step: number;
  instruction: string;
  grid: Grid;
  color: Rgb;
  refined: boolean;
}

export interface Progress {
  step: number;
  substep: string;
  k: number;
  of: number;
  preview: Grid | null;
}

export type SceneChange = "scene" | "progress" | "status" | "none";

export class SceneModel {
  objects: SceneObject[] = [];
  sceneDims: Dims = [32, 32, 32];
  status = "idle";
  progress: Progress | null = null;
  lastError: string | null = null;

  applySnapshot(snap: SceneSnapshot): void {
    this.sceneDims = [snap.scene.dims[0], snap.scene.dims[1], snap.scene.dims[2]];
    this.status = snap.status;
    this.objects = snap.objects.map((o) => {
      const grid = o.fine
        ? resampleIntoBox(gridFromPayload(o.fine), o.box, this.sceneDims)
        : gridFromPayload(o.coarse);
      return {
        step: o.step,
        instruction: o.instruction,
        grid,
        color: colorForStep(o.step),
        refined: o.fine !== undefined,
      };
    });
  }

  /** Fold one progress event in; the return value tells the caller what
   * needs redrawing. Denoise counters must not move backwards within a
   * substep; a violation throws since it means events were reordered. */
  applyEvent(ev: ProgressEvent): SceneChange {
    switch (ev.phase) {
      case "start":
        this.progress = { step: ev.step ?? 0, substep: "coarse", k: -1, of: 0, preview: null };
        this.lastError = null;
        return "progress";
      case "denoise": {
        const p = this.progress;
        const k = ev.k ?? 0;
        if (p && p.step === ev.step && p.substep === (ev.substep ?? "coarse") && k <= p.k) {
          throw new Error(`denoise step went backwards: ${k} after ${p.k}`);
        }
        this.progress = {
          step: ev.step ?? 0,
          substep: ev.substep ?? "coarse",
          k,
          of: ev.of ?? 0,
          preview: ev.preview ? gridFromPayload(ev.preview) : null,
        };
        return "progress";
      }
      case "refine":
        if (this.progress) this.progress = { ...this.progress, substep: "fine", k: -1 };
        return "progress";
      case "decoded":
        return "none";
      case "done":
      case "undone":
        this.progress = null;
        return "scene";
      case "error":
        this.progress = null;
        this.lastError = ev.error ?? "generation failed";
        return "status";
      default:
        return "none";
    }
  }

  /** One renderable group per placed object; empty grids are skipped. */
  colorGroups(): SceneObject[] {
    return this.objects.filter((o) => countOnes(o.grid.bits) > 0);
  }
}
