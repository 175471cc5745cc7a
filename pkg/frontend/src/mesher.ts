/** Greedy surface extraction for occupancy grids.
 *
 * For each axis, every boundary plane between solid and empty is a
 * candidate face; coplanar same-direction faces are merged into maximal
 * rectangles row-major. Output feeds straight into indexed triangle
 * buffers. Quad winding is counter-clockwise seen from the face normal.
 */

import type { Grid } from "./scene.js";

export interface MeshData {
  positions: Float32Array;
  normals: Float32Array;
  indices: Uint32Array;
  quadCount: number;
}

export function greedyMesh(grid: Grid): MeshData {
  const [dx, dy, dz] = grid.dims;
  const dims = [dx, dy, dz];
  const bits = grid.bits;
  const solid = (x: number, y: number, z: number): number => {
    if (x < 0 || y < 0 || z < 0 || x >= dx || y >= dy || z >= dz) return 0;
    return bits[(x * dy + y) * dz + z];
  };

  const positions: number[] = [];
  const normals: number[] = [];
  const indices: number[] = [];
  let quadCount = 0;

  const emitQuad = (
    d: number, u: number, v: number,
    plane: number, i: number, j: number, w: number, h: number,
    sign: number,
  ) => {
    const base = quadCount * 4;
    // Corner offsets in (u, v); reversed for negative-facing quads.
    const order = sign > 0
      ? [[0, 0], [w, 0], [w, h], [0, h]]
      : [[0, 0], [0, h], [w, h], [w, 0]];
    for (const [du, dv] of order) {
      const p = [0, 0, 0];
      p[d] = plane;
      p[u] = i + du;
      p[v] = j + dv;
      positions.push(p[0], p[1], p[2]);
      const n = [0, 0, 0];
      n[d] = sign;
      normals.push(n[0], n[1], n[2]);
    }
    indices.push(base, base + 1, base + 2, base, base + 2, base + 3);
    quadCount++;
  };

  const mask = new Int8Array(
    Math.max(dims[0] * dims[1], dims[1] * dims[2], dims[0] * dims[2]),
  );

  for (let d = 0; d < 3; d++) {
    const u = (d + 1) % 3;
    const v = (d + 2) % 3;
    const nu = dims[u];
    const nv = dims[v];
    const coord = [0, 0, 0];
    for (let plane = 0; plane <= dims[d]; plane++) {
      // Face sign between the voxel below the plane and the one above.
      for (let i = 0; i < nu; i++) {
        for (let j = 0; j < nv; j++) {
          coord[u] = i;
          coord[v] = j;
          coord[d] = plane - 1;
          const below = solid(coord[0], coord[1], coord[2]);
          coord[d] = plane;
          const above = solid(coord[0], coord[1], coord[2]);
          mask[i * nv + j] = below === above ? 0 : below ? 1 : -1;
        }
      }
      for (let i = 0; i < nu; i++) {
        for (let j = 0; j < nv; ) {
          const sign = mask[i * nv + j];
          if (sign === 0) {
            j++;
            continue;
          }
          let h = 1;
          while (j + h < nv && mask[i * nv + j + h] === sign) h++;
          let w = 1;
          grow: while (i + w < nu) {
            for (let jj = 0; jj < h; jj++) {
              if (mask[(i + w) * nv + j + jj] !== sign) break grow;
            }
            w++;
          }
          for (let ii = 0; ii < w; ii++) {
            for (let jj = 0; jj < h; jj++) mask[(i + ii) * nv + j + jj] = 0;
          }
          emitQuad(d, u, v, plane, i, j, w, h, sign);
          j += h;
        }
      }
    }
  }

  return {
    positions: new Float32Array(positions),
    normals: new Float32Array(normals),
    indices: new Uint32Array(indices),
    quadCount,
  };
}

/** Sum of quad areas; with per-direction filtering it equals the number
 * of exposed unit faces, which the tests exploit as an oracle. */
export function meshArea(mesh: MeshData, axis?: number, sign?: number): number {
  let area = 0;
  for (let q = 0; q < mesh.quadCount; q++) {
    const o = q * 12;
    const n = mesh.normals;
    if (axis !== undefined) {
      if (n[o + axis] === 0) continue;
      if (sign !== undefined && Math.sign(n[o + axis]) !== sign) continue;
    }
    const p = mesh.positions;
    const ax = p[o + 3] - p[o], ay = p[o + 4] - p[o + 1], az = p[o + 5] - p[o + 2];
    const bx = p[o + 9] - p[o], by = p[o + 10] - p[o + 1], bz = p[o + 11] - p[o + 2];
    const cx = ay * bz - az * by;
    const cy = az * bx - ax * bz;
    const cz = ax * by - ay * bx;
    area += Math.hypot(cx, cy, cz);
  }
  return area;
}
