/** Run-length codec for voxel occupancy payloads.
 *
 * Wire form: alternating zero-run / one-run lengths over the volume
 * flattened in C order (first axis slowest), always starting with a
 * zero-run, which may be length 0 when the volume begins occupied.
 */

export type Dims = [number, number, number];

export function volumeSize(dims: Dims): number {
  return dims[0] * dims[1] * dims[2];
}

/** Expand runs into a 0/1 byte array of length dims[0]*dims[1]*dims[2]. */
export function rleDecode(runs: number[], dims: Dims): Uint8Array {
  const total = volumeSize(dims);
  const out = new Uint8Array(total);
  let pos = 0;
  for (let i = 0; i < runs.length; i++) {
    const r = runs[i];
    if (!Number.isInteger(r) || r < 0) {
      throw new Error(`bad run length ${r} at index ${i}`);
    }
    if (i % 2 === 1) {
      out.fill(1, pos, pos + r);
    }
    pos += r;
  }
  if (pos !== total) {
    throw new Error(`run lengths sum to ${pos}, volume is ${total}`);
  }
  return out;
}

export function rleEncode(bits: ArrayLike<number>): number[] {
  const n = bits.length;
  if (n === 0) return [];
  const runs: number[] = [];
  let cur = bits[0] ? 1 : 0;
  if (cur === 1) runs.push(0);
  let len = 0;
  for (let i = 0; i < n; i++) {
    const b = bits[i] ? 1 : 0;
    if (b === cur) {
      len++;
    } else {
      runs.push(len);
      cur = b;
      len = 1;
    }
  }
  runs.push(len);
  return runs;
}

export function countOnes(bits: Uint8Array): number {
  let c = 0;
  for (let i = 0; i < bits.length; i++) c += bits[i];
  return c;
}
