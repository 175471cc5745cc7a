import { describe, expect, it } from "vitest";
import { countOnes, rleDecode, rleEncode, type Dims } from "../src/rle.js";

// Deterministic bits without pulling in an RNG dependency.
function xorshift(seed: number): () => number {
  let s = seed >>> 0 || 1;
  return () => {
    s ^= s << 13;
    s ^= s >>> 17;
    s ^= s << 5;
    return (s >>> 0) / 0xffffffff;
  };
}

describe("rle codec", () => {
  it("encodes with a leading zero-run, empty when volume starts occupied", () => {
    expect(rleEncode([1, 0, 0, 1])).toEqual([0, 1, 2, 1]);
    expect(rleEncode([0, 0, 1, 1, 0])).toEqual([2, 2, 1]);
    expect(rleEncode([0, 0, 0])).toEqual([3]);
    expect(rleEncode([1, 1])).toEqual([0, 2]);
    expect(rleEncode([])).toEqual([]);
  });

  it("decodes hand cases", () => {
    const dims: Dims = [1, 2, 2];
    expect(Array.from(rleDecode([0, 1, 2, 1], dims))).toEqual([1, 0, 0, 1]);
    expect(Array.from(rleDecode([4], dims))).toEqual([0, 0, 0, 0]);
    expect(Array.from(rleDecode([0, 4], dims))).toEqual([1, 1, 1, 1]);
  });

  it("round-trips random volumes", () => {
    const rnd = xorshift(12345);
    for (const dims of [[4, 4, 4], [3, 5, 2], [8, 1, 1], [2, 2, 2]] as Dims[]) {
      for (let trial = 0; trial < 20; trial++) {
        const total = dims[0] * dims[1] * dims[2];
        const bits = new Uint8Array(total);
        const p = rnd();
        for (let i = 0; i < total; i++) bits[i] = rnd() < p ? 1 : 0;
        const runs = rleEncode(bits);
        // Alternation invariant: only the leading zero-run may be 0.
        for (let i = 1; i < runs.length; i++) expect(runs[i]).toBeGreaterThan(0);
        const back = rleDecode(runs, dims);
        expect(Array.from(back)).toEqual(Array.from(bits));
        expect(countOnes(back)).toBe(countOnes(bits));
      }
    }
  });

  it("rejects inconsistent payloads", () => {
    expect(() => rleDecode([3], [1, 2, 2])).toThrow(/sum/);
    expect(() => rleDecode([5], [1, 2, 2])).toThrow(/sum/);
    expect(() => rleDecode([2, -1, 3], [1, 2, 2])).toThrow(/run length/);
    expect(() => rleDecode([1.5, 2.5], [1, 2, 2])).toThrow(/run length/);
  });
});
