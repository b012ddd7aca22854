import { describe, expect, it } from "vitest";

import { bestSlice, filterClusters2d, topPercentileCount, topPercentileMask } from "../src/threshold.js";
import { fixture, prng, type ClusterFixture } from "./helpers.js";

describe("topPercentileCount", () => {
  it("takes the ceiling of n * p / 100", () => {
    expect(topPercentileCount(256, 30)).toBe(77);
    expect(topPercentileCount(256, 25)).toBe(64);
    expect(topPercentileCount(100, 1)).toBe(1);
    expect(topPercentileCount(3, 34)).toBe(2);
  });

  it("keeps everything at p = 100 and at least one value otherwise", () => {
    expect(topPercentileCount(17, 100)).toBe(17);
    expect(topPercentileCount(1000000, 1e-9)).toBe(1);
  });

  it("rejects percentiles outside (0, 100]", () => {
    expect(() => topPercentileCount(10, 0)).toThrow(RangeError);
    expect(() => topPercentileCount(10, -5)).toThrow(RangeError);
    expect(() => topPercentileCount(10, 100.5)).toThrow(RangeError);
  });

  it("quantizes p with ties rounded to even", () => {
    // p * 1e6 lands exactly on .5: 1.5 rounds to 2, 2.5 also rounds to 2
    expect(topPercentileCount(10 ** 8, 1.5e-6)).toBe(2);
    expect(topPercentileCount(10 ** 8, 2.5e-6)).toBe(2);
  });
});

describe("topPercentileMask", () => {
  it("keeps the k largest values", () => {
    const mask = topPercentileMask([1, 9, 3, 7], 50);
    expect(Array.from(mask)).toEqual([0, 1, 0, 1]);
  });

  it("breaks ties by earlier index", () => {
    expect(Array.from(topPercentileMask([5, 7, 7, 1], 50))).toEqual([0, 1, 1, 0]);
    expect(Array.from(topPercentileMask([7, 7, 7], 34))).toEqual([1, 1, 0]);
  });

  it("keeps exactly the advertised count on random data", () => {
    const rand = prng(7);
    for (const n of [1, 13, 100, 257]) {
      const values = Array.from({ length: n }, () => rand() * 2 - 1);
      for (const p of [0.5, 10, 33.3, 100]) {
        const mask = topPercentileMask(values, p);
        let kept = 0;
        for (const bit of mask) kept += bit;
        expect(kept).toBe(topPercentileCount(n, p));
      }
    }
  });

  it("never keeps a smaller value while dropping a larger one", () => {
    const rand = prng(21);
    const values = Array.from({ length: 64 }, () => Math.round(rand() * 10) - 5);
    const mask = topPercentileMask(values, 25);
    const keptMin = Math.min(...values.filter((_, i) => mask[i] === 1));
    const droppedMax = Math.max(...values.filter((_, i) => mask[i] === 0));
    expect(keptMin).toBeGreaterThanOrEqual(droppedMax);
  });
});

describe("filterClusters2d", () => {
  it("copies the mask when minSize is 1", () => {
    const mask = new Uint8Array([1, 0, 1, 1]);
    const out = filterClusters2d(mask, 2, 2, 1);
    expect(Array.from(out)).toEqual([1, 0, 1, 1]);
    expect(out).not.toBe(mask);
  });

  it("treats diagonal neighbors as connected", () => {
    // two voxels touching only at a corner form one component of size 2
    const mask = new Uint8Array([1, 0, 0, 1]);
    expect(Array.from(filterClusters2d(mask, 2, 2, 2))).toEqual([1, 0, 0, 1]);
  });

  it("drops components below the size threshold", () => {
    // 3x3: a 3-voxel corner block and an isolated voxel at the far corner
    const mask = new Uint8Array([1, 1, 0, 1, 0, 0, 0, 0, 1]);
    const out = filterClusters2d(mask, 3, 3, 2);
    expect(Array.from(out)).toEqual([1, 1, 0, 1, 0, 0, 0, 0, 0]);
    expect(Array.from(filterClusters2d(mask, 3, 3, 4))).toEqual([0, 0, 0, 0, 0, 0, 0, 0, 0]);
  });

  it("matches the reference labeling on exported masks", () => {
    for (const fx of fixture<ClusterFixture[]>("clusters.json")) {
      const [w, h] = fx.dims;
      const out = filterClusters2d(Uint8Array.from(fx.mask), w, h, fx.min_size);
      expect(Array.from(out)).toEqual(fx.survivors);
    }
  });

  it("rejects a mask that does not match its dims", () => {
    expect(() => filterClusters2d(new Uint8Array(5), 2, 2, 1)).toThrow(RangeError);
  });
});

describe("bestSlice", () => {
  it("finds a one-hot peak", () => {
    const values = new Array(12).fill(0);
    values[7] = 3.5;
    expect(bestSlice(values)).toBe(7);
  });

  it("returns the first index on a uniform histogram", () => {
    expect(bestSlice([2, 2, 2, 2])).toBe(0);
  });

  it("returns the first of several equal peaks", () => {
    expect(bestSlice([1, 5, 2, 5])).toBe(1);
  });

  it("handles empty input", () => {
    expect(bestSlice([])).toBe(0);
  });
});
