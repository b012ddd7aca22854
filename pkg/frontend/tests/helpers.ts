import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";

export function fixture<T>(name: string): T {
  const path = fileURLToPath(new URL(`./fixtures/${name}`, import.meta.url));
  return JSON.parse(readFileSync(path, "utf8")) as T;
}

export interface SliceFixture {
  subject: string;
  axis: string;
  index: number;
  dims: [number, number];
  values: number[];
  percentiles: Record<string, { k: number; nonzero: number[] }>;
}

export interface HistogramFixture {
  subject: string;
  axis: string;
  values: number[];
  best_slice: number;
}

export interface ClusterFixture {
  dims: [number, number];
  min_size: number;
  mask: number[];
  survivors: number[];
}

/** Small deterministic PRNG for value fuzzing (mulberry32). */
export function prng(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}
