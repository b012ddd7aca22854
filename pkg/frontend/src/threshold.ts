/** Slice-level map post-processing.
 *
 * The percentile rule must agree bit for bit with the engine that produced
 * the maps: ties at the cutoff are broken by served order (earlier wins),
 * and the kept count is ceil(n * p / 100) with p quantized to 1e-6 percent
 * so both sides evaluate the same integer expression.
 */

/** Round half to even, matching the engine's quantization of p. */
function roundTiesToEven(x: number): number {
  const f = Math.floor(x);
  const r = x - f;
  if (r > 0.5) return f + 1;
  if (r < 0.5) return f;
  return f % 2 === 0 ? f : f + 1;
}

/** How many of n values the top p percent keeps. Throws RangeError outside (0, 100]. */
export function topPercentileCount(n: number, p: number): number {
  if (!(p > 0 && p <= 100)) {
    throw new RangeError(`percentile must be in (0, 100], got ${p}`);
  }
  const q = BigInt(Math.max(1, roundTiesToEven(p * 1e6)));
  const prod = BigInt(n) * q;
  const denom = 100000000n;
  const k = prod / denom + (prod % denom > 0n ? 1n : 0n);
  return Math.min(Number(k), n);
}

/**
 * Keep mask for the k = ceil(p% of n) largest values, ties broken by
 * position (earlier index wins). Input order must be the served order.
 */
export function topPercentileMask(values: ArrayLike<number>, p: number): Uint8Array {
  const n = values.length;
  const mask = new Uint8Array(n);
  if (n === 0) return mask;
  const k = topPercentileCount(n, p);
  const order = new Array<number>(n);
  for (let i = 0; i < n; i++) order[i] = i;
  order.sort((a, b) => {
    const va = values[a] as number;
    const vb = values[b] as number;
    if (va !== vb) return vb - va;
    return a - b;
  });
  for (let i = 0; i < k; i++) mask[order[i] as number] = 1;
  return mask;
}

/**
 * Drop 8-connected components smaller than minSize from a w-by-h mask
 * stored with the first axis fastest (index = x + w * y). Returns a new
 * mask; minSize <= 1 copies the input.
 */
export function filterClusters2d(mask: Uint8Array, w: number, h: number, minSize: number): Uint8Array {
  if (mask.length !== w * h) {
    throw new RangeError(`mask length ${mask.length} does not match ${w}x${h}`);
  }
  const out = new Uint8Array(mask);
  if (minSize <= 1) return out;
  const labels = new Int32Array(w * h);
  const stack: number[] = [];
  let next = 0;
  const sizes: number[] = [];
  for (let start = 0; start < mask.length; start++) {
    if (!mask[start] || labels[start]) continue;
    next += 1;
    let size = 0;
    stack.push(start);
    labels[start] = next;
    while (stack.length > 0) {
      const idx = stack.pop() as number;
      size += 1;
      const x = idx % w;
      const y = (idx / w) | 0;
      for (let dy = -1; dy <= 1; dy++) {
        for (let dx = -1; dx <= 1; dx++) {
          if (dx === 0 && dy === 0) continue;
          const nx = x + dx;
          const ny = y + dy;
          if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
          const nidx = nx + w * ny;
          if (mask[nidx] && !labels[nidx]) {
            labels[nidx] = next;
            stack.push(nidx);
          }
        }
      }
    }
    sizes.push(size);
  }
  for (let i = 0; i < out.length; i++) {
    if (out[i] && (sizes[(labels[i] as number) - 1] as number) < minSize) out[i] = 0;
  }
  return out;
}

/** Index of the largest value; first index wins ties. Empty input gives 0. */
export function bestSlice(values: ArrayLike<number>): number {
  let best = 0;
  let bestValue = -Infinity;
  for (let i = 0; i < values.length; i++) {
    const v = values[i] as number;
    if (v > bestValue) {
      bestValue = v;
      best = i;
    }
  }
  return best;
}
