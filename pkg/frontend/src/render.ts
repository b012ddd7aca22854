/** Pure slice compositing: base plane plus thresholded relevance overlay.
 *
 * Everything here is DOM-free; the app shell copies the returned RGBA
 * buffer into a canvas. Keeping composition pure lets the test suite
 * assert on exact pixels without a browser.
 */

import { blend, grayLevel, overlayColor } from "./colormap.js";
import { filterClusters2d, topPercentileMask } from "./threshold.js";

export interface Plane {
  /** [w, h]; values listed with the first axis fastest (index = x + w*y). */
  dims: [number, number];
  values: number[];
  /** Range of the whole volume the plane was cut from, not of the plane. */
  min: number;
  max: number;
}

export interface OverlaySettings {
  percentile: number;
  opacity: number;
  minCluster: number;
  showNegative: boolean;
}

export interface Frame {
  width: number;
  height: number;
  rgba: Uint8ClampedArray<ArrayBuffer>;
  /** Voxels actually painted by the overlay, for tests and the status line. */
  overlayCount: number;
}

/**
 * Overlay draw mask: top-percentile keep set, optionally restricted to
 * positive values, then 2D 8-connected components under minCluster dropped.
 */
export function overlayMask(rel: Plane, settings: OverlaySettings): Uint8Array {
  const [w, h] = rel.dims;
  const mask = topPercentileMask(rel.values, settings.percentile);
  if (!settings.showNegative) {
    for (let i = 0; i < mask.length; i++) {
      if (mask[i] && (rel.values[i] as number) <= 0) mask[i] = 0;
    }
  }
  return filterClusters2d(mask, w, h, settings.minCluster);
}

export function renderSlice(base: Plane, rel: Plane | null, settings: OverlaySettings): Frame {
  const [w, h] = base.dims;
  const rgba = new Uint8ClampedArray(w * h * 4);
  for (let i = 0; i < w * h; i++) {
    const g = grayLevel(base.values[i] as number, base.min, base.max);
    rgba[4 * i] = g;
    rgba[4 * i + 1] = g;
    rgba[4 * i + 2] = g;
    rgba[4 * i + 3] = 255;
  }
  let overlayCount = 0;
  if (rel !== null && settings.opacity > 0) {
    if (rel.dims[0] !== w || rel.dims[1] !== h) {
      throw new RangeError(`overlay dims ${rel.dims} do not match base dims ${base.dims}`);
    }
    const mask = overlayMask(rel, settings);
    const scale = Math.max(Math.abs(rel.min), Math.abs(rel.max));
    for (let i = 0; i < w * h; i++) {
      if (!mask[i]) continue;
      const g = rgba[4 * i] as number;
      const [r, gg, b] = blend(g, overlayColor(rel.values[i] as number, scale), settings.opacity);
      rgba[4 * i] = r;
      rgba[4 * i + 1] = gg;
      rgba[4 * i + 2] = b;
      overlayCount += 1;
    }
  }
  return { width: w, height: h, rgba, overlayCount };
}
