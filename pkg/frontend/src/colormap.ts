/** Color mapping for the base image and the relevance overlay. */

export type Rgb = [number, number, number];

/** Grayscale level for a base voxel given the volume-wide range. */
export function grayLevel(value: number, min: number, max: number): number {
  if (!(max > min)) return 128;
  const t = (value - min) / (max - min);
  return Math.round(255 * Math.min(1, Math.max(0, t)));
}

/**
 * Diverging overlay color: positive relevance runs dark red to yellow,
 * negative runs dark blue to cyan. t is |value| / scale clamped to [0, 1].
 */
export function overlayColor(value: number, scale: number): Rgb {
  const t = scale > 0 ? Math.min(1, Math.abs(value) / scale) : 0;
  const ramp = Math.round(255 * t);
  if (value >= 0) return [255, ramp, 0];
  return [0, ramp, 255];
}

/** Blend an overlay color onto a gray base with the given opacity. */
export function blend(gray: number, color: Rgb, opacity: number): Rgb {
  const a = Math.min(1, Math.max(0, opacity));
  return [
    Math.round((1 - a) * gray + a * color[0]),
    Math.round((1 - a) * gray + a * color[1]),
    Math.round((1 - a) * gray + a * color[2]),
  ];
}
