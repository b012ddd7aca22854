/** Viewer state and its pure transitions.
 *
 * Every control event maps old state to new state with out-of-range values
 * clamped, never thrown. The full state round-trips through the URL
 * fragment so any view is deep-linkable.
 */

export const AXES = ["sagittal", "coronal", "axial"] as const;
export type Axis = (typeof AXES)[number];

export const BASE_KINDS = ["gray", "residual"] as const;
export type BaseKind = (typeof BASE_KINDS)[number];

export interface ViewerState {
  subject: string;
  model: string;
  base: BaseKind;
  axis: Axis;
  index: number;
  /** Top-percentile threshold, in (0, 100]. */
  percentile: number;
  /** Overlay opacity in [0, 1]. */
  opacity: number;
  /** Smallest 2D 8-connected overlay component kept, >= 1. */
  minCluster: number;
  showNegative: boolean;
  showHistogram: boolean;
}

/** Per-axis slice counts, [nx, ny, nz]. */
export type Dims = [number, number, number];

export interface ViewerEnv {
  dims: Dims;
  subjects: string[];
  models: string[];
}

export const DEFAULTS = {
  axis: "coronal" as Axis,
  base: "gray" as BaseKind,
  percentile: 10,
  opacity: 0.5,
  minCluster: 1,
  showNegative: false,
  showHistogram: true,
};

export function axisIndex(axis: Axis): 0 | 1 | 2 {
  return AXES.indexOf(axis) as 0 | 1 | 2;
}

export function axisExtent(dims: Dims, axis: Axis): number {
  return dims[axisIndex(axis)];
}

/** Extents of a served plane: remaining axes in order, first one fastest. */
export function planeDims(dims: Dims, axis: Axis): [number, number] {
  const rest = [0, 1, 2].filter((a) => a !== axisIndex(axis));
  return [dims[rest[0] as 0 | 1 | 2], dims[rest[1] as 0 | 1 | 2]];
}

function clamp(value: number, lo: number, hi: number): number {
  if (Number.isNaN(value)) return lo;
  return Math.min(hi, Math.max(lo, value));
}

function clampIndex(index: number, extent: number): number {
  return clamp(Math.round(index), 0, Math.max(0, extent - 1));
}

function pick(value: string, allowed: readonly string[], fallback: string): string {
  return allowed.includes(value) ? value : fallback;
}

export function initialState(env: ViewerEnv): ViewerState {
  const subject = env.subjects[0] ?? "";
  const model = env.models[0] ?? "";
  const extent = axisExtent(env.dims, DEFAULTS.axis);
  return {
    subject,
    model,
    base: DEFAULTS.base,
    axis: DEFAULTS.axis,
    index: clampIndex(Math.floor(extent / 2), extent),
    percentile: DEFAULTS.percentile,
    opacity: DEFAULTS.opacity,
    minCluster: DEFAULTS.minCluster,
    showNegative: DEFAULTS.showNegative,
    showHistogram: DEFAULTS.showHistogram,
  };
}

export type ViewerEvent =
  | { kind: "subject"; subject: string }
  | { kind: "model"; model: string }
  | { kind: "base"; base: string }
  | { kind: "axis"; axis: string }
  | { kind: "index"; index: number }
  | { kind: "percentile"; percentile: number }
  | { kind: "opacity"; opacity: number }
  | { kind: "minCluster"; minCluster: number }
  | { kind: "showNegative"; on: boolean }
  | { kind: "showHistogram"; on: boolean };

/**
 * Apply one control event. Unknown subjects/models/axes are ignored,
 * numeric values are clamped into range. The caller is responsible for
 * moving `index` to the best-slice hint after a subject or model switch;
 * the transition itself only keeps the index in range.
 */
export function applyEvent(state: ViewerState, event: ViewerEvent, env: ViewerEnv): ViewerState {
  switch (event.kind) {
    case "subject":
      return { ...state, subject: pick(event.subject, env.subjects, state.subject) };
    case "model":
      return { ...state, model: pick(event.model, env.models, state.model) };
    case "base":
      return { ...state, base: pick(event.base, BASE_KINDS, state.base) as BaseKind };
    case "axis": {
      const axis = pick(event.axis, AXES, state.axis) as Axis;
      return { ...state, axis, index: clampIndex(state.index, axisExtent(env.dims, axis)) };
    }
    case "index":
      return { ...state, index: clampIndex(event.index, axisExtent(env.dims, state.axis)) };
    case "percentile": {
      const p = clamp(event.percentile, 0, 100);
      return { ...state, percentile: p > 0 ? p : state.percentile };
    }
    case "opacity":
      return { ...state, opacity: clamp(event.opacity, 0, 1) };
    case "minCluster":
      return { ...state, minCluster: Math.max(1, Math.round(event.minCluster)) };
    case "showNegative":
      return { ...state, showNegative: event.on };
    case "showHistogram":
      return { ...state, showHistogram: event.on };
  }
}

const FRAGMENT_ORDER: (keyof ViewerState)[] = [
  "subject", "model", "base", "axis", "index",
  "percentile", "opacity", "minCluster", "showNegative", "showHistogram",
];

/** Serialize the full state into a canonical URL fragment (no leading #). */
export function encodeFragment(state: ViewerState): string {
  const parts: string[] = [];
  for (const key of FRAGMENT_ORDER) {
    const value = state[key];
    const text = typeof value === "boolean" ? (value ? "1" : "0") : String(value);
    parts.push(`${key}=${encodeURIComponent(text)}`);
  }
  return parts.join("&");
}

/**
 * Rebuild state from a URL fragment. Missing or malformed entries fall
 * back to the initial state; everything is clamped against env.
 */
export function decodeFragment(fragment: string, env: ViewerEnv): ViewerState {
  const state = initialState(env);
  const fields = new Map<string, string>();
  for (const part of fragment.replace(/^#/, "").split("&")) {
    const eq = part.indexOf("=");
    if (eq <= 0) continue;
    fields.set(part.slice(0, eq), decodeURIComponent(part.slice(eq + 1)));
  }
  const text = (key: string): string | undefined => fields.get(key);
  const num = (key: string): number | undefined => {
    const raw = fields.get(key);
    if (raw === undefined) return undefined;
    const value = Number(raw);
    return Number.isFinite(value) ? value : undefined;
  };
  const flag = (key: string): boolean | undefined => {
    const raw = fields.get(key);
    if (raw === undefined) return undefined;
    return raw !== "0" && raw !== "false";
  };

  let out = state;
  const subject = text("subject");
  if (subject !== undefined) out = applyEvent(out, { kind: "subject", subject }, env);
  const model = text("model");
  if (model !== undefined) out = applyEvent(out, { kind: "model", model }, env);
  const base = text("base");
  if (base !== undefined) out = applyEvent(out, { kind: "base", base }, env);
  const axis = text("axis");
  if (axis !== undefined) out = applyEvent(out, { kind: "axis", axis }, env);
  const index = num("index");
  if (index !== undefined) out = applyEvent(out, { kind: "index", index }, env);
  const percentile = num("percentile");
  if (percentile !== undefined) out = applyEvent(out, { kind: "percentile", percentile }, env);
  const opacity = num("opacity");
  if (opacity !== undefined) out = applyEvent(out, { kind: "opacity", opacity }, env);
  const minCluster = num("minCluster");
  if (minCluster !== undefined) out = applyEvent(out, { kind: "minCluster", minCluster }, env);
  const showNegative = flag("showNegative");
  if (showNegative !== undefined) out = applyEvent(out, { kind: "showNegative", on: showNegative }, env);
  const showHistogram = flag("showHistogram");
  if (showHistogram !== undefined) out = applyEvent(out, { kind: "showHistogram", on: showHistogram }, env);
  return out;
}
