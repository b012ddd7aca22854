/** Orchestration between state, cache, transport, and the canvas.
 *
 * Rules the tests hold this to:
 *   - a control event causes at most one re-render and synchronously
 *     issues at most one network request; anything else it needs is
 *     chained off response arrivals, one request in flight at a time
 *   - responses for superseded states are cached but never painted
 *     (every paint re-derives its cache keys from the current state)
 *   - fetch failures raise a banner and leave the last frame on screen
 *   - slices are cached by (subject, model, axis, index, kind),
 *     histograms by (subject, model, axis); the server is immutable so
 *     cache entries never expire
 *   - a subject switch moves the slice index to the served best-slice
 *     hint as soon as the histogram is available
 */

import type { ApiClient, HistogramPayload, SlicePayload } from "./api.js";
import { renderSlice, type Frame, type Plane } from "./render.js";
import {
  applyEvent,
  axisExtent,
  encodeFragment,
  type ViewerEnv,
  type ViewerEvent,
  type ViewerState,
} from "./state.js";

interface SliceNeed {
  type: "slice";
  key: string;
  subject: string;
  axis: ViewerState["axis"];
  index: number;
  kind: "gray" | "residual" | "relevance";
  model?: string;
}

interface HistNeed {
  type: "hist";
  key: string;
  subject: string;
  model: string;
  axis: ViewerState["axis"];
}

type Need = SliceNeed | HistNeed;

export interface HistView {
  values: number[];
  bestSlice: number;
}

export interface ViewOutput {
  state: ViewerState;
  /** null means "nothing new to paint, keep the current canvas". */
  frame: Frame | null;
  hist: HistView | null;
  loading: boolean;
}

export interface ControllerSinks {
  render: (view: ViewOutput) => void;
  banner: (message: string | null) => void;
  fragment?: (fragment: string) => void;
}

function sliceKey(subject: string, model: string, axis: string, index: number, kind: string): string {
  return `${subject}|${model}|${axis}|${index}|${kind}`;
}

function histKey(subject: string, model: string, axis: string): string {
  return `${subject}|${model}|${axis}`;
}

function toPlane(payload: SlicePayload): Plane {
  return { dims: payload.dims, values: payload.values, min: payload.min, max: payload.max };
}

export class ViewerController {
  state: ViewerState;

  private readonly api: ApiClient;
  private readonly env: ViewerEnv;
  private readonly sinks: ControllerSinks;
  private readonly slices = new Map<string, SlicePayload>();
  private readonly hists = new Map<string, HistogramPayload>();
  private readonly failed = new Set<string>();
  private inflight: string | null = null;
  private version = 0;
  private pendingHint = false;

  constructor(api: ApiClient, env: ViewerEnv, initial: ViewerState, sinks: ControllerSinks) {
    this.api = api;
    this.env = env;
    this.state = initial;
    this.sinks = sinks;
  }

  /** Paint whatever is cached and start fetching what is not. */
  start(): void {
    this.version += 1;
    this.render();
    this.pump();
  }

  dispatch(event: ViewerEvent): void {
    const prev = this.state;
    this.state = applyEvent(prev, event, this.env);
    if (this.state.subject !== prev.subject) {
      this.applyHintOrDefer();
    }
    if (event.kind === "index") {
      this.pendingHint = false; // an explicit slice choice overrides the hint
    }
    this.version += 1;
    this.failed.clear(); // user activity is the retry trigger
    this.sinks.banner(null);
    this.publishFragment();
    this.render();
    this.pump();
  }

  /** Replace the whole state, e.g. from a URL fragment. */
  replaceState(state: ViewerState): void {
    this.state = state;
    this.pendingHint = false;
    this.version += 1;
    this.failed.clear();
    this.sinks.banner(null);
    this.render();
    this.pump();
  }

  private applyHintOrDefer(): void {
    if (this.state.model === "") {
      this.pendingHint = false; // no maps, nothing to hint from
      return;
    }
    const cached = this.hists.get(histKey(this.state.subject, this.state.model, this.state.axis));
    if (cached !== undefined) {
      this.state = applyEvent(this.state, { kind: "index", index: cached.best_slice }, this.env);
      this.pendingHint = false;
    } else {
      this.pendingHint = true;
    }
  }

  private needs(): Need[] {
    const s = this.state;
    const hist: HistNeed = {
      type: "hist",
      key: histKey(s.subject, s.model, s.axis),
      subject: s.subject,
      model: s.model,
      axis: s.axis,
    };
    if (this.pendingHint) return [hist]; // the hint decides the index; slices would be wasted
    const out: Need[] = [
      {
        type: "slice",
        key: sliceKey(s.subject, "", s.axis, s.index, s.base),
        subject: s.subject,
        axis: s.axis,
        index: s.index,
        kind: s.base,
      },
    ];
    if (s.model !== "") {
      out.push({
        type: "slice",
        key: sliceKey(s.subject, s.model, s.axis, s.index, "relevance"),
        subject: s.subject,
        axis: s.axis,
        index: s.index,
        kind: "relevance",
        model: s.model,
      });
      if (s.showHistogram) out.push(hist);
    }
    return out;
  }

  private cached(need: Need): boolean {
    return need.type === "slice" ? this.slices.has(need.key) : this.hists.has(need.key);
  }

  private pump(): void {
    if (this.inflight !== null) return;
    const next = this.needs().find((n) => !this.cached(n) && !this.failed.has(n.key));
    if (next === undefined) return;
    this.inflight = next.key;
    const version = this.version;
    const finish = (store: () => void) => {
      this.inflight = null;
      store();
      let hintApplied = false;
      if (this.pendingHint) {
        const hinted = this.hists.get(histKey(this.state.subject, this.state.model, this.state.axis));
        if (hinted !== undefined) {
          this.state = applyEvent(this.state, { kind: "index", index: hinted.best_slice }, this.env);
          this.pendingHint = false;
          this.version += 1;
          hintApplied = true;
          this.publishFragment();
        }
      }
      if (version === this.version || hintApplied) this.render();
      this.pump();
    };
    const fail = (err: unknown) => {
      this.inflight = null;
      if (version !== this.version) {
        this.pump(); // a superseded request; its failure is not worth a banner
        return;
      }
      this.failed.add(next.key);
      this.sinks.banner(err instanceof Error ? err.message : String(err));
      this.render();
      this.pump();
    };
    if (next.type === "slice") {
      this.api
        .slice({
          subject: next.subject,
          axis: next.axis,
          index: next.index,
          kind: next.kind,
          ...(next.model !== undefined ? { model: next.model } : {}),
        })
        .then((payload) => finish(() => this.slices.set(next.key, payload)), fail);
    } else {
      this.api
        .histogram({ subject: next.subject, model: next.model, axis: next.axis })
        .then((payload) => finish(() => this.hists.set(next.key, payload)), fail);
    }
  }

  private render(): void {
    const s = this.state;
    const base = this.slices.get(sliceKey(s.subject, "", s.axis, s.index, s.base));
    const rel = this.slices.get(sliceKey(s.subject, s.model, s.axis, s.index, "relevance"));
    const hist = this.hists.get(histKey(s.subject, s.model, s.axis));
    let frame: Frame | null = null;
    if (base !== undefined && !this.pendingHint) {
      frame = renderSlice(toPlane(base), rel !== undefined ? toPlane(rel) : null, {
        percentile: s.percentile,
        opacity: s.opacity,
        minCluster: s.minCluster,
        showNegative: s.showNegative,
      });
    }
    const missing = this.needs().some((n) => !this.cached(n) && !this.failed.has(n.key));
    this.sinks.render({
      state: s,
      frame,
      hist:
        s.showHistogram && hist !== undefined
          ? { values: hist.values, bestSlice: hist.best_slice }
          : null,
      loading: missing,
    });
  }

  private publishFragment(): void {
    this.sinks.fragment?.(encodeFragment(this.state));
  }

  /** Exposed for the slice slider's range. */
  extent(): number {
    return axisExtent(this.env.dims, this.state.axis);
  }
}
