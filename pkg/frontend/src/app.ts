/** DOM shell: wires controls, canvases, and the URL fragment to the
 * controller. All decision logic lives in the DOM-free modules; this file
 * only moves values between widgets and the controller.
 */

import { ApiClient } from "./api.js";
import { ViewerController, type ViewOutput } from "./controller.js";
import {
  AXES,
  BASE_KINDS,
  decodeFragment,
  encodeFragment,
  initialState,
  type ViewerEnv,
  type ViewerState,
} from "./state.js";

const SCALE_TARGET = 420; // longest canvas edge in CSS pixels

interface Widgets {
  subject: HTMLSelectElement;
  model: HTMLSelectElement;
  base: HTMLSelectElement;
  axis: HTMLSelectElement;
  index: HTMLInputElement;
  indexLabel: HTMLElement;
  percentile: HTMLInputElement;
  percentileLabel: HTMLElement;
  opacity: HTMLInputElement;
  opacityLabel: HTMLElement;
  minCluster: HTMLInputElement;
  showNegative: HTMLInputElement;
  showHistogram: HTMLInputElement;
  canvas: HTMLCanvasElement;
  histPanel: HTMLElement;
  histCanvas: HTMLCanvasElement;
  banner: HTMLElement;
  status: HTMLElement;
}

function widget<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el as T;
}

function fillSelect(select: HTMLSelectElement, options: readonly string[]): void {
  select.innerHTML = "";
  for (const value of options) {
    const opt = document.createElement("option");
    opt.value = value;
    opt.textContent = value;
    select.appendChild(opt);
  }
}

function drawFrame(canvas: HTMLCanvasElement, view: ViewOutput): void {
  if (view.frame === null) return; // keep the last painted slice
  const { width, height, rgba } = view.frame;
  const off = document.createElement("canvas");
  off.width = width;
  off.height = height;
  const offCtx = off.getContext("2d");
  if (offCtx === null) return;
  offCtx.putImageData(new ImageData(rgba, width, height), 0, 0);
  const scale = Math.max(1, Math.floor(SCALE_TARGET / Math.max(width, height)));
  canvas.width = width * scale;
  canvas.height = height * scale;
  const ctx = canvas.getContext("2d");
  if (ctx === null) return;
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, width, height, 0, 0, canvas.width, canvas.height);
}

function drawHistogram(
  canvas: HTMLCanvasElement,
  values: number[],
  bestSlice: number,
  current: number,
): void {
  const ctx = canvas.getContext("2d");
  if (ctx === null) return;
  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#202020";
  ctx.fillRect(0, 0, w, h);
  if (values.length === 0) return;
  const peak = Math.max(...values.map((v) => Math.abs(v)), 1e-12);
  const bar = w / values.length;
  for (let i = 0; i < values.length; i++) {
    const v = values[i] as number;
    const frac = Math.abs(v) / peak;
    ctx.fillStyle = v >= 0 ? "#e0a030" : "#3070c0";
    ctx.fillRect(i * bar, h * (1 - frac), Math.max(1, bar - 1), h * frac);
  }
  ctx.fillStyle = "#40d040";
  ctx.fillRect(bestSlice * bar, 0, Math.max(2, bar * 0.25), h);
  ctx.strokeStyle = "#ffffff";
  ctx.strokeRect(current * bar, 0, Math.max(1, bar), h);
}

function syncWidgets(ui: Widgets, state: ViewerState, extent: number): void {
  ui.subject.value = state.subject;
  ui.model.value = state.model;
  ui.base.value = state.base;
  ui.axis.value = state.axis;
  ui.index.max = String(Math.max(0, extent - 1));
  ui.index.value = String(state.index);
  ui.indexLabel.textContent = `${state.index}`;
  ui.percentile.value = String(state.percentile);
  ui.percentileLabel.textContent = `${state.percentile}%`;
  ui.opacity.value = String(state.opacity);
  ui.opacityLabel.textContent = state.opacity.toFixed(2);
  ui.minCluster.value = String(state.minCluster);
  ui.showNegative.checked = state.showNegative;
  ui.showHistogram.checked = state.showHistogram;
  ui.histPanel.style.display = state.showHistogram ? "" : "none";
}

export async function startApp(): Promise<void> {
  const ui: Widgets = {
    subject: widget("subject"),
    model: widget("model"),
    base: widget("base"),
    axis: widget("axis"),
    index: widget("index"),
    indexLabel: widget("index-label"),
    percentile: widget("percentile"),
    percentileLabel: widget("percentile-label"),
    opacity: widget("opacity"),
    opacityLabel: widget("opacity-label"),
    minCluster: widget("min-cluster"),
    showNegative: widget("show-negative"),
    showHistogram: widget("show-histogram"),
    canvas: widget("slice-canvas"),
    histPanel: widget("hist-panel"),
    histCanvas: widget("hist-canvas"),
    banner: widget("banner"),
    status: widget("status"),
  };

  const blank = ui.canvas.getContext("2d");
  if (blank !== null) {
    blank.fillStyle = "#303030";
    blank.fillRect(0, 0, ui.canvas.width, ui.canvas.height);
  }

  const api = new ApiClient("");
  let env: ViewerEnv;
  try {
    const [cohort, models] = [await api.subjects(), await api.models()];
    env = {
      dims: cohort.dims,
      subjects: cohort.subjects.map((s) => s.id),
      models: models.map((m) => m.id),
    };
  } catch (err) {
    ui.banner.textContent = `failed to reach the slice server: ${err instanceof Error ? err.message : err}`;
    ui.banner.style.display = "";
    return;
  }

  fillSelect(ui.subject, env.subjects);
  fillSelect(ui.model, env.models);
  fillSelect(ui.base, BASE_KINDS);
  fillSelect(ui.axis, AXES);

  const fromHash = window.location.hash.length > 1;
  const first = fromHash ? decodeFragment(window.location.hash, env) : initialState(env);

  let lastFragment = "";
  const controller = new ViewerController(api, env, first, {
    render: (view) => {
      drawFrame(ui.canvas, view);
      if (view.hist !== null) {
        drawHistogram(ui.histCanvas, view.hist.values, view.hist.bestSlice, view.state.index);
      }
      syncWidgets(ui, view.state, controller.extent());
      const overlay =
        view.frame !== null ? `${view.frame.overlayCount} overlay voxels` : "waiting for data";
      ui.status.textContent = view.loading ? `${overlay} (loading)` : overlay;
    },
    banner: (message) => {
      ui.banner.textContent = message ?? "";
      ui.banner.style.display = message === null ? "none" : "";
    },
    fragment: (fragment) => {
      lastFragment = fragment;
      window.history.replaceState(null, "", `#${fragment}`);
    },
  });

  ui.subject.addEventListener("change", () =>
    controller.dispatch({ kind: "subject", subject: ui.subject.value }),
  );
  ui.model.addEventListener("change", () =>
    controller.dispatch({ kind: "model", model: ui.model.value }),
  );
  ui.base.addEventListener("change", () => controller.dispatch({ kind: "base", base: ui.base.value }));
  ui.axis.addEventListener("change", () => controller.dispatch({ kind: "axis", axis: ui.axis.value }));
  ui.index.addEventListener("input", () =>
    controller.dispatch({ kind: "index", index: Number(ui.index.value) }),
  );
  ui.percentile.addEventListener("input", () =>
    controller.dispatch({ kind: "percentile", percentile: Number(ui.percentile.value) }),
  );
  ui.opacity.addEventListener("input", () =>
    controller.dispatch({ kind: "opacity", opacity: Number(ui.opacity.value) }),
  );
  ui.minCluster.addEventListener("change", () =>
    controller.dispatch({ kind: "minCluster", minCluster: Number(ui.minCluster.value) }),
  );
  ui.showNegative.addEventListener("change", () =>
    controller.dispatch({ kind: "showNegative", on: ui.showNegative.checked }),
  );
  ui.showHistogram.addEventListener("change", () =>
    controller.dispatch({ kind: "showHistogram", on: ui.showHistogram.checked }),
  );
  ui.histCanvas.addEventListener("click", (ev) => {
    const rect = ui.histCanvas.getBoundingClientRect();
    const frac = (ev.clientX - rect.left) / rect.width;
    controller.dispatch({ kind: "index", index: Math.floor(frac * controller.extent()) });
  });

  window.addEventListener("hashchange", () => {
    const fragment = window.location.hash.replace(/^#/, "");
    if (fragment === lastFragment) return; // our own update
    controller.replaceState(decodeFragment(fragment, env));
  });

  controller.start();
  if (fromHash) {
    window.history.replaceState(null, "", `#${encodeFragment(first)}`);
  }
}
