/** Typed client for the read-only slice server.
 *
 * The transport is injectable so tests can run against an in-memory
 * server; the default uses the global fetch. All payload shapes mirror
 * the server's JSON exactly.
 */

import type { Axis, BaseKind } from "./state.js";

export interface SubjectInfo {
  id: string;
  label: string;
  age: number;
  gender: string;
}

export interface CohortInfo {
  dims: [number, number, number];
  masks: string[];
  subjects: SubjectInfo[];
}

export interface ModelInfo {
  id: string;
  subjects: string[];
}

export type SliceKind = BaseKind | "relevance";

export interface SliceRequest {
  subject: string;
  axis: Axis;
  index: number;
  kind: SliceKind;
  model?: string;
  minCluster?: number;
}

export interface SlicePayload {
  dims: [number, number];
  values: number[];
  subject: string;
  axis: string;
  index: number;
  kind: string;
  model: string | null;
  min: number;
  max: number;
}

export interface HistogramRequest {
  subject: string;
  model: string;
  axis: Axis;
}

export interface HistogramPayload {
  subject: string;
  model: string;
  axis: string;
  values: number[];
  best_slice: number;
  min: number;
  max: number;
}

export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

export interface TransportResponse {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}

export type Transport = (url: string) => Promise<TransportResponse>;

export function sliceUrl(req: SliceRequest): string {
  const params = new URLSearchParams();
  params.set("kind", req.kind);
  if (req.model !== undefined) params.set("model", req.model);
  if (req.minCluster !== undefined) params.set("min_cluster", String(req.minCluster));
  const sid = encodeURIComponent(req.subject);
  return `/subjects/${sid}/slice/${req.axis}/${req.index}?${params.toString()}`;
}

export function histogramUrl(req: HistogramRequest): string {
  const params = new URLSearchParams();
  params.set("model", req.model);
  params.set("axis", req.axis);
  return `/subjects/${encodeURIComponent(req.subject)}/histogram?${params.toString()}`;
}

async function readError(response: TransportResponse): Promise<never> {
  let message = `HTTP ${response.status}`;
  try {
    const body = (await response.json()) as { message?: unknown };
    if (body && typeof body.message === "string") message = body.message;
  } catch {
    // non-JSON error body; keep the status line
  }
  throw new ApiError(response.status, message);
}

export class ApiClient {
  private readonly base: string;
  private readonly transport: Transport;

  constructor(base = "", transport?: Transport) {
    this.base = base.replace(/\/$/, "");
    this.transport = transport ?? ((url) => fetch(url));
  }

  private async get<T>(path: string): Promise<T> {
    const response = await this.transport(this.base + path);
    if (!response.ok) await readError(response);
    return (await response.json()) as T;
  }

  subjects(): Promise<CohortInfo> {
    return this.get<CohortInfo>("/subjects");
  }

  async models(): Promise<ModelInfo[]> {
    const doc = await this.get<{ models: ModelInfo[] }>("/models");
    return doc.models;
  }

  slice(req: SliceRequest): Promise<SlicePayload> {
    return this.get<SlicePayload>(sliceUrl(req));
  }

  histogram(req: HistogramRequest): Promise<HistogramPayload> {
    return this.get<HistogramPayload>(histogramUrl(req));
  }
}
