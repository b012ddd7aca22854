import { describe, expect, it } from "vitest";

import { ApiClient, ApiError, histogramUrl, sliceUrl, type Transport } from "../src/api.js";

describe("url construction", () => {
  it("builds slice urls with kind, model, and cluster variant", () => {
    expect(sliceUrl({ subject: "s0001", axis: "coronal", index: 7, kind: "gray" })).toBe(
      "/subjects/s0001/slice/coronal/7?kind=gray",
    );
    expect(
      sliceUrl({ subject: "s0001", axis: "axial", index: 0, kind: "relevance", model: "fold3" }),
    ).toBe("/subjects/s0001/slice/axial/0?kind=relevance&model=fold3");
    expect(
      sliceUrl({
        subject: "s0001",
        axis: "sagittal",
        index: 2,
        kind: "relevance",
        model: "m",
        minCluster: 5,
      }),
    ).toBe("/subjects/s0001/slice/sagittal/2?kind=relevance&model=m&min_cluster=5");
  });

  it("escapes subject ids", () => {
    expect(sliceUrl({ subject: "a b", axis: "coronal", index: 1, kind: "gray" })).toContain(
      "/subjects/a%20b/",
    );
  });

  it("builds histogram urls", () => {
    expect(histogramUrl({ subject: "s0002", model: "fold0", axis: "coronal" })).toBe(
      "/subjects/s0002/histogram?model=fold0&axis=coronal",
    );
  });
});

function fakeTransport(status: number, body: unknown, ok = status < 400): Transport {
  return async () => ({
    ok,
    status,
    json: async () => {
      if (body instanceof Error) throw body;
      return body;
    },
  });
}

describe("ApiClient", () => {
  it("returns parsed payloads", async () => {
    const client = new ApiClient("", fakeTransport(200, { dims: [2, 2, 2], masks: [], subjects: [] }));
    const cohort = await client.subjects();
    expect(cohort.dims).toEqual([2, 2, 2]);
  });

  it("unwraps the models list", async () => {
    const client = new ApiClient("", fakeTransport(200, { models: [{ id: "m", subjects: [] }] }));
    expect(await client.models()).toEqual([{ id: "m", subjects: [] }]);
  });

  it("surfaces server error messages", async () => {
    const client = new ApiClient("", fakeTransport(404, { code: 404, message: "no such subject: x" }));
    await expect(client.subjects()).rejects.toThrowError("no such subject: x");
    await expect(client.subjects()).rejects.toBeInstanceOf(ApiError);
  });

  it("falls back to the status line on unparseable errors", async () => {
    const client = new ApiClient("", fakeTransport(500, new Error("not json")));
    await expect(client.subjects()).rejects.toThrowError("HTTP 500");
  });

  it("prefixes a base url", async () => {
    const seen: string[] = [];
    const transport: Transport = async (url) => {
      seen.push(url);
      return { ok: true, status: 200, json: async () => ({ models: [] }) };
    };
    await new ApiClient("http://localhost:8570/", transport).models();
    expect(seen).toEqual(["http://localhost:8570/models"]);
  });
});
