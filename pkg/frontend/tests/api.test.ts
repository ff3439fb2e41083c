import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";
import { ApiClient, ApiError } from "../src/api.js";

function fixtureText(name: string): string {
  return readFileSync(new URL(`./fixtures/${name}`, import.meta.url), "utf8");
}

function mockFetch(routes: Record<string, string | { status: number; body: string }>) {
  const seen: string[] = [];
  const impl = async (url: string): Promise<Response> => {
    seen.push(url);
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    const route = routes[path];
    if (route === undefined) {
      return new Response(JSON.stringify({ error: `no route ${path}` }), { status: 404 });
    }
    if (typeof route === "string") {
      return new Response(route, { status: 200 });
    }
    return new Response(route.body, { status: route.status });
  };
  return { impl, seen };
}

describe("ApiClient", () => {
  it("returns server values verbatim: the console computes no physics", async () => {
    const rg = fixtureText("metrics_rg_0.json");
    const { impl, seen } = mockFetch({ "/api/traj/0/metrics?series=rg": rg });
    const api = new ApiClient("http://host", impl);
    const values = await api.metrics(0, "rg");
    // Exact pass-through of the wire payload, digit for digit.
    expect(values).toEqual(JSON.parse(rg));
    expect(seen).toEqual(["http://host/api/traj/0/metrics?series=rg"]);
  });

  it("parses manifest, states, fes, cktest and residues payloads", async () => {
    const { impl } = mockFetch({
      "/api/manifest": fixtureText("manifest.json"),
      "/api/traj/0/states": fixtureText("states_0.json"),
      "/api/fes": fixtureText("fes.json"),
      "/api/cktest?lag=1&n=1": fixtureText("cktest_lag1_n1.json"),
      "/api/residues": fixtureText("residues.json"),
    });
    const api = new ApiClient("", impl);
    expect((await api.manifest()).totals.n_trajectories).toBe(6);
    const states = await api.states(0);
    expect(states.state.length).toBe(states.chi.length);
    expect((await api.fes()).explained_variance.length).toBe(2);
    expect((await api.cktest(1, 1)).steps).toBe(1);
    expect((await api.residues()).rmsf.length).toBe(10);
  });

  it("raises ApiError carrying the status and server message", async () => {
    const { impl } = mockFetch({
      "/api/fes": { status: 409, body: JSON.stringify({ error: "artifact is stale" }) },
    });
    const api = new ApiClient("", impl);
    const failure = await api.fes().catch((e) => e);
    expect(failure).toBeInstanceOf(ApiError);
    expect(failure.status).toBe(409);
    expect(failure.staleOrBusy).toBe(true);
    expect(failure.message).toContain("stale");
  });

  it("flags 503 during exclusive recompute as refreshable", async () => {
    const { impl } = mockFetch({
      "/api/cktest?lag=1&n=2": { status: 503, body: JSON.stringify({ error: "training job in progress" }) },
    });
    const api = new ApiClient("", impl);
    const failure = await api.cktest(1, 2).catch((e) => e);
    expect(failure.status).toBe(503);
    expect(failure.staleOrBusy).toBe(true);
  });
});
