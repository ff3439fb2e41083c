/**
 * Typed client for the analysis service. Every number the console shows
 * comes through here; the console never recomputes physics locally.
 */

export interface ManifestEntry {
  path: string;
  n_frames: number;
}

export interface Manifest {
  entries: ManifestEntry[];
  totals: { n_trajectories: number; n_frames_total: number };
}

export interface TopologyInfo {
  n_residues: number;
  n_atoms: number;
  residue_names: string[];
  residue_ranges: [number, number][];
  elements: string[];
}

export interface StatesResponse {
  state: number[];
  chi: number[][];
}

export interface FesResponse {
  pc1_edges: number[];
  pc2_edges: number[];
  free_energy: (number | null)[][];
  explained_variance: number[];
}

export interface CkResponse {
  base_lag: number;
  steps: number;
  predicted: number[][];
  estimated: number[][];
  max_abs_dev: number;
}

export interface ResiduesResponse {
  rmsf: number[];
  res_sasa: number[];
  contributions: number[][] | null;
  contribution_flags: boolean[] | null;
}

export interface TrainStatus {
  stage: string;
  epoch: number;
  train_score: number | null;
  val_score: number | null;
  job_id: string | null;
  error: string | null;
}

export type MetricSeries = "rg" | "sasa";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Error carrying the HTTP status so panels can show refresh prompts. */
export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
  }

  get staleOrBusy(): boolean {
    return this.status === 409 || this.status === 503;
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request(path: string): Promise<Response> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = await response.json();
        if (body && typeof body.error === "string") detail = body.error;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(response.status, detail);
    }
    return response;
  }

  private async json<T>(path: string): Promise<T> {
    return (await this.request(path)).json() as Promise<T>;
  }

  manifest(): Promise<Manifest> {
    return this.json("/api/manifest");
  }

  topology(): Promise<TopologyInfo> {
    return this.json("/api/topology");
  }

  async frames(traj: number, start: number, count: number): Promise<ArrayBuffer> {
    const response = await this.request(
      `/api/traj/${traj}/frames?start=${start}&count=${count}`,
    );
    return response.arrayBuffer();
  }

  metrics(traj: number, series: MetricSeries): Promise<number[]> {
    return this.json(`/api/traj/${traj}/metrics?series=${series}`);
  }

  states(traj: number): Promise<StatesResponse> {
    return this.json(`/api/traj/${traj}/states`);
  }

  fes(): Promise<FesResponse> {
    return this.json("/api/fes");
  }

  cktest(lag: number, steps: number): Promise<CkResponse> {
    return this.json(`/api/cktest?lag=${lag}&n=${steps}`);
  }

  residues(): Promise<ResiduesResponse> {
    return this.json("/api/residues");
  }

  trainStatus(): Promise<TrainStatus> {
    return this.json("/api/train/status");
  }

  async startTraining(overrides: Record<string, unknown> = {}): Promise<{ job_id: string; started: boolean }> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/train`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(overrides),
    });
    if (!response.ok) throw new ApiError(response.status, response.statusText);
    return response.json();
  }
}
