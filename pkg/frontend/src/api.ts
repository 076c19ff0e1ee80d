/** Typed client for the gcgan inference service.
 *
 * Every request is appended to `requestLog` in a canonical form so a
 * recorded editing session can be replayed and verified byte-for-byte.
 */

export interface RenderPayload {
  latent_id: string;
  model_id: string;
  gaze: [number, number];
  image: string; // base64 PNG
  mask?: string;
  mask_classes?: string[];
  parent_latent_id?: string;
  mask_mse_vs_home?: number;
}

export interface ModelInfo {
  id: string;
  stage: string;
  resolution: number;
  components: string[];
  gaze_range: [number[], number[]];
}

export interface JobStatus {
  job_id: string;
  status: "queued" | "running" | "done" | "failed";
  result?: { latent_id: string; report: Record<string, unknown>; gaze: [number, number] };
  error?: string;
}

export interface RequestLogEntry {
  method: string;
  path: string;
  body: unknown;
}

export class ServiceError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceClient {
  readonly requestLog: RequestLogEntry[] = [];

  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = fetch,
    private token?: string,
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    this.requestLog.push({ method, path, body: body ?? null });
    const headers: Record<string, string> = { "content-type": "application/json" };
    if (this.token) headers["x-api-token"] = this.token;
    const resp = await this.fetchImpl(this.baseUrl + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = await resp.json();
    if (!resp.ok) {
      const err = (payload as { error?: { code?: string; message?: string } }).error ?? {};
      throw new ServiceError(resp.status, err.code ?? "unknown", err.message ?? "request failed");
    }
    return payload as T;
  }

  health(): Promise<{ status: string; version: string }> {
    return this.request("GET", "/health");
  }

  models(): Promise<ModelInfo[]> {
    return this.request("GET", "/models");
  }

  generate(req: {
    model_id: string;
    gaze: [number, number];
    seed?: number;
    latent_id?: string;
    return_mask?: boolean;
  }): Promise<RenderPayload> {
    return this.request("POST", "/generate", req);
  }

  redirect(req: {
    latent_id: string;
    gaze: [number, number];
    return_mask?: boolean;
    model_id?: string;
  }): Promise<RenderPayload> {
    return this.request("POST", "/redirect", req);
  }

  edit(req: {
    latent_id: string;
    component: string;
    action?: "resample" | "set";
    seed?: number;
    values?: number[];
    part?: "both" | "shape" | "texture";
    force?: boolean;
    return_mask?: boolean;
  }): Promise<RenderPayload> {
    return this.request("POST", "/edit", req);
  }

  invert(req: {
    model_id: string;
    image: string;
    gaze?: [number, number];
    config?: Record<string, unknown>;
  }): Promise<{ job_id: string; status: string }> {
    return this.request("POST", "/invert", req);
  }

  jobStatus(jobId: string): Promise<JobStatus> {
    return this.request("GET", `/jobs/${jobId}`);
  }

  /** Poll an inversion job until it settles. */
  async pollJob(
    jobId: string,
    opts: { intervalMs?: number; timeoutMs?: number; sleep?: (ms: number) => Promise<void> } = {},
  ): Promise<JobStatus> {
    const interval = opts.intervalMs ?? 500;
    const timeout = opts.timeoutMs ?? 120_000;
    const sleep = opts.sleep ?? ((ms) => new Promise((r) => setTimeout(r, ms)));
    const start = Date.now();
    for (;;) {
      const status = await this.jobStatus(jobId);
      if (status.status === "done" || status.status === "failed") return status;
      if (Date.now() - start > timeout) throw new ServiceError(408, "timeout", "job polling timed out");
      await sleep(interval);
    }
  }
}

/** Drops responses that arrive after a newer request was issued
 * (rapid gaze-pad drags must render latest-wins). */
export class LatestWins<T> {
  private seq = 0;

  async run(task: () => Promise<T>): Promise<T | null> {
    const ticket = ++this.seq;
    const result = await task();
    return ticket === this.seq ? result : null;
  }
}
