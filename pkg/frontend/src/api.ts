import type { InferRequest, InferResponse, JobStatus, ModelInfo } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public body: unknown) {
    super(`service error ${status}`);
  }
}

async function post<T>(base: string, path: string, payload: unknown): Promise<T> {
  const resp = await fetch(base + path, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(payload),
  });
  const body = await resp.json();
  if (!resp.ok) throw new ApiError(resp.status, body);
  return body as T;
}

async function get<T>(base: string, path: string): Promise<T> {
  const resp = await fetch(base + path);
  const body = await resp.json();
  if (!resp.ok) throw new ApiError(resp.status, body);
  return body as T;
}

export class PlaygroundClient {
  constructor(public base = "") {}

  infer(request: InferRequest): Promise<InferResponse> {
    return post<InferResponse>(this.base, "/infer", request);
  }

  modelInfo(): Promise<ModelInfo> {
    return get<ModelInfo>(this.base, "/model");
  }

  launchPromptTune(payload: {
    dataset: string;
    shots?: number;
    steps?: number;
    seed?: number;
  }): Promise<{ job_id: string; status: string }> {
    return post(this.base, "/prompt-tune", payload);
  }

  jobStatus(jobId: string): Promise<JobStatus> {
    return get<JobStatus>(this.base, `/jobs/${jobId}`);
  }

  async pollJob(jobId: string, intervalMs = 500, timeoutMs = 120_000): Promise<JobStatus> {
    const start = Date.now();
    for (;;) {
      const status = await this.jobStatus(jobId);
      if (status.status === "done" || status.status === "error") return status;
      if (Date.now() - start > timeoutMs) throw new Error(`job ${jobId} timed out`);
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }
}
