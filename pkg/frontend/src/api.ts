import type { BatchResponse, Decision, DecisionAck, Progress } from './types.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`);
    if (!resp.ok) throw new ApiError(`GET ${path} -> ${resp.status}`, resp.status);
    return (await resp.json()) as T;
  }

  getBatch(annotatorId: string, size: number): Promise<BatchResponse> {
    const params = new URLSearchParams({ annotator_id: annotatorId, size: String(size) });
    return this.getJson<BatchResponse>(`/batch?${params}`);
  }

  getProgress(): Promise<Progress> {
    return this.getJson<Progress>('/progress');
  }

  async postDecision(decision: Decision): Promise<DecisionAck> {
    const resp = await this.fetchFn(`${this.baseUrl}/decision`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(decision),
    });
    if (!resp.ok) throw new ApiError(`POST /decision -> ${resp.status}`, resp.status);
    return (await resp.json()) as DecisionAck;
  }
}
