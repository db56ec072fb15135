// Typed client for the refine service. Every call the UI makes goes through
// here and is appended to the request log, so a session can be replayed
// verbatim against the server.

export interface SampleMeta {
  id: string;
  concept: string;
  modality: string;
  attribute: string;
  prevalence_group: string;
}

export interface SampleImage {
  w: number;
  h: number;
  gray_b64: string;
}

export interface Point {
  x: number;
  y: number;
  polarity: 'positive' | 'negative';
}

export interface PredictionResponse {
  session_id: string;
  mask_b64: string;
  u_vl: number;
  fg_pixels: number;
  w: number;
  h: number;
  points: Point[];
}

export interface LoggedRequest {
  method: 'GET' | 'POST';
  path: string;
  body: unknown | null;
}

export class ApiError extends Error {
  constructor(public status: number, public payload: unknown) {
    super(`API error ${status}`);
  }
}

export class ApiClient {
  readonly log: LoggedRequest[] = [];

  constructor(
    private base: string = '',
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async request<T>(method: 'GET' | 'POST', path: string, body?: unknown): Promise<T> {
    this.log.push({ method, path, body: body ?? null });
    const res = await this.fetchFn(this.base + path, {
      method,
      headers: body !== undefined ? { 'Content-Type': 'application/json' } : undefined,
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const payload = await res.json();
    if (!res.ok) throw new ApiError(res.status, payload);
    return payload as T;
  }

  health(): Promise<{ status: string }> {
    return this.request('GET', '/api/health');
  }

  async samples(): Promise<SampleMeta[]> {
    const doc = await this.request<{ samples: SampleMeta[] }>('GET', '/api/samples');
    return doc.samples;
  }

  sampleImage(id: string): Promise<SampleImage> {
    return this.request('GET', `/api/sample/${id}/image`);
  }

  predict(sampleId: string, points?: Point[]): Promise<PredictionResponse> {
    const body: Record<string, unknown> = { sample_id: sampleId };
    if (points) body.points = points;
    return this.request('POST', '/api/predict', body);
  }

  refine(sessionId: string, points: Point[]): Promise<PredictionResponse> {
    return this.request('POST', `/api/session/${sessionId}/refine`, { points });
  }

  reset(sessionId: string): Promise<PredictionResponse> {
    return this.request('POST', `/api/session/${sessionId}/reset`, {});
  }
}
