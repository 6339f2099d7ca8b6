/**
 * Typed client for the shape-editing HTTP service.
 *
 * All generation endpoints are seeded and stateless: equal requests give
 * byte-identical responses, which is what makes session history replayable.
 */

export interface ShapeJson {
  extrinsics: number[][];   // N x 16
  intrinsics: number[][];   // N x d_s
  labels?: number[];
}

export interface GenerateBody {
  n: number;
  seed: number;
  text?: string;
  w?: number;
  n_parts?: number;
}

export interface CompleteBody {
  shape: ShapeJson;
  mask: number[];
  seed: number;
  text?: string;
  w?: number;
}

export interface MixBody {
  shape_a: ShapeJson;
  shape_b: ShapeJson;
  label: number;
  t_start: number;
  seed: number;
}

export interface DecodeBody {
  shape: ShapeJson;
  grid?: number;
  seed?: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    public baseUrl: string,
    private fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    const payload = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      throw new ApiError(resp.status, String((payload as { error?: string }).error ?? resp.status));
    }
    return payload as T;
  }

  async health(): Promise<boolean> {
    try {
      const resp = await this.fetchFn(this.baseUrl + "/health");
      return resp.ok;
    } catch {
      return false;
    }
  }

  generate(body: GenerateBody): Promise<{ shapes: ShapeJson[] }> {
    return this.post("/generate", body);
  }

  complete(body: CompleteBody): Promise<{ shape: ShapeJson }> {
    return this.post("/complete", body);
  }

  mix(body: MixBody): Promise<{ shape: ShapeJson }> {
    return this.post("/mix", body);
  }

  decode(body: DecodeBody): Promise<{ points: number[][] }> {
    return this.post("/decode", body);
  }

  labels(shape: ShapeJson, family?: string): Promise<{ labels: number[] }> {
    return this.post("/labels", family ? { shape, family } : { shape });
  }
}
