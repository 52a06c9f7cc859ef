// Typed client for the avatar render service.

export interface Meta {
  k_expr: number
  psi_max: number
  theta_max: number
  resolution: number
  n_splats: number
  n_expressions: number
}

export interface ExpressionDatabase {
  representatives: number[][]
  weights: number[]
}

export interface RenderParams {
  phi: number[]
  azimuth: number
  elevation: number
  width: number
  height: number
}

export interface RenderResult {
  blob: Blob
  clamped: boolean
}

export class ApiError extends Error {
  constructor(message: string, readonly status: number, readonly expectedLength?: number) {
    super(message)
  }
}

export class ApiClient {
  constructor(private readonly base: string = '', private readonly fetchFn: typeof fetch = fetch) {}

  async meta(): Promise<Meta> {
    const res = await this.fetchFn(`${this.base}/meta`)
    if (!res.ok) throw new ApiError(`meta failed (${res.status})`, res.status)
    return (await res.json()) as Meta
  }

  async expressions(): Promise<ExpressionDatabase> {
    const res = await this.fetchFn(`${this.base}/expressions`)
    if (!res.ok) throw new ApiError(`expressions failed (${res.status})`, res.status)
    return (await res.json()) as ExpressionDatabase
  }

  async render(params: RenderParams): Promise<RenderResult> {
    const res = await this.fetchFn(`${this.base}/render`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(params),
    })
    if (!res.ok) {
      let message = `render failed (${res.status})`
      let expected: number | undefined
      try {
        const body = await res.json()
        if (body.error) message = body.error
        expected = body.expected_length
      } catch {
        // non-JSON error body: keep the generic message
      }
      throw new ApiError(message, res.status, expected)
    }
    return {
      blob: await res.blob(),
      clamped: res.headers.get('x-orbit-clamped') === 'true',
    }
  }
}
