/** Typed client for the suggestion service's HTTP contract. */

export interface Suggestion {
  query: string;
  score: number;
}

export interface SuggestResponse {
  schema: number;
  suggestions: Suggestion[];
}

export type FeedbackLevel = "Order" | "Cart" | "Click" | "Like" | "Show" | "Rand";

export interface FeedbackEvent {
  user: string;
  prefix: string;
  query: string;
  level: FeedbackLevel;
  ts?: number;
}

export type FetchFn = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

export class ApiClient {
  private fetchFn: FetchFn;

  constructor(private baseUrl: string, fetchFn?: FetchFn) {
    // Wrap rather than store: the global fetch must not be invoked with
    // a foreign `this`.
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  async suggest(
    prefix: string,
    user: string,
    k: number,
    signal?: AbortSignal,
  ): Promise<SuggestResponse> {
    const params = new URLSearchParams({
      prefix,
      user,
      k: String(k),
    });
    const res = await this.fetchFn(`${this.baseUrl}/suggest?${params}`, {
      signal,
    });
    if (!res.ok) {
      throw new ApiError(res.status, `suggest failed: HTTP ${res.status}`);
    }
    return (await res.json()) as SuggestResponse;
  }

  /** Posts one feedback event, retrying once on any failure. */
  async feedback(event: FeedbackEvent): Promise<void> {
    const post = async () => {
      const res = await this.fetchFn(`${this.baseUrl}/feedback`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(event),
      });
      if (!res.ok) {
        throw new ApiError(res.status, `feedback failed: HTTP ${res.status}`);
      }
    };
    try {
      await post();
    } catch {
      await post();
    }
  }
}
