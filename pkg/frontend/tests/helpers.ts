/** Shared fakes: a controllable fetch stub and an in-memory storage. */

import { FetchFn, Suggestion } from "../src/api.js";
import { StorageLike } from "../src/session.js";

export interface PendingSuggest {
  url: URL;
  resolve(res: Response): void;
  reject(err: unknown): void;
}

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

/** Queues /suggest calls for manual resolution; answers /feedback
 * immediately (optionally failing the first N attempts). */
export class FetchStub {
  pending: PendingSuggest[] = [];
  posts: Array<Record<string, unknown>> = [];
  failFeedbackTimes = 0;

  fn: FetchFn = (input, init) => {
    const url = new URL(input, "http://stub.test");
    if (url.pathname.endsWith("/feedback")) {
      if (this.failFeedbackTimes > 0) {
        this.failFeedbackTimes -= 1;
        return Promise.resolve(new Response("boom", { status: 500 }));
      }
      this.posts.push(JSON.parse(String(init?.body)));
      return Promise.resolve(jsonResponse({ ok: true }));
    }
    return new Promise<Response>((resolve, reject) => {
      init?.signal?.addEventListener("abort", () =>
        reject(new DOMException("aborted", "AbortError")),
      );
      this.pending.push({ url, resolve, reject });
    });
  };

  prefixOf(i: number): string | null {
    return this.pending[i]?.url.searchParams.get("prefix") ?? null;
  }

  answer(i: number, suggestions: Suggestion[]): void {
    this.pending[i]?.resolve(jsonResponse({ schema: 1, suggestions }));
  }

  fail(i: number, message: string): void {
    this.pending[i]?.reject(new Error(message));
  }

  postsOf(level: string): Array<Record<string, unknown>> {
    return this.posts.filter((p) => p.level === level);
  }
}

export function memoryStorage(): StorageLike {
  const map = new Map<string, string>();
  return {
    getItem: (k) => map.get(k) ?? null,
    setItem: (k, v) => void map.set(k, v),
  };
}

export function rows(n: number): Suggestion[] {
  return Array.from({ length: n }, (_, i) => ({
    query: `query ${i}`,
    score: -i,
  }));
}
