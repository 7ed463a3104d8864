/** Typeahead session state: one in-flight request, stale-response
 * discarding, and feedback posting with per-set Show deduplication. */

import { ApiClient, FeedbackLevel, Suggestion } from "./api.js";

export const USER_ID_KEY = "suggen_user_id";

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
}

/** Returns the persisted user id, minting one on first visit. */
export function ensureUserId(
  storage: StorageLike,
  rng: () => number = Math.random,
): string {
  const existing = storage.getItem(USER_ID_KEY);
  if (existing) {
    return existing;
  }
  const fresh =
    "web-" + Math.floor(rng() * 36 ** 8).toString(36).padStart(8, "0");
  storage.setItem(USER_ID_KEY, fresh);
  return fresh;
}

export interface SessionView {
  userId: string;
  prefix: string;
  suggestions: Suggestion[];
  pending: boolean;
  error: string | null;
}

export type InteractionKind = "click" | "order" | "shown";

const LEVEL_OF: Record<InteractionKind, FeedbackLevel> = {
  click: "Click",
  order: "Order",
  shown: "Show",
};

export interface SessionOptions {
  k?: number;
}

export class SuggestSession {
  private token = 0;
  private controller: AbortController | null = null;
  private state: SessionView;
  private lastShownKey: string | null = null;
  private listeners: Array<(view: SessionView) => void> = [];
  private readonly k: number;

  constructor(
    private api: ApiClient,
    userId: string,
    opts: SessionOptions = {},
  ) {
    this.k = opts.k ?? 16;
    this.state = {
      userId,
      prefix: "",
      suggestions: [],
      pending: false,
      error: null,
    };
  }

  view(): SessionView {
    return { ...this.state, suggestions: [...this.state.suggestions] };
  }

  onChange(listener: (view: SessionView) => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(patch: Partial<SessionView>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) {
      listener(this.view());
    }
  }

  /** Settles a new input-box value; the caller debounces keystrokes.
   *
   * Supersedes any in-flight request (last writer wins).  An empty or
   * whitespace value clears the list without a request.  A failure
   * surfaces as `error` and leaves the previous list untouched.
   */
  async input(raw: string): Promise<void> {
    const prefix = raw.trim();
    const token = ++this.token;
    if (this.controller) {
      this.controller.abort();
      this.controller = null;
    }
    if (!prefix) {
      this.emit({ prefix: "", suggestions: [], pending: false, error: null });
      return;
    }
    const controller = new AbortController();
    this.controller = controller;
    this.emit({ prefix, pending: true });
    try {
      const res = await this.api.suggest(
        prefix,
        this.state.userId,
        this.k,
        controller.signal,
      );
      if (token !== this.token) {
        return; // superseded while in flight
      }
      this.controller = null;
      this.emit({ suggestions: res.suggestions, pending: false, error: null });
      await this.postShows(prefix, res.suggestions);
    } catch (err) {
      if (token !== this.token) {
        return; // aborted by a newer input
      }
      this.controller = null;
      this.emit({ pending: false, error: describeError(err) });
    }
  }

  /** Posts Click/Order/Show for a currently rendered suggestion.
   * Returns false (and posts nothing) for queries not on screen. */
  async recordInteraction(
    query: string,
    kind: InteractionKind,
  ): Promise<boolean> {
    if (!this.state.suggestions.some((s) => s.query === query)) {
      return false;
    }
    return this.post(LEVEL_OF[kind], query, this.state.prefix);
  }

  /** One Show per row per rendered set; identical re-renders are silent. */
  private async postShows(
    prefix: string,
    suggestions: Suggestion[],
  ): Promise<void> {
    if (suggestions.length === 0) {
      return;
    }
    const key = prefix + "\x1f" + suggestions.map((s) => s.query).join("\x1f");
    if (key === this.lastShownKey) {
      return;
    }
    this.lastShownKey = key;
    await Promise.all(
      suggestions.map((s) => this.post("Show", s.query, prefix)),
    );
  }

  private async post(
    level: FeedbackLevel,
    query: string,
    prefix: string,
  ): Promise<boolean> {
    try {
      await this.api.feedback({
        user: this.state.userId,
        prefix,
        query,
        level,
        ts: Date.now(),
      });
      return true;
    } catch (err) {
      console.error("feedback event rejected", err);
      return false;
    }
  }
}

function describeError(err: unknown): string {
  return err instanceof Error ? err.message : "request failed";
}
