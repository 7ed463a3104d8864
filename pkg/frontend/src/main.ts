/** DOM wiring: search box, ranked suggestion rows, inline error banner. */

import { ApiClient, FetchFn } from "./api.js";
import { debounce } from "./debounce.js";
import {
  ensureUserId,
  SessionView,
  StorageLike,
  SuggestSession,
} from "./session.js";

export interface MountOptions {
  baseUrl?: string;
  storage?: StorageLike;
  fetchFn?: FetchFn;
  debounceMs?: number;
  k?: number;
}

export interface App {
  session: SuggestSession;
  input: HTMLInputElement;
  list: HTMLUListElement;
  banner: HTMLElement;
}

export function mountApp(root: HTMLElement, opts: MountOptions = {}): App {
  const doc = root.ownerDocument;
  const api = new ApiClient(opts.baseUrl ?? "", opts.fetchFn);
  const storage = opts.storage ?? globalThis.localStorage;
  const session = new SuggestSession(api, ensureUserId(storage), {
    k: opts.k,
  });

  const input = doc.createElement("input");
  input.type = "search";
  input.id = "prefix-input";
  input.placeholder = "start typing a query";
  input.autocomplete = "off";

  const banner = doc.createElement("div");
  banner.id = "error-banner";
  banner.hidden = true;

  const list = doc.createElement("ul");
  list.id = "suggest-list";

  const render = (view: SessionView): void => {
    banner.hidden = !view.error;
    banner.textContent = view.error ?? "";
    list.replaceChildren();
    for (const s of view.suggestions) {
      const row = doc.createElement("li");
      row.className = "suggest-row";

      const label = doc.createElement("span");
      label.className = "query";
      label.textContent = s.query;

      const score = doc.createElement("span");
      score.className = "score";
      score.textContent = s.score.toFixed(3);

      const order = doc.createElement("button");
      order.className = "order";
      order.type = "button";
      order.textContent = "ordered";
      order.addEventListener("click", (ev) => {
        ev.stopPropagation();
        void session.recordInteraction(s.query, "order");
      });

      row.addEventListener("click", () => {
        void session.recordInteraction(s.query, "click");
      });
      row.append(label, score, order);
      list.append(row);
    }
  };
  session.onChange(render);

  const settle = debounce(
    (value: string) => void session.input(value),
    opts.debounceMs ?? 150,
  );
  input.addEventListener("input", () => settle(input.value));

  root.replaceChildren(input, banner, list);
  return { session, input, list, banner };
}

// Static-page entry: mounts when the host document provides the root div.
const autoRoot =
  typeof document === "undefined" ? null : document.getElementById("suggen-app");
if (autoRoot) {
  mountApp(autoRoot, { baseUrl: autoRoot.dataset.base ?? "" });
}
