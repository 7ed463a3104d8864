// @vitest-environment happy-dom
import { describe, expect, it, vi } from "vitest";

import { mountApp } from "../src/main.js";
import { FetchStub, memoryStorage, rows } from "./helpers.js";

function mount(stub: FetchStub) {
  const root = document.createElement("div");
  document.body.append(root);
  return mountApp(root, {
    baseUrl: "",
    fetchFn: stub.fn,
    storage: memoryStorage(),
    debounceMs: 5,
    k: 8,
  });
}

function type(input: HTMLInputElement, value: string): void {
  input.value = value;
  input.dispatchEvent(new Event("input", { bubbles: true }));
}

describe("mounted typeahead", () => {
  it("debounces typing and renders rows in server order", async () => {
    const stub = new FetchStub();
    const app = mount(stub);
    type(app.input, "s");
    type(app.input, "so");
    await vi.waitFor(() => expect(stub.pending).toHaveLength(1));
    expect(stub.prefixOf(0)).toBe("so");
    stub.answer(0, rows(3));
    await vi.waitFor(() => expect(app.list.children).toHaveLength(3));

    const labels = [...app.list.querySelectorAll(".query")].map(
      (el) => el.textContent,
    );
    expect(labels).toEqual(["query 0", "query 1", "query 2"]);
    const scores = [...app.list.querySelectorAll(".score")].map(
      (el) => el.textContent,
    );
    expect(scores).toEqual(["0.000", "-1.000", "-2.000"]);
    expect(app.banner.hidden).toBe(true);
  });

  it("clicking a row posts a Click for that query", async () => {
    const stub = new FetchStub();
    const app = mount(stub);
    type(app.input, "so");
    await vi.waitFor(() => expect(stub.pending).toHaveLength(1));
    stub.answer(0, rows(2));
    await vi.waitFor(() => expect(app.list.children).toHaveLength(2));

    (app.list.children[1] as HTMLElement).click();
    await vi.waitFor(() => expect(stub.postsOf("Click")).toHaveLength(1));
    expect(stub.postsOf("Click")[0]?.query).toBe("query 1");
  });

  it("the order button posts Order without an extra Click", async () => {
    const stub = new FetchStub();
    const app = mount(stub);
    type(app.input, "so");
    await vi.waitFor(() => expect(stub.pending).toHaveLength(1));
    stub.answer(0, rows(2));
    await vi.waitFor(() => expect(app.list.children).toHaveLength(2));

    const button = app.list.children[0]?.querySelector("button.order");
    (button as HTMLButtonElement).click();
    await vi.waitFor(() => expect(stub.postsOf("Order")).toHaveLength(1));
    expect(stub.postsOf("Order")[0]?.query).toBe("query 0");
    expect(stub.postsOf("Click")).toHaveLength(0);
  });

  it("shows the error banner and keeps rows on failure", async () => {
    const stub = new FetchStub();
    const app = mount(stub);
    type(app.input, "so");
    await vi.waitFor(() => expect(stub.pending).toHaveLength(1));
    stub.answer(0, rows(2));
    await vi.waitFor(() => expect(app.list.children).toHaveLength(2));

    type(app.input, "sofa");
    await vi.waitFor(() => expect(stub.pending).toHaveLength(2));
    stub.fail(1, "server unreachable");
    await vi.waitFor(() => expect(app.banner.hidden).toBe(false));
    expect(app.banner.textContent).toBe("server unreachable");
    expect(app.list.children).toHaveLength(2);
  });
});
