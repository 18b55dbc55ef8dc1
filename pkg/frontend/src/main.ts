// Session driver: remembers the worker id, pulls pages until the pool is
// empty, and routes each page to the matching view. Refreshing mid-page only
// ever loses unsubmitted selections; the server holds everything recorded.

import { AbPageView } from "./abPage.js";
import { ApiClient, Page } from "./api.js";
import { LabelPageView } from "./labelPage.js";

export class App {
  private current: LabelPageView | AbPageView | null = null;

  constructor(
    private root: HTMLElement,
    private api: ApiClient = new ApiClient(),
  ) {}

  start(): void {
    const saved = window.sessionStorage.getItem("worker_id") ?? "";
    this.root.innerHTML = `
      <div class="start">
        <label>Worker id <input id="worker" value="${saved}"></label>
        <button id="go">Start labeling</button>
      </div>`;
    this.root.querySelector<HTMLButtonElement>("#go")!.addEventListener("click", () => {
      const worker = this.root.querySelector<HTMLInputElement>("#worker")!.value.trim();
      if (!worker) return;
      window.sessionStorage.setItem("worker_id", worker);
      void this.nextPage(worker);
    });
    window.addEventListener("keydown", (ev) => {
      if (this.current instanceof LabelPageView) this.current.handleKey(ev.key);
    });
  }

  async nextPage(worker: string): Promise<void> {
    let page: Page;
    try {
      page = await this.api.nextPage(worker);
    } catch {
      this.renderRetry(worker);
      return;
    }
    if (page.empty || page.page_id === null) {
      await this.renderDone();
      return;
    }
    const callbacks = {
      onSubmitted: () => void this.nextPage(worker),
      onConflict: () => void this.nextPage(worker), // stale page: just refetch
    };
    this.current =
      page.mode === "ab"
        ? new AbPageView(this.root, this.api, page, callbacks)
        : new LabelPageView(this.root, this.api, page, callbacks);
  }

  private renderRetry(worker: string): void {
    this.root.innerHTML = `
      <div class="error">
        <p>Could not reach the annotation service.</p>
        <button id="retry">Retry</button>
      </div>`;
    this.root.querySelector("#retry")!.addEventListener("click", () => void this.nextPage(worker));
  }

  private async renderDone(): Promise<void> {
    this.current = null;
    let detail = "";
    try {
      const stats = await this.api.stats();
      detail = `<p>${stats.completed_images} of ${stats.total_images} images fully labeled.</p>`;
    } catch {
      detail = "";
    }
    this.root.innerHTML = `<div class="done"><h2>All done</h2>${detail}<p>No more images for you.</p></div>`;
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  new App(document.getElementById("app")!).start();
}
