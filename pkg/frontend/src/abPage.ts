// A/B forced choice: two images side by side, pick the synthesized one.
// Pair order arrives pre-randomized from the server and is never reshuffled.

import { ApiClient, ConflictError, LabelValue, Page, scaleToFourX } from "./api.js";

export class AbPageView {
  readonly picks: ("left" | "right" | null)[];
  private cursor = 0;
  private submitting = false;

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
    private page: Page,
    private callbacks: { onSubmitted: () => void; onConflict: () => void },
  ) {
    this.picks = Array(page.items.length).fill(null);
    this.render();
  }

  get progress(): { done: number; total: number } {
    return { done: this.picks.filter((p) => p !== null).length, total: this.picks.length };
  }

  private render(): void {
    this.root.innerHTML = "";
    const list = document.createElement("div");
    list.className = "ab-list";
    this.page.items.forEach((item, i) => {
      const row = document.createElement("div");
      row.className = "ab-row";
      row.dataset.index = String(i);

      const question = document.createElement("p");
      question.textContent = "Which image is synthesized?";
      row.appendChild(question);

      for (const side of ["left", "right"] as const) {
        const wrap = document.createElement("div");
        wrap.className = `ab-side ab-${side}`;
        const img = document.createElement("img");
        img.className = "pixelated";
        const imageId = side === "left" ? item.left : item.right;
        img.src = this.api.imageUrl(imageId ?? item.image_id);
        img.alt = `${side} candidate`;
        scaleToFourX(img);
        wrap.appendChild(img);
        const btn = document.createElement("button");
        btn.type = "button";
        btn.textContent = side === "left" ? "Left is synthesized" : "Right is synthesized";
        btn.dataset.side = side;
        btn.addEventListener("click", () => this.pick(i, side));
        wrap.appendChild(btn);
        row.appendChild(wrap);
      }
      list.appendChild(row);
    });
    this.root.appendChild(list);

    const bar = document.createElement("div");
    bar.className = "submit-bar";
    const counter = document.createElement("span");
    counter.id = "progress";
    bar.appendChild(counter);
    const submit = document.createElement("button");
    submit.id = "submit";
    submit.textContent = "Submit picks";
    submit.disabled = true;
    submit.addEventListener("click", () => void this.submit());
    bar.appendChild(submit);
    this.root.appendChild(bar);
    this.syncControls();
  }

  pick(index: number, side: "left" | "right"): void {
    this.picks[index] = side;
    const row = this.root.querySelectorAll<HTMLElement>(".ab-row")[index];
    row.querySelectorAll("button").forEach((b) => {
      b.classList.toggle("selected", b.dataset.side === side);
    });
    this.cursor = Math.min(index + 1, this.picks.length - 1);
    this.syncControls();
  }

  private syncControls(): void {
    const { done, total } = this.progress;
    const counter = this.root.querySelector("#progress");
    if (counter) counter.textContent = `${done} / ${total} judged`;
    const submit = this.root.querySelector<HTMLButtonElement>("#submit");
    if (submit) submit.disabled = done !== total || this.submitting;
  }

  async submit(): Promise<void> {
    const { done, total } = this.progress;
    if (done !== total || this.submitting || this.page.page_id === null) return;
    this.submitting = true;
    this.syncControls();
    try {
      await this.api.submitPage(
        this.page.page_id,
        this.page.worker_id,
        this.picks.slice() as LabelValue[],
      );
      this.callbacks.onSubmitted();
    } catch (err) {
      this.submitting = false;
      this.syncControls();
      if (err instanceof ConflictError) {
        this.callbacks.onConflict();
      } else {
        throw err;
      }
    }
  }
}
