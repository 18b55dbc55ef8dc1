// A/B forced choice: two images side by side, pick the synthesized one.
// Pair order arrives pre-randomized from the server and is never reshuffled.
import { ConflictError, scaleToFourX } from "./api.js";
export class AbPageView {
    constructor(root, api, page, callbacks) {
        this.root = root;
        this.api = api;
        this.page = page;
        this.callbacks = callbacks;
        this.cursor = 0;
        this.submitting = false;
        this.picks = Array(page.items.length).fill(null);
        this.render();
    }
    get progress() {
        return { done: this.picks.filter((p) => p !== null).length, total: this.picks.length };
    }
    render() {
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
            for (const side of ["left", "right"]) {
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
    pick(index, side) {
        this.picks[index] = side;
        const row = this.root.querySelectorAll(".ab-row")[index];
        row.querySelectorAll("button").forEach((b) => {
            b.classList.toggle("selected", b.dataset.side === side);
        });
        this.cursor = Math.min(index + 1, this.picks.length - 1);
        this.syncControls();
    }
    syncControls() {
        const { done, total } = this.progress;
        const counter = this.root.querySelector("#progress");
        if (counter)
            counter.textContent = `${done} / ${total} judged`;
        const submit = this.root.querySelector("#submit");
        if (submit)
            submit.disabled = done !== total || this.submitting;
    }
    async submit() {
        const { done, total } = this.progress;
        if (done !== total || this.submitting || this.page.page_id === null)
            return;
        this.submitting = true;
        this.syncControls();
        try {
            await this.api.submitPage(this.page.page_id, this.page.worker_id, this.picks.slice());
            this.callbacks.onSubmitted();
        }
        catch (err) {
            this.submitting = false;
            this.syncControls();
            if (err instanceof ConflictError) {
                this.callbacks.onConflict();
            }
            else {
                throw err;
            }
        }
    }
}
