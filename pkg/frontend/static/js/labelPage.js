// The 10-image labeling grid: one button group per image with every class
// plus N/A. Nothing is ever pre-selected; submit unlocks only when each card
// has exactly one choice.
import { ConflictError, scaleToFourX } from "./api.js";
export class SelectionState {
    constructor(size) {
        this.size = size;
        this.chosen = Array(size).fill(null);
    }
    select(index, value) {
        if (index < 0 || index >= this.size)
            throw new Error(`no item ${index}`);
        this.chosen[index] = value; // radio semantics: replaces any earlier pick
    }
    get(index) {
        return this.chosen[index];
    }
    complete() {
        return this.chosen.every((c) => c !== null);
    }
    labels() {
        if (!this.complete())
            throw new Error("page has unanswered items");
        return this.chosen.slice();
    }
}
export class LabelPageView {
    constructor(root, api, page, callbacks) {
        this.root = root;
        this.api = api;
        this.page = page;
        this.callbacks = callbacks;
        this.activeCard = 0;
        this.submitting = false;
        this.state = new SelectionState(page.items.length);
        this.render();
    }
    render() {
        this.root.innerHTML = "";
        const grid = document.createElement("div");
        grid.className = "card-grid";
        this.page.items.forEach((item, i) => {
            const card = document.createElement("div");
            card.className = "card";
            card.dataset.index = String(i);
            const img = document.createElement("img");
            img.className = "pixelated";
            img.src = this.api.imageUrl(item.image_id);
            img.alt = item.image_id;
            scaleToFourX(img);
            card.appendChild(img);
            const buttons = document.createElement("div");
            buttons.className = "button-group";
            const options = [
                ...Array.from({ length: item.class_count }, (_, k) => k),
                "NA",
            ];
            for (const option of options) {
                const btn = document.createElement("button");
                btn.type = "button";
                btn.textContent = String(option);
                btn.dataset.value = String(option);
                btn.addEventListener("click", () => this.select(i, option));
                buttons.appendChild(btn);
            }
            card.appendChild(buttons);
            card.addEventListener("click", () => {
                this.activeCard = i;
                this.highlightActive();
            });
            grid.appendChild(card);
        });
        this.root.appendChild(grid);
        const bar = document.createElement("div");
        bar.className = "submit-bar";
        const submit = document.createElement("button");
        submit.id = "submit";
        submit.textContent = "Submit page";
        submit.disabled = true;
        submit.addEventListener("click", () => void this.submit());
        bar.appendChild(submit);
        this.root.appendChild(bar);
        this.highlightActive();
    }
    select(index, value) {
        this.state.select(index, value);
        const card = this.root.querySelectorAll(".card")[index];
        card.querySelectorAll("button").forEach((b) => {
            b.classList.toggle("selected", b.dataset.value === String(value));
        });
        this.activeCard = Math.min(index + 1, this.page.items.length - 1);
        this.highlightActive();
        this.syncSubmit();
    }
    // digit keys pick a class for the active card, "n" picks N/A
    handleKey(key) {
        const item = this.page.items[this.activeCard];
        if (key.toLowerCase() === "n") {
            this.select(this.activeCard, "NA");
        }
        else if (/^[0-9]$/.test(key) && Number(key) < item.class_count) {
            this.select(this.activeCard, Number(key));
        }
    }
    highlightActive() {
        this.root.querySelectorAll(".card").forEach((c, i) => {
            c.classList.toggle("active", i === this.activeCard);
        });
    }
    syncSubmit() {
        const submit = this.root.querySelector("#submit");
        if (submit)
            submit.disabled = !this.state.complete() || this.submitting;
    }
    async submit() {
        if (!this.state.complete() || this.submitting || this.page.page_id === null)
            return;
        this.submitting = true;
        this.syncSubmit();
        try {
            await this.api.submitPage(this.page.page_id, this.page.worker_id, this.state.labels());
            this.callbacks.onSubmitted();
        }
        catch (err) {
            this.submitting = false;
            this.syncSubmit();
            if (err instanceof ConflictError) {
                this.callbacks.onConflict();
            }
            else {
                throw err;
            }
        }
    }
}
