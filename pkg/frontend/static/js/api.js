// Typed client for the annotation service HTTP API. The UI is a thin client:
// every piece of state that matters lives server-side.
export class ConflictError extends Error {
}
export class ApiClient {
    constructor(base = "") {
        this.base = base;
    }
    imageUrl(imageId) {
        return `${this.base}/images/${imageId}.png`;
    }
    async nextPage(worker, mode) {
        const params = new URLSearchParams({ worker });
        if (mode)
            params.set("mode", mode);
        const resp = await fetch(`${this.base}/api/page?${params}`);
        if (!resp.ok)
            throw new Error(`page fetch failed: ${resp.status}`);
        return (await resp.json());
    }
    async submitPage(pageId, worker, labels) {
        const resp = await fetch(`${this.base}/api/page/${pageId}`, {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify({ worker, labels }),
        });
        if (resp.status === 409)
            throw new ConflictError(await resp.text());
        if (!resp.ok)
            throw new Error(`submit failed: ${resp.status}`);
        return (await resp.json());
    }
    async stats() {
        const resp = await fetch(`${this.base}/api/stats`);
        if (!resp.ok)
            throw new Error(`stats failed: ${resp.status}`);
        return (await resp.json());
    }
}
// Render small images at exactly 4x their native size; CSS keeps the
// scaling nearest-neighbor so individual pixels stay judgeable.
export function scaleToFourX(img) {
    const apply = () => {
        if (img.naturalWidth > 0) {
            img.width = img.naturalWidth * 4;
            img.height = img.naturalHeight * 4;
        }
    };
    if (img.complete)
        apply();
    else
        img.addEventListener("load", apply);
}
