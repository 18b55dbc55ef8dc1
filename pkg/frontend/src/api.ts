// Typed client for the annotation service HTTP API. The UI is a thin client:
// every piece of state that matters lives server-side.

export type LabelValue = number | "NA" | "left" | "right";

export interface PageItem {
  image_id: string;
  class_count: number;
  left?: string;
  right?: string;
}

export interface Page {
  page_id: string | null;
  worker_id: string;
  mode: "label" | "ab" | null;
  items: PageItem[];
  empty: boolean;
}

export interface SubmitAck {
  page_id: string;
  recorded: number;
  duplicate: boolean;
}

export interface Stats {
  total_images: number;
  pending_images: number;
  completed_images: number;
  labels_recorded: number;
  per_worker: Record<string, number>;
  agreement_histogram: Record<string, number>;
}

export class ConflictError extends Error {}

export class ApiClient {
  constructor(private base: string = "") {}

  imageUrl(imageId: string): string {
    return `${this.base}/images/${imageId}.png`;
  }

  async nextPage(worker: string, mode?: "label" | "ab"): Promise<Page> {
    const params = new URLSearchParams({ worker });
    if (mode) params.set("mode", mode);
    const resp = await fetch(`${this.base}/api/page?${params}`);
    if (!resp.ok) throw new Error(`page fetch failed: ${resp.status}`);
    return (await resp.json()) as Page;
  }

  async submitPage(pageId: string, worker: string, labels: LabelValue[]): Promise<SubmitAck> {
    const resp = await fetch(`${this.base}/api/page/${pageId}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ worker, labels }),
    });
    if (resp.status === 409) throw new ConflictError(await resp.text());
    if (!resp.ok) throw new Error(`submit failed: ${resp.status}`);
    return (await resp.json()) as SubmitAck;
  }

  async stats(): Promise<Stats> {
    const resp = await fetch(`${this.base}/api/stats`);
    if (!resp.ok) throw new Error(`stats failed: ${resp.status}`);
    return (await resp.json()) as Stats;
  }
}

// Render small images at exactly 4x their native size; CSS keeps the
// scaling nearest-neighbor so individual pixels stay judgeable.
export function scaleToFourX(img: HTMLImageElement): void {
  const apply = () => {
    if (img.naturalWidth > 0) {
      img.width = img.naturalWidth * 4;
      img.height = img.naturalHeight * 4;
    }
  };
  if (img.complete) apply();
  else img.addEventListener("load", apply);
}
