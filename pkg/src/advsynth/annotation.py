"""Local annotation service: assigns images to workers, serves labeling and
A/B pages, and records judgments in an append-only JSONL event log.

State is derived purely from the log (replay rebuilds it exactly); the log
line is fsynced before a submission is acknowledged. A single lock serializes
state transitions; reads take the same lock briefly.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import NA, AnnotationRecord, VoteSummary, agreement_histogram, majority_vote

AB_POSITIONS = ("left", "right")


class AnnotationError(Exception):
    pass


class DuplicateImageError(AnnotationError):
    pass


class StalePageError(AnnotationError):
    """The page was never issued, belongs to someone else, or was released."""


class PartialSubmissionError(AnnotationError):
    pass


class QuorumConflictError(AnnotationError):
    """Another worker filled the last slot first; fetch a fresh page and retry."""


@dataclass
class TaskPage:
    page_id: str
    worker_id: str
    mode: str  # "label" or "ab"
    items: list[dict]


@dataclass
class _ImageState:
    image_id: str
    content_hash: str
    class_count: int
    mode: str
    meta: dict = field(default_factory=dict)
    labels: dict[str, object] = field(default_factory=dict)  # worker -> label
    holders: set[str] = field(default_factory=set)  # workers with an open page
    order: int = 0

    def workers_seen(self) -> set[str]:
        return set(self.labels) | self.holders


class AnnotationService:
    def __init__(self, log_path: Path, *, quorum: int = 5, page_size: int = 10):
        if quorum < 1 or page_size < 1:
            raise ValueError("quorum and page_size must be positive")
        self.log_path = Path(log_path)
        self.quorum = quorum
        self.page_size = page_size
        self._lock = threading.Lock()
        self._images: dict[str, _ImageState] = {}
        self._pages: dict[str, dict] = {}
        self._batches: dict[str, str] = {}  # content hash -> batch id
        self._page_seq = 0
        self._batch_seq = 0
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        if self.log_path.exists():
            self._replay()
        self._log = open(self.log_path, "a")

    # -- event plumbing ----------------------------------------------------

    def _replay(self) -> None:
        with open(self.log_path) as fh:
            for line in fh:
                if line.strip():
                    self._apply(json.loads(line))

    def _append(self, event: dict) -> None:
        self._log.write(json.dumps(event, sort_keys=True) + "\n")
        self._log.flush()
        os.fsync(self._log.fileno())

    def _apply(self, ev: dict) -> None:
        kind = ev["ev"]
        if kind == "enqueue":
            self._batches[ev["content"]] = ev["batch"]
            self._batch_seq = max(self._batch_seq, int(ev["batch"].split("-")[1]))
            for item in ev["images"]:
                if item["id"] in self._images:
                    continue
                self._images[item["id"]] = _ImageState(
                    image_id=item["id"],
                    content_hash=item["hash"],
                    class_count=item["k"],
                    mode=ev["mode"],
                    meta=item.get("meta", {}),
                    order=len(self._images),
                )
        elif kind == "assign":
            self._page_seq = max(self._page_seq, int(ev["page"].split("-")[1]))
            self._pages[ev["page"]] = {
                "worker": ev["worker"],
                "images": list(ev["images"]),
                "mode": ev["mode"],
                "state": "open",
            }
            for image_id in ev["images"]:
                self._images[image_id].holders.add(ev["worker"])
        elif kind == "submit":
            page = self._pages[ev["page"]]
            page["state"] = "submitted"
            page["ts"] = ev["ts"]
            for image_id, label in zip(page["images"], ev["labels"]):
                state = self._images[image_id]
                state.holders.discard(ev["worker"])
                state.labels[ev["worker"]] = label
        elif kind == "release":
            page = self._pages[ev["page"]]
            if page["state"] == "open":
                page["state"] = "released"
                for image_id in page["images"]:
                    self._images[image_id].holders.discard(page["worker"])
        else:  # pragma: no cover - forward compatibility guard
            raise AnnotationError(f"unknown event kind {kind!r}")

    # -- operations ----------------------------------------------------------

    def enqueue_batch(self, items: list[dict], mode: str = "label") -> str:
        """Add images to the pool; a byte-identical batch is a no-op.

        Each item: {"id", "hash", "k"} plus optional "meta" carried through to
        pages (e.g. file names or pair layout).
        """
        if mode not in ("label", "ab"):
            raise ValueError(f"unknown mode {mode!r}")
        digest = hashlib.sha256(
            json.dumps([mode] + sorted((i["id"], i["hash"]) for i in items)).encode()
        ).hexdigest()
        with self._lock:
            if digest in self._batches:
                return self._batches[digest]
            for item in items:
                known = self._images.get(item["id"])
                if known is not None and known.content_hash != item["hash"]:
                    raise DuplicateImageError(
                        f"image id {item['id']} already enqueued with different content"
                    )
            self._batch_seq += 1
            batch_id = f"batch-{self._batch_seq:06d}"
            event = {
                "ts": time.time(),
                "ev": "enqueue",
                "batch": batch_id,
                "content": digest,
                "mode": mode,
                "images": [
                    {"id": i["id"], "hash": i["hash"], "k": i["k"], "meta": i.get("meta", {})}
                    for i in items
                ],
            }
            self._append(event)
            self._apply(event)
            return batch_id

    def next_page(self, worker_id: str, mode: str | None = None) -> TaskPage | None:
        """Up to page_size images this worker has never seen, neediest first.

        Returns None when no eligible image remains for the worker.
        """
        with self._lock:
            candidates = []
            for state in self._images.values():
                if mode is not None and state.mode != mode:
                    continue
                slots = self.quorum - len(state.labels) - len(state.holders)
                if slots <= 0:
                    continue
                if worker_id in state.workers_seen():
                    continue
                need = self.quorum - len(state.labels)
                candidates.append((-need, state.order, state))
            if not candidates:
                return None
            candidates.sort(key=lambda c: c[:2])
            chosen = [c[2] for c in candidates[: self.page_size]]
            page_mode = chosen[0].mode
            chosen = [s for s in chosen if s.mode == page_mode]
            self._page_seq += 1
            page_id = f"page-{self._page_seq:06d}"
            event = {
                "ts": time.time(),
                "ev": "assign",
                "worker": worker_id,
                "page": page_id,
                "mode": page_mode,
                "images": [s.image_id for s in chosen],
            }
            self._append(event)
            self._apply(event)
            return TaskPage(
                page_id=page_id,
                worker_id=worker_id,
                mode=page_mode,
                items=[
                    {"image_id": s.image_id, "class_count": s.class_count, **s.meta}
                    for s in chosen
                ],
            )

    def submit_page(self, worker_id: str, page_id: str, labels: list) -> dict:
        """Record one label per page item, atomically; ack only after the
        event line is durable. Resubmitting an already-recorded page is a
        no-op acknowledged identically."""
        with self._lock:
            page = self._pages.get(page_id)
            if page is None or page["worker"] != worker_id:
                raise StalePageError(f"page {page_id} is not outstanding for {worker_id}")
            if page["state"] == "submitted":
                return {"page_id": page_id, "recorded": 0, "duplicate": True}
            if page["state"] != "open":
                raise StalePageError(f"page {page_id} was released; fetch a new page")
            if len(labels) != len(page["images"]):
                raise PartialSubmissionError(
                    f"page has {len(page['images'])} items, got {len(labels)} labels"
                )
            conflicts = []
            for image_id, label in zip(page["images"], labels):
                state = self._images[image_id]
                self._check_label(state, label)
                if len(state.labels) >= self.quorum or worker_id in state.labels:
                    conflicts.append(image_id)
            if conflicts:
                raise QuorumConflictError(
                    f"images already at quorum: {', '.join(conflicts)}; refetch a page"
                )
            event = {
                "ts": time.time(),
                "ev": "submit",
                "worker": worker_id,
                "page": page_id,
                "labels": list(labels),
            }
            self._append(event)
            self._apply(event)
            return {"page_id": page_id, "recorded": len(labels), "duplicate": False}

    def _check_label(self, state: _ImageState, label) -> None:
        if state.mode == "label":
            if label == NA:
                return
            if not isinstance(label, int) or not 0 <= label < state.class_count:
                raise ValueError(
                    f"label {label!r} invalid for image {state.image_id} (K={state.class_count})"
                )
        else:
            if label not in AB_POSITIONS:
                raise ValueError(f"A/B pick must be one of {AB_POSITIONS}, got {label!r}")

    def release_page(self, page_id: str) -> None:
        """Free an abandoned page so its images become assignable again."""
        with self._lock:
            if page_id not in self._pages:
                raise StalePageError(f"unknown page {page_id}")
            event = {"ts": time.time(), "ev": "release", "page": page_id}
            self._append(event)
            self._apply(event)

    # -- read side -----------------------------------------------------------

    def records(self, mode: str | None = None) -> list[AnnotationRecord]:
        with self._lock:
            out = []
            for state in self._images.values():
                if mode is not None and state.mode != mode:
                    continue
                for worker, label in state.labels.items():
                    out.append(
                        AnnotationRecord(
                            image_id=state.image_id, worker_id=worker, label=label,
                            mode="label" if state.mode == "label" else "ab_pick",
                        )
                    )
            return out

    def vote_summaries(self) -> dict[str, VoteSummary]:
        with self._lock:
            out = {}
            for state in self._images.values():
                if state.mode == "label" and len(state.labels) >= self.quorum:
                    records = [
                        AnnotationRecord(state.image_id, w, l) for w, l in state.labels.items()
                    ]
                    out[state.image_id] = majority_vote(records, self.quorum)
        return out

    def ab_picks(self) -> list[dict]:
        with self._lock:
            return [
                {"pair_id": s.image_id, "position": label, "worker": worker}
                for s in self._images.values()
                if s.mode == "ab"
                for worker, label in s.labels.items()
            ]

    def pending_count(self) -> int:
        with self._lock:
            return sum(1 for s in self._images.values() if len(s.labels) < self.quorum)

    def stats(self) -> dict:
        with self._lock:
            completed = [s for s in self._images.values() if len(s.labels) >= self.quorum]
            per_worker: dict[str, int] = {}
            for s in self._images.values():
                for w in s.labels:
                    per_worker[w] = per_worker.get(w, 0) + 1
            label_complete = [s for s in completed if s.mode == "label"]
            hist = agreement_histogram(
                [
                    majority_vote(
                        [AnnotationRecord(s.image_id, w, l) for w, l in s.labels.items()],
                        self.quorum,
                    )
                    for s in label_complete
                ],
                self.quorum,
            )
            return {
                "total_images": len(self._images),
                "pending_images": len(self._images) - len(completed),
                "completed_images": len(completed),
                "labels_recorded": sum(len(s.labels) for s in self._images.values()),
                "per_worker": dict(sorted(per_worker.items())),
                "agreement_histogram": {str(k): v for k, v in hist.items()},
            }

    def assignment_snapshot(self) -> str:
        """Canonical JSON of the full assignment state, for replay checks."""
        with self._lock:
            payload = {
                image_id: {
                    "hash": s.content_hash,
                    "k": s.class_count,
                    "mode": s.mode,
                    "labels": {w: s.labels[w] for w in sorted(s.labels)},
                    "holders": sorted(s.holders),
                    "order": s.order,
                }
                for image_id, s in sorted(self._images.items())
            }
            pages = {
                pid: {k: p[k] for k in ("worker", "images", "mode", "state")}
                for pid, p in sorted(self._pages.items())
            }
        return json.dumps({"images": payload, "pages": pages}, sort_keys=True)

    def close(self) -> None:
        self._log.close()


# ---------------------------------------------------------------------------
# A/B pair construction.

def make_ab_pairs(
    synthetic_ids: list[str], real_ids: list[str], seed: int = 0
) -> list[dict]:
    """Pair each synthetic image with a distinct random real one; the
    synthetic member's side is randomized per pair."""
    if not synthetic_ids or not real_ids:
        raise ValueError("need both synthetic and real images")
    rng = np.random.default_rng(seed)
    if len(real_ids) >= len(synthetic_ids):
        partners = rng.choice(len(real_ids), size=len(synthetic_ids), replace=False)
    else:
        partners = rng.integers(0, len(real_ids), size=len(synthetic_ids))
    pairs = []
    for i, (sid, ridx) in enumerate(zip(synthetic_ids, partners)):
        position = AB_POSITIONS[int(rng.integers(0, 2))]
        rid = real_ids[int(ridx)]
        pairs.append(
            {
                "pair_id": f"pair-{i:06d}",
                "left": sid if position == "left" else rid,
                "right": rid if position == "left" else sid,
                "synthetic_position": position,
            }
        )
    return pairs


# ---------------------------------------------------------------------------
# Simulated workers: a programmatic oracle for fully automated runs.

class GroundTruthPolicy:
    """Labels every image with its recorded ground truth (flip probability 0)."""

    def __init__(self, truth: dict[str, int]):
        self.truth = truth

    def label_for(self, item: dict) -> int:
        return self.truth[item["image_id"]]


class NoisyPolicy:
    """Ground truth flipped to a uniformly random other class with probability p."""

    def __init__(self, truth: dict[str, int], flip_p: float, class_count: int, seed: int = 0):
        self.truth = truth
        self.flip_p = flip_p
        self.class_count = class_count
        self.rng = np.random.default_rng(seed)

    def label_for(self, item: dict) -> int:
        label = self.truth[item["image_id"]]
        if self.rng.random() < self.flip_p:
            offset = int(self.rng.integers(1, self.class_count))
            label = (label + offset) % self.class_count
        return label


class ClassifierPolicy:
    """An independent classifier stands in for the annotator."""

    def __init__(self, classifier, images: dict[str, "torch.Tensor"]):  # noqa: F821
        self.classifier = classifier
        self.images = images

    def label_for(self, item: dict) -> int:
        x = self.images[item["image_id"]]
        return int(self.classifier.predict(x.unsqueeze(0))[0])


class AbTruthPolicy:
    """Picks the synthetic member with probability 1 - p, else the other side."""

    def __init__(self, pairs: list[dict], miss_p: float = 0.0, seed: int = 0):
        self.synthetic_at = {p["pair_id"]: p["synthetic_position"] for p in pairs}
        self.miss_p = miss_p
        self.rng = np.random.default_rng(seed)

    def label_for(self, item: dict) -> str:
        truth = self.synthetic_at[item["image_id"]]
        if self.rng.random() < self.miss_p:
            return "left" if truth == "right" else "right"
        return truth


def run_simulated_workers(
    service: AnnotationService, policies: dict[str, object], mode: str | None = None
) -> int:
    """Round-robin the simulated workers until no pages remain; returns the
    number of label records written."""
    recorded = 0
    active = True
    while active:
        active = False
        for worker_id, policy in policies.items():
            page = service.next_page(worker_id, mode)
            if page is None:
                continue
            labels = [policy.label_for(item) for item in page.items]
            ack = service.submit_page(worker_id, page.page_id, labels)
            recorded += ack["recorded"]
            active = True
    return recorded
