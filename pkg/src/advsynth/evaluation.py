"""Aggregate classifier outputs and human judgments into reported artifacts:
success-rate tables, transferability matrices, A/B detection rates, vote
agreement histograms, and annotated sample grids.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

from .attack import BUDGET_EXHAUSTED, SUCCESS, AttackResult

NA = "NA"
TIE = "TIE"


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    worker_id: str
    label: int | str  # class index, NA, or "left"/"right" for A/B picks
    mode: str = "label"  # "label" or "ab_pick"
    timestamp: float = 0.0


@dataclass(frozen=True)
class VoteSummary:
    image_id: str
    majority_label: int | str  # class index, NA, or TIE
    agreement_count: int
    quorum: int


def majority_vote(records: list[AnnotationRecord], quorum: int = 5) -> VoteSummary:
    """Strict-plurality label over exactly `quorum` records; NA counts as a
    label of its own; a shared top count yields TIE."""
    if len(records) != quorum:
        raise ValueError(f"expected exactly {quorum} records, got {len(records)}")
    image_id = records[0].image_id
    if any(r.image_id != image_id for r in records):
        raise ValueError("records mix image ids")
    counts = Counter(r.label for r in records)
    top = counts.most_common()
    best_count = top[0][1]
    winners = [label for label, c in top if c == best_count]
    majority = winners[0] if len(winners) == 1 else TIE
    return VoteSummary(image_id, majority, best_count, quorum)


def _result_rows(results) -> list[dict]:
    rows = []
    for i, r in enumerate(results):
        if isinstance(r, AttackResult):
            rows.append(
                {
                    "id": f"atk-{i:06d}",
                    "y_source": r.y_source,
                    "y_target": r.y_target,
                    "status": r.status,
                    "prediction": r.prediction,
                }
            )
        else:
            rows.append(dict(r))
    return rows


def success_rate(
    results,
    votes: dict[str, VoteSummary],
    *,
    include_exhausted: bool = False,
) -> dict:
    """Success = the classifier was fooled (success status) AND the human
    majority label equals the source class. TIE and NA count as failures.

    Results that ran out of restarts are excluded from the denominator unless
    `include_exhausted` is set, in which case they count as failures.
    """
    rows = _result_rows(results)
    missing = sorted({r["id"] for r in rows if r["id"] not in votes})
    if missing:
        raise ValueError(f"missing vote summaries for: {', '.join(missing)}")

    cells: dict[tuple, dict] = {}
    for r in rows:
        if r["status"] == BUDGET_EXHAUSTED and not include_exhausted:
            continue
        key = (r["y_source"], r["y_target"])
        cell = cells.setdefault(key, {"attempted": 0, "successes": 0})
        cell["attempted"] += 1
        fooled = r["status"] == SUCCESS
        label_preserved = votes[r["id"]].majority_label == r["y_source"]
        if fooled and label_preserved:
            cell["successes"] += 1

    for cell in cells.values():
        rate = 100.0 * cell["successes"] / cell["attempted"]
        cell["success_rate"] = rate
        cell["failure_rate"] = 100.0 - rate

    attempted = sum(c["attempted"] for c in cells.values())
    successes = sum(c["successes"] for c in cells.values())
    per_source: dict[int, dict] = {}
    for (src, _), cell in cells.items():
        agg = per_source.setdefault(src, {"attempted": 0, "successes": 0})
        agg["attempted"] += cell["attempted"]
        agg["successes"] += cell["successes"]
    for agg in per_source.values():
        agg["success_rate"] = 100.0 * agg["successes"] / agg["attempted"]

    return {
        "cells": {f"{s}->{t if t is not None else 'any'}": c for (s, t), c in sorted(cells.items(), key=str)},
        "per_source": {str(s): per_source[s] for s in sorted(per_source)},
        "attempted": attempted,
        "successes": successes,
        "overall_rate": (100.0 * successes / attempted) if attempted else 0.0,
        "include_exhausted": include_exhausted,
    }


def transfer_matrix(
    images: torch.Tensor, source_labels: torch.Tensor, classifiers: dict[str, object]
) -> dict[str, float]:
    """Feed human-verified adversarial examples to other classifiers; each
    entry is the percentage predicted as the source class. The attacked
    classifier's entry comes out 0 because every example fools it."""
    if len(images) == 0:
        raise ValueError("transfer matrix needs a non-empty valid set")
    out = {}
    for name, clf in classifiers.items():
        preds = clf.predict(images)
        out[name] = 100.0 * int((preds == source_labels).sum()) / len(images)
    return out


def ab_detection_rate(pairs: list[dict], picks: list[dict]) -> float:
    """Percentage of forced-choice picks that land on the synthetic member.

    Each pick record is one annotator judgment: {"pair_id", "position"}.
    """
    synthetic_at = {p["pair_id"]: p["synthetic_position"] for p in pairs}
    unmatched = sorted({p["pair_id"] for p in picks} - set(synthetic_at))
    if unmatched:
        raise ValueError(f"picks reference unknown pairs: {', '.join(unmatched)}")
    if not picks:
        raise ValueError("no picks to score")
    hits = sum(int(p["position"] == synthetic_at[p["pair_id"]]) for p in picks)
    return 100.0 * hits / len(picks)


def agreement_histogram(summaries: list[VoteSummary], quorum: int = 5) -> dict[int, int]:
    hist = {k: 0 for k in range(1, quorum + 1)}
    for s in summaries:
        hist[s.agreement_count] += 1
    return hist


# ---------------------------------------------------------------------------
# Sample grids. Green border: the majority vote matched the source class;
# red: it did not. Upper-left annotation is the classifier's prediction or
# the worker label, per the `annotate` switch.

_GREEN = (0, 176, 0)
_RED = (204, 0, 0)
_BLANK = (240, 240, 240)


def export_grid(
    results: list[AttackResult],
    votes: dict[str, VoteSummary],
    path: Path,
    *,
    rows: int,
    cols: int,
    arrange: str = "sequential",  # or "source-target"
    annotate: str = "prediction",  # or "vote"
    scale: int = 4,
    border: int = 2,
) -> Path:
    rows_data = _result_rows(results)
    images = [r.image if isinstance(r, AttackResult) else r["image"] for r in results]
    cells: dict[tuple[int, int], tuple[dict, torch.Tensor]] = {}
    if arrange == "sequential":
        if len(results) != rows * cols:
            raise ValueError(f"{len(results)} results do not fill a {rows}x{cols} grid")
        for i, (row, img) in enumerate(zip(rows_data, images)):
            cells[divmod(i, cols)] = (row, img)
    elif arrange == "source-target":
        for row, img in zip(rows_data, images):
            if row["y_target"] is None:
                raise ValueError("source-target arrangement needs targeted results")
            key = (row["y_source"], row["y_target"])
            if key[0] >= rows or key[1] >= cols:
                raise ValueError(f"cell {key} outside a {rows}x{cols} grid")
            if key in cells:
                raise ValueError(f"two results map to cell {key}")
            cells[key] = (row, img)
    else:
        raise ValueError(f"unknown arrangement {arrange!r}")

    sample = next(iter(cells.values()))[1]
    c, h, w = sample.shape
    cell_h, cell_w = h * scale + 2 * border, w * scale + 2 * border
    canvas = Image.new("RGB", (cols * cell_w, rows * cell_h), _BLANK)
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()

    for (r, cidx), (row, cell_image) in sorted(cells.items(), key=str):
        vote = votes[row["id"]]
        ok = vote.majority_label == row["y_source"]
        arr = (cell_image.clamp(0, 1).numpy() * 255).round().astype(np.uint8)
        img = Image.fromarray(arr[0], "L").convert("RGB") if c == 1 else Image.fromarray(
            np.transpose(arr, (1, 2, 0)), "RGB"
        )
        img = img.resize((w * scale, h * scale), Image.NEAREST)
        x0, y0 = cidx * cell_w, r * cell_h
        draw.rectangle(
            [x0, y0, x0 + cell_w - 1, y0 + cell_h - 1], fill=_GREEN if ok else _RED
        )
        canvas.paste(img, (x0 + border, y0 + border))
        text = str(row["prediction"]) if annotate == "prediction" else str(vote.majority_label)
        draw.text((x0 + border + 1, y0 + border), text, fill=(255, 255, 0), font=font)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)
    return path


# ---------------------------------------------------------------------------
# Report shaping: JSON plus CSV tables in the layouts of the published
# reference tables, with the reference constants alongside for comparison.

def build_report(
    *,
    success: dict,
    class_count: int,
    transfer: dict[str, float] | None = None,
    ab_rate: float | None = None,
    histogram: dict[int, int] | None = None,
    clean_accuracy: float | None = None,
    pgd_success: float | None = None,
    reference: dict | None = None,
    seed: int | None = None,
) -> dict:
    report = {
        "success": success,
        "class_count": class_count,
        "transfer": transfer,
        "ab_detection_rate": ab_rate,
        "agreement_histogram": histogram,
        "clean_accuracy": clean_accuracy,
        "pgd_success": pgd_success,
        "seed": seed,
    }
    if reference is not None:
        report["reference"] = reference
    return report


def write_report(report: dict, outdir: Path) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))

    success = report["success"]
    k = report["class_count"]
    with open(outdir / "success_rates.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source"] + [str(s) for s in range(k)] + ["overall"])
        per_source = success["per_source"]
        writer.writerow(
            ["success_rate"]
            + [f"{per_source[str(s)]['success_rate']:.1f}" if str(s) in per_source else "" for s in range(k)]
            + [f"{success['overall_rate']:.1f}"]
        )

    if report.get("transfer"):
        with open(outdir / "transfer.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["classifier", "accuracy_on_valid_adversarial"])
            for name, val in report["transfer"].items():
                writer.writerow([name, f"{val:.1f}"])

    with open(outdir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["clean_accuracy", "pgd_success", "our_success_rate", "ab_detection_rate"]
        )
        writer.writerow(
            [
                _fmt(report.get("clean_accuracy")),
                _fmt(report.get("pgd_success")),
                f"{success['overall_rate']:.1f}",
                _fmt(report.get("ab_detection_rate")),
            ]
        )
    return outdir / "report.json"


def _fmt(val) -> str:
    return "" if val is None else f"{val:.1f}"
