"""Command-line pipeline: every subcommand writes its artifacts plus a
manifest (resolved config, config hash, seed, versions) sufficient to rerun
it. Configs are JSON and strictly parsed: unknown keys are rejected.

Exit codes: 0 success, 2 validation error, 3 attack restart budget exhausted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .annotation import AnnotationService
from .attack import (
    BUDGET_EXHAUSTED,
    AttackConfig,
    attack_many,
    derive_seed,
    export_attack_results,
)
from .bounds import BoundInstance, l1_perturbation_bound, monte_carlo_violation_rate
from .classifiers import Classifier, ClassifierSpec, ClfTrainConfig, build_and_train
from .data import _from_pil, load_dataset_spec, make_synthetic_dataset
from .evaluation import build_report, export_grid, write_report
from .gan import GanBundle, GanTrainConfig, train_acgan
from .presets import ATTACK_PRESETS, PUBLISHED_REFERENCES, preset_config


class CliError(Exception):
    pass


def resolve_count(count: int | None, targeted: bool) -> int:
    """Replicates per (source, target) cell: 100 targeted, 1000 per source
    untargeted, unless overridden."""
    if count is not None:
        return count
    return 100 if targeted else 1000


def resolve_data_path(path: str) -> Path:
    """Relative dataset paths resolve under $ADVSYNTH_DATA_ROOT when set."""
    p = Path(path)
    root = os.environ.get("ADVSYNTH_DATA_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _stable_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str)


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(outdir: Path, command: str, config: dict, seed, inputs: dict) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": _config_hash(config),
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "versions": {"advsynth": __version__, "torch": torch.__version__, "numpy": np.__version__},
    }
    (outdir / "manifest.json").write_text(_stable_json(manifest))


def load_config_file(path, allowed: set[str]) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a JSON object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)} (allowed: {', '.join(sorted(allowed))})")
    return data


# -- data prepare ------------------------------------------------------------

def cmd_data_prepare(args) -> int:
    spec = make_synthetic_dataset(
        Path(args.out),
        seed=args.seed,
        class_count=args.classes,
        resolution=(args.height, args.width),
        per_class=args.per_class,
        test_per_class=args.test_per_class,
        channels=args.channels,
    )
    config = {
        "classes": args.classes, "height": args.height, "width": args.width,
        "per_class": args.per_class, "test_per_class": args.test_per_class,
        "channels": args.channels,
    }
    write_manifest(args.out, "data prepare", config, args.seed, {})
    print(f"wrote synthetic dataset to {args.out}: splits {spec.splits}")
    return 0


# -- gan train ----------------------------------------------------------------

_GAN_KEYS = {f for f in GanTrainConfig.__dataclass_fields__}


def cmd_gan_train(args) -> int:
    overrides = load_config_file(args.config, _GAN_KEYS) if args.config else {}
    for field in ("total_steps", "batch_size", "critic_steps", "latent_dim", "seed"):
        flag = getattr(args, field, None)
        if flag is not None:
            overrides[field] = flag
    config = GanTrainConfig(**overrides)
    dataset = load_dataset_spec(resolve_data_path(args.data))
    out = Path(args.out)
    result = train_acgan(config, dataset, checkpoint_dir=out, progress_every=args.progress_every)
    (out / "curves.json").write_text(_stable_json(result.curves))
    write_manifest(out, "gan train", asdict(config), config.seed, {"data": args.data})
    print(f"trained {config.total_steps} steps; checkpoint at {out / 'final.ckpt'}")
    return 0


# -- clf train ----------------------------------------------------------------

_CLF_KEYS = {f for f in ClfTrainConfig.__dataclass_fields__} | {"architecture", "base_maps"}


def cmd_clf_train(args) -> int:
    overrides = load_config_file(args.config, _CLF_KEYS) if args.config else {}
    arch = overrides.pop("architecture", args.arch)
    base_maps = overrides.pop("base_maps", args.base_maps)
    for field in ("epochs", "batch_size", "seed"):
        flag = getattr(args, field, None)
        if flag is not None:
            overrides[field] = flag
    if args.adversarial:
        overrides["adversarial"] = True
    config = ClfTrainConfig(**overrides)
    dataset = load_dataset_spec(resolve_data_path(args.data))
    spec = ClassifierSpec(
        architecture=arch,
        class_count=dataset.class_count,
        input_shape=dataset.image_shape,
        base_maps=base_maps,
        training="adversarial" if config.adversarial else "standard",
    )
    clf = build_and_train(spec, dataset, config)
    out = Path(args.out)
    clf.save(out)
    write_manifest(out.parent, "clf train", {**asdict(config), "architecture": arch}, config.seed, {"data": args.data})
    acc = "n/a" if clf.test_accuracy is None else f"{clf.test_accuracy:.4f}"
    print(f"saved classifier to {out} (held-out accuracy {acc})")
    return 0


# -- attack run -----------------------------------------------------------------

_ATTACK_KEYS = {f for f in AttackConfig.__dataclass_fields__}


def cmd_attack_run(args) -> int:
    bundle = GanBundle.load(args.gan)
    classifier = Classifier.load(args.classifier)
    k = bundle.class_count

    if args.preset:
        base = preset_config(args.preset, y_source=0, y_target=None if "untargeted" in args.preset else 1)
    elif args.config:
        raw = load_config_file(args.config, _ATTACK_KEYS)
        raw.setdefault("y_source", 0)
        raw.setdefault("y_target", None)
        base = AttackConfig(**raw)
    else:
        raise CliError("pass --preset or --config")

    targeted = base.targeted
    if args.all_pairs:
        pairs = [(s, t) for s in range(k) for t in range(k) if s != t] if targeted else [
            (s, None) for s in range(k)
        ]
    else:
        if args.source is None:
            raise CliError("pass --source or --all-pairs")
        pairs = [(args.source, args.target if targeted else None)]
        if targeted and args.target is None:
            raise CliError("targeted preset needs --target")

    count = resolve_count(args.count, targeted)
    configs = [
        replace(base, y_source=src, y_target=tgt, seed=derive_seed(args.seed, i))
        for i, (src, tgt) in enumerate(p for p in pairs for _ in range(count))
    ]

    results = attack_many(configs, bundle, classifier, aux=bundle.aux, workers=args.workers)
    out = Path(args.out)
    export_attack_results(results, out)
    exhausted = sum(r.status == BUDGET_EXHAUSTED for r in results)
    config_dict = {**base.__dict__, "pairs": pairs, "count": count}
    write_manifest(out, "attack run", config_dict, args.seed,
                   {"gan": args.gan, "classifier": args.classifier})
    print(f"{len(results)} attacks: {len(results) - exhausted} fooled, {exhausted} exhausted -> {out}")
    return 3 if exhausted else 0


# -- eval report -----------------------------------------------------------------

def _load_results_dir(directory: Path) -> list[dict]:
    from .attack import load_attack_manifest

    rows = load_attack_manifest(directory)
    from PIL import Image

    for row in rows:
        img = Image.open(Path(directory) / f"{row['id']}.png")
        channels = 1 if img.mode == "L" else 3
        row["image"] = torch.from_numpy(_from_pil(img, channels))
    return rows


def cmd_eval_report(args) -> int:
    from .evaluation import agreement_histogram, success_rate

    rows = _load_results_dir(args.attacks)
    service = AnnotationService(args.log, quorum=args.quorum)
    votes = service.vote_summaries()
    service.close()
    success = success_rate(rows, votes, include_exhausted=args.include_exhausted)
    hist = agreement_histogram(list(votes.values()), args.quorum)
    report = build_report(
        success=success,
        class_count=args.classes or (max(r["y_source"] for r in rows) + 1),
        histogram=hist,
        reference=PUBLISHED_REFERENCES,
        seed=args.seed,
    )
    write_report(report, args.out)
    write_manifest(args.out, "eval report", {"include_exhausted": args.include_exhausted,
                                             "quorum": args.quorum}, args.seed,
                   {"attacks": args.attacks, "log": args.log})
    print(f"overall success rate {success['overall_rate']:.1f}% over {success['attempted']} attempts")
    return 0


# -- bound check -----------------------------------------------------------------

def cmd_bound_check(args) -> int:
    inst = BoundInstance(n=args.n, m=args.m, epsilon=args.eps, k_bound=args.K,
                         delta=args.delta, sampler=args.sampler)
    bound = l1_perturbation_bound(inst)
    print(f"bound = {bound:.6f}")
    if args.trials:
        report = monte_carlo_violation_rate(inst, args.trials, seed=args.seed)
        print(
            f"violation fraction over {args.trials} trials: {report.violation_fraction:.4f} "
            f"(max normalized worst case {max(report.normalized_worst_cases):.6f})"
        )
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            report.write(out / "bound_check.json", out / "bound_check.csv")
            write_manifest(out, "bound check", inst.__dict__ | {"trials": args.trials},
                           args.seed, {})
        if args.plot:
            _plot_bound_histogram(report, Path(args.plot))
            print(f"wrote plot {args.plot}")
    return 0


def _plot_bound_histogram(report, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(report.normalized_worst_cases, bins=40, color="#4a7dff", alpha=0.8)
    ax.axvline(report.bound, color="#cc0000", linestyle="--",
               label=f"bound = {report.bound:.4f}")
    ax.set_xlabel("normalized worst-case l1 response")
    ax.set_ylabel("trials")
    ax.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


# -- annotate serve ----------------------------------------------------------------

def cmd_annotate_serve(args) -> int:
    from .server import serve

    service = AnnotationService(args.log, quorum=args.quorum, page_size=args.page_size)
    serve(service, args.images, args.ui, args.host, args.port)
    return 0


# -- grid export --------------------------------------------------------------------

def cmd_grid_export(args) -> int:
    rows = _load_results_dir(args.attacks)
    service = AnnotationService(args.log, quorum=args.quorum)
    votes = service.vote_summaries()
    service.close()
    export_grid(
        rows, votes, args.out,
        rows=args.rows, cols=args.cols, arrange=args.arrange, annotate=args.annotate,
    )
    print(f"wrote grid {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advsynth")
    top = parser.add_subparsers(dest="group", required=True)

    data = top.add_parser("data").add_subparsers(dest="sub", required=True)
    p = data.add_parser("prepare", help="materialize a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--per-class", dest="per_class", type=int, default=500)
    p.add_argument("--test-per-class", dest="test_per_class", type=int, default=100)
    p.add_argument("--channels", type=int, default=1)
    p.set_defaults(func=cmd_data_prepare)

    gan = top.add_parser("gan").add_subparsers(dest="sub", required=True)
    p = gan.add_parser("train")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--total-steps", dest="total_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--critic-steps", dest="critic_steps", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--progress-every", dest="progress_every", type=int, default=0)
    p.set_defaults(func=cmd_gan_train)

    clf = top.add_parser("clf").add_subparsers(dest="sub", required=True)
    p = clf.add_parser("train")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--arch", default="madry-cnn", choices=["madry-cnn", "resnet"])
    p.add_argument("--base-maps", dest="base_maps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--adversarial", action="store_true")
    p.set_defaults(func=cmd_clf_train)

    attack = top.add_parser("attack").add_subparsers(dest="sub", required=True)
    p = attack.add_parser("run")
    p.add_argument("--gan", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(ATTACK_PRESETS))
    p.add_argument("--config")
    p.add_argument("--source", type=int)
    p.add_argument("--target", type=int)
    p.add_argument("--all-pairs", dest="all_pairs", action="store_true")
    p.add_argument("--count", type=int, default=None,
                   help="replicates per cell (default: 100 targeted, 1000 untargeted)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attack_run)

    ev = top.add_parser("eval").add_subparsers(dest="sub", required=True)
    p = ev.add_parser("report")
    p.add_argument("--attacks", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--quorum", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--include-exhausted", dest="include_exhausted", action="store_true")
    p.set_defaults(func=cmd_eval_report)

    bound = top.add_parser("bound").add_subparsers(dest="sub", required=True)
    p = bound.add_parser("check")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--K", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--trials", type=int, default=0)
    p.add_argument("--sampler", default="uniform", choices=["uniform", "rademacher"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_bound_check)

    ann = top.add_parser("annotate").add_subparsers(dest="sub", required=True)
    p = ann.add_parser("serve")
    p.add_argument("--log", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--ui")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--quorum", type=int, default=5)
    p.add_argument("--page-size", dest="page_size", type=int, default=10)
    p.set_defaults(func=cmd_annotate_serve)

    grid = top.add_parser("grid").add_subparsers(dest="sub", required=True)
    p = grid.add_parser("export")
    p.add_argument("--attacks", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--arrange", default="sequential", choices=["sequential", "source-target"])
    p.add_argument("--annotate", default="prediction", choices=["prediction", "vote"])
    p.add_argument("--quorum", type=int, default=5)
    p.set_defaults(func=cmd_grid_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
