"""Checkpoint archives: a zip holding meta.json plus torch tensor payloads.

The JSON header is readable without torch; tensors round-trip bit-exactly.
Loading refuses archives whose format version does not match.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: Path, meta: dict, tensor_groups: dict[str, dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["groups"] = sorted(tensor_groups)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("meta.json", json.dumps(header, indent=2, sort_keys=True))
        for name, state in tensor_groups.items():
            buf = io.BytesIO()
            torch.save(state, buf)
            zf.writestr(f"{name}.pt", buf.getvalue())


def load_checkpoint(path: Path, expected_kind: str | None = None) -> tuple[dict, dict[str, dict]]:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} does not match supported {FORMAT_VERSION}"
            )
        if expected_kind is not None and meta.get("kind") != expected_kind:
            raise CheckpointError(f"expected a {expected_kind} checkpoint, found {meta.get('kind')!r}")
        groups = {}
        for name in meta["groups"]:
            buf = io.BytesIO(zf.read(f"{name}.pt"))
            groups[name] = torch.load(buf, weights_only=False)
    return meta, groups
