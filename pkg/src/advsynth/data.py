"""Dataset ingestion, validation, and synthetic desk-scale data generation.

Images live in a single canonical representation everywhere: float32 tensors
of shape (N, channels, H, W) with values in [0, 1]. Epsilon values quoted on
a [0, 255] scale are converted at the point of use, never here.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image

DATASET_NAMES = ("mnist", "svhn", "celeba-gender", "synthetic")

# CelebA: first 150000 attribute rows are the training split, the rest test.
CELEBA_TRAIN_SPLIT = 150_000


class DataError(Exception):
    """Base class for dataset problems."""


class MissingPartitionError(DataError):
    def __init__(self, partition: str, detail: str = ""):
        self.partition = partition
        super().__init__(f"partition '{partition}' unavailable" + (f": {detail}" if detail else ""))


class CorruptRecordError(DataError):
    def __init__(self, index: int, detail: str = ""):
        self.index = index
        super().__init__(f"corrupt record at index {index}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class DatasetSpec:
    """Description of a dataset: identity, label space, geometry, and splits."""

    name: str
    class_count: int
    channels: int
    resolution: tuple[int, int]
    splits: dict[str, int] = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ValueError(f"unknown dataset name {self.name!r}; expected one of {DATASET_NAMES}")
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if self.name == "celeba-gender" and self.class_count != 2:
            raise ValueError("celeba-gender is a binary task (class_count must be 2)")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        h, w = self.resolution
        if h < 1 or w < 1:
            raise ValueError("resolution must be positive")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, *self.resolution)


@dataclass
class ImageBatch:
    """Pixel tensor (N, C, H, W) in [0, 1] plus optional integer labels."""

    pixels: torch.Tensor
    labels: torch.Tensor | None = None

    def __post_init__(self):
        if not isinstance(self.pixels, torch.Tensor):
            self.pixels = torch.as_tensor(self.pixels, dtype=torch.float32)
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must have shape (N, C, H, W), got {tuple(self.pixels.shape)}")
        if not torch.isfinite(self.pixels).all():
            raise ValueError("pixels contain non-finite values")
        lo, hi = float(self.pixels.min()) if self.pixels.numel() else 0.0, float(self.pixels.max()) if self.pixels.numel() else 0.0
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")
        if self.labels is not None:
            if not isinstance(self.labels, torch.Tensor):
                self.labels = torch.as_tensor(self.labels, dtype=torch.long)
            self.labels = self.labels.long()
            if self.labels.dim() != 1 or len(self.labels) != len(self.pixels):
                raise ValueError("labels must be a vector with one entry per image")
            if self.labels.numel() and int(self.labels.min()) < 0:
                raise ValueError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def validate_labels(self, class_count: int) -> None:
        if self.labels is not None and self.labels.numel() and int(self.labels.max()) >= class_count:
            raise ValueError(f"label {int(self.labels.max())} outside [0, {class_count})")

    def subset(self, idx) -> "ImageBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return ImageBatch(self.pixels[idx], None if self.labels is None else self.labels[idx])


def concat_batches(batches: list[ImageBatch]) -> ImageBatch:
    pixels = torch.cat([b.pixels for b in batches])
    labels = None
    if all(b.labels is not None for b in batches):
        labels = torch.cat([b.labels for b in batches])
    return ImageBatch(pixels, labels)


# ---------------------------------------------------------------------------
# Serialization: a directory of PNGs plus a JSONL index, one object per line.
# Pixels are 8-bit on disk, so round-trips are exact for 8-bit-aligned values
# (everything this pipeline materializes is).

def quantize8(pixels: torch.Tensor) -> torch.Tensor:
    """Snap pixels to the 8-bit grid k/255 so PNG round-trips are bit-exact."""
    return torch.round(pixels.clamp(0.0, 1.0) * 255.0) / 255.0


def _to_pil(arr: np.ndarray) -> Image.Image:
    # arr: (C, H, W) float in [0,1]
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.shape[0] == 1:
        return Image.fromarray(u8[0], mode="L")
    if u8.shape[0] == 3:
        return Image.fromarray(np.transpose(u8, (1, 2, 0)), mode="RGB")
    raise ValueError(f"unsupported channel count {u8.shape[0]}")


def _from_pil(img: Image.Image, channels: int) -> np.ndarray:
    img = img.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if channels == 1:
        return arr[None, :, :]
    return np.transpose(arr, (2, 0, 1))


def save_image_batch(batch: ImageBatch, directory: Path, prefix: str = "img") -> Path:
    """Write PNG files plus index.jsonl; returns the index path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = directory / "index.jsonl"
    arr = batch.pixels.numpy()
    with open(index, "w") as fh:
        for i in range(len(batch)):
            name = f"{prefix}-{i:06d}.png"
            _to_pil(arr[i]).save(directory / name)
            label = None if batch.labels is None else int(batch.labels[i])
            fh.write(json.dumps({"id": f"{prefix}-{i:06d}", "label": label, "path": name}) + "\n")
    return index


def load_image_batch(directory: Path) -> ImageBatch:
    directory = Path(directory)
    index = directory / "index.jsonl"
    if not index.exists():
        raise MissingPartitionError(directory.name, f"no index at {index}")
    pixels, labels = [], []
    with open(index) as fh:
        for lineno, line in enumerate(fh):
            try:
                rec = json.loads(line)
                img = Image.open(directory / rec["path"])
            except Exception as exc:
                raise CorruptRecordError(lineno, str(exc)) from exc
            channels = 1 if img.mode == "L" else 3
            pixels.append(_from_pil(img, channels))
            labels.append(rec["label"])
    if any(l is None for l in labels):
        return ImageBatch(torch.from_numpy(np.stack(pixels)))
    return ImageBatch(torch.from_numpy(np.stack(pixels)), torch.tensor(labels))


# ---------------------------------------------------------------------------
# Synthetic dataset: class-dependent Gaussian blobs with positional jitter.
# Visually separable by construction, so a small classifier trains to ~1.0.

def _blob_image(rng: np.random.Generator, anchor, resolution, channels, color) -> np.ndarray:
    h, w = resolution
    size = min(h, w)
    cy = anchor[0] + rng.normal(0.0, 0.05 * size)
    cx = anchor[1] + rng.normal(0.0, 0.05 * size)
    sigma = size * rng.uniform(0.10, 0.16)
    amp = rng.uniform(0.75, 1.0)
    yy, xx = np.mgrid[0:h, 0:w]
    blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    noise = rng.uniform(0.0, 0.05, size=(h, w))
    img = np.stack([np.clip(color[c] * blob + noise, 0.0, 1.0) for c in range(channels)])
    return np.round(img * 255.0) / 255.0


def _class_anchors(class_count: int, resolution) -> list[tuple[float, float]]:
    h, w = resolution
    radius = 0.30 * (min(h, w) - 1)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    out = []
    for k in range(class_count):
        ang = 2.0 * np.pi * k / class_count + np.pi / 4.0
        out.append((cy + radius * np.sin(ang), cx + radius * np.cos(ang)))
    return out


_PALETTE = np.array(
    [[1.0, 0.4, 0.3], [0.3, 1.0, 0.4], [0.35, 0.45, 1.0], [1.0, 1.0, 0.3],
     [1.0, 0.4, 1.0], [0.4, 1.0, 1.0], [1.0, 0.7, 0.4], [0.6, 0.6, 1.0],
     [0.8, 1.0, 0.6], [1.0, 0.55, 0.7]]
)


def make_synthetic_dataset(
    root: Path,
    *,
    seed: int,
    class_count: int,
    resolution: tuple[int, int],
    per_class: int,
    test_per_class: int = 0,
    channels: int = 1,
) -> DatasetSpec:
    """Materialize a reproducible blob dataset under ``root``.

    Writes one PNG directory plus JSONL index per split and a dataset.json
    describing the result. Identical arguments produce identical bytes.
    """
    if class_count < 2:
        raise ValueError("class_count must be at least 2")
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    root = Path(root)
    rng = np.random.default_rng(seed)
    anchors = _class_anchors(class_count, resolution)
    colors = (
        np.ones((class_count, 1))
        if channels == 1
        else _PALETTE[np.arange(class_count) % len(_PALETTE), :channels]
    )

    splits: dict[str, int] = {}
    for split, count in (("train", per_class), ("test", test_per_class)):
        if count <= 0:
            continue
        images, labels = [], []
        for k in range(class_count):
            for _ in range(count):
                images.append(_blob_image(rng, anchors[k], resolution, channels, colors[k]))
                labels.append(k)
        batch = ImageBatch(torch.from_numpy(np.stack(images)).float(), torch.tensor(labels))
        save_image_batch(batch, root / split, prefix=split)
        splits[split] = len(batch)

    spec = DatasetSpec(
        name="synthetic",
        class_count=class_count,
        channels=channels,
        resolution=tuple(resolution),
        splits=splits,
        root=root,
    )
    with open(root / "dataset.json", "w") as fh:
        json.dump(
            {
                "name": spec.name,
                "class_count": spec.class_count,
                "channels": spec.channels,
                "resolution": list(spec.resolution),
                "splits": splits,
                "seed": seed,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    return spec


def load_dataset_spec(root: Path) -> DatasetSpec:
    root = Path(root)
    with open(root / "dataset.json") as fh:
        meta = json.load(fh)
    return DatasetSpec(
        name=meta["name"],
        class_count=meta["class_count"],
        channels=meta["channels"],
        resolution=tuple(meta["resolution"]),
        splits=meta["splits"],
        root=root,
    )


# ---------------------------------------------------------------------------
# Loaders. `partition="all"` concatenates every split in declared order,
# which is how GAN training consumes a dataset; classifier training reads
# the training partition only.

def load_dataset(
    spec: DatasetSpec,
    partition: str,
    *,
    batch_size: int = 256,
    shuffle_seed: int | None = None,
) -> Iterator[ImageBatch]:
    """Stream a partition as ImageBatch chunks in a deterministic order."""
    full = load_all(spec, partition)
    order = np.arange(len(full))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(full))
    for start in range(0, len(full), batch_size):
        yield full.subset(order[start : start + batch_size])


def load_all(spec: DatasetSpec, partition: str) -> ImageBatch:
    if partition == "all":
        parts = [load_all(spec, p) for p in spec.splits]
        if not parts:
            raise MissingPartitionError("all", "dataset declares no splits")
        return concat_batches(parts)
    if partition not in spec.splits:
        raise MissingPartitionError(partition, f"not one of {sorted(spec.splits)}")
    if spec.name == "synthetic":
        batch = load_image_batch(Path(spec.root) / partition)
    elif spec.name == "mnist":
        batch = _load_mnist(Path(spec.root), partition)
    elif spec.name == "svhn":
        batch = _load_svhn(Path(spec.root), partition)
    elif spec.name == "celeba-gender":
        batch = _load_celeba(Path(spec.root), partition, spec.resolution)
    else:  # pragma: no cover - DatasetSpec already validates the name
        raise DataError(f"no loader for {spec.name}")
    batch.validate_labels(spec.class_count)
    return batch


def _open_maybe_gz(path: Path):
    gz = path.with_name(path.name + ".gz")
    if path.exists():
        return open(path, "rb")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(path)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_idx(fh, expect_dims: int, partition: str) -> np.ndarray:
    header = fh.read(4)
    if len(header) < 4:
        raise CorruptRecordError(0, "truncated idx header")
    magic = struct.unpack(">I", header)[0]
    dims = magic & 0xFF
    if magic >> 8 != 0x08 or dims != expect_dims:
        raise CorruptRecordError(0, f"bad idx magic {magic:#x} in {partition}")
    shape = struct.unpack(">" + "I" * dims, fh.read(4 * dims))
    data = np.frombuffer(fh.read(), dtype=np.uint8)
    expected = int(np.prod(shape))
    if data.size != expected:
        per_record = max(1, expected // shape[0])
        raise CorruptRecordError(data.size // per_record, "truncated idx payload")
    return data.reshape(shape)


def _load_mnist(root: Path, partition: str) -> ImageBatch:
    if partition not in _MNIST_FILES:
        raise MissingPartitionError(partition)
    img_name, lbl_name = _MNIST_FILES[partition]
    try:
        with _open_maybe_gz(root / img_name) as fh:
            images = _read_idx(fh, 3, partition)
        with _open_maybe_gz(root / lbl_name) as fh:
            labels = _read_idx(fh, 1, partition)
    except FileNotFoundError as exc:
        raise MissingPartitionError(partition, f"missing file {exc.args[0]}") from exc
    pixels = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    return ImageBatch(pixels, torch.from_numpy(labels.astype(np.int64)))


def _load_svhn(root: Path, partition: str) -> ImageBatch:
    from scipy.io import loadmat

    path = root / f"{partition}_32x32.mat"
    if not path.exists():
        raise MissingPartitionError(partition, f"missing file {path}")
    mat = loadmat(path)
    x = mat["X"]  # (32, 32, 3, N)
    y = mat["y"].reshape(-1).astype(np.int64) % 10  # label 10 means digit 0
    pixels = torch.from_numpy(np.transpose(x, (3, 2, 0, 1)).astype(np.float32) / 255.0)
    return ImageBatch(pixels, torch.from_numpy(y))


def celeba_gender_labels(attr_path: Path) -> tuple[list[str], np.ndarray]:
    """Parse the CelebA attribute table into (filenames, gender labels).

    Label convention: 0 = female, 1 = male (Male attribute +1 maps to 1).
    """
    attr_path = Path(attr_path)
    with open(attr_path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[1].split()
    if "Male" not in header:
        raise DataError(f"attribute table lacks a 'Male' column (saw {header[:5]}...)")
    col = header.index("Male")
    names, labels = [], []
    for row in lines[2:]:
        parts = row.split()
        names.append(parts[0])
        labels.append(1 if int(parts[1 + col]) > 0 else 0)
    return names, np.asarray(labels, dtype=np.int64)


def _load_celeba(root: Path, partition: str, resolution) -> ImageBatch:
    attr = root / "list_attr_celeba.txt"
    if not attr.exists():
        raise MissingPartitionError(partition, f"missing attribute table {attr}")
    names, labels = celeba_gender_labels(attr)
    if partition == "train":
        names, labels = names[:CELEBA_TRAIN_SPLIT], labels[:CELEBA_TRAIN_SPLIT]
    elif partition == "test":
        names, labels = names[CELEBA_TRAIN_SPLIT:], labels[CELEBA_TRAIN_SPLIT:]
    else:
        raise MissingPartitionError(partition)
    img_dir = root / "img_align_celeba"
    pixels = []
    for i, name in enumerate(names):
        path = img_dir / name
        if not path.exists():
            raise MissingPartitionError(partition, f"missing image {path}")
        try:
            img = Image.open(path).convert("RGB")
        except Exception as exc:
            raise CorruptRecordError(i, str(exc)) from exc
        side = min(img.size)
        left = (img.width - side) // 2
        top = (img.height - side) // 2
        img = img.crop((left, top, left + side, top + side)).resize(
            (resolution[1], resolution[0]), Image.BILINEAR
        )
        pixels.append(np.transpose(np.asarray(img, dtype=np.float32) / 255.0, (2, 0, 1)))
    return ImageBatch(torch.from_numpy(np.stack(pixels)), torch.from_numpy(labels[: len(pixels)]))


def builtin_spec(name: str, root: Path) -> DatasetSpec:
    """Spec constants for the supported public datasets."""
    root = Path(root)
    if name == "mnist":
        return DatasetSpec("mnist", 10, 1, (28, 28), {"train": 60_000, "test": 10_000}, root)
    if name == "svhn":
        return DatasetSpec(
            "svhn", 10, 3, (32, 32), {"train": 73_257, "test": 26_032, "extra": 531_131}, root
        )
    if name == "celeba-gender":
        return DatasetSpec(
            "celeba-gender", 2, 3, (64, 64),
            {"train": CELEBA_TRAIN_SPLIT, "test": 202_599 - CELEBA_TRAIN_SPLIT}, root,
        )
    raise ValueError(f"no builtin spec for {name!r}")
