"""Target classifiers, perturbation baselines (FGSM/PGD), and training.

Every classifier exposes the same surface: `class_probs` / `class_log_probs`
(differentiable) and `predict`. External checkpoints are wrapped behind the
same contract so attacks and evaluations do not care where a model came from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetSpec, ImageBatch, load_all

ARCHITECTURES = ("madry-cnn", "resnet", "external")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite training loss {loss} at step {step}")


@dataclass
class ClassifierSpec:
    architecture: str
    class_count: int
    input_shape: tuple[int, int, int]  # (channels, H, W)
    base_maps: int | None = None  # resnet only; defaults to 4 (1-channel) / 16
    training: str = "standard"  # or "adversarial"
    checkpoint: Path | None = None  # external only

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.training not in ("standard", "adversarial"):
            raise ValueError(f"unknown training regime {self.training!r}")
        if self.architecture == "external" and self.checkpoint is None:
            raise ValueError("external classifiers require a checkpoint path")
        if self.architecture == "resnet" and self.base_maps is None:
            self.base_maps = 4 if self.input_shape[0] == 1 else 16


class MadryCnn(nn.Module):
    """Two 5x5 conv + pool blocks into a 1024-wide dense layer."""

    def __init__(self, channels: int, height: int, width: int, class_count: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, 32, 5, padding=2)
        self.conv2 = nn.Conv2d(32, 64, 5, padding=2)
        h, w = height // 4, width // 4
        self.fc1 = nn.Linear(64 * h * w, 1024)
        self.fc2 = nn.Linear(1024, class_count)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = x.flatten(1)
        return self.fc2(F.relu(self.fc1(x)))


class _PreActResidual(nn.Module):
    def __init__(self, maps: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(maps)
        self.conv1 = nn.Conv2d(maps, maps, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(maps)
        self.conv2 = nn.Conv2d(maps, maps, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.leaky_relu(self.bn1(x), 0.1))
        h = self.conv2(F.leaky_relu(self.bn2(h), 0.1))
        return x + h


class _ResizeBlock(nn.Module):
    """Downsample by 2 and double the maps; shortcut avg-pools and zero-pads channels."""

    def __init__(self, in_maps: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_maps)
        self.conv1 = nn.Conv2d(in_maps, 2 * in_maps, 3, stride=2, padding=1)
        self.bn2 = nn.BatchNorm2d(2 * in_maps)
        self.conv2 = nn.Conv2d(2 * in_maps, 2 * in_maps, 3, padding=1)
        self.in_maps = in_maps

    def forward(self, x):
        h = self.conv1(F.leaky_relu(self.bn1(x), 0.1))
        h = self.conv2(F.leaky_relu(self.bn2(h), 0.1))
        short = F.avg_pool2d(x, 2, ceil_mode=True)
        short = F.pad(short, (0, 0, 0, 0, 0, self.in_maps))
        return h + short


class ResNetClassifier(nn.Module):
    """Residual stacks of x10 / x9 / x9 blocks with two resize blocks between."""

    def __init__(self, channels: int, class_count: int, base_maps: int = 16):
        super().__init__()
        m = base_maps
        self.initial = nn.Conv2d(channels, m, 3, padding=1)
        self.stack1 = nn.Sequential(*[_PreActResidual(m) for _ in range(10)])
        self.resize1 = _ResizeBlock(m)
        self.stack2 = nn.Sequential(*[_PreActResidual(2 * m) for _ in range(9)])
        self.resize2 = _ResizeBlock(2 * m)
        self.stack3 = nn.Sequential(*[_PreActResidual(4 * m) for _ in range(9)])
        self.final_bn = nn.BatchNorm2d(4 * m)
        self.dense = nn.Linear(4 * m, class_count)

    def forward(self, x):
        x = self.initial(x)
        x = self.resize1(self.stack1(x))
        x = self.resize2(self.stack2(x))
        x = self.stack3(x)
        x = F.leaky_relu(self.final_bn(x), 0.1)
        x = x.mean(dim=(2, 3))
        return self.dense(x)


def _build_model(spec: ClassifierSpec) -> nn.Module:
    c, h, w = spec.input_shape
    if spec.architecture == "madry-cnn":
        return MadryCnn(c, h, w, spec.class_count)
    if spec.architecture == "resnet":
        return ResNetClassifier(c, spec.class_count, spec.base_maps)
    raise ValueError(f"cannot build architecture {spec.architecture!r}")


class Classifier:
    """A frozen model plus its spec; prediction surface used everywhere else."""

    def __init__(self, model: nn.Module, spec: ClassifierSpec, test_accuracy: float | None = None):
        self.model = model
        self.spec = spec
        self.test_accuracy = test_accuracy
        self.model.eval()

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def class_log_probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.model(x), dim=-1)

    def class_probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.model(x), dim=-1)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.model(x).argmax(dim=-1)

    def save(self, path: Path) -> None:
        from .checkpoint import save_checkpoint

        meta = {
            "kind": "classifier",
            "architecture": self.spec.architecture,
            "class_count": self.spec.class_count,
            "input_shape": list(self.spec.input_shape),
            "base_maps": self.spec.base_maps,
            "training": self.spec.training,
            "test_accuracy": self.test_accuracy,
        }
        save_checkpoint(path, meta, {"model": self.model.state_dict()})

    @classmethod
    def load(cls, path: Path) -> "Classifier":
        from .checkpoint import load_checkpoint

        meta, tensors = load_checkpoint(path, expected_kind="classifier")
        spec = ClassifierSpec(
            architecture=meta["architecture"],
            class_count=meta["class_count"],
            input_shape=tuple(meta["input_shape"]),
            base_maps=meta["base_maps"],
            training=meta["training"],
        )
        model = _build_model(spec)
        model.load_state_dict(tensors["model"])
        return cls(model, spec, meta.get("test_accuracy"))


class ExternalClassifier:
    """Adapter contract for third-party models: callable (N,C,H,W) -> probabilities.

    `probe` optionally verifies the wrapped runtime against recorded golden
    outputs before the model is used.
    """

    def __init__(self, fn, class_count: int, input_shape: tuple[int, int, int], name: str = "external"):
        self.fn = fn
        self.spec = ClassifierSpec("external", class_count, input_shape, checkpoint=Path("<callable>"))
        self.name = name

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def class_probs(self, x: torch.Tensor) -> torch.Tensor:
        probs = self.fn(x)
        if not isinstance(probs, torch.Tensor):
            probs = torch.as_tensor(np.asarray(probs), dtype=torch.float32)
        return probs

    def class_log_probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.log(self.class_probs(x).clamp_min(1e-30))

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.class_probs(x).argmax(dim=-1)

    def probe(self, inputs: torch.Tensor, golden: torch.Tensor, atol: float = 1e-5) -> None:
        got = self.class_probs(inputs)
        if not torch.allclose(got, golden, atol=atol):
            worst = float((got - golden).abs().max())
            raise ValueError(f"external model disagrees with golden outputs (max abs err {worst})")


# ---------------------------------------------------------------------------
# Attacks used as baselines and inside adversarial training.

def _nll_grad(f, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    logp = f.class_log_probs(x)
    loss = F.nll_loss(logp, y)
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def fgsm(f, x: torch.Tensor, y_true: torch.Tensor, epsilon: float) -> torch.Tensor:
    """One signed-gradient step away from the true class, clipped to [0,1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon == 0:
        return x.clone()
    grad = _nll_grad(f, x, y_true)
    return torch.clamp(x + epsilon * grad.sign(), 0.0, 1.0)


def pgd(
    f,
    x: torch.Tensor,
    y: torch.Tensor,
    epsilon: float,
    steps: int,
    step_size: float,
    *,
    targeted: bool = False,
    random_start: bool = True,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Iterated signed-gradient steps projected onto the l-inf ball and [0,1].

    Untargeted mode ascends the true-class loss; targeted mode descends the
    target-class loss. Random start inside the ball is on by default.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    delta = torch.zeros_like(x)
    if random_start and epsilon > 0:
        delta = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * epsilon
        delta = torch.clamp(x + delta, 0.0, 1.0) - x
    for _ in range(steps):
        grad = _nll_grad(f, x + delta, y)
        direction = -grad.sign() if targeted else grad.sign()
        delta = torch.clamp(delta + step_size * direction, -epsilon, epsilon)
        delta = torch.clamp(x + delta, 0.0, 1.0) - x
    return x + delta


def adversarial_train_schedule(rng: np.random.Generator) -> tuple[float, int]:
    """Draw one (epsilon, iterations) pair on the [0, 255] pixel scale.

    epsilon = |N(0, 8)| truncated to [0, 16]; iterations = floor(min(eps+4, 1.25*eps)).
    """
    eps = min(abs(rng.normal(0.0, 8.0)), 16.0)
    iters = int(math.floor(min(eps + 4.0, 1.25 * eps)))
    return eps, iters


def accuracy(f, batch: ImageBatch) -> float:
    if batch.labels is None:
        raise ValueError("accuracy requires labels")
    if len(batch) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    preds = f.predict(batch.pixels)
    return int((preds == batch.labels).sum()) / len(batch)


# ---------------------------------------------------------------------------
# Training.

@dataclass
class ClfTrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    adversarial: bool = False
    pgd_step_255: float = 1.0  # per-iteration step on the [0,255] scale
    log_every: int = 0


def build_and_train(
    spec: ClassifierSpec,
    dataset: DatasetSpec,
    config: ClfTrainConfig = ClfTrainConfig(),
) -> Classifier:
    """Train `spec` on the dataset's training partition; deterministic per seed.

    Held-out accuracy is measured on the test partition when one exists and
    stored on the returned classifier. Non-finite losses abort with the step
    index. Adversarial mode replaces each batch with PGD examples drawn from
    the randomized epsilon schedule.
    """
    train = load_all(dataset, "train")
    train.validate_labels(spec.class_count)
    torch.manual_seed(config.seed)
    model = _build_model(spec)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    order_gen = torch.Generator().manual_seed(config.seed + 1)
    sched_rng = np.random.default_rng(config.seed + 2)
    attack_gen = torch.Generator().manual_seed(config.seed + 3)

    n = len(train)
    step = 0
    for _ in range(config.epochs):
        perm = torch.randperm(n, generator=order_gen)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            x, y = train.pixels[idx], train.labels[idx]
            if config.adversarial:
                eps255, iters = adversarial_train_schedule(sched_rng)
                if iters >= 1:
                    model.eval()
                    holder = Classifier(model, spec)
                    x = pgd(
                        holder, x, y, eps255 / 255.0, iters, config.pgd_step_255 / 255.0,
                        generator=attack_gen,
                    )
            model.train()
            opt.zero_grad()
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(step, float(loss))
            loss.backward()
            opt.step()
            step += 1

    model.eval()
    clf = Classifier(model, spec)
    if "test" in dataset.splits:
        clf.test_accuracy = accuracy(clf, load_all(dataset, "test"))
    return clf
