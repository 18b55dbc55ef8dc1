"""Latent-space search for unrestricted adversarial examples.

The attack minimizes L = L0 + lambda1*L1 + lambda2*L2 over a latent vector z
(and, when a noise budget is given, an auxiliary pixel variable tau) with
plain gradient descent, restarting from fresh anchors until the target
classifier is fooled or the restart budget runs out.

A discrete test-set adapter stands in for the generator to recover signed
perturbation attacks (FGSM/PGD) as a special case: freeze z, drop the
auxiliary term, and spend the whole budget on tau.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .data import ImageBatch, quantize8, _to_pil

SUCCESS = "success"
BUDGET_EXHAUSTED = "budget_exhausted"

UNTARGETED = None


@dataclass(frozen=True)
class AttackConfig:
    """Everything the search needs; `y_target=None` runs the untargeted variant."""

    y_source: int
    y_target: int | None
    lambda1: float = 0.0
    lambda2: float = 0.0
    epsilon: float = 0.1
    epsilon_attack: float = 0.0
    alpha: float = 0.1
    steps: int = 100
    max_restarts: int = 20
    seed: int = 0
    normalize_tau_grad: bool = True  # Algorithm behavior: tau's gradient is normalized,
    normalize_z_grad: bool = False   # z's is not
    freeze_z: bool = False
    tau_init: str = "normal"  # "normal" or "zeros"
    tau_saturation: float = 1.0
    confidence_floor: float = 1e-12

    def __post_init__(self):
        if self.y_source < 0:
            raise ValueError("y_source must be a class index")
        if self.y_target is not None and self.y_target == self.y_source:
            raise ValueError("targeted attacks need y_target != y_source")
        for name in ("lambda1", "lambda2", "epsilon", "epsilon_attack", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.max_restarts < 1:
            raise ValueError("max_restarts must be at least 1")
        if self.tau_init not in ("normal", "zeros"):
            raise ValueError("tau_init must be 'normal' or 'zeros'")
        if not 0 < self.confidence_floor < 1:
            raise ValueError("confidence_floor must be in (0, 1)")

    @property
    def targeted(self) -> bool:
        return self.y_target is not None

    def hash(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class LatentState:
    z: torch.Tensor
    z0: torch.Tensor
    tau: torch.Tensor | None = None  # present iff a noise budget is active


@dataclass
class AttackResult:
    image: torch.Tensor  # (C, H, W), values in [0, 1]
    z: torch.Tensor
    z0: torch.Tensor
    tau: torch.Tensor | None
    restarts_used: int
    trace: list[dict]
    prediction: int
    confidence: float
    status: str
    y_source: int
    y_target: int | None
    config_hash: str
    diagnostics: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Loss terms. Each accepts a single image (C, H, W); confidences are floored
# before the log so a zero-probability class cannot produce an infinity.

def _floored_log_conf(model, image: torch.Tensor, floor: float) -> torch.Tensor:
    logp = model.class_log_probs(image.unsqueeze(0))[0]
    return logp.clamp_min(math.log(floor))


def loss_l0(f, image: torch.Tensor, y_target: int, floor: float = 1e-12) -> torch.Tensor:
    """Classification term: -log f(y_target | image)."""
    return -_floored_log_conf(f, image, floor)[y_target]


def loss_l0_untargeted(f, image: torch.Tensor, y_source: int, floor: float = 1e-12) -> torch.Tensor:
    """Untargeted variant: -max over y != y_source of log f(y | image)."""
    logp = _floored_log_conf(f, image, floor)
    mask = torch.ones_like(logp, dtype=torch.bool)
    mask[y_source] = False
    return -logp[mask].max()


def loss_l1(z: torch.Tensor, z0: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Soft anchor constraint: mean over coordinates of max{|z_i - z0_i| - eps, 0}."""
    return ((z - z0).abs() - epsilon).clamp_min(0.0).mean()


def loss_l2(c_aux, image: torch.Tensor, y_source: int, floor: float = 1e-12) -> torch.Tensor:
    """Auxiliary-consistency term: -log c(y_source | image)."""
    return -_floored_log_conf(c_aux, image, floor)[y_source]


def noise_augment(image: torch.Tensor, tau: torch.Tensor, epsilon_attack: float) -> torch.Tensor:
    """Add the bounded trainable noise eps_attack * tanh(tau), clipped to [0, 1]."""
    if epsilon_attack == 0:
        return image
    return torch.clamp(image + epsilon_attack * torch.tanh(tau), 0.0, 1.0)


def synthesize(generator, state: LatentState, config: AttackConfig) -> torch.Tensor:
    image = generator.generate(state.z, config.y_source)
    if state.tau is None:
        return image
    return noise_augment(image, config.tau_saturation * state.tau, config.epsilon_attack)


def total_loss(
    state: LatentState, config: AttackConfig, generator, f, aux=None
) -> tuple[torch.Tensor, dict[str, float]]:
    """L = L0 + lambda1*L1 + lambda2*L2 on the (optionally noise-augmented) image.

    The auxiliary term is evaluated only when it carries weight; its component
    is reported as 0.0 otherwise.
    """
    image = synthesize(generator, state, config)
    if config.targeted:
        l0 = loss_l0(f, image, config.y_target, config.confidence_floor)
    else:
        l0 = loss_l0_untargeted(f, image, config.y_source, config.confidence_floor)
    if getattr(generator, "discrete", False):
        l1 = torch.zeros((), dtype=image.dtype)
    else:
        l1 = loss_l1(state.z, state.z0, config.epsilon)
    if config.lambda2 > 0 and aux is not None:
        l2 = loss_l2(aux, image, config.y_source, config.confidence_floor)
    else:
        l2 = torch.zeros((), dtype=image.dtype)
    total = l0 + config.lambda1 * l1 + config.lambda2 * l2
    parts = {
        "total": float(total.detach()), "l0": float(l0.detach()),
        "l1": float(l1.detach()), "l2": float(l2.detach()),
    }
    return total, parts


# ---------------------------------------------------------------------------
# Discrete generator over a test partition: the FGSM/PGD special case.

class TestSetGenerator:
    """g(z, y) is the z-th test image of class y; the latent is an index."""

    discrete = True

    def __init__(self, batch: ImageBatch, y: int):
        if batch.labels is None:
            raise ValueError("test-set adapter requires labels")
        mask = batch.labels == y
        if not bool(mask.any()):
            raise ValueError(f"no images of class {y} in the partition")
        self.images = batch.pixels[mask]
        self.y = int(y)
        self.image_shape = tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return len(self.images)

    def sample_latent(self, gen: torch.Generator) -> torch.Tensor:
        return torch.randint(0, len(self), (), generator=gen)

    def generate(self, z, y) -> torch.Tensor:
        if int(y) != self.y:
            raise ValueError(f"adapter holds class {self.y}, asked for {int(y)}")
        return self.images[int(z)]


def dataset_generator_adapter(batch: ImageBatch, y: int) -> TestSetGenerator:
    return TestSetGenerator(batch, y)


# ---------------------------------------------------------------------------
# The optimization loop.

def _image_shape(generator) -> tuple[int, ...]:
    if hasattr(generator, "image_shape"):
        return tuple(generator.image_shape)
    return (generator.channels, *generator.resolution)


def run_attack(config: AttackConfig, generator, f, aux=None) -> AttackResult:
    """Restart loop around T plain gradient-descent steps on (z, tau).

    Per iteration both gradients are taken at the same point; z moves by its
    raw gradient, tau by its normalized one. A restart whose loss goes
    non-finite is abandoned (recorded in diagnostics) and counts against the
    budget. Returns status `budget_exhausted` instead of raising when every
    restart fails the success predicate.
    """
    class_count = getattr(f, "class_count", None)
    if class_count is not None:
        top = max(config.y_source, config.y_target if config.targeted else 0)
        if top >= class_count:
            raise ValueError(f"class index {top} outside the classifier's {class_count} classes")
    discrete = getattr(generator, "discrete", False)
    use_noise = config.epsilon_attack > 0
    shape = _image_shape(generator)
    dtype = getattr(generator, "dtype", torch.float32)
    gen = torch.Generator().manual_seed(config.seed)

    diagnostics: list[dict] = []
    last: tuple | None = None
    for restart in range(config.max_restarts):
        # Sampling order is fixed: tau first, then the anchor z0.
        tau = None
        if use_noise:
            tau = (
                torch.randn(shape, generator=gen, dtype=dtype)
                if config.tau_init == "normal"
                else torch.zeros(shape, dtype=dtype)
            )
        if discrete:
            z0 = generator.sample_latent(gen)
        else:
            z0 = torch.randn(generator.latent_dim, generator=gen, dtype=dtype)
        z = z0.clone()
        freeze_z = config.freeze_z or discrete

        trace: list[dict] = []
        bad = False
        for _ in range(config.steps):
            leaves = []
            z_leaf = z.detach()
            if not freeze_z:
                z_leaf = z_leaf.requires_grad_(True)
                leaves.append(z_leaf)
            tau_leaf = None
            if use_noise:
                tau_leaf = tau.detach().requires_grad_(True)
                leaves.append(tau_leaf)
            state = LatentState(z_leaf, z0, tau_leaf)
            total, parts = total_loss(state, config, generator, f, aux)
            if not math.isfinite(parts["total"]):
                diagnostics.append({"restart": restart, **parts})
                bad = True
                break
            trace.append(parts)
            if not leaves:
                continue
            grads = torch.autograd.grad(total, leaves, allow_unused=True)
            grads = [torch.zeros_like(l) if g is None else g for l, g in zip(leaves, grads)]
            i = 0
            if not freeze_z:
                gz = grads[i]
                i += 1
                if config.normalize_z_grad:
                    norm = gz.norm()
                    gz = gz / norm if float(norm) > 0 else gz
                z = (z_leaf - config.alpha * gz).detach()
            if use_noise:
                gt = grads[i]
                norm = gt.norm()
                if config.normalize_tau_grad:
                    if float(norm) > 0:
                        tau = (tau_leaf - config.alpha * gt / norm).detach()
                else:
                    tau = (tau_leaf - config.alpha * gt).detach()
        if bad:
            continue

        with torch.no_grad():
            state = LatentState(z, z0, tau)
            image = synthesize(generator, state, config)
            probs = f.class_probs(image.unsqueeze(0))[0]
        prediction = int(probs.argmax())
        confidence = float(probs[prediction])
        fooled = prediction == config.y_target if config.targeted else prediction != config.y_source
        last = (image, z, z0, tau, trace, prediction, confidence)
        if fooled:
            return AttackResult(
                image=image, z=z, z0=z0, tau=tau, restarts_used=restart + 1,
                trace=trace, prediction=prediction, confidence=confidence,
                status=SUCCESS, y_source=config.y_source, y_target=config.y_target,
                config_hash=config.hash(), diagnostics=diagnostics,
            )

    if last is None:
        # every restart diverged; synthesize the anchor so callers still get an image
        with torch.no_grad():
            z0 = generator.sample_latent(gen) if discrete else torch.randn(generator.latent_dim, generator=gen, dtype=dtype)
            tau = torch.zeros(shape, dtype=dtype) if use_noise else None
            image = synthesize(generator, LatentState(z0, z0, tau), config)
            probs = f.class_probs(image.unsqueeze(0))[0]
        last = (image, z0.clone(), z0, tau, [], int(probs.argmax()), float(probs.max()))
    image, z, z0, tau, trace, prediction, confidence = last
    return AttackResult(
        image=image, z=z, z0=z0, tau=tau, restarts_used=config.max_restarts,
        trace=trace, prediction=prediction, confidence=confidence,
        status=BUDGET_EXHAUSTED, y_source=config.y_source, y_target=config.y_target,
        config_hash=config.hash(), diagnostics=diagnostics,
    )


def derive_seed(seed: int, index: int) -> int:
    """Stable per-task seed for parallel maps; independent of worker count."""
    digest = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") % (2**63)


def expand_tasks(
    base: AttackConfig,
    pairs: list[tuple[int, int | None]],
    replicates: int,
    seed: int,
) -> list[AttackConfig]:
    configs = []
    for index, ((src, tgt), _) in enumerate(
        (pair, rep) for pair in pairs for rep in range(replicates)
    ):
        configs.append(replace(base, y_source=src, y_target=tgt, seed=derive_seed(seed, index)))
    return configs


def attack_many(
    configs: list[AttackConfig], generator, f, aux=None, workers: int = 1
) -> list[AttackResult]:
    """Independent attacks over frozen models; results in input order."""
    if workers <= 1:
        return [run_attack(c, generator, f, aux) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: run_attack(c, generator, f, aux), configs))


# ---------------------------------------------------------------------------
# On-disk interchange: PNG per image plus a JSONL manifest.

def export_attack_results(results: list[AttackResult], directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "results.jsonl"
    with open(manifest, "w") as fh:
        for i, r in enumerate(results):
            rid = f"atk-{i:06d}"
            _to_pil(quantize8(r.image).numpy()).save(directory / f"{rid}.png")
            fh.write(
                json.dumps(
                    {
                        "id": rid,
                        "y_source": r.y_source,
                        "y_target": r.y_target,
                        "prediction": r.prediction,
                        "confidence": r.confidence,
                        "restarts": r.restarts_used,
                        "status": r.status,
                        "config_hash": r.config_hash,
                    }
                )
                + "\n"
            )
    return manifest


def load_attack_manifest(directory: Path) -> list[dict]:
    with open(Path(directory) / "results.jsonl") as fh:
        return [json.loads(line) for line in fh]
