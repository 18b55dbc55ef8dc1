"""Conditional GAN with a critic trained under a gradient penalty plus an
auxiliary classification head; the legitimate-image model the attack searches.

The generator maps (z, class embedding) through residual upsampling blocks and
squashes into [0, 1]. The critic is norm-free (the per-sample gradient penalty
forbids batch statistics) and, by default, shares its trunk with the auxiliary
classifier.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSpec, ImageBatch, load_all


class DivergenceError(RuntimeError):
    def __init__(self, message: str, components: dict):
        self.components = components
        super().__init__(f"{message}: {components}")


def _seed_geometry(resolution: tuple[int, int]) -> tuple[int, int, int]:
    """Pick the seed spatial size and the number of x2 upsampling blocks.

    28x28 seeds at 7x7 with two blocks (one fewer than the 32x32 template's
    three); 64x64 uses four.
    """
    h, w = resolution
    n_up = 0
    while h % 2 == 0 and w % 2 == 0 and h > 4 and w > 4:
        h //= 2
        w //= 2
        n_up += 1
    if n_up == 0:
        raise ValueError(f"resolution {resolution} is not divisible for upsampling")
    return h, w, n_up


class _GenBlock(nn.Module):
    """Pre-activation residual block with nearest-neighbor x2 upsampling."""

    def __init__(self, channels: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = F.interpolate(F.relu(self.bn1(x)), scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h)))
        return F.interpolate(x, scale_factor=2, mode="nearest") + h


class ConditionalGenerator(nn.Module):
    def __init__(
        self,
        latent_dim: int,
        class_count: int,
        channels: int,
        resolution: tuple[int, int],
        base_channels: int = 64,
        embed_dim: int = 8,
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.class_count = class_count
        h0, w0, n_up = _seed_geometry(resolution)
        self.seed_shape = (base_channels, h0, w0)
        self.embed = nn.Embedding(class_count, embed_dim)
        self.fc = nn.Linear(latent_dim + embed_dim, base_channels * h0 * w0)
        self.up_blocks = nn.ModuleList(_GenBlock(base_channels) for _ in range(n_up))
        self.out_bn = nn.BatchNorm2d(base_channels)
        self.out_conv = nn.Conv2d(base_channels, channels, 3, padding=1)

    def forward(self, z, y):
        v = torch.cat([z, self.embed(y)], dim=-1)
        x = self.fc(v).view(-1, *self.seed_shape)
        for block in self.up_blocks:
            x = block(x)
        x = self.out_conv(F.relu(self.out_bn(x)))
        return (torch.tanh(x) + 1.0) / 2.0


class _DownBlock(nn.Module):
    """Norm-free residual block, optionally average-pooling by 2."""

    def __init__(self, in_ch: int, out_ch: int, down: bool = True, pre_act: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.short = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None
        self.down = down
        self.pre_act = pre_act

    def forward(self, x):
        h = F.relu(x) if self.pre_act else x
        h = self.conv2(F.relu(self.conv1(h)))
        s = x if self.short is None else self.short(x)
        if self.down:
            h = F.avg_pool2d(h, 2)
            s = F.avg_pool2d(s, 2)
        return s + h


class Critic(nn.Module):
    """Critic score d(x) plus auxiliary class logits c(x), shared trunk by default."""

    def __init__(
        self,
        channels: int,
        class_count: int,
        resolution: tuple[int, int],
        base_channels: int = 64,
        shared_aux_trunk: bool = True,
    ):
        super().__init__()
        _, _, n_down = _seed_geometry(resolution)
        self.shared_aux_trunk = shared_aux_trunk

        def make_trunk():
            blocks = [_DownBlock(channels, base_channels, down=True, pre_act=False)]
            blocks += [_DownBlock(base_channels, base_channels, down=True) for _ in range(n_down - 1)]
            blocks += [_DownBlock(base_channels, base_channels, down=False)]
            return nn.Sequential(*blocks)

        self.trunk = make_trunk()
        self.score_head = nn.Linear(base_channels, 1)
        self.aux_trunk = None if shared_aux_trunk else make_trunk()
        self.aux_head = nn.Linear(base_channels, class_count)

    def _features(self, x, trunk):
        return F.relu(trunk(x)).mean(dim=(2, 3))

    def score(self, x) -> torch.Tensor:
        return self.score_head(self._features(x, self.trunk)).squeeze(-1)

    def aux_logits(self, x) -> torch.Tensor:
        trunk = self.trunk if self.aux_trunk is None else self.aux_trunk
        return self.aux_head(self._features(x, trunk))


class AuxView:
    """Expose the auxiliary head through the common classifier surface."""

    def __init__(self, bundle: "GanBundle"):
        self._bundle = bundle

    @property
    def class_count(self) -> int:
        return self._bundle.class_count

    def class_log_probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self._bundle.critic.aux_logits(x), dim=-1)

    def class_probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self._bundle.critic.aux_logits(x), dim=-1)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self._bundle.critic.aux_logits(x).argmax(dim=-1)


@dataclass
class GanBundle:
    generator: ConditionalGenerator
    critic: Critic
    latent_dim: int
    class_count: int
    channels: int
    resolution: tuple[int, int]
    base_channels: int = 64
    embed_dim: int = 8
    shared_aux_trunk: bool = True
    step: int = 0
    config_hash: str = ""

    @property
    def aux(self) -> AuxView:
        return AuxView(self)

    def generate(self, z: torch.Tensor, y) -> torch.Tensor:
        """Deterministic synthesis; differentiable in z. Accepts single or batched z."""
        single = z.dim() == 1
        if single:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent vector length {z.shape[-1]} != {self.latent_dim}")
        y = torch.as_tensor(y, dtype=torch.long)
        if y.dim() == 0:
            y = y.expand(z.shape[0])
        if y.numel() and (int(y.min()) < 0 or int(y.max()) >= self.class_count):
            raise ValueError("class index out of range")
        was_training = self.generator.training
        self.generator.eval()
        try:
            out = self.generator(z, y)
        finally:
            self.generator.train(was_training)
        return out[0] if single else out

    def sample(self, n: int, y, generator: torch.Generator | None = None) -> torch.Tensor:
        z = torch.randn(n, self.latent_dim, generator=generator)
        with torch.no_grad():
            return self.generate(z, y)

    def save(self, path: Path, extra_groups: dict | None = None, extra_meta: dict | None = None):
        meta = {
            "kind": "acgan",
            "latent_dim": self.latent_dim,
            "class_count": self.class_count,
            "channels": self.channels,
            "resolution": list(self.resolution),
            "base_channels": self.base_channels,
            "embed_dim": self.embed_dim,
            "shared_aux_trunk": self.shared_aux_trunk,
            "step": self.step,
            "config_hash": self.config_hash,
        }
        if extra_meta:
            meta.update(extra_meta)
        groups = {"generator": self.generator.state_dict(), "critic": self.critic.state_dict()}
        if extra_groups:
            groups.update(extra_groups)
        save_checkpoint(path, meta, groups)

    @classmethod
    def load(cls, path: Path) -> "GanBundle":
        meta, groups = load_checkpoint(path, expected_kind="acgan")
        bundle = cls._from_meta(meta)
        bundle.generator.load_state_dict(groups["generator"])
        bundle.critic.load_state_dict(groups["critic"])
        bundle.generator.eval()
        bundle.critic.eval()
        return bundle

    @classmethod
    def _from_meta(cls, meta: dict) -> "GanBundle":
        resolution = tuple(meta["resolution"])
        gen = ConditionalGenerator(
            meta["latent_dim"], meta["class_count"], meta["channels"], resolution,
            meta["base_channels"], meta["embed_dim"],
        )
        critic = Critic(
            meta["channels"], meta["class_count"], resolution,
            meta["base_channels"], meta["shared_aux_trunk"],
        )
        return cls(
            generator=gen, critic=critic,
            latent_dim=meta["latent_dim"], class_count=meta["class_count"],
            channels=meta["channels"], resolution=resolution,
            base_channels=meta["base_channels"], embed_dim=meta["embed_dim"],
            shared_aux_trunk=meta["shared_aux_trunk"], step=meta["step"],
            config_hash=meta["config_hash"],
        )


# ---------------------------------------------------------------------------
# Objectives.

def gradient_penalty(
    critic_score,
    real: torch.Tensor,
    fake: torch.Tensor,
    *,
    coeffs: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean squared deviation of the critic's gradient norm from 1 on
    per-pair uniform interpolations between real and fake samples."""
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    if real.shape[0] < 1:
        raise ValueError("need at least one (real, fake) pair")
    n = real.shape[0]
    if coeffs is None:
        coeffs = torch.rand(n, generator=generator, dtype=real.dtype)
    coeffs = coeffs.view(n, *([1] * (real.dim() - 1)))
    mixed = (coeffs * real + (1.0 - coeffs) * fake).detach().requires_grad_(True)
    scores = critic_score(mixed)
    (grads,) = torch.autograd.grad(scores.sum(), mixed, create_graph=True)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def discriminator_step_loss(
    bundle: GanBundle,
    real: torch.Tensor,
    real_labels: torch.Tensor,
    z: torch.Tensor,
    y: torch.Tensor,
    lambda_gp: float,
    *,
    gp_coeffs: torch.Tensor | None = None,
    gp_generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Critic-side objective: E[d(g(z,y))] - E[d(x)] - E[log c(y|x)] + lambda * penalty."""
    if real.shape[0] != real_labels.shape[0]:
        raise ValueError("labels must match the real batch")
    with torch.no_grad():
        fake = bundle.generator(z, y)
    wass = bundle.critic.score(fake).mean() - bundle.critic.score(real).mean()
    logp = F.log_softmax(bundle.critic.aux_logits(real), dim=-1)
    aux = -logp[torch.arange(real.shape[0]), real_labels].mean()
    gp = gradient_penalty(bundle.critic.score, real, fake, coeffs=gp_coeffs, generator=gp_generator)
    total = wass + aux + lambda_gp * gp
    parts = {
        "wasserstein": float(wass.detach()),
        "aux": float(aux.detach()),
        "gradient_penalty": float(gp.detach()),
        "lambda_gp": float(lambda_gp),
        "total": float(total.detach()),
    }
    if not torch.isfinite(total):
        raise DivergenceError("non-finite critic loss", parts)
    return total, parts


def generator_step_loss(
    bundle: GanBundle, z: torch.Tensor, y: torch.Tensor
) -> tuple[torch.Tensor, dict[str, float]]:
    """Generator-side objective: -E[d(g(z,y)) + log c(y|g(z,y))]."""
    fake = bundle.generator(z, y)
    adv = -bundle.critic.score(fake).mean()
    logp = F.log_softmax(bundle.critic.aux_logits(fake), dim=-1)
    aux = -logp[torch.arange(z.shape[0]), y].mean()
    total = adv + aux
    parts = {"adversarial": float(adv.detach()), "aux": float(aux.detach()), "total": float(total.detach())}
    if not torch.isfinite(total):
        raise DivergenceError("non-finite generator loss", parts)
    return total, parts


# ---------------------------------------------------------------------------
# Training.

@dataclass(frozen=True)
class GanTrainConfig:
    latent_dim: int = 32
    base_channels: int = 48
    embed_dim: int = 8
    shared_aux_trunk: bool = True
    lambda_gp: float = 10.0
    critic_steps: int = 5
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    total_steps: int = 1000
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (interpolation needs pairs)")
        if self.critic_steps < 1 or self.total_steps < 0:
            raise ValueError("step counts must be positive")

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    bundle: GanBundle
    curves: dict[str, list[float]] = field(default_factory=dict)


def _make_optimizers(bundle: GanBundle, config: GanTrainConfig):
    opt_g = torch.optim.Adam(bundle.generator.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(bundle.critic.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    return opt_g, opt_d


def new_bundle(config: GanTrainConfig, data_spec: DatasetSpec) -> GanBundle:
    torch.manual_seed(config.seed)
    gen = ConditionalGenerator(
        config.latent_dim, data_spec.class_count, data_spec.channels, data_spec.resolution,
        config.base_channels, config.embed_dim,
    )
    critic = Critic(
        data_spec.channels, data_spec.class_count, data_spec.resolution,
        config.base_channels, config.shared_aux_trunk,
    )
    return GanBundle(
        generator=gen, critic=critic,
        latent_dim=config.latent_dim, class_count=data_spec.class_count,
        channels=data_spec.channels, resolution=tuple(data_spec.resolution),
        base_channels=config.base_channels, embed_dim=config.embed_dim,
        shared_aux_trunk=config.shared_aux_trunk, step=0, config_hash=config.hash(),
    )


def train_acgan(
    config: GanTrainConfig,
    dataset: DatasetSpec | ImageBatch,
    *,
    checkpoint_dir: Path | None = None,
    resume_from: Path | None = None,
    progress_every: int = 0,
) -> TrainResult:
    """Alternate critic and generator updates for `total_steps` generator steps.

    All randomness (batch indices, latents, labels, interpolation coefficients)
    is drawn from one explicit torch.Generator whose state rides along in
    checkpoints, so a resumed run replays the exact RNG stream of an
    uninterrupted one. GAN training consumes every partition of the dataset.
    """
    if isinstance(dataset, DatasetSpec):
        data = load_all(dataset, "all")
        data_spec = dataset
    else:
        data = dataset
        if data.labels is None:
            raise ValueError("GAN training requires labels")
        data_spec = DatasetSpec(
            "synthetic", int(data.labels.max()) + 1, data.pixels.shape[1],
            tuple(data.pixels.shape[2:]), {"train": len(data)},
        )
    n = len(data)
    if n < config.batch_size:
        raise ValueError(f"dataset of {n} images is smaller than one batch")

    curves: dict[str, list[float]] = {k: [] for k in (
        "critic_total", "wasserstein", "gradient_penalty", "critic_aux",
        "generator_total", "generator_adv", "generator_aux",
    )}
    if resume_from is not None:
        meta, groups = load_checkpoint(resume_from, expected_kind="acgan")
        bundle = GanBundle._from_meta(meta)
        bundle.generator.load_state_dict(groups["generator"])
        bundle.critic.load_state_dict(groups["critic"])
        opt_g, opt_d = _make_optimizers(bundle, config)
        opt_g.load_state_dict(groups["train_state"]["opt_g"])
        opt_d.load_state_dict(groups["train_state"]["opt_d"])
        rng = torch.Generator()
        rng.set_state(groups["train_state"]["rng"])
        curves = groups["train_state"]["curves"]
        start_step = bundle.step
    else:
        bundle = new_bundle(config, data_spec)
        opt_g, opt_d = _make_optimizers(bundle, config)
        rng = torch.Generator().manual_seed(config.seed)
        start_step = 0

    bundle.generator.train()
    bundle.critic.train()
    K = bundle.class_count

    def save(path: Path):
        train_state = {
            "opt_g": opt_g.state_dict(),
            "opt_d": opt_d.state_dict(),
            "rng": rng.get_state(),
            "curves": curves,
        }
        bundle.save(path, extra_groups={"train_state": train_state})

    for step in range(start_step, config.total_steps):
        for _ in range(config.critic_steps):
            idx = torch.randint(0, n, (config.batch_size,), generator=rng)
            real, labels = data.pixels[idx], data.labels[idx]
            z = torch.randn(config.batch_size, config.latent_dim, generator=rng)
            y = torch.randint(0, K, (config.batch_size,), generator=rng)
            gp_coeffs = torch.rand(config.batch_size, generator=rng)
            opt_d.zero_grad()
            d_loss, d_parts = discriminator_step_loss(
                bundle, real, labels, z, y, config.lambda_gp, gp_coeffs=gp_coeffs
            )
            d_loss.backward()
            opt_d.step()

        z = torch.randn(config.batch_size, config.latent_dim, generator=rng)
        y = torch.randint(0, K, (config.batch_size,), generator=rng)
        opt_g.zero_grad()
        g_loss, g_parts = generator_step_loss(bundle, z, y)
        g_loss.backward()
        opt_g.step()

        bundle.step = step + 1
        curves["critic_total"].append(d_parts["total"])
        curves["wasserstein"].append(d_parts["wasserstein"])
        curves["gradient_penalty"].append(d_parts["gradient_penalty"])
        curves["critic_aux"].append(d_parts["aux"])
        curves["generator_total"].append(g_parts["total"])
        curves["generator_adv"].append(g_parts["adversarial"])
        curves["generator_aux"].append(g_parts["aux"])

        if progress_every and (step + 1) % progress_every == 0:
            print(
                f"step {step + 1}/{config.total_steps} "
                f"d={d_parts['total']:+.3f} g={g_parts['total']:+.3f} "
                f"gp={d_parts['gradient_penalty']:.3f}"
            )
        if checkpoint_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save(Path(checkpoint_dir) / f"step-{step + 1:06d}.ckpt")

    bundle.generator.eval()
    bundle.critic.eval()
    if checkpoint_dir is not None:
        save(Path(checkpoint_dir) / "final.ckpt")
    return TrainResult(bundle, curves)


def aux_agreement(bundle: GanBundle, samples: int = 512, seed: int = 0) -> float:
    """Fraction of fresh conditional samples whose auxiliary prediction matches
    the conditioning label."""
    gen = torch.Generator().manual_seed(seed)
    y = torch.randint(0, bundle.class_count, (samples,), generator=gen)
    with torch.no_grad():
        imgs = bundle.sample(samples, y, generator=gen)
        preds = bundle.aux.predict(imgs)
    return float((preds == y).float().mean())
