"""Worst-case response of linear maps to sup-norm-bounded inputs.

Three views of the same quantity (1/n) * max_{|dx|_inf <= eps} |W dx|_1:
a closed-form high-probability upper bound for random bounded matrices, an
exact brute-force oracle over the 2^m sign vertices (small m only; the
general problem is NP-hard), and Monte Carlo validation tying the two
together. A Jacobian probe applies the same comparison to trained
generator/classifier pairs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

EXACT_DIM_LIMIT = 20

SAMPLERS = ("uniform", "rademacher")


class DimensionLimitError(ValueError):
    pass


@dataclass(frozen=True)
class BoundInstance:
    n: int
    m: int
    epsilon: float
    k_bound: float
    delta: float
    sampler: str = "uniform"

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("dimensions must be positive")
        if self.epsilon <= 0 or self.k_bound <= 0:
            raise ValueError("epsilon and the entry bound must be positive")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")


def l1_perturbation_bound(inst: BoundInstance) -> float:
    """High-probability bound 4*eps*K*sqrt(m*(m*log2 + log(1/delta))/n) + eps*K*m.

    Holds with probability 1 - delta over matrices with mutually independent
    entries bounded by K.
    """
    tail = math.sqrt(inst.m * (inst.m * math.log(2.0) + math.log(1.0 / inst.delta)) / inst.n)
    return 4.0 * inst.epsilon * inst.k_bound * tail + inst.epsilon * inst.k_bound * inst.m


def _sign_vertices(m: int, start: int, stop: int) -> np.ndarray:
    """Rows `start:stop` of the 2^m x m matrix of {-1, +1} sign patterns."""
    idx = np.arange(start, stop, dtype=np.uint64)[:, None]
    bits = (idx >> np.arange(m, dtype=np.uint64)[None, :]) & 1
    return bits.astype(np.float64) * 2.0 - 1.0


def worst_case_l1_exact(W: np.ndarray, epsilon: float, dim_limit: int = EXACT_DIM_LIMIT) -> float:
    """max over the l-inf ball of radius eps of |W dx|_1, by vertex enumeration.

    The maximum of a convex function over the ball is attained at a vertex,
    so scanning the 2^m sign patterns is exact. Refuses m beyond `dim_limit`.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("W must be a matrix")
    m = W.shape[1]
    if m > dim_limit:
        raise DimensionLimitError(
            f"m={m} exceeds the exact-enumeration limit {dim_limit} (cost grows as 2^m)"
        )
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    best = 0.0
    chunk = 1 << 14
    total = 1 << m
    for start in range(0, total, chunk):
        verts = _sign_vertices(m, start, min(start + chunk, total))
        vals = np.abs(W @ verts.T).sum(axis=0)
        best = max(best, float(vals.max()))
    return epsilon * best


def sample_matrix(inst: BoundInstance, rng: np.random.Generator) -> np.ndarray:
    if inst.sampler == "uniform":
        return rng.uniform(-inst.k_bound, inst.k_bound, size=(inst.n, inst.m))
    return rng.choice([-inst.k_bound, inst.k_bound], size=(inst.n, inst.m))


@dataclass
class MonteCarloReport:
    instance: BoundInstance
    trials: int
    seed: int
    bound: float
    violation_fraction: float
    normalized_worst_cases: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "instance": self.instance.__dict__,
            "trials": self.trials,
            "seed": self.seed,
            "bound": self.bound,
            "violation_fraction": self.violation_fraction,
            "normalized_worst_cases": self.normalized_worst_cases,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def write(self, json_path: Path, csv_path: Path | None = None) -> None:
        Path(json_path).write_text(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["trial", "normalized_worst_case", "bound", "violates"])
                for i, v in enumerate(self.normalized_worst_cases):
                    writer.writerow([i, v, self.bound, int(v > self.bound)])


def monte_carlo_violation_rate(
    inst: BoundInstance, trials: int, seed: int = 0
) -> MonteCarloReport:
    """Fraction of sampled matrices whose exact normalized worst case exceeds
    the closed-form bound. Reproducible per seed."""
    if trials < 1:
        raise ValueError("trials must be positive")
    bound = l1_perturbation_bound(inst)
    values = []
    for trial in range(trials):
        rng = np.random.default_rng((seed, trial))
        W = sample_matrix(inst, rng)
        values.append(worst_case_l1_exact(W, inst.epsilon) / inst.n)
    violations = sum(v > bound for v in values)
    return MonteCarloReport(
        instance=inst, trials=trials, seed=seed, bound=bound,
        violation_fraction=violations / trials, normalized_worst_cases=values,
    )


# ---------------------------------------------------------------------------
# Jacobian probe for trained generator / score pairs.

@dataclass
class JacobianProbe:
    epsilon: float
    latent_dim: int
    output_dim: int
    score_worst_case: list[float]  # eps * |J_s|_1 per sample: exact for a 1-row map
    generator_proxy: list[float]   # (eps/n) * sum_i |row_i(J_g)|_1: upper bound on the
                                   # normalized exact maximum (rows maximized independently)
    ratios: list[float]

    def summary(self) -> dict:
        s = np.asarray(self.score_worst_case)
        g = np.asarray(self.generator_proxy)
        r = np.asarray(self.ratios)
        return {
            "epsilon": self.epsilon,
            "latent_dim": self.latent_dim,
            "output_dim": self.output_dim,
            "generator_proxy_is_upper_bound": True,
            "score_worst_case": {"median": float(np.median(s)), "mean": float(s.mean())},
            "generator_proxy": {"median": float(np.median(g)), "mean": float(g.mean())},
            "ratio_score_over_generator": {
                "median": float(np.median(r)),
                "q25": float(np.quantile(r, 0.25)),
                "q75": float(np.quantile(r, 0.75)),
            },
        }


def jacobian_probe(
    generator,
    score_fn,
    y: int,
    sample_count: int,
    epsilon: float,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> JacobianProbe:
    """Linearize the generator and the end-to-end score at sampled anchors.

    For each z0: the score side eps*|J_s|_1 is the exact worst case of a
    one-row linear map; the generator side uses the row-sum relaxation and is
    reported explicitly as an upper bound. Non-finite entries are flagged
    with the offending anchor.
    """
    gen = torch.Generator().manual_seed(seed)
    score_vals, gen_vals, ratios = [], [], []
    n = None
    for _ in range(sample_count):
        z0 = torch.randn(generator.latent_dim, generator=gen, dtype=dtype)

        def flat_image(z):
            return generator.generate(z, y).reshape(-1)

        jac_g = torch.autograd.functional.jacobian(flat_image, z0)
        z_req = z0.clone().requires_grad_(True)
        score = score_fn(generator.generate(z_req, y))
        (jac_s,) = torch.autograd.grad(score, z_req)
        if not (torch.isfinite(jac_g).all() and torch.isfinite(jac_s).all()):
            raise FloatingPointError(f"non-finite Jacobian at z0={z0.tolist()}")
        n = jac_g.shape[0]
        s_val = epsilon * float(jac_s.abs().sum())
        g_val = epsilon * float(jac_g.abs().sum(dim=1).sum()) / n
        score_vals.append(s_val)
        gen_vals.append(g_val)
        ratios.append(s_val / g_val if g_val > 0 else math.inf)
    return JacobianProbe(
        epsilon=epsilon, latent_dim=generator.latent_dim, output_dim=n,
        score_worst_case=score_vals, generator_proxy=gen_vals, ratios=ratios,
    )
