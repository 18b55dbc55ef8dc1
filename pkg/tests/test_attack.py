import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advsynth.attack import (
    BUDGET_EXHAUSTED,
    SUCCESS,
    AttackConfig,
    LatentState,
    attack_many,
    dataset_generator_adapter,
    derive_seed,
    expand_tasks,
    export_attack_results,
    load_attack_manifest,
    loss_l0,
    loss_l0_untargeted,
    loss_l1,
    loss_l2,
    noise_augment,
    run_attack,
    synthesize,
    total_loss,
)
from advsynth.data import ImageBatch


class FixedProbs:
    """Classifier stub with hard-wired class probabilities."""

    def __init__(self, probs):
        self.p = torch.as_tensor(probs, dtype=torch.float64)
        self.class_count = len(self.p)

    def class_log_probs(self, x):
        return torch.log(self.p).expand(x.shape[0], -1)

    def class_probs(self, x):
        return self.p.expand(x.shape[0], -1)

    def predict(self, x):
        return self.p.expand(x.shape[0], -1).argmax(-1)


class SoftmaxOnPixels:
    """Differentiable stub: logits are fixed linear functions of the image."""

    def __init__(self, weights):
        self.w = torch.as_tensor(weights, dtype=torch.float64)  # (K, dim)
        self.class_count = self.w.shape[0]

    def class_log_probs(self, x):
        return torch.log_softmax(x.flatten(1).to(self.w.dtype) @ self.w.T, dim=-1)

    def class_probs(self, x):
        return self.class_log_probs(x).exp()

    def predict(self, x):
        with torch.no_grad():
            return self.class_log_probs(x).argmax(-1)


class LinearGenerator:
    def __init__(self, matrix, shape, dtype=torch.float64):
        self.matrix = torch.as_tensor(matrix, dtype=dtype)
        self.latent_dim = self.matrix.shape[1]
        self.image_shape = shape
        self.dtype = dtype

    def generate(self, z, y):
        return torch.sigmoid(self.matrix @ z).reshape(self.image_shape)


class TestConfigValidation:
    def test_target_must_differ(self):
        with pytest.raises(ValueError):
            AttackConfig(y_source=1, y_target=1)

    def test_non_negative_hyperparameters(self):
        for bad in ("lambda1", "lambda2", "epsilon", "epsilon_attack", "alpha"):
            with pytest.raises(ValueError):
                AttackConfig(y_source=0, y_target=1, **{bad: -0.1})

    def test_step_counts(self):
        with pytest.raises(ValueError):
            AttackConfig(y_source=0, y_target=1, steps=0)
        with pytest.raises(ValueError):
            AttackConfig(y_source=0, y_target=1, max_restarts=0)


class TestLossTerms:
    def test_l0_analytic_values(self):
        f = FixedProbs([0.5, 0.5])
        img = torch.rand(1, 2, 2, dtype=torch.float64)
        assert float(loss_l0(f, img, 1)) == pytest.approx(math.log(2), rel=1e-12)
        f1 = FixedProbs([0.0, 1.0])
        assert float(loss_l0(f1, img, 1)) == pytest.approx(0.0, abs=1e-12)

    def test_l0_confidence_floor_blocks_infinities(self):
        f = FixedProbs([1.0, 0.0])
        img = torch.rand(1, 2, 2, dtype=torch.float64)
        val = float(loss_l0(f, img, 1))
        assert math.isfinite(val) and val == pytest.approx(-math.log(1e-12))

    def test_l0_untargeted_binary_is_single_competitor(self):
        f = FixedProbs([0.7, 0.3])
        img = torch.rand(1, 2, 2, dtype=torch.float64)
        assert float(loss_l0_untargeted(f, img, 0)) == pytest.approx(float(loss_l0(f, img, 1)), rel=1e-12)

    def test_l0_untargeted_uniform_is_log_k(self):
        for k in (2, 5, 10):
            f = FixedProbs([1.0 / k] * k)
            img = torch.rand(1, 2, 2, dtype=torch.float64)
            assert float(loss_l0_untargeted(f, img, 0)) == pytest.approx(math.log(k), rel=1e-9)

    def test_l0_untargeted_equals_min_over_competitors(self):
        g = torch.Generator().manual_seed(5)
        for _ in range(10):
            probs = torch.rand(6, generator=g, dtype=torch.float64)
            probs /= probs.sum()
            f = FixedProbs(probs)
            img = torch.rand(1, 2, 2, dtype=torch.float64)
            by_enum = min(float(loss_l0(f, img, y)) for y in range(6) if y != 2)
            assert float(loss_l0_untargeted(f, img, 2)) == pytest.approx(by_enum, rel=1e-12)

    def test_l1_examples(self):
        z0 = torch.zeros(2, dtype=torch.float64)
        assert float(loss_l1(z0, z0, 0.1)) == 0.0
        z = torch.tensor([0.3, -0.05], dtype=torch.float64)
        assert float(loss_l1(z, z0, 0.1)) == pytest.approx(0.1, rel=1e-12)

    def test_l1_zero_iff_inside_band(self):
        z0 = torch.randn(8, dtype=torch.float64)
        inside = z0 + torch.empty(8, dtype=torch.float64).uniform_(-0.09, 0.09)
        assert float(loss_l1(inside, z0, 0.1)) == 0.0
        outside = z0.clone()
        outside[3] += 0.2
        assert float(loss_l1(outside, z0, 0.1)) > 0.0

    def test_l2_matches_l0_on_aux(self):
        aux = FixedProbs([math.exp(-1), 1 - math.exp(-1)])
        img = torch.rand(1, 2, 2, dtype=torch.float64)
        assert float(loss_l2(aux, img, 0)) == pytest.approx(1.0, rel=1e-9)
        assert float(loss_l2(aux, img, 0)) == pytest.approx(float(loss_l0(aux, img, 0)), rel=1e-12)


class TestNoiseAugment:
    def test_zero_budget_is_identity(self):
        img = torch.rand(1, 4, 4)
        assert noise_augment(img, torch.randn(1, 4, 4), 0.0) is img

    def test_saturated_tau_adds_full_budget(self):
        img = torch.full((1, 2, 2), 0.5)
        out = noise_augment(img, torch.full((1, 2, 2), 1e9), 0.25)
        assert torch.allclose(out, torch.full((1, 2, 2), 0.75))

    @given(eps=st.floats(0.0, 0.5), seed=st.integers(0, 999))
    @settings(max_examples=30)
    def test_sup_norm_bound(self, eps, seed):
        g = torch.Generator().manual_seed(seed)
        img = torch.rand(1, 3, 3, generator=g)
        tau = torch.randn(1, 3, 3, generator=g) * 5
        out = noise_augment(img, tau, eps)
        assert float((out - img).abs().max()) <= eps + 1e-7
        assert float(out.min()) >= 0 and float(out.max()) <= 1


class TestTotalLoss:
    def _setup(self):
        torch.manual_seed(0)
        gen = LinearGenerator(torch.randn(9, 4, dtype=torch.float64), (1, 3, 3))
        f = SoftmaxOnPixels(torch.randn(3, 9, dtype=torch.float64))
        aux = SoftmaxOnPixels(torch.randn(3, 9, dtype=torch.float64))
        return gen, f, aux

    def test_zero_weights_leave_only_l0(self):
        gen, f, aux = self._setup()
        cfg = AttackConfig(y_source=0, y_target=1, lambda1=0.0, lambda2=0.0)
        state = LatentState(torch.randn(4, dtype=torch.float64), torch.randn(4, dtype=torch.float64))
        total, parts = total_loss(state, cfg, gen, f, aux)
        assert parts["total"] == pytest.approx(parts["l0"], rel=1e-12)

    def test_components_recompose(self):
        gen, f, aux = self._setup()
        g = torch.Generator().manual_seed(3)
        for _ in range(10):
            cfg = AttackConfig(
                y_source=0, y_target=2,
                lambda1=float(torch.rand((), generator=g) * 10),
                lambda2=float(torch.rand((), generator=g) * 10),
                epsilon=0.2,
            )
            state = LatentState(
                torch.randn(4, generator=g, dtype=torch.float64),
                torch.randn(4, generator=g, dtype=torch.float64),
            )
            total, parts = total_loss(state, cfg, gen, f, aux)
            recomposed = parts["l0"] + cfg.lambda1 * parts["l1"] + cfg.lambda2 * parts["l2"]
            assert parts["total"] == pytest.approx(recomposed, abs=1e-9)

    def test_table_preset_row(self):
        from advsynth.presets import preset_config

        cfg = preset_config("mnist-madry-targeted", y_source=3, y_target=7)
        assert (cfg.lambda1, cfg.lambda2, cfg.epsilon) == (50.0, 0.0, 0.1)
        assert (cfg.epsilon_attack, cfg.alpha, cfg.steps) == (0.0, 1.0, 500)


class TestRunAttackMechanics:
    def _toy(self):
        torch.manual_seed(1)
        gen = LinearGenerator(torch.randn(9, 4, dtype=torch.float64), (1, 3, 3))
        f = SoftmaxOnPixels(torch.randn(2, 9, dtype=torch.float64))
        return gen, f

    def test_zero_step_size_freezes_the_trace(self):
        gen, f = self._toy()
        cfg = AttackConfig(y_source=0, y_target=1, alpha=0.0, steps=7, max_restarts=1,
                           epsilon_attack=0.05, seed=0)
        result = run_attack(cfg, gen, f)
        totals = [t["total"] for t in result.trace]
        assert len(totals) == 7
        assert all(t == totals[0] for t in totals)

    def test_deterministic_under_seed(self):
        gen, f = self._toy()
        cfg = AttackConfig(y_source=0, y_target=1, alpha=0.1, steps=10, max_restarts=3, seed=42)
        a = run_attack(cfg, gen, f)
        b = run_attack(cfg, gen, f)
        assert torch.equal(a.image, b.image)
        assert a.status == b.status and a.restarts_used == b.restarts_used
        assert a.trace == b.trace

    def test_success_predicate_holds_on_reeval(self):
        gen, f = self._toy()
        cfg = AttackConfig(y_source=0, y_target=1, alpha=0.3, steps=60, max_restarts=10, seed=0)
        result = run_attack(cfg, gen, f)
        if result.status == SUCCESS:
            assert int(f.predict(result.image.unsqueeze(0))[0]) == 1

    def test_budget_exhaustion_is_a_result_not_an_exception(self):
        gen, _ = self._toy()
        f = FixedProbs([1.0, 0.0])  # never predicts class 1
        cfg = AttackConfig(y_source=0, y_target=1, steps=2, max_restarts=3, seed=0)
        result = run_attack(cfg, gen, f)
        assert result.status == BUDGET_EXHAUSTED
        assert result.restarts_used == 3

    def test_non_finite_loss_triggers_restart_with_diagnostic(self):
        gen, _ = self._toy()

        class NanProbs(FixedProbs):
            def class_log_probs(self, x):
                return torch.full((x.shape[0], 2), float("nan"), dtype=torch.float64)

        cfg = AttackConfig(y_source=0, y_target=1, steps=2, max_restarts=2, seed=0)
        result = run_attack(cfg, gen, NanProbs([0.5, 0.5]))
        assert result.status == BUDGET_EXHAUSTED
        assert len(result.diagnostics) == 2

    def test_untargeted_predicate(self):
        gen, f = self._toy()
        cfg = AttackConfig(y_source=0, y_target=None, alpha=0.3, steps=40, max_restarts=5, seed=1)
        result = run_attack(cfg, gen, f)
        if result.status == SUCCESS:
            assert int(f.predict(result.image.unsqueeze(0))[0]) != 0

    def test_monotone_loss_on_convex_surrogate(self):
        # linear generator + softmax-of-linear classifier: L0 is convex in z
        torch.manual_seed(2)
        A = torch.randn(6, 3, dtype=torch.float64) * 0.4

        class Affine:
            latent_dim = 3
            image_shape = (1, 2, 3)
            dtype = torch.float64

            def generate(self, z, y):
                return (A @ z).reshape(1, 2, 3) * 0.05 + 0.5

        f = SoftmaxOnPixels(torch.randn(2, 6, dtype=torch.float64) * 0.3)
        cfg = AttackConfig(y_source=0, y_target=1, lambda1=2.0, epsilon=0.1,
                           alpha=0.05, steps=50, max_restarts=1, seed=0)
        result = run_attack(cfg, Affine(), f)
        totals = [t["total"] for t in result.trace]
        smoothed = [sum(totals[i : i + 5]) / 5 for i in range(0, len(totals) - 5)]
        assert all(b <= a + 1e-9 for a, b in zip(smoothed, smoothed[1:]))

    def test_lambda1_large_forces_l1_to_zero(self):
        # alpha must keep the inward kick alpha*lambda1/m below the band width,
        # otherwise plain gradient descent chatters across the whole band
        gen, f = self._toy()
        cfg = AttackConfig(y_source=0, y_target=1, lambda1=1e4, epsilon=0.1,
                           alpha=4e-5, steps=200, max_restarts=1, seed=3)
        result = run_attack(cfg, gen, f)
        assert float(loss_l1(result.z, result.z0, cfg.epsilon)) <= 1e-3

    def test_class_index_validation(self):
        gen, f = self._toy()
        with pytest.raises(ValueError):
            run_attack(AttackConfig(y_source=0, y_target=5, steps=1), gen, f)


class TestNoiseBudgetInvariant:
    def test_image_stays_within_budget_of_raw_synthesis(self):
        torch.manual_seed(4)
        gen = LinearGenerator(torch.randn(9, 4, dtype=torch.float64), (1, 3, 3))
        f = SoftmaxOnPixels(torch.randn(2, 9, dtype=torch.float64))
        cfg = AttackConfig(y_source=0, y_target=1, epsilon_attack=0.07, alpha=0.2,
                           steps=25, max_restarts=2, seed=9)
        result = run_attack(cfg, gen, f)
        raw = gen.generate(result.z, 0)
        assert float((result.image - raw).abs().max()) <= cfg.epsilon_attack + 1e-6


class TestDatasetAdapter:
    def _batch(self):
        g = torch.Generator().manual_seed(0)
        pixels = torch.rand(20, 1, 3, 3, generator=g)
        labels = torch.tensor([0, 1] * 10)
        return ImageBatch(pixels, labels)

    def test_returns_indexed_images(self):
        batch = self._batch()
        adapter = dataset_generator_adapter(batch, 1)
        assert len(adapter) == 10
        assert torch.equal(adapter.generate(3, 1), batch.pixels[batch.labels == 1][3])
        with pytest.raises(ValueError):
            adapter.generate(0, 0)

    def test_empty_class_rejected(self):
        batch = ImageBatch(torch.rand(4, 1, 3, 3), torch.zeros(4, dtype=torch.long))
        with pytest.raises(ValueError, match="class 1"):
            dataset_generator_adapter(batch, 1)

    def test_anchor_sampling_is_uniform(self):
        batch = self._batch()
        adapter = dataset_generator_adapter(batch, 0)
        gen = torch.Generator().manual_seed(0)
        n = 20_000
        counts = torch.zeros(10)
        for _ in range(n):
            counts[int(adapter.sample_latent(gen))] += 1
        expect = n / 10
        sigma = math.sqrt(n * 0.1 * 0.9)
        assert float((counts - expect).abs().max()) <= 3 * sigma

    def test_sup_distance_from_anchor_bounded(self):
        batch = self._batch()
        adapter = dataset_generator_adapter(batch, 0)
        f = SoftmaxOnPixels(torch.randn(2, 9, dtype=torch.float64))
        cfg = AttackConfig(y_source=0, y_target=1, epsilon_attack=0.1, alpha=0.5,
                           steps=10, max_restarts=1, seed=2)
        result = run_attack(cfg, adapter, f)
        anchor = adapter.generate(int(result.z0), 0)
        assert float((result.image - anchor).abs().max()) <= 0.1 + 1e-6

    def test_frozen_z_never_moves(self):
        batch = self._batch()
        adapter = dataset_generator_adapter(batch, 0)
        f = SoftmaxOnPixels(torch.randn(2, 9, dtype=torch.float64))
        cfg = AttackConfig(y_source=0, y_target=1, epsilon_attack=0.1, alpha=0.5,
                           steps=5, max_restarts=2, seed=2)
        result = run_attack(cfg, adapter, f)
        assert int(result.z) == int(result.z0)
        assert all(t["l1"] == 0.0 for t in result.trace)

    def test_one_saturated_step_recovers_fgsm_direction(self):
        # frozen z, zero-init tau, saturated parameterization, raw tau gradient:
        # the first step moves tau along -grad_x(loss), and saturation turns it
        # into a signed perturbation matching fgsm on the same image
        from advsynth.classifiers import fgsm

        torch.manual_seed(0)
        w = torch.randn(9, dtype=torch.float64)
        f = SoftmaxOnPixels(torch.stack([torch.zeros(9, dtype=torch.float64), w]))
        batch = ImageBatch(torch.full((4, 1, 3, 3), 0.5), torch.zeros(4, dtype=torch.long))
        adapter = dataset_generator_adapter(batch, 0)
        eps = 0.1
        cfg = AttackConfig(
            y_source=0, y_target=None, epsilon_attack=eps, lambda2=0.0,
            alpha=1.0, steps=1, max_restarts=1, seed=0,
            normalize_tau_grad=False, tau_init="zeros", tau_saturation=1e6,
        )
        result = run_attack(cfg, adapter, f)
        anchor = adapter.generate(int(result.z0), 0)

        class _F32(SoftmaxOnPixels):
            pass

        reference = fgsm(f, anchor.unsqueeze(0).double(), torch.tensor([0]), eps)[0]
        ours = (result.image - anchor).sign().flatten()
        expect = (reference - anchor).sign().flatten()
        grad_nonzero = w.abs() > 0
        agree = (ours == expect)[grad_nonzero]
        assert float(agree.float().mean()) >= 0.99


class TestParallelMap:
    def test_task_seeds_are_stable(self):
        assert derive_seed(7, 3) == derive_seed(7, 3)
        assert derive_seed(7, 3) != derive_seed(7, 4)
        assert derive_seed(8, 3) != derive_seed(7, 3)

    def test_expand_tasks_covers_pairs_and_replicates(self):
        base = AttackConfig(y_source=0, y_target=1)
        configs = expand_tasks(base, [(0, 1), (1, 0)], replicates=3, seed=0)
        assert len(configs) == 6
        assert [(c.y_source, c.y_target) for c in configs[:3]] == [(0, 1)] * 3
        assert len({c.seed for c in configs}) == 6

    def test_parallel_equals_serial(self):
        torch.manual_seed(5)
        gen = LinearGenerator(torch.randn(9, 4, dtype=torch.float64), (1, 3, 3))
        f = SoftmaxOnPixels(torch.randn(2, 9, dtype=torch.float64))
        base = AttackConfig(y_source=0, y_target=1, alpha=0.2, steps=10, max_restarts=2)
        configs = expand_tasks(base, [(0, 1), (1, 0)], replicates=2, seed=1)
        serial = attack_many(configs, gen, f, workers=1)
        parallel = attack_many(configs, gen, f, workers=4)
        for a, b in zip(serial, parallel):
            assert torch.equal(a.image, b.image)
            assert a.status == b.status


class TestExport:
    def test_manifest_roundtrip(self, tmp_path):
        torch.manual_seed(6)
        gen = LinearGenerator(torch.randn(9, 4, dtype=torch.float64), (1, 3, 3))
        f = SoftmaxOnPixels(torch.randn(2, 9, dtype=torch.float64))
        cfg = AttackConfig(y_source=0, y_target=1, alpha=0.3, steps=20, max_restarts=4, seed=0)
        results = attack_many([cfg] * 3, gen, f)
        export_attack_results(results, tmp_path)
        rows = load_attack_manifest(tmp_path)
        assert len(rows) == 3
        assert {r["id"] for r in rows} == {"atk-000000", "atk-000001", "atk-000002"}
        for row, res in zip(rows, results):
            assert row["status"] == res.status
            assert row["restarts"] == res.restarts_used
            assert (tmp_path / f"{row['id']}.png").exists()
