"""Optimizer rules, schedules, stratification, evaluation, determinism."""

import numpy as np
import pytest

from regionmim.autodiff import Tensor, backward, zero_grads
from regionmim.data import SyntheticSpec, generate_synthetic, load_manifest, load_split
from regionmim.errors import StratificationError, TrainingError
from regionmim.model import (ClassifierHead, DecoderConfig, EncoderConfig,
                             init_parameters)
from regionmim.patching import ImageGrid
from regionmim.training import (AdamW, MetricsRecord, EpochMetrics, RunConfig,
                                adamw_step, epoch_lr, evaluate, finetune,
                                pretrain, stratified_subset, write_metrics_csv)

ENC = EncoderConfig(blocks=1, latent_dim=8, heads=2, mlp_dim=16,
                    patch_size=4, channels=1, max_tokens=16)
DEC = DecoderConfig(blocks=1, latent_dim=8, heads=2, mlp_dim=16)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    manifest = generate_synthetic(SyntheticSpec(image_size=16, per_class=6, seed=2), root)
    loaded = load_manifest(manifest)
    return load_split(loaded, "train", 16, 16)


class TestAdamW:
    def test_pure_decoupled_decay(self):
        theta = Tensor(np.array([1.0]), requires_grad=True)
        run = RunConfig(epochs=1, batch_size=1, base_lr=0.1, weight_decay=0.05)
        opt = AdamW([("theta", theta)], run)
        theta.grad = np.zeros(1)
        opt.step(lr=0.1)
        np.testing.assert_allclose(theta.data, [0.995], rtol=1e-12)

    def test_first_step_is_lr_times_sign(self):
        theta = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        run = RunConfig(epochs=1, batch_size=1, base_lr=0.1, weight_decay=0.0)
        opt = AdamW([("theta", theta)], run)
        theta.grad = np.array([0.3, -0.7])
        opt.step(lr=0.1)
        np.testing.assert_allclose(theta.data, [1.9, -0.9], atol=1e-6)

    def test_quadratic_converges(self):
        theta = Tensor(np.array([5.0]), requires_grad=True)
        run = RunConfig(epochs=1, batch_size=1, base_lr=0.1, weight_decay=0.0)
        opt = AdamW([("theta", theta)], run)
        for _ in range(100):
            zero_grads([theta])
            backward((theta * theta).sum())
            opt.step(lr=0.1)
        assert abs(theta.data[0]) < 0.5

    def test_zero_grad_zero_decay_is_identity(self):
        values = np.array([0.25, -1.5, 3.0])
        theta = Tensor(values.copy(), requires_grad=True)
        run = RunConfig(epochs=1, batch_size=1, base_lr=0.1, weight_decay=0.0)
        opt = AdamW([("theta", theta)], run)
        theta.grad = np.zeros(3)
        opt.step(lr=0.1)
        assert (theta.data == values).all()

    def test_non_finite_gradient_names_parameter(self):
        theta = Tensor(np.array([1.0]), requires_grad=True)
        run = RunConfig(epochs=1, batch_size=1)
        opt = AdamW([("encoder.embed", theta)], run)
        theta.grad = np.array([np.nan])
        with pytest.raises(TrainingError, match="encoder.embed"):
            opt.step(lr=0.1)

    def test_functional_wrapper_uses_scaled_lr(self):
        theta = Tensor(np.array([1.0]), requires_grad=True)
        run = RunConfig(epochs=1, batch_size=256, base_lr=0.1, weight_decay=0.05)
        opt = AdamW([("theta", theta)], run)
        theta.grad = np.zeros(1)
        adamw_step(opt)
        np.testing.assert_allclose(theta.data, [0.995], rtol=1e-12)


class TestSchedule:
    def test_constant_scales_with_batch(self):
        run = RunConfig(epochs=10, batch_size=64, base_lr=1.5e-4)
        assert epoch_lr(run, 0) == pytest.approx(1.5e-4 * 64 / 256)
        assert epoch_lr(run, 9) == epoch_lr(run, 0)

    def test_warmup_ramps_linearly(self):
        run = RunConfig(epochs=10, batch_size=256, base_lr=1.0, warmup_epochs=4)
        assert epoch_lr(run, 0) == pytest.approx(0.25)
        assert epoch_lr(run, 3) == pytest.approx(1.0)

    def test_cosine_decays_to_zero(self):
        run = RunConfig(epochs=11, batch_size=256, base_lr=1.0, schedule="cosine")
        values = [epoch_lr(run, e) for e in range(11)]
        assert values[0] == pytest.approx(1.0)
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert values[-1] < 0.05


class TestStratification:
    def test_fraction_keeps_ceil_per_class(self):
        labels = [0] * 40 + [1] * 21 + [2] * 10 + [3] * 9
        subset = stratified_subset(labels, 0.05, seed=3)
        counts = np.bincount(np.asarray(labels)[subset], minlength=4)
        np.testing.assert_array_equal(counts, [2, 2, 1, 1])

    def test_full_fraction_keeps_everything(self):
        labels = [0, 1, 2, 3] * 5
        assert stratified_subset(labels, 1.0, seed=0).size == 20

    def test_every_class_present_for_feasible_fractions(self):
        labels = [0] * 3 + [1] * 30 + [2] * 300
        subset = stratified_subset(labels, 1 / 3, seed=1)
        assert set(np.asarray(labels)[subset]) == {0, 1, 2}

    def test_missing_class_raises(self, tiny_corpus):
        labeled = [(img, lbl) for img, _, lbl in tiny_corpus if lbl != 2]
        run = RunConfig(epochs=1, batch_size=4, seed=0)
        encoder, _, _ = init_parameters(ENC, DEC, 4, 0)
        with pytest.raises(StratificationError, match=r"\[2\]"):
            finetune(labeled, encoder, run, classes=4)


class TestEvaluate:
    def test_all_correct_is_one(self, tiny_corpus):
        encoder, _, head = init_parameters(ENC, DEC, 4, 0)
        samples = [(img, lbl) for img, _, lbl in tiny_corpus]
        # cheat head: route pooled output through zero weights, bias by label below
        accuracy, confusion = evaluate(
            [(img, 0) for img, _ in samples], encoder,
            ClassifierHead(Tensor(np.zeros((8, 4))), Tensor(np.zeros(4)), 4))
        assert accuracy == 1.0  # all-zero logits tie-break to class 0
        assert confusion[0, 0] == len(samples)

    def test_ties_break_to_lowest_class_index(self, tiny_corpus):
        encoder, _, _ = init_parameters(ENC, DEC, 4, 0)
        head = ClassifierHead(Tensor(np.zeros((8, 4))), Tensor(np.zeros(4)), 4)
        img = tiny_corpus[0][0]
        _, confusion = evaluate([(img, 3)], encoder, head)
        assert confusion[3, 0] == 1

    def test_random_predictor_near_chance(self):
        rng = np.random.default_rng(4)
        encoder, _, _ = init_parameters(ENC, DEC, 4, 7)
        head = ClassifierHead(Tensor(rng.normal(0, 1, (8, 4))), Tensor(np.zeros(4)), 4)
        samples = [(ImageGrid(rng.uniform(0, 1, (16, 16, 1))), int(rng.integers(4)))
                   for _ in range(200)]
        accuracy, confusion = evaluate(samples, encoder, head)
        sigma = np.sqrt(0.25 * 0.75 / 200)
        assert abs(accuracy - 0.25) < 3 * sigma + 1e-9

    def test_confusion_rows_sum_to_class_counts(self, tiny_corpus):
        encoder, _, head = init_parameters(ENC, DEC, 4, 1)
        samples = [(img, lbl) for img, _, lbl in tiny_corpus]
        _, confusion = evaluate(samples, encoder, head)
        labels = np.asarray([lbl for _, lbl in samples])
        np.testing.assert_array_equal(confusion.sum(axis=1),
                                      np.bincount(labels, minlength=4))


class TestLoops:
    def test_pretrain_deterministic_bitwise(self, tiny_corpus):
        samples = [(img, mask) for img, mask, _ in tiny_corpus]
        run = RunConfig(epochs=2, batch_size=8, base_lr=1e-3, mask_ratio=0.75,
                        mask_strategy="region", seed=11)
        enc_a, dec_a, met_a = pretrain(samples, ENC, DEC, run)
        enc_b, dec_b, met_b = pretrain(samples, ENC, DEC, run)
        assert met_a.losses() == met_b.losses()
        for (name, a), (_, b) in zip(enc_a.named_parameters(), enc_b.named_parameters()):
            assert (a.data == b.data).all(), name
        for (name, a), (_, b) in zip(dec_a.named_parameters(), dec_b.named_parameters()):
            assert (a.data == b.data).all(), name

    def test_pretrain_records_clamped_plans(self, tiny_corpus):
        samples = [(img, mask) for img, mask, _ in tiny_corpus]
        run = RunConfig(epochs=1, batch_size=8, mask_ratio=0.75,
                        mask_strategy="region", seed=1)
        _, _, metrics = pretrain(samples, ENC, DEC, run)
        assert metrics.rows[0].clamped_plans >= 0
        assert np.isfinite(metrics.rows[0].loss)

    def test_finetune_freeze_encoder_leaves_encoder_untouched(self, tiny_corpus):
        labeled = [(img, lbl) for img, _, lbl in tiny_corpus]
        encoder, _, _ = init_parameters(ENC, DEC, 4, 3)
        before = {n: t.data.copy() for n, t in encoder.named_parameters()}
        run = RunConfig(epochs=1, batch_size=8, base_lr=1e-2, seed=3)
        encoder, head, _ = finetune(labeled, encoder, run, 4, freeze_encoder=True)
        for name, tensor in encoder.named_parameters():
            assert (tensor.data == before[name]).all(), name
        assert np.abs(head.weight.data).max() > 0

    def test_finetune_deterministic(self, tiny_corpus):
        labeled = [(img, lbl) for img, _, lbl in tiny_corpus]
        run = RunConfig(epochs=2, batch_size=8, base_lr=1e-3, seed=4)

        def run_once():
            encoder, _, _ = init_parameters(ENC, DEC, 4, 4)
            return finetune(labeled, encoder, run, 4, label_fraction=0.5)

        enc_a, head_a, met_a = run_once()
        enc_b, head_b, met_b = run_once()
        assert met_a.losses() == met_b.losses()
        assert (head_a.weight.data == head_b.weight.data).all()


class TestMetricsCsv:
    def test_schema_and_zeroed_seconds(self, tmp_path):
        record = MetricsRecord(rows=[
            EpochMetrics(0, "pretrain", 0.5, None, 1.23, 2),
            EpochMetrics(1, "train", 0.25, 0.875, 4.56, 0),
        ])
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, record)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,split,loss,accuracy,seconds,clamped_plans"
        assert lines[1] == "0,pretrain,0.5,,0.000,2"
        assert lines[2] == "1,train,0.25,0.875000,0.000,0"
