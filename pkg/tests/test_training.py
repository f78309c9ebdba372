import math

import numpy as np
import pytest

from vitpatch.autograd import Tensor, finite_diff_check, ops, parameter, precision
from vitpatch.data import LabeledPatch, generate_synthetic_dataset
from vitpatch.training import (
    AdamState,
    EpochLog,
    TrainConfig,
    TrainingError,
    adam_step,
    cross_entropy_loss,
    evaluate,
    train,
)
from vitpatch.vit import ViTConfig, ViTModel


class PixelVoter:
    """Stub classifier: predicts the class stored in pixel (0, 0, 0)."""

    def __init__(self):
        self.w = parameter(np.zeros(1))

    def forward(self, images, rng=None, training=False):
        cls = images[:, 0, 0, 0]
        return Tensor(np.stack([1.0 - cls, cls], axis=1))

    def parameters(self):
        return [self.w]


def patches_with_predictions(labels, preds):
    out = []
    for label, pred in zip(labels, preds):
        pixels = np.full((1, 2, 2), float(pred), dtype=np.float32)
        out.append(LabeledPatch(pixels, label))
    return out


class TestCrossEntropy:
    def test_uniform_prediction(self, f64):
        assert float(cross_entropy_loss(Tensor([[0.0, 0.0]]), [0]).data) == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_correct_no_overflow(self, f64):
        value = float(cross_entropy_loss(Tensor([[1000.0, -1000.0]]), [0]).data)
        assert math.isfinite(value) and value == pytest.approx(0.0, abs=1e-12)

    def test_gradient_is_softmax_minus_one_hot(self, f64, rng):
        logits = parameter(rng.standard_normal((3, 2)))
        labels = np.array([0, 1, 1])
        cross_entropy_loss(logits, labels).backward()
        probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
        expected = (probs - np.eye(2)[labels]) / 3
        np.testing.assert_allclose(logits.grad, expected, atol=1e-12)
        assert finite_diff_check(lambda: cross_entropy_loss(logits, labels), [logits]) < 1e-7

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy_loss(Tensor([[0.0, 0.0]]), [2])


class TestAdam:
    def test_first_step_moves_by_lr(self, f64):
        p = parameter(np.full(4, 0.5))
        cfg = TrainConfig()
        adam_step([p], [np.ones(4)], AdamState.zeros_like([p]), cfg)
        # Bias correction makes m_hat = v_hat = 1, so the step is lr / (1 + eps).
        np.testing.assert_allclose(0.5 - p.data, 0.001 / (1 + 1e-8), atol=1e-8)

    def test_zero_gradient_is_noop(self, f64):
        p = parameter(np.array([1.0, -2.0]))
        state = AdamState.zeros_like([p])
        adam_step([p], [np.zeros(2)], state, TrainConfig())
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.t == 1

    def test_zero_lr_is_identity(self, f64, rng):
        p = parameter(rng.standard_normal(5))
        before = p.data.copy()
        state = AdamState.zeros_like([p])
        for _ in range(3):
            adam_step([p], [rng.standard_normal(5)], state, TrainConfig(lr=0.0))
        np.testing.assert_array_equal(p.data, before)

    def test_minimises_quadratic(self, f64):
        x = parameter([1.0])
        cfg = TrainConfig(lr=0.1)
        state = AdamState.zeros_like([x])
        for _ in range(200):
            x.zero_grad()
            ops.total(ops.mul(x, x)).backward()
            adam_step([x], [x.grad], state, cfg)
        assert abs(x.data[0]) < 0.01
        assert state.t == 200


class TestEvaluate:
    def test_all_correct(self):
        res = evaluate(PixelVoter(), patches_with_predictions([0, 1] * 60, [0, 1] * 60))
        assert res.accuracy == 100.0 and res.total == 120

    def test_all_wrong(self):
        assert evaluate(PixelVoter(), patches_with_predictions([0, 1, 0, 1], [1, 0, 1, 0])).accuracy == 0.0

    def test_three_of_four(self):
        res = evaluate(PixelVoter(), patches_with_predictions([0, 1, 1, 0], [0, 1, 0, 0]))
        assert res.accuracy == 75.0
        assert res.records == [(0, 0), (1, 1), (1, 0), (0, 0)]
        assert res.correct + (res.total - res.correct) == res.total

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(PixelVoter(), [])

    def test_does_not_mutate_model(self, rng):
        model = ViTModel.init(ViTConfig(img_size=20, patch_size=10, d_model=8, num_heads=2, num_layers=1, d_ff=8), rng)
        data = generate_synthetic_dataset(3, 20, seed=1)
        before = [p.data.copy() for p in model.parameters()]
        first, second = evaluate(model, data), evaluate(model, data)
        assert first == second
        assert 0.0 <= first.accuracy <= 100.0
        for b, p in zip(before, model.parameters()):
            np.testing.assert_array_equal(b, p.data)


TINY = ViTConfig(img_size=20, patch_size=10, d_model=16, num_heads=2, num_layers=1, d_ff=32)


class TestTrain:
    def test_zero_epochs(self, rng):
        model = ViTModel.init(TINY, rng)
        before = [p.data.copy() for p in model.parameters()]
        _, logs = train(model, generate_synthetic_dataset(4, 20), TrainConfig(num_epochs=0))
        assert logs == []
        for b, p in zip(before, model.parameters()):
            np.testing.assert_array_equal(b, p.data)

    def test_empty_split(self, rng):
        with pytest.raises(TrainingError):
            train(ViTModel.init(TINY, rng), [], TrainConfig(num_epochs=1))

    def test_non_finite_loss_aborts_with_location(self):
        class Exploding(PixelVoter):
            def forward(self, images, rng=None, training=False):
                return Tensor(np.full((len(images), 2), np.nan))

        with pytest.raises(TrainingError, match="epoch 1, batch 1"):
            train(Exploding(), patches_with_predictions([0, 1], [0, 1]), TrainConfig(num_epochs=1))

    def test_same_seed_is_bit_identical(self):
        def run():
            with precision("float64"):
                rng = np.random.default_rng(7)
                model = ViTModel.init(TINY, rng)
                _, logs = train(model, generate_synthetic_dataset(6, 20, seed=3), TrainConfig(num_epochs=2, batch_size=5), rng)
                return [p.data.tobytes() for p in model.parameters()], [log.line() for log in logs], [l.loss for l in logs]

        assert run() == run()

    def test_loss_decreases(self):
        rng = np.random.default_rng(0)
        model = ViTModel.init(TINY, rng)
        _, logs = train(model, generate_synthetic_dataset(20, 20, seed=0), TrainConfig(num_epochs=20, batch_size=8), rng)
        assert len(logs) == 20
        assert logs[-1].loss < logs[0].loss
        assert all(log.loss >= 0 for log in logs)

    def test_final_partial_batch_kept(self):
        seen = []

        class Counting(PixelVoter):
            def __init__(self):
                self.w = parameter(np.zeros(2))

            def forward(self, images, rng=None, training=False):
                seen.append(len(images))
                return ops.add(super().forward(images), self.w)

        train(Counting(), patches_with_predictions([0, 1] * 5, [0, 1] * 5), TrainConfig(num_epochs=1, batch_size=4))
        assert seen == [4, 4, 2]

    def test_validation_logged(self):
        data = patches_with_predictions([0, 1], [0, 1])
        _, logs = train(PixelVoter(), data, TrainConfig(num_epochs=2), validation=data)
        assert [log.val_accuracy for log in logs] == [100.0, 100.0]


def test_epoch_log_line_format():
    assert EpochLog(1, 30, 0.2341).line() == "[Epoch 1, Batch of: 30] loss: 0.234"
    assert EpochLog(500, 32, 0.0004).line() == "[Epoch 500, Batch of: 32] loss: 0.000"


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
