import math

import numpy as np
import pytest

from conftest import make_tiny_spec
from src.data_loader import ECGDataset
from src.errors import ShapeError, TrainingError
from src.layers import Parameter
from src.model import LightX3ECG
from src.training import (AdamOptimizer, AdamState, TrainConfig, Trainer, adam_step, drop_lead, evaluate_model,
                          lr_schedule)


def toy_dataset(n=64, length=64, seed=0):
    """Two classes: class 1 carries a bump in the middle of every lead."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 0.3, size=(n, 3, length)).astype(np.float32)
    labels = np.arange(n) % 2
    x[labels == 1, :, 24:40] += 2.0
    y = np.zeros((n, 2), dtype=bool)
    y[np.arange(n), labels] = True
    return ECGDataset(x=x, y=y, ids=[f"r{i}" for i in range(n)], classes=["a", "b"], task="multi_class",
                      leads=("I", "II", "V1"))


class TestSchedule:
    def test_closed_form_points(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == pytest.approx(1e-3)
        assert lr_schedule(20, cfg) == pytest.approx(5.5e-4)
        assert lr_schedule(40, cfg) == 1e-4
        assert lr_schedule(69, cfg) == 1e-4

    def test_continuous_at_cosine_end(self):
        cfg = TrainConfig()
        end_of_cosine = cfg.lr_min + (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi)) / 2
        assert end_of_cosine == pytest.approx(lr_schedule(40, cfg), abs=1e-15)
        assert lr_schedule(39, cfg) > lr_schedule(40, cfg)

    def test_out_of_range(self):
        with pytest.raises(ShapeError):
            lr_schedule(70, TrainConfig())
        with pytest.raises(ShapeError):
            lr_schedule(-1, TrainConfig())

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs_total=10, epochs_cosine=20)
        with pytest.raises(ValueError):
            TrainConfig(droplead_p=1.5)
        with pytest.raises(ValueError):
            TrainConfig(task="regression")


class TestAdam:
    def test_first_step_hand_value(self):
        p = Parameter(np.zeros(1))
        p.grad = np.ones(1)
        adam_step({"theta": p}, AdamState(), lr=1e-3)
        assert p.value[0] == pytest.approx(-1e-3, rel=1e-6)

    def test_zero_gradient_no_change(self):
        p = Parameter(np.array([0.5, -2.0]), decay=True)
        adam_step({"theta": p}, AdamState(), lr=1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(p.value, [0.5, -2.0])

    def test_weight_decay_only_on_decay_params(self):
        decayed = Parameter(np.array([1.0]), decay=True)
        plain = Parameter(np.array([1.0]))
        adam_step({"w": decayed, "b": plain}, AdamState(), lr=1e-2, weight_decay=0.1)
        assert decayed.value[0] < 1.0
        assert plain.value[0] == 1.0

    def test_non_finite_gradient_names_parameter(self):
        p = Parameter(np.zeros(3))
        p.grad = np.array([0.0, np.nan, 1.0])
        with pytest.raises(TrainingError, match="stage.weight"):
            adam_step({"stage.weight": p}, AdamState(), lr=1e-3)

    def test_mask_holds_zeros(self):
        p = Parameter(np.array([1.0, 2.0, 3.0]), decay=True)
        mask = np.array([True, False, True])
        p.value = p.value * mask
        state = AdamState()
        for _ in range(3):
            p.grad = np.ones(3)
            adam_step({"w": p}, state, lr=0.1, weight_decay=0.01, masks={"w": mask})
            assert p.value[1] == 0.0


class TestDropLead:
    def test_identity_cases(self, rng):
        x = rng.normal(size=(5, 3, 8))
        assert drop_lead(x, 0.0, rng) is x
        assert drop_lead(x, 0.9, None, training=False) is x

    def test_statistics(self):
        x = np.ones((100_000, 3, 1))
        out = drop_lead(x, 0.5, np.random.default_rng(3))
        zeroed = out[:, :, 0] == 0
        assert zeroed.sum(axis=1).max() == 1
        masked_rows = zeroed.any(axis=1)
        assert abs(masked_rows.mean() - 0.5) <= 0.01
        lead_share = zeroed[masked_rows].mean(axis=0)
        np.testing.assert_allclose(lead_share, 1 / 3, atol=0.02)

    def test_shape_check(self):
        with pytest.raises(ShapeError):
            drop_lead(np.zeros((2, 2, 5)), 0.5, np.random.default_rng(0))


class TestTrainer:
    def cfg(self, **kw):
        base = dict(epochs_total=5, epochs_cosine=5, batch_size=64, droplead_p=0.0, lr0=1e-3, seed=1)
        base.update(kw)
        return TrainConfig(**base)

    def test_loss_decreases(self):
        model = LightX3ECG(make_tiny_spec(n_classes=2, dropout=0.0), seed=2)
        history = Trainer(self.cfg(), progress=False).fit(model, toy_dataset())
        assert len(history) == 5
        assert all(later < earlier for earlier, later in zip(history, history[1:]))

    def test_deterministic_trajectory(self):
        cfg = self.cfg(batch_size=16, droplead_p=0.5, epochs_total=2, epochs_cosine=2)
        runs = []
        for _ in range(2):
            model = LightX3ECG(make_tiny_spec(n_classes=2), seed=2)
            history = Trainer(cfg, progress=False).fit(model, toy_dataset(n=40))
            runs.append((history, model.state_dict()))
        assert runs[0][0] == runs[1][0]
        for name, value in runs[0][1].items():
            np.testing.assert_array_equal(value, runs[1][1][name])

    def test_single_row_batch_is_dropped(self):
        trainer = Trainer(self.cfg(batch_size=4), progress=False)
        batches = trainer._batches(9, np.random.default_rng(0))
        assert [len(b) for b in batches] == [4, 4]

    def test_evaluate_perfect_model_report(self):
        data = toy_dataset(n=8)
        model = LightX3ECG(make_tiny_spec(n_classes=2), seed=0)
        report = evaluate_model(model, data)
        assert set(report.table.columns) == {"precision", "recall", "f1", "accuracy"}
        assert list(report.table.index) == ["a", "b", "macro"]

    def test_masked_optimizer_keeps_pruned_weights(self):
        model = LightX3ECG(make_tiny_spec(n_classes=2, dropout=0.0), seed=2)
        masks = {name: np.random.default_rng(0).random(p.value.shape) > 0.5
                 for name, p in model.named_parameters() if p.prunable}
        Trainer(self.cfg(epochs_total=1, epochs_cosine=1, batch_size=32), progress=False).fit(
            model, toy_dataset(n=32), masks=masks)
        params = dict(model.named_parameters())
        for name, mask in masks.items():
            assert not params[name].value[~mask].any()

    def test_optimizer_wraps_model(self):
        model = LightX3ECG(make_tiny_spec(), seed=0)
        optimizer = AdamOptimizer(model, weight_decay=5e-5)
        assert set(optimizer.params) == {name for name, _ in model.named_parameters()}
