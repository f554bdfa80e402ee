import csv
import os
import time

import numpy as np
import numpy.testing as npt
import pytest

from checkpoint import load_checkpoint
from config import TrainConfig, resolve_run_config, split_seed
from exceptions import NumericalError, TrainingError, UsageError
from panet_model import PANetModel
from shapegen import build_dataset
from trainer import (
    EPOCH_LOG_HEADER,
    AdamState,
    EpochRecord,
    adamw_step,
    evaluate,
    fit,
    label_smooth,
    metrics_from_predictions,
    predict_all,
    train_epoch,
)


def one_param_step(theta, grad, **overrides):
    config = TrainConfig(**{"weight_decay": 0.0, **overrides})
    params = {"w": np.array([theta])}
    state = AdamState.zeros_like(params)
    return adamw_step(params, {"w": np.array([grad])}, state, config)["w"][0], state


def brute_force_metrics(labels, predictions, num_classes):
    hits = sum(1 for y, p in zip(labels, predictions) if y == p)
    recalls = []
    for k in range(num_classes):
        rows = [p for y, p in zip(labels, predictions) if y == k]
        if rows:
            recalls.append(sum(1 for p in rows if p == k) / len(rows))
    return hits / len(labels), sum(recalls) / len(recalls)


def brute_force_confusion(labels, predictions, num_classes):
    confusion = [[0] * num_classes for _ in range(num_classes)]
    for y, p in zip(labels, predictions):
        confusion[y][p] += 1
    return confusion


class TestAdamW:
    def test_single_step_hand_value(self):
        theta, state = one_param_step(1.0, 1.0, learning_rate=0.1)
        assert theta == pytest.approx(0.9, abs=1e-6)
        assert state.step == 1

    def test_zero_gradient_without_decay_is_fixed(self):
        theta, _ = one_param_step(0.37, 0.0, learning_rate=0.1)
        assert theta == 0.37

    def test_pure_decay_shrinks_geometrically(self):
        config = TrainConfig(learning_rate=0.1, weight_decay=0.5)
        params = {"w": np.array([2.0, -4.0])}
        state = AdamState.zeros_like(params)
        for _ in range(3):
            params = adamw_step(params, {"w": np.zeros(2)}, state, config)
        npt.assert_allclose(params["w"], np.array([2.0, -4.0]) * 0.95 ** 3)

    def test_shape_mismatch(self):
        params = {"w": np.zeros((2, 2))}
        with pytest.raises(UsageError):
            adamw_step(params, {"w": np.zeros(4)}, AdamState.zeros_like(params), TrainConfig())

    def test_missing_moments(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(UsageError):
            adamw_step(params, {"w": np.zeros(2)}, AdamState({}, {}), TrainConfig())


class TestMetrics:
    def test_hand_value(self):
        metrics = metrics_from_predictions([0, 0, 0, 1], [0, 0, 1, 1], 2)
        assert metrics.per_instance_acc == pytest.approx(0.75)
        assert metrics.per_class_acc == pytest.approx(0.8333, abs=1e-4)
        assert metrics.confusion == [[2, 1], [0, 1]]

    def test_matches_brute_force_on_random_cases(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            num_classes, n = int(rng.integers(2, 8)), int(rng.integers(1, 60))
            labels = rng.integers(0, num_classes, n).tolist()
            predictions = rng.integers(0, num_classes, n).tolist()
            metrics = metrics_from_predictions(labels, predictions, num_classes)
            instance, per_class = brute_force_metrics(labels, predictions, num_classes)
            assert metrics.per_instance_acc == pytest.approx(instance)
            assert metrics.per_class_acc == pytest.approx(per_class)
            assert metrics.confusion == brute_force_confusion(labels, predictions, num_classes)

    def test_perfect_predictions(self):
        metrics = metrics_from_predictions([2, 1, 0], [2, 1, 0], 3)
        assert metrics.per_instance_acc == metrics.per_class_acc == 1.0

    def test_empty_rejected(self):
        with pytest.raises(UsageError):
            metrics_from_predictions([], [], 3)


def test_label_smooth_is_reexported():
    npt.assert_allclose(label_smooth(0, 4, 0.2), [0.85, 0.05, 0.05, 0.05])


class TestTraining:
    def test_same_seed_same_parameters(self, tiny_config, tiny_dataset, quiet_train_config):
        runs = []
        for _ in range(2):
            model = PANetModel(tiny_config, seed=0)
            fit(model, tiny_dataset, quiet_train_config)
            runs.append(model.params.arrays())
        assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])

    def test_augmented_training_is_seeded(self, tiny_config, tiny_dataset):
        config = TrainConfig(epochs=1, batch_size=3, augment=True)
        runs = []
        for _ in range(2):
            model = PANetModel(tiny_config, seed=1)
            fit(model, tiny_dataset, config)
            runs.append(model.params.arrays())
        assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])

    def test_epoch_changes_parameters(self, tiny_config, tiny_dataset, quiet_train_config):
        model = PANetModel(tiny_config, seed=0)
        before = model.params.arrays()
        state = AdamState.zeros_like(before)
        loss, metrics = train_epoch(model, tiny_dataset, quiet_train_config, state)
        assert np.isfinite(loss)
        assert state.step == 3
        assert any(not np.array_equal(before[k], a) for k, a in model.params.arrays().items())
        assert sum(map(sum, metrics.confusion)) == len(tiny_dataset)

    def test_zero_learning_rate_keeps_parameters(self, tiny_config, tiny_dataset, quiet_train_config):
        config = quiet_train_config.model_copy(update={"learning_rate": 0.0})
        model = PANetModel(tiny_config, seed=0)
        before = model.params.arrays()
        train_epoch(model, tiny_dataset, config, AdamState.zeros_like(before))
        assert all(np.array_equal(before[k], a) for k, a in model.params.arrays().items())

    def test_numerical_failure_names_the_sample(self, tiny_config, tiny_dataset, quiet_train_config, monkeypatch):
        model = PANetModel(tiny_config, seed=0)

        def explode(*args, **kwargs):
            raise NumericalError("exp produced non-finite values")

        monkeypatch.setattr(model, "loss_and_gradients", explode)
        with pytest.raises(TrainingError, match="sample"):
            train_epoch(model, tiny_dataset, quiet_train_config, AdamState.zeros_like(model.params.arrays()))

    def test_empty_dataset(self, tiny_config, quiet_train_config):
        model = PANetModel(tiny_config)
        empty = build_dataset("aligned", 1, num_classes=3, resolution=8).model_copy(update={"samples": []})
        with pytest.raises(UsageError):
            train_epoch(model, empty, quiet_train_config, AdamState.zeros_like(model.params.arrays()))


class TestEvaluation:
    def test_workers_do_not_change_predictions(self, tiny_config, tiny_dataset):
        model = PANetModel(tiny_config, seed=4)
        assert predict_all(model, tiny_dataset, workers=1) == predict_all(model, tiny_dataset, workers=3)

    def test_metrics_cover_every_sample(self, tiny_config, tiny_dataset):
        metrics = evaluate(PANetModel(tiny_config, seed=4), tiny_dataset)
        assert sum(map(sum, metrics.confusion)) == len(tiny_dataset)
        assert 0.0 <= metrics.per_class_acc <= 1.0


class TestFit:
    def test_writes_checkpoint_and_log(self, tiny_config, tiny_dataset, quiet_train_config, tmp_path):
        config = quiet_train_config.model_copy(update={"epochs": 2})
        model = PANetModel(tiny_config, seed=0)
        records = fit(model, tiny_dataset, config, out_dir=str(tmp_path), val=tiny_dataset)
        assert [r.epoch for r in records] == [1, 2]
        assert all(r.val_inst_acc is not None for r in records)

        with open(tmp_path / "epoch_log.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == EPOCH_LOG_HEADER
        assert len(rows) == 3

        checkpoint = load_checkpoint(str(tmp_path / "checkpoint.ck"), expected=tiny_config)
        assert checkpoint.step == 2 * 3
        stored = checkpoint.params
        assert all(stored[k].tobytes() == a.tobytes() for k, a in model.params.arrays().items())

    def test_zero_epochs_still_leave_a_checkpoint(self, tiny_config, tiny_dataset, quiet_train_config, tmp_path):
        config = quiet_train_config.model_copy(update={"epochs": 0})
        model = PANetModel(tiny_config, seed=0)
        assert fit(model, tiny_dataset, config, out_dir=str(tmp_path)) == []
        assert os.path.exists(tmp_path / "checkpoint.ck")

    def test_resume_from_checkpoint_state(self, tiny_config, tiny_dataset, quiet_train_config, tmp_path):
        model = PANetModel(tiny_config, seed=0)
        fit(model, tiny_dataset, quiet_train_config, out_dir=str(tmp_path))
        state = AdamState.from_checkpoint(load_checkpoint(str(tmp_path / "checkpoint.ck")))
        assert state.step == 3
        assert set(state.m) == set(model.params)

    def test_record_formatting(self):
        assert EpochRecord(epoch=1, mean_loss=0.5, train_inst_acc=1.0).csv_row() == ["1", "0.5", "1", "", ""]


@pytest.mark.slow
def test_overfits_a_tiny_set(tiny_config):
    dataset = build_dataset("aligned", 1, num_classes=tiny_config.num_classes,
                            resolution=tiny_config.resolution, seed=0)
    config = TrainConfig(epochs=100, batch_size=1, learning_rate=1e-2, weight_decay=0.0,
                         smoothing=0.0, augment=False)
    model = PANetModel(tiny_config, seed=0)
    records = fit(model, dataset, config)
    assert records[-1].mean_loss < records[0].mean_loss
    assert evaluate(model, dataset).per_instance_acc == 1.0


@pytest.mark.slow
@pytest.mark.benchmark
def test_default_preset_learns_within_fifteen_minutes():
    run = resolve_run_config("default")
    network, data = run.network, run.data
    train, test = (
        build_dataset(run.train.regime, per_class, network.num_classes, network.resolution,
                      seed=split_seed(0, split), sampler=run.train.sampler,
                      min_views=data.min_views, max_views=data.max_views, fps_pool=data.fps_pool)
        for split, per_class in (("train", data.train_per_class), ("test", data.test_per_class)))
    assert (len(train), len(test)) == (600, 180)
    model = PANetModel(network, seed=0)
    started = time.perf_counter()
    fit(model, train, run.train)
    elapsed = time.perf_counter() - started
    accuracy = evaluate(model, test).per_instance_acc
    assert elapsed < 15 * 60, f"training took {elapsed:.0f} s"
    assert accuracy >= 0.85
    assert accuracy >= 5.0 / network.num_classes
