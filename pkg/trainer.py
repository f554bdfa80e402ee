"""
Training and evaluation loop: AdamW, label smoothing, accuracy metrics.

Samples carry different view counts, so a batch is realised as gradient
accumulation over ``batch_size`` single-sample forward/backward passes
followed by one optimizer step.
"""

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from checkpoint import Checkpoint, save_checkpoint
from config import TrainConfig
from exceptions import ArtifactIOError, NumericalError, TrainingError, UsageError
from panet_model import PANetModel, label_smooth  # noqa: F401 re-exported
from shapegen import MultiViewDataset

logger = logging.getLogger(__name__)

EPOCH_LOG_HEADER = ["epoch", "mean_loss", "train_inst_acc", "val_inst_acc", "val_class_acc"]


class AdamState:
    """AdamW first/second moments per parameter name plus the step counter"""

    def __init__(self, m: Dict[str, np.ndarray], v: Dict[str, np.ndarray], step: int = 0):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a, dtype=np.float64) for k, a in params.items()},
                   {k: np.zeros_like(a, dtype=np.float64) for k, a in params.items()})

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "AdamState":
        """Resume optimizer state; a checkpoint without moments starts from zero"""
        if not checkpoint.adam_m:
            return cls.zeros_like(checkpoint.params)
        return cls(dict(checkpoint.adam_m), dict(checkpoint.adam_v), checkpoint.step)


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
               config: TrainConfig) -> Dict[str, np.ndarray]:
    """One AdamW update with bias correction and decoupled weight decay.

    Returns new parameter arrays; ``state`` is advanced in place.
    """
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None or np.shape(grad) != value.shape:
            raise UsageError(f"Gradient for '{name}' has shape {np.shape(grad)}, expected {value.shape}")
        if state.m.get(name) is None or state.m[name].shape != value.shape or state.v[name].shape != value.shape:
            raise UsageError(f"Optimizer moments for '{name}' do not match parameter shape {value.shape}")

    beta1, beta2 = config.betas
    lr, wd, eps = config.learning_rate, config.weight_decay, config.adam_eps
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    updated = {}
    for name, value in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * wd * value
    return updated


class Metrics(BaseModel):
    per_instance_acc: float = Field(ge=0, le=1)
    per_class_acc: float = Field(ge=0, le=1)
    confusion: List[List[int]]


def metrics_from_predictions(labels: Sequence[int], predictions: Sequence[int], num_classes: int) -> Metrics:
    """Confusion matrix (rows = true class) and both accuracies.

    Per-class accuracy averages recall over classes that occur in ``labels``.
    """
    if len(labels) != len(predictions):
        raise UsageError(f"{len(labels)} labels but {len(predictions)} predictions")
    if len(labels) == 0:
        raise UsageError("Cannot compute metrics on an empty set")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (np.asarray(labels), np.asarray(predictions)), 1)
    support = confusion.sum(axis=1)
    present = support > 0
    recall = np.diag(confusion)[present] / support[present]
    return Metrics(per_instance_acc=float(np.trace(confusion) / len(labels)),
                   per_class_acc=float(recall.mean()),
                   confusion=confusion.tolist())


def _augment_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def train_epoch(model: PANetModel, dataset: MultiViewDataset, config: TrainConfig, state: AdamState,
                epoch: int = 0) -> Tuple[float, Metrics]:
    """One seeded pass over ``dataset``; updates ``model.params`` and ``state``"""
    if len(dataset) == 0:
        raise UsageError("Training set is empty")
    order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
    losses, labels, predictions = [], [], []
    for start in range(0, len(order), config.batch_size):
        batch = order[start:start + config.batch_size]
        accumulated: Dict[str, np.ndarray] = {}
        for index in batch:
            index = int(index)
            sample = dataset.samples[index]
            try:
                result, grads = model.loss_and_gradients(
                    sample, gamma=config.gamma, smoothing=config.smoothing, train_mode=config.augment,
                    aug_seed=_augment_seed(config.seed, epoch, index))
            except NumericalError as e:
                logger.error(f"Non-finite values on training sample {index} (epoch {epoch}): {e}")
                raise TrainingError(f"Non-finite loss on training sample {index} at epoch {epoch}: {e}") from e
            loss = result.loss.item()
            if not np.isfinite(loss):
                raise TrainingError(f"Non-finite loss on training sample {index} at epoch {epoch}")
            losses.append(loss)
            labels.append(sample.label)
            predictions.append(result.prediction)
            for name, grad in grads.items():
                accumulated[name] = accumulated[name] + grad if name in accumulated else grad.copy()
        mean_grads = {name: g / len(batch) for name, g in accumulated.items()}
        updated = adamw_step(model.params.arrays(), mean_grads, state, config)
        model.params = model.params.replace(updated)

    mean_loss = float(np.mean(losses))
    metrics = metrics_from_predictions(labels, predictions, model.config.num_classes)
    logger.info(f"Epoch {epoch}: mean loss {mean_loss:.4f}, train instance acc {metrics.per_instance_acc:.3f}")
    return mean_loss, metrics


def predict_all(model: PANetModel, dataset: MultiViewDataset, workers: int = 1) -> List[int]:
    """Eval-mode argmax predictions in dataset order; forwards fan out over ``workers`` threads"""
    if workers <= 1:
        return [model.predict(sample) for sample in dataset.samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(model.predict, dataset.samples))


def evaluate(model: PANetModel, dataset: MultiViewDataset, workers: int = 1) -> Metrics:
    predictions = predict_all(model, dataset, workers)
    labels = [s.label for s in dataset.samples]
    return metrics_from_predictions(labels, predictions, model.config.num_classes)


class EpochRecord(BaseModel):
    epoch: int
    mean_loss: float
    train_inst_acc: float
    val_inst_acc: Optional[float] = None
    val_class_acc: Optional[float] = None

    def csv_row(self) -> List[str]:
        def fmt(x: Optional[float]) -> str:
            return "" if x is None else f"{x:.9g}"
        return [str(self.epoch), fmt(self.mean_loss), fmt(self.train_inst_acc),
                fmt(self.val_inst_acc), fmt(self.val_class_acc)]


def write_epoch_log(records: Sequence[EpochRecord], path: str) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(EPOCH_LOG_HEADER)
            for record in records:
                writer.writerow(record.csv_row())
    except OSError as e:
        logger.error(f"Failed to write epoch log: {e}")
        raise ArtifactIOError(f"{path}: cannot write epoch log: {e}") from e


def fit(model: PANetModel, train: MultiViewDataset, config: TrainConfig, out_dir: Optional[str] = None,
        val: Optional[MultiViewDataset] = None, state: Optional[AdamState] = None,
        workers: int = 1) -> List[EpochRecord]:
    """Train for ``config.epochs`` epochs, evaluating on ``val`` after each one.

    With ``out_dir`` the epoch log and ``checkpoint.ck`` are rewritten after
    every epoch (and once up front, so zero epochs still leave a checkpoint).
    """
    if state is None:
        state = AdamState.zeros_like(model.params.arrays())
    checkpoint_path = os.path.join(out_dir, "checkpoint.ck") if out_dir else None
    log_path = os.path.join(out_dir, "epoch_log.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(checkpoint_path, model.params, state, config)
        write_epoch_log([], log_path)

    records: List[EpochRecord] = []
    for epoch in range(config.epochs):
        mean_loss, train_metrics = train_epoch(model, train, config, state, epoch)
        record = EpochRecord(epoch=epoch + 1, mean_loss=mean_loss, train_inst_acc=train_metrics.per_instance_acc)
        if val is not None:
            val_metrics = evaluate(model, val, workers)
            record = record.model_copy(update={"val_inst_acc": val_metrics.per_instance_acc,
                                               "val_class_acc": val_metrics.per_class_acc})
            logger.info(f"Epoch {epoch}: val instance acc {val_metrics.per_instance_acc:.3f}, "
                        f"class acc {val_metrics.per_class_acc:.3f}")
        records.append(record)
        if out_dir:
            save_checkpoint(checkpoint_path, model.params, state, config)
            write_epoch_log(records, log_path)
    return records
