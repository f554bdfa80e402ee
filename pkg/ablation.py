"""
Scripted desk-scale ablation sweeps.

Every cell trains a fresh model per seed on a freshly rendered training set
and reports Metrics on a held-out split. Suites:

- component:   baseline / +CVA / +part-aware loss
- attention_M: M ∈ {16, 32, 64, 128}
- parts_L:     L ∈ {1, 8, 16, 32}
- sampler:     random vs furthest-point viewpoints
- views:       one model per seed, evaluated with the first v ∈ {1, 5, 10, 15, 20} views
"""

import csv
import logging
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from config import RunConfig, split_seed
from exceptions import ArtifactIOError, UsageError
from introspect import mean_part_diversity
from panet_model import PANetModel
from shapegen import MultiViewDataset, build_dataset, restrict_views
from trainer import AdamState, Metrics, evaluate, train_epoch

logger = logging.getLogger(__name__)

ABLATION_HEADER = ["suite", "setting", "seed", "per_class_acc", "per_instance_acc", "epochs", "wall_seconds"]
VIEW_COUNTS = (1, 5, 10, 15, 20)

SUITES: Dict[str, List[Tuple[str, Dict[str, Any]]]] = {
    "component": [
        ("baseline", {"use_cva": False, "gamma": 0.0}),
        ("+cva", {"use_cva": True, "gamma": 0.0}),
        ("+awe", {"use_cva": False, "gamma": 1.0}),
    ],
    "attention_M": [(f"M={m}", {"attention_maps": m}) for m in (16, 32, 64, 128)],
    "parts_L": [(f"L={n}", {"parts": n}) for n in (1, 8, 16, 32)],
    "sampler": [("random", {"sampler": "random"}), ("fps", {"sampler": "fps"})],
    "views": [(f"v={v}", {}) for v in VIEW_COUNTS],
}


class AblationRow(BaseModel):
    suite: str
    setting: str
    seed: str
    per_class_acc: float
    per_instance_acc: float
    epochs: int
    wall_seconds: float

    def csv_row(self) -> List[str]:
        return [self.suite, self.setting, self.seed, f"{self.per_class_acc:.6f}",
                f"{self.per_instance_acc:.6f}", str(self.epochs), f"{self.wall_seconds:.3f}"]


class AblationRunner:
    def __init__(self, base: RunConfig, seeds: Sequence[int] = (0, 1, 2), workers: int = 1):
        """Sweep runner; rendered datasets are cached per (split, regime, sampler, views, seed)"""
        self.base = base
        self.seeds = list(seeds)
        self.workers = workers
        self._datasets: Dict[Tuple[str, str, str, int, int], MultiViewDataset] = {}

    def _dataset(self, split: str, run: RunConfig, seed: int, fixed_views: Optional[int] = None) -> MultiViewDataset:
        data = run.data
        sampler = run.train.sampler
        key = (split, run.train.regime, sampler, fixed_views or 0, seed)
        if key not in self._datasets:
            per_class = data.train_per_class if split == "train" else data.test_per_class
            low, high = (fixed_views, fixed_views) if fixed_views else (data.min_views, data.max_views)
            self._datasets[key] = build_dataset(
                run.train.regime, per_class, run.network.num_classes, run.network.resolution,
                seed=split_seed(seed, split), sampler=sampler,
                min_views=low, max_views=high, fps_pool=data.fps_pool)
        return self._datasets[key]

    def _train(self, run: RunConfig, seed: int) -> PANetModel:
        train_config = run.train.model_copy(update={"seed": seed})
        model = PANetModel(run.network, seed=seed)
        state = AdamState.zeros_like(model.params.arrays())
        train = self._dataset("train", run, seed)
        for epoch in range(train_config.epochs):
            train_epoch(model, train, train_config, state, epoch)
        return model

    def _variant(self, overrides: Dict[str, Any]) -> RunConfig:
        return RunConfig.from_flat({**self.base.to_flat(), **overrides})

    def run(self, suite: str) -> List[AblationRow]:
        if suite not in SUITES:
            raise UsageError(f"Unknown ablation suite '{suite}', expected one of {sorted(SUITES)}")
        rows: List[AblationRow] = []
        if suite == "views":
            run = self._variant({"regime": "arbitrary"})
            for seed in self.seeds:
                started = time.perf_counter()
                model = self._train(run, seed)
                test = self._dataset("test", run, seed, fixed_views=max(VIEW_COUNTS))
                for v in VIEW_COUNTS:
                    restricted = MultiViewDataset(num_classes=test.num_classes, resolution=test.resolution,
                                                  samples=[restrict_views(s, v) for s in test.samples])
                    metrics = evaluate(model, restricted, self.workers)
                    rows.append(self._row(suite, f"v={v}", seed, metrics, run, started))
        else:
            for setting, overrides in SUITES[suite]:
                run = self._variant(overrides)
                for seed in self.seeds:
                    started = time.perf_counter()
                    model = self._train(run, seed)
                    metrics = evaluate(model, self._dataset("test", run, seed), self.workers)
                    rows.append(self._row(suite, setting, seed, metrics, run, started))
        return with_means(rows)

    def part_diversity(self, gammas: Sequence[float] = (0.0, 1.0)) -> Dict[float, List[float]]:
        """Test-set part diversity of one model per (gamma, seed); lower means more diverse parts"""
        results: Dict[float, List[float]] = {}
        for gamma in gammas:
            run = self._variant({"gamma": gamma})
            for seed in self.seeds:
                model = self._train(run, seed)
                value = mean_part_diversity(model, self._dataset("test", run, seed), self.workers)
                logger.info(f"Part diversity gamma={gamma} seed {seed}: {value:.4f}")
                results.setdefault(gamma, []).append(value)
        return results

    @staticmethod
    def _row(suite: str, setting: str, seed: int, metrics: Metrics, run: RunConfig, started: float) -> AblationRow:
        row = AblationRow(suite=suite, setting=setting, seed=str(seed), per_class_acc=metrics.per_class_acc,
                          per_instance_acc=metrics.per_instance_acc, epochs=run.train.epochs,
                          wall_seconds=time.perf_counter() - started)
        logger.info(f"Ablation {suite} {setting} seed {seed}: instance acc {row.per_instance_acc:.3f}, "
                    f"class acc {row.per_class_acc:.3f}")
        return row


def with_means(rows: Sequence[AblationRow]) -> List[AblationRow]:
    """Append one ``mean`` row per setting, in first-appearance order"""
    settings: Dict[Tuple[str, str], List[AblationRow]] = {}
    for row in rows:
        settings.setdefault((row.suite, row.setting), []).append(row)
    means = [
        AblationRow(suite=suite, setting=setting, seed="mean",
                    per_class_acc=float(np.mean([r.per_class_acc for r in group])),
                    per_instance_acc=float(np.mean([r.per_instance_acc for r in group])),
                    epochs=group[0].epochs,
                    wall_seconds=float(np.mean([r.wall_seconds for r in group])))
        for (suite, setting), group in settings.items()
    ]
    return list(rows) + means


def median_by_setting(rows: Sequence[AblationRow], metric: str = "per_instance_acc") -> Dict[str, float]:
    """Median of one metric over the per-seed rows of every setting; mean rows are skipped"""
    groups: Dict[str, List[float]] = {}
    for row in rows:
        if row.seed != "mean":
            groups.setdefault(row.setting, []).append(getattr(row, metric))
    return {setting: float(np.median(values)) for setting, values in groups.items()}


def write_ablation_csv(rows: Sequence[AblationRow], path: str) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(ABLATION_HEADER)
            for row in rows:
                writer.writerow(row.csv_row())
    except OSError as e:
        logger.error(f"Failed to write ablation table: {e}")
        raise ArtifactIOError(f"{path}: cannot write ablation table: {e}") from e


def run_ablation(suite: str, base: RunConfig, seeds: Sequence[int] = (0, 1, 2), workers: int = 1,
                 out_path: Optional[str] = None) -> List[AblationRow]:
    """Run one suite over ``seeds``; optionally write the CSV table"""
    rows = AblationRunner(base, seeds, workers).run(suite)
    if out_path:
        write_ablation_csv(rows, out_path)
        logger.info(f"Ablation table written to {out_path}")
    return rows
