"""
Qualitative analyses of a trained model: attention-map overlays per view
and the cosine correlation between global part features.
"""

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Union

import numpy as np

from exceptions import ArtifactIOError, DimensionError, UsageError
from panet_model import PANetModel
from shapegen import MultiViewDataset, MultiViewSample
from tensor_engine import Tensor

logger = logging.getLogger(__name__)

TOP_MAPS = 4


def part_correlation(global_parts: Union[Tensor, np.ndarray]) -> np.ndarray:
    """L×L cosine similarities between the rows of P̄.

    An all-zero row correlates 1 with itself and 0 with every other row.
    """
    rows = global_parts.numpy() if isinstance(global_parts, Tensor) else np.asarray(global_parts, dtype=np.float64)
    if rows.ndim != 2:
        raise DimensionError(f"Expected an L×C matrix, got shape {rows.shape}")
    norms = np.linalg.norm(rows, axis=1)
    nonzero = norms > 0
    unit = np.zeros_like(rows)
    unit[nonzero] = rows[nonzero] / norms[nonzero, None]
    matrix = np.clip(unit @ unit.T, -1.0, 1.0)
    matrix = (matrix + matrix.T) / 2.0
    np.fill_diagonal(matrix, 1.0)
    return matrix


def mean_offdiag(matrix: np.ndarray) -> float:
    """Mean absolute off-diagonal entry"""
    matrix = np.asarray(matrix, dtype=np.float64)
    size = matrix.shape[0]
    if size < 2:
        raise UsageError(f"Need at least two parts for an off-diagonal mean, got L={size}")
    mask = ~np.eye(size, dtype=bool)
    return float(np.abs(matrix[mask]).mean())


def sample_diversity(model: PANetModel, sample: MultiViewSample) -> float:
    return mean_offdiag(part_correlation(model.forward(sample).global_parts))


def mean_part_diversity(model: PANetModel, dataset: MultiViewDataset, workers: int = 1) -> float:
    """mean_offdiag(part_correlation(P̄)) averaged over a dataset (lower = more diverse parts)"""
    if len(dataset) == 0:
        raise UsageError("Cannot measure part diversity on an empty dataset")
    if workers <= 1:
        values = [sample_diversity(model, s) for s in dataset.samples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(lambda s: sample_diversity(model, s), dataset.samples))
    return float(np.mean(values))


def top_maps(attention: np.ndarray, count: int = TOP_MAPS) -> List[int]:
    """Indices of the min(count, M) maps of one view (H, W, M) with the largest total mass.

    Ties keep the lower index. With fewer than ``count`` maps every map is returned, so
    overlay export writes min(4, M) images per view.
    """
    masses = attention.sum(axis=(0, 1))
    return [int(j) for j in np.argsort(-masses, kind="stable")[:count]]


def to_gray(attention_map: np.ndarray, resolution: int) -> np.ndarray:
    """Nearest-neighbour upsample to resolution×resolution and min-max scale to uint8"""
    h, w = attention_map.shape
    if resolution % h or resolution % w:
        raise DimensionError(f"Cannot upsample {h}×{w} to {resolution}×{resolution} by an integer factor")
    big = np.repeat(np.repeat(attention_map, resolution // h, axis=0), resolution // w, axis=1)
    low, high = big.min(), big.max()
    if high - low <= 0:
        return np.zeros(big.shape, dtype=np.uint8)
    return np.rint((big - low) / (high - low) * 255.0).astype(np.uint8)


def write_pgm(image: np.ndarray, path: str) -> None:
    """8-bit binary (P5) grayscale image"""
    height, width = image.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    except OSError as e:
        logger.error(f"Failed to write image: {e}")
        raise ArtifactIOError(f"{path}: cannot write image: {e}") from e


def export_attention_overlays(sample: MultiViewSample, attention: Union[Tensor, np.ndarray],
                              out_dir: str) -> List[str]:
    """Write the min(4, M) heaviest attention maps of every view as ``view{i}_part{j}.pgm``; returns the paths"""
    maps = attention.numpy() if isinstance(attention, Tensor) else np.asarray(attention)
    if maps.ndim != 4 or maps.shape[0] != sample.v:
        raise DimensionError(f"Attention shape {maps.shape} does not match a {sample.v}-view sample")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(sample.v):
        for j in top_maps(maps[i]):
            path = os.path.join(out_dir, f"view{i}_part{j}.pgm")
            write_pgm(to_gray(maps[i, :, :, j], sample.resolution), path)
            paths.append(path)
    logger.info(f"Wrote {len(paths)} attention overlays to {out_dir}")
    return paths


def write_correlation_csv(matrix: np.ndarray, path: str) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            for row in matrix:
                writer.writerow([f"{x:.9g}" for x in row])
    except OSError as e:
        logger.error(f"Failed to write correlation matrix: {e}")
        raise ArtifactIOError(f"{path}: cannot write correlation matrix: {e}") from e


def inspect_sample(model: PANetModel, sample: MultiViewSample, out_dir: str) -> Dict[str, Any]:
    """Overlays plus correlation CSV for one sample; returns a summary dict"""
    result = model.forward(sample)
    overlays = export_attention_overlays(sample, result.attention, out_dir)
    matrix = part_correlation(result.global_parts)
    write_correlation_csv(matrix, os.path.join(out_dir, "correlation.csv"))
    summary = {
        "label": sample.label,
        "prediction": result.prediction,
        "overlays": len(overlays),
        "mean_offdiag": mean_offdiag(matrix) if matrix.shape[0] >= 2 else None,
    }
    return summary


def write_json(payload: Dict[str, Any], path: str) -> None:
    try:
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise ArtifactIOError(f"{path}: cannot write JSON: {e}") from e
