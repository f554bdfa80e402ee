"""
Binary dataset files.

Layout (little-endian): magic ``PANETDS1``; u32 version, K, R, sample count;
then per sample u32 label, u32 v, v×3 f64 viewpoints, v×R×R f32 pixels.
"""

import hashlib
import logging
import os
import struct
from collections import Counter
from typing import Any, Dict

import numpy as np

from config import Config
from exceptions import ArtifactIOError, DatasetFormatError
from shapegen import MultiViewDataset, MultiViewSample

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4I")
_RECORD = struct.Struct("<2I")


def encode_dataset(dataset: MultiViewDataset) -> bytes:
    chunks = [Config.DATASET_MAGIC,
              _HEADER.pack(dataset.version, dataset.num_classes, dataset.resolution, len(dataset.samples))]
    for sample in dataset.samples:
        chunks.append(_RECORD.pack(sample.label, sample.v))
        chunks.append(np.asarray(sample.viewpoints, dtype="<f8").tobytes())
        chunks.append(np.asarray(sample.views, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_dataset(payload: bytes, source: str = "<bytes>") -> MultiViewDataset:
    magic = Config.DATASET_MAGIC
    if payload[:len(magic)] != magic:
        raise DatasetFormatError(f"{source}: not a dataset file (bad magic)")
    offset = len(magic)

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(payload):
            raise DatasetFormatError(f"{source}: truncated at byte {offset}")
        chunk = payload[offset:offset + count]
        offset += count
        return chunk

    version, num_classes, resolution, count = _HEADER.unpack(take(_HEADER.size))
    if version != Config.DATASET_FORMAT_VERSION:
        raise DatasetFormatError(f"{source}: unsupported dataset version {version}")
    samples = []
    for index in range(count):
        label, v = _RECORD.unpack(take(_RECORD.size))
        viewpoints = np.frombuffer(take(v * 3 * 8), dtype="<f8").reshape(v, 3).astype(np.float64)
        views = np.frombuffer(take(v * resolution * resolution * 4), dtype="<f4")
        views = views.reshape(v, resolution, resolution).astype(np.float32)
        try:
            samples.append(MultiViewSample(views=views, viewpoints=viewpoints, label=label))
        except ValueError as e:
            raise DatasetFormatError(f"{source}: sample {index} is invalid: {e}") from e
    if offset != len(payload):
        raise DatasetFormatError(f"{source}: {len(payload) - offset} trailing bytes")
    try:
        return MultiViewDataset(num_classes=num_classes, resolution=resolution, samples=samples,
                                version=version)
    except ValueError as e:
        raise DatasetFormatError(f"{source}: {e}") from e


def write_dataset(dataset: MultiViewDataset, path: str) -> str:
    """Write atomically (temp file + rename); returns the sha256 digest of the file"""
    payload = encode_dataset(dataset)
    tmp_path = f"{path}.tmp"
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(tmp_path, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except OSError as e:
        logger.error(f"Failed to write dataset: {e}")
        raise ArtifactIOError(f"{path}: cannot write dataset: {e}") from e
    logger.info(f"Wrote {len(dataset.samples)} samples to {path}")
    return hashlib.sha256(payload).hexdigest()


def read_dataset(path: str) -> MultiViewDataset:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        logger.error(f"Failed to read dataset: {e}")
        raise ArtifactIOError(f"{path}: cannot read dataset: {e}") from e
    return decode_dataset(payload, source=path)


def dataset_digest(path: str) -> str:
    """sha256 of the file exactly as stored"""
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                digest.update(block)
    except OSError as e:
        raise ArtifactIOError(f"{path}: cannot read for digest: {e}") from e
    return digest.hexdigest()


def datasets_identical(a: MultiViewDataset, b: MultiViewDataset) -> bool:
    """Bit-exact equality of headers, labels, viewpoints and pixels"""
    if (a.version, a.num_classes, a.resolution, len(a.samples)) != \
            (b.version, b.num_classes, b.resolution, len(b.samples)):
        return False
    for x, y in zip(a.samples, b.samples):
        if x.label != y.label or x.views.dtype != y.views.dtype:
            return False
        if x.views.tobytes() != y.views.tobytes() or x.viewpoints.tobytes() != y.viewpoints.tobytes():
            return False
    return True


def dataset_stats(dataset: MultiViewDataset) -> Dict[str, Any]:
    """Header values, per-class counts and the view-count histogram"""
    labels = Counter(s.label for s in dataset.samples)
    views = Counter(s.v for s in dataset.samples)
    return {
        "num_classes": dataset.num_classes,
        "resolution": dataset.resolution,
        "sample_count": len(dataset.samples),
        "class_counts": {k: labels.get(k, 0) for k in range(dataset.num_classes)},
        "view_histogram": dict(sorted(views.items())),
    }
