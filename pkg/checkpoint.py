"""
Checkpoint files.

Layout (little-endian): magic ``PANETCK1``; u32 version; u32 × 7 header
(K, R, C, M, L, D, h); u32 length + UTF-8 JSON metadata (network and train
configs, optimizer step); u32 blob count; then per blob u32 name length,
name bytes, u32 ndim, u32 × ndim shape, f64 data. Model parameters come
first, followed by the optimizer moments ``adam.m.<name>`` / ``adam.v.<name>``.
"""

import json
import logging
import os
import struct
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from config import Config, PANetConfig, TrainConfig
from exceptions import ArtifactIOError, CheckpointError, CheckpointMismatchError
from panet_model import ModelParams, parameter_shapes

if TYPE_CHECKING:
    from trainer import AdamState

logger = logging.getLogger(__name__)

_U32 = struct.Struct("<I")
_HEADER = struct.Struct("<8I")


class Checkpoint(BaseModel):
    """Everything a checkpoint file holds, fully decoded"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    network: PANetConfig
    train: Optional[TrainConfig] = None
    step: int = 0
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = {}
    adam_v: Dict[str, np.ndarray] = {}

    def model_params(self) -> ModelParams:
        return ModelParams.from_arrays(self.network, self.params)


def _blob(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    array = np.asarray(array, dtype="<f8")
    parts = [_U32.pack(len(encoded)), encoded, _U32.pack(array.ndim)]
    parts.extend(_U32.pack(d) for d in array.shape)
    parts.append(array.tobytes())
    return b"".join(parts)


def encode_checkpoint(params: ModelParams, state: Optional["AdamState"] = None,
                      train: Optional[TrainConfig] = None) -> bytes:
    network = params.config
    meta = {
        "network": network.model_dump(mode="json"),
        "train": train.model_dump(mode="json") if train is not None else None,
        "step": state.step if state is not None else 0,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blobs: List[Tuple[str, np.ndarray]] = list(params.arrays().items())
    if state is not None:
        blobs += [(f"adam.m.{name}", state.m[name]) for name in params]
        blobs += [(f"adam.v.{name}", state.v[name]) for name in params]

    chunks = [Config.CHECKPOINT_MAGIC,
              _HEADER.pack(Config.CHECKPOINT_FORMAT_VERSION, *network.header()),
              _U32.pack(len(meta_bytes)), meta_bytes, _U32.pack(len(blobs))]
    chunks.extend(_blob(name, array) for name, array in blobs)
    return b"".join(chunks)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    magic = Config.CHECKPOINT_MAGIC
    if payload[:len(magic)] != magic:
        raise CheckpointError(f"{source}: not a checkpoint file (bad magic)")
    offset = len(magic)

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(payload):
            raise CheckpointError(f"{source}: truncated at byte {offset}")
        chunk = payload[offset:offset + count]
        offset += count
        return chunk

    def take_u32() -> int:
        return _U32.unpack(take(_U32.size))[0]

    version, *header = _HEADER.unpack(take(_HEADER.size))
    if version != Config.CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(take(take_u32()).decode("utf-8"))
        network = PANetConfig(**meta["network"])
        train = TrainConfig(**meta["train"]) if meta.get("train") is not None else None
        step = int(meta.get("step", 0))
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{source}: unreadable metadata: {e}") from e
    if tuple(header) != network.header():
        raise CheckpointError(f"{source}: header {tuple(header)} disagrees with metadata {network.header()}")

    blobs: Dict[str, np.ndarray] = {}
    for _ in range(take_u32()):
        name = take(take_u32()).decode("utf-8", errors="replace")
        shape = tuple(take_u32() for _ in range(take_u32()))
        count = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(take(count * 8), dtype="<f8").reshape(shape).astype(np.float64)
    if offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - offset} trailing bytes")

    expected = parameter_shapes(network)
    params = {name: blobs.pop(name, None) for name in expected}
    missing = [name for name, array in params.items() if array is None]
    if missing:
        raise CheckpointError(f"{source}: missing parameters {missing}")
    wrong = [name for name, array in params.items() if array.shape != expected[name]]
    if wrong:
        raise CheckpointError(f"{source}: parameters with wrong shape {wrong}")
    adam_m = {name[len("adam.m."):]: a for name, a in blobs.items() if name.startswith("adam.m.")}
    adam_v = {name[len("adam.v."):]: a for name, a in blobs.items() if name.startswith("adam.v.")}
    if len(adam_m) + len(adam_v) != len(blobs):
        raise CheckpointError(f"{source}: unexpected blobs {sorted(set(blobs))}")
    try:
        return Checkpoint(network=network, train=train, step=step, params=params, adam_m=adam_m, adam_v=adam_v)
    except ValidationError as e:
        raise CheckpointError(f"{source}: {e}") from e


def save_checkpoint(path: str, params: ModelParams, state: Optional["AdamState"] = None,
                    train: Optional[TrainConfig] = None) -> None:
    """Write atomically: the file at ``path`` is either the old one or the complete new one"""
    payload = encode_checkpoint(params, state, train)
    tmp_path = f"{path}.tmp"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(tmp_path, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except OSError as e:
        logger.error(f"Failed to write checkpoint: {e}")
        raise ArtifactIOError(f"{path}: cannot write checkpoint: {e}") from e
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str, expected: Optional[PANetConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` refuse one built for other hyperparameters"""
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        logger.error(f"Failed to read checkpoint: {e}")
        raise ArtifactIOError(f"{path}: cannot read checkpoint: {e}") from e
    checkpoint = decode_checkpoint(payload, source=path)
    if expected is not None:
        stored, wanted = checkpoint.network.architecture(), expected.architecture()
        differing = [key for key in wanted if stored[key] != wanted[key]]
        if differing:
            details = ", ".join(f"{key}={stored[key]} (expected {wanted[key]})" for key in differing)
            raise CheckpointMismatchError(f"{path}: checkpoint was built with {details}")
    return checkpoint
