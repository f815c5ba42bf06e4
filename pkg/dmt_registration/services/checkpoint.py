"""
Binary checkpoint codec for training state.

Layout (all little-endian):

    magic        8 bytes   b"DMTCKPT\\0"
    version      uint32    1
    config hash  32 bytes  sha256 of the model architecture (see model.config_hash)
    float width  uint8     4 or 8 (bytes per parameter)
    count        uint64    parameter count P
    student      P floats
    teacher      P floats
    adam m       P float64
    adam v       P float64
    adam step    uint64
    train step   uint64
    epoch        uint64
"""

import logging
import struct
from pathlib import Path

import numpy as np

from .adapt import TrainState
from .model import AdamState, ModelConfig, ModelParameters, config_hash

logger = logging.getLogger(__name__)

MAGIC = b"DMTCKPT\x00"
VERSION = 1

_HEADER = struct.Struct("<8sI32sBQ")
_TRAILER = struct.Struct("<QQQ")


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupt or belongs to another model config."""


def save_checkpoint(path, state: TrainState) -> Path:
    """Write ``state`` atomically (temporary file, then rename)."""
    path = Path(path)
    width = state.student.values.dtype.itemsize
    float_dtype = np.dtype(f"<f{width}")
    count = len(state.student)

    parts = [
        _HEADER.pack(MAGIC, VERSION, config_hash(state.model_config), width, count),
        state.student.values.astype(float_dtype).tobytes(),
        state.teacher.values.astype(float_dtype).tobytes(),
        state.optimizer.m.astype("<f8").tobytes(),
        state.optimizer.v.astype("<f8").tobytes(),
        _TRAILER.pack(state.optimizer.step, state.step, state.epoch),
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    logger.debug("Saved checkpoint %s (%d parameters, step %d)", path, count, state.step)
    return path


def load_checkpoint(path, model_config: ModelConfig) -> TrainState:
    """Read a checkpoint written for ``model_config``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")

    magic, version, digest, width, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if digest != config_hash(model_config):
        raise CheckpointError(f"{path}: checkpoint was written for a different model config")
    if width not in (4, 8):
        raise CheckpointError(f"{path}: invalid float width {width}")

    expected = _HEADER.size + count * (2 * width + 16) + _TRAILER.size
    if len(data) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(data)}")

    offset = _HEADER.size

    def take(dtype: str) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr.astype(dtype[1:] if dtype.startswith("<") else dtype)

    float_dtype = f"<f{width}"
    student = take(float_dtype)
    teacher = take(float_dtype)
    m = take("<f8")
    v = take("<f8")
    adam_step, step, epoch = _TRAILER.unpack_from(data, offset)

    return TrainState(
        model_config=model_config,
        student=ModelParameters(student),
        teacher=ModelParameters(teacher),
        optimizer=AdamState(m=m, v=v, step=adam_step),
        step=step,
        epoch=epoch,
    )
