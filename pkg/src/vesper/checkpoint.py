"""Checkpoint container and student initialisation.

The on-disk format ("VSPR") is a flat named-tensor container:

    magic   4 bytes         b"VSPR"
    version u32 LE          currently 1
    meta    u32 LE length + UTF-8 JSON (sorted keys, no timestamps)
    count   u32 LE          number of tensor records
    per tensor, sorted by name:
        name    u32 LE length + UTF-8 bytes
        dtype   u8           0 = float32, 1 = float64
        rank    u32 LE
        extents rank x u64 LE
        payload raw little-endian values, C order
    crc     u32 LE          CRC32 over everything from the count field
                            through the last payload byte

Serialization is deterministic: identical state and metadata give
byte-identical files, so checkpoints can be diffed and content-addressed.

Student initialisation implements the three compression strategies:
uniform layer extraction, uniform layer averaging, and random layer init.
The frontend, positional convolution, and final norm transfer verbatim in
every strategy; only the transformer layers differ.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__
from .encoder import (
    EncoderConfig,
    EncoderState,
    Role,
    _init_array,
    config_from_dict,
    config_to_dict,
    is_trainable,
    parameter_shapes,
)
from .errors import CheckpointError, CompletenessError, ContractViolation
from .tensor import Tensor

MAGIC = b"VSPR"
FORMAT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF_KIND = {"f4": 0, "f8": 1}


class InitStrategy(str, Enum):
    EXTRACTION = "extraction"
    AVERAGING = "averaging"
    RANDOM = "random"


@dataclass
class LayerMapping:
    """Per-student-layer parameter sources, 1-based teacher indices."""

    strategy: InitStrategy
    sources: list[int] | None = None  # extraction: one teacher layer each
    ranges: list[tuple[int, int]] | None = None  # averaging: inclusive spans

    def describe(self) -> list[str]:
        if self.strategy is InitStrategy.EXTRACTION:
            return [f"layer {i + 1} <- teacher layer {s}" for i, s in enumerate(self.sources)]
        if self.strategy is InitStrategy.AVERAGING:
            return [
                f"layer {i + 1} <- mean of teacher layers {a}..{b}"
                for i, (a, b) in enumerate(self.ranges)
            ]
        return ["all layers <- seeded random init"]


def extraction_map(n: int, m: int) -> LayerMapping:
    """Student layer i (1-based) takes teacher layer 1 + floor(M/N)*(i-1)."""
    _check_nm(n, m)
    step = m // n
    return LayerMapping(
        InitStrategy.EXTRACTION, sources=[1 + step * (i - 1) for i in range(1, n + 1)]
    )


def averaging_map(n: int, m: int) -> LayerMapping:
    """Student layer i averages teacher layers [1 + floor(M/N)*(i-1), floor(M/N)*i]."""
    _check_nm(n, m)
    step = m // n
    return LayerMapping(
        InitStrategy.AVERAGING,
        ranges=[(1 + step * (i - 1), step * i) for i in range(1, n + 1)],
    )


def random_map(n: int) -> LayerMapping:
    if n < 1:
        raise ContractViolation(f"need at least one layer, got {n}")
    return LayerMapping(InitStrategy.RANDOM)


def _check_nm(n: int, m: int):
    if not 1 <= n <= m:
        raise ContractViolation(f"need 1 <= N <= M, got N={n}, M={m}")


# ---------------------------------------------------------------------------
# container I/O


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, np.ndarray]

    @property
    def config(self) -> EncoderConfig | None:
        raw = self.metadata.get("config")
        return config_from_dict(raw) if raw else None


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict):
    """Write atomically (temp file + rename), deterministically."""
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.kind != "f":
            raise ContractViolation(f"{name}: non-float dtype {arr.dtype}")
        kind = "f8" if arr.dtype.itemsize == 8 else "f4"
        arr = arr.astype(_DTYPE_TAGS[_TAG_OF_KIND[kind]], copy=False)
        encoded = name.encode("utf-8")
        body += struct.pack("<I", len(encoded)) + encoded
        body += struct.pack("<BI", _TAG_OF_KIND[kind], arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    blob = (
        MAGIC
        + struct.pack("<I", FORMAT_VERSION)
        + struct.pack("<I", len(meta_bytes))
        + meta_bytes
        + bytes(body)
        + struct.pack("<I", zlib.crc32(bytes(body)))
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    pos = 0

    def take(count: int, what: str) -> bytes:
        nonlocal pos
        if pos + count > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {what}", pos)
        out = buf[pos:pos + count]
        pos += count
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}", 4)
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    try:
        metadata = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad metadata: {exc}", pos - meta_len) from exc

    body_start = pos
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5, f"{name} header"))
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: {name}: unknown dtype tag {tag}", pos - 5)
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"{name} extents"))
        dt = _DTYPE_TAGS[tag]
        n_bytes = int(math.prod(shape)) * dt.itemsize
        raw = take(n_bytes, f"{name} payload")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name}", pos - n_bytes)
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float64)
    (stored_crc,) = struct.unpack("<I", take(4, "checksum"))
    actual = zlib.crc32(buf[body_start:pos - 4])
    if stored_crc != actual:
        raise CheckpointError(
            f"{path}: checksum mismatch (stored {stored_crc:#010x}, computed {actual:#010x})",
            pos - 4,
        )
    return Checkpoint(metadata, tensors)


def base_metadata(kind: str, config: EncoderConfig | None = None, seed: int | None = None) -> dict:
    """Deterministic metadata: tool version and seed, never wall-clock values."""
    meta = {"format": "vesper-checkpoint", "kind": kind, "tool": f"vesper {__version__}"}
    if config is not None:
        meta["config"] = config_to_dict(config)
    if seed is not None:
        meta["seed"] = seed
    return meta


def save_state(path, state: EncoderState, kind: str = "encoder",
               seed: int | None = None, extra: dict | None = None):
    meta = base_metadata(kind, state.config, seed)
    if extra:
        meta.update(extra)
    save_checkpoint(path, {n: p.data for n, p in state.params.items()}, meta)


def state_from_checkpoint(
    ckpt: Checkpoint, config: EncoderConfig | None = None, trainable: bool = True
) -> EncoderState:
    """Rebuild an EncoderState, verifying name and shape completeness.

    With trainable=False every parameter is frozen (downstream use).
    """
    if config is None:
        config = ckpt.config
    if config is None:
        raise ContractViolation("checkpoint has no embedded config; pass one")
    expected = parameter_shapes(config)
    missing = set(expected) - set(ckpt.tensors)
    unexpected = set(ckpt.tensors) - set(expected)
    if missing or unexpected:
        raise CompletenessError(missing, unexpected)
    bad = [
        f"{name}: checkpoint {ckpt.tensors[name].shape}, config {expected[name]}"
        for name in sorted(expected)
        if tuple(ckpt.tensors[name].shape) != tuple(expected[name])
    ]
    if bad:
        raise ContractViolation("shape mismatch: " + "; ".join(bad))
    params = {
        name: Tensor(
            ckpt.tensors[name].copy(),
            requires_grad=trainable and is_trainable(name, config),
        )
        for name in expected
    }
    return EncoderState(config, params)


# ---------------------------------------------------------------------------
# student initialisation


def _layer_names(index: int, config: EncoderConfig) -> list[str]:
    prefix = f"layer.{index}."
    return [n for n in parameter_shapes(config) if n.startswith(prefix)]


def init_student(
    teacher_ckpt: Checkpoint,
    student_config: EncoderConfig,
    mapping: LayerMapping,
    seed: int = 0,
) -> EncoderState:
    """Build the student's initial state from a teacher checkpoint.

    Frontend, positional convolution, and final norm copy verbatim; the
    transformer layers follow the mapping; the mask embedding is always a
    fresh seeded draw.
    """
    teacher_config = teacher_ckpt.config
    if teacher_config is None:
        raise ContractViolation("teacher checkpoint has no embedded config")
    if student_config.role is not Role.STUDENT:
        raise ContractViolation("student_config must have the student role")
    mismatches = [
        f"{field}: teacher {getattr(teacher_config, field)}, student {getattr(student_config, field)}"
        for field in ("dim", "heads", "ffn_dim", "conv_frontend", "pos_conv")
        if getattr(teacher_config, field) != getattr(student_config, field)
    ]
    if mismatches:
        raise ContractViolation("teacher/student mismatch: " + "; ".join(mismatches))
    n = student_config.num_layers
    m = teacher_config.num_layers
    if mapping.strategy is InitStrategy.EXTRACTION:
        if len(mapping.sources) != n or any(not 1 <= s <= m for s in mapping.sources):
            raise ContractViolation(f"mapping does not fit N={n}, M={m}")
    elif mapping.strategy is InitStrategy.AVERAGING:
        if len(mapping.ranges) != n or any(
            not 1 <= a <= b <= m for a, b in mapping.ranges
        ):
            raise ContractViolation(f"mapping does not fit N={n}, M={m}")

    rng = np.random.default_rng(seed)
    shapes = parameter_shapes(student_config)
    params: dict[str, np.ndarray] = {}

    for name, shape in shapes.items():
        if name.startswith("layer.") or name == "mask_embedding":
            continue
        if name not in teacher_ckpt.tensors:
            raise CompletenessError([name], [])
        src = teacher_ckpt.tensors[name]
        if tuple(src.shape) != tuple(shape):
            raise ContractViolation(
                f"{name}: teacher shape {src.shape}, student expects {shape}"
            )
        params[name] = src.copy()

    for i in range(n):
        for name in _layer_names(i, student_config):
            suffix = name.split(".", 2)[2]
            if mapping.strategy is InitStrategy.EXTRACTION:
                src_layer = mapping.sources[i] - 1
                params[name] = _teacher_layer_tensor(teacher_ckpt, src_layer, suffix).copy()
            elif mapping.strategy is InitStrategy.AVERAGING:
                a, b = mapping.ranges[i]
                stack = [
                    _teacher_layer_tensor(teacher_ckpt, j - 1, suffix)
                    for j in range(a, b + 1)
                ]
                params[name] = np.mean(stack, axis=0)
            else:
                params[name] = _init_array(name, shapes[name], rng)

    params["mask_embedding"] = rng.normal(0.0, 0.02, size=shapes["mask_embedding"])

    tensors = {
        name: Tensor(params[name], requires_grad=is_trainable(name, student_config))
        for name in shapes
    }
    return EncoderState(student_config, tensors)


def _teacher_layer_tensor(ckpt: Checkpoint, layer_index: int, suffix: str) -> np.ndarray:
    name = f"layer.{layer_index}.{suffix}"
    if name not in ckpt.tensors:
        raise CompletenessError([name], [])
    return ckpt.tensors[name]
