"""Binary checkpoint format (all integers little-endian).

    b"HIMO"                      magic
    u32  version                 (1)
    u32  len, bytes              config text (model + training keys)
    u32  tensor count
    per tensor:
        u32 len, bytes           UTF-8 name
        u8                       dtype code (1 float32, 2 float64, 3 int64)
        u32                      rank
        u64 * rank               extents
        bytes                    row-major little-endian payload
    u32  CRC32 of every preceding byte

Tensor names: ``param/<path>`` for weights, ``optim/<slot>/<path>`` for
optimizer moments, ``state/iteration`` for the step counter.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .config import parse_config, dump_config
from .errors import CheckpointError, DimensionError
from .model import HimosaWeights
from .tensor import Tensor

MAGIC = b"HIMO"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def encode(config_text: str, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = config_text.encode("utf-8")
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(raw: bytes, source: str = "<bytes>") -> tuple[str, list[tuple[str, np.ndarray]]]:
    if len(raw) < 12:
        raise CheckpointError(f"{source}: truncated checkpoint")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a HIMO checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: CRC mismatch (corrupt or truncated file)")
    r = _Reader(body, source)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("<I")
    config_text = r.take(n).decode("utf-8")
    (count,) = r.unpack("<I")
    tensors = []
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: tensor {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(size * dt.itemsize), dtype=dt).reshape(shape).copy()
        tensors.append((name, arr))
    if r.pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - r.pos} trailing bytes after tensor table")
    return config_text, tensors


def save_checkpoint(state, path) -> None:
    tensors = [(f"param/{k}", v.data) for k, v in state.weights.items()]
    opt = state.optimizer
    for slot in opt.slots:
        store = opt.state[slot]
        for k in state.weights:
            if k in store:
                tensors.append((f"optim/{slot}/{k}", store[k]))
    tensors.append(("state/iteration", np.asarray(state.iteration, dtype=np.int64)))
    text = dump_config(state.model_cfg, state.train_cfg)
    try:
        Path(path).write_bytes(encode(text, tensors))
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from None


def load_checkpoint(path, model_cfg=None):
    """Rebuild a TrainState. With ``model_cfg`` given, the stored weights must match it."""
    from .train import TrainState, make_optimizer

    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from None
    text, tensors = decode(raw, str(path))
    stored_model, train_cfg = parse_config(text, f"{path}:config")
    weights = HimosaWeights()
    opt = make_optimizer(train_cfg.optimizer)
    iteration = 0
    for name, arr in tensors:
        if name.startswith("param/"):
            key = name[len("param/"):]
            weights[key] = Tensor(arr, requires_grad=True, name=key)
        elif name.startswith("optim/"):
            _, slot, key = name.split("/", 2)
            if slot not in opt.state:
                raise CheckpointError(f"{path}: optimizer slot {slot!r} unknown to {opt.name}")
            opt.state[slot][key] = arr
        elif name == "state/iteration":
            iteration = int(arr)
        else:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
    cfg = stored_model if model_cfg is None else model_cfg
    try:
        weights.check_against(cfg)
    except DimensionError as exc:
        raise DimensionError(f"{path}: checkpoint does not match config: {exc}") from None
    return TrainState(cfg, train_cfg, weights, opt, iteration)
