"""Named parameter storage and the binary checkpoint format.

File layout (all little-endian)::

    b"SOTA"  u32 version  u32 count
    count x { u32 name_len, name bytes (utf-8), u32 rank, rank x u32 dims, f32 data }
"""
from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tensor

MAGIC = b"SOTA"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered map of unique parameter names to leaf tensors."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self._params.items()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in state.items():
            if k not in self._params:
                continue
            t = self._params[k]
            if tuple(v.shape) != t.shape:
                raise CheckpointError(f"shape mismatch for {k}: {v.shape} vs {t.shape}")
            t.data = np.array(v, dtype=self.dtype)

    def astype(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for t in self._params.values():
            t.data = t.data.astype(self.dtype)
            t.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    # -- serialization ----------------------------------------------------
    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<II", VERSION, len(self._params))]
        for name, t in self._params.items():
            nb = name.encode("utf-8")
            out.append(struct.pack("<I", len(nb)))
            out.append(nb)
            out.append(struct.pack("<I", t.ndim))
            out.append(struct.pack(f"<{t.ndim}I", *t.shape))
            out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return b"".join(out)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @staticmethod
    def read_bytes(buf: bytes) -> "OrderedDict[str, np.ndarray]":
        if buf[:4] != MAGIC:
            raise CheckpointError("bad magic; not a parameter file")
        try:
            version, count = struct.unpack_from("<II", buf, 4)
            if version != VERSION:
                raise CheckpointError(f"unsupported parameter file version {version}")
            off = 12
            state: OrderedDict[str, np.ndarray] = OrderedDict()
            for _ in range(count):
                (n,) = struct.unpack_from("<I", buf, off)
                off += 4
                name = buf[off:off + n].decode("utf-8")
                off += n
                (rank,) = struct.unpack_from("<I", buf, off)
                off += 4
                dims = struct.unpack_from(f"<{rank}I", buf, off)
                off += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                if off + 4 * size > len(buf):
                    raise CheckpointError(f"truncated data for {name}")
                state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
                off += 4 * size
        except struct.error as e:
            raise CheckpointError(f"truncated parameter file: {e}") from None
        if off != len(buf):
            raise CheckpointError("trailing bytes in parameter file")
        return state

    def load(self, path, strict: bool = True) -> None:
        self.load_state(self.read_bytes(Path(path).read_bytes()), strict=strict)
