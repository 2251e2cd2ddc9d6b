"""Named parameter storage and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"SCNETCKP"
    version    uint32
    count      uint32
    repeated count times:
        name_len  uint32, name  utf-8 bytes
        ndim      uint32, dims  ndim x uint64
        values    prod(dims) x float64 (little-endian, C order)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import DTYPE, Tensor

CHECKPOINT_MAGIC = b"SCNETCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Mapping from dot-separated names to trainable tensors.

    Iteration is always in lexicographic name order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def __iter__(self):
        return iter(self.names())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise CheckpointError(
                f"parameter set mismatch: missing={sorted(missing)} unexpected={sorted(extra)}"
            )
        for name, p in self.items():
            v = np.asarray(state[name], dtype=DTYPE)
            if v.shape != p.shape:
                raise CheckpointError(
                    f"shape mismatch for parameter {name!r}: checkpoint {v.shape}, model {p.shape}"
                )
            p.data = v.copy()


def save_checkpoint(path, store: ParameterStore):
    items = store.items()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, p in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}Q", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = 8
    version, count = struct.unpack_from("<II", buf, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            size = int(np.prod(dims)) if ndim else 1
            vals = np.frombuffer(buf, dtype="<f8", count=size, offset=off)
            off += 8 * size
            out[name] = vals.astype(DTYPE).reshape(dims)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after {count} parameters")
    return out


def load_checkpoint(path, store: ParameterStore):
    store.load_state(read_checkpoint(path))
