"""Named parameter storage and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"SEALPRM\\x00"
    version    uint32    currently 1
    seed       int64     seed used at initialization
    count      uint32    number of records
    records    count x:  name_len uint16, name utf-8,
                         ndim uint8, dims ndim x uint32,
                         length uint64, payload length x float64 (<f8)
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .autodiff import Node
from .errors import ContractError

MAGIC = b"SEALPRM\x00"
FORMAT_VERSION = 1


class ParamStore:
    """Ordered mapping of unique names to float64 arrays."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._arrays:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._arrays[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._arrays:
            raise ContractError(f"unknown parameter {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._arrays[name].shape:
            raise ContractError(f"shape mismatch for {name!r}: {arr.shape} != {self._arrays[name].shape}")
        self._arrays[name] = arr.copy()

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    @property
    def size(self) -> int:
        """Total number of scalars across all parameters."""
        return int(sum(a.size for a in self._arrays.values()))

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        for name, arr in self._arrays.items():
            out._arrays[name] = arr.copy()
        return out

    def update(self, other: "ParamStore | Mapping[str, np.ndarray]") -> None:
        for name, value in other.items():
            self[name] = value

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore(self.seed)
        for name, arr in self._arrays.items():
            if name.startswith(prefix):
                out._arrays[name] = arr
        return out

    def merged(self, other: "ParamStore") -> "ParamStore":
        out = self.copy()
        for name, arr in other.items():
            out.add(name, arr)
        return out

    def nodes(self, requires_grad: bool = True) -> dict[str, Node]:
        """Leaf nodes for a fresh computation graph.

        With ``requires_grad=False`` the leaves are constants, which keeps the
        whole sub-network out of the backward pass.
        """
        return {
            name: Node(arr, name=name, requires_grad=requires_grad, is_param=requires_grad)
            for name, arr in self._arrays.items()
        }

    def equals(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._arrays.values(), other._arrays.values())
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<Iq I", FORMAT_VERSION, self.seed, len(self._arrays)))
        for name, arr in self._arrays.items():
            encoded = name.encode("utf-8")
            buf.write(struct.pack("<H", len(encoded)))
            buf.write(encoded)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(struct.pack("<Q", arr.size))
            buf.write(arr.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        view = memoryview(data)
        if bytes(view[:8]) != MAGIC:
            raise ContractError("not a parameter checkpoint (bad magic)")
        version, seed, count = struct.unpack_from("<Iq I", view, 8)
        if version != FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        pos = 8 + struct.calcsize("<Iq I")
        store = cls(seed)
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            (length,) = struct.unpack_from("<Q", view, pos)
            pos += 8
            if int(np.prod(dims)) != length:
                raise ContractError(f"record {name!r}: length {length} does not match dims {dims}")
            payload = np.frombuffer(view[pos : pos + 8 * length], dtype="<f8").astype(np.float64)
            pos += 8 * length
            store.add(name, payload.reshape(dims))
        if pos != len(data):
            raise ContractError("trailing bytes after last record")
        return store

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "ParamStore":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
