"""Index+value storage for pruned tensors."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np

from .errors import CheckpointError, ShapeError

INDEX_ENCODINGS = ("varint", "flat32")


def encode_varint(values: np.ndarray) -> bytes:
    """LEB128-encode non-negative integers: 7 payload bits per byte, high bit set on all but the last byte."""
    values = np.asarray(values, dtype=np.uint64)
    if values.size == 0:
        return b""
    n_bytes = np.ones(values.shape, dtype=np.int64)
    rest = values >> np.uint64(7)
    while rest.any():
        n_bytes += rest > 0
        rest >>= np.uint64(7)
    starts = np.concatenate(([0], np.cumsum(n_bytes)[:-1]))
    out = np.zeros(int(n_bytes.sum()), dtype=np.uint8)
    for j in range(int(n_bytes.max())):
        active = n_bytes > j
        chunk = (values[active] >> np.uint64(7 * j)) & np.uint64(0x7F)
        more = (n_bytes[active] - 1 > j).astype(np.uint64) << np.uint64(7)
        out[starts[active] + j] = (chunk | more).astype(np.uint8)
    return out.tobytes()


def decode_varint(buf: bytes, count: int) -> np.ndarray:
    """Inverse of ``encode_varint``; ``buf`` must hold exactly ``count`` values."""
    if count == 0:
        if buf:
            raise CheckpointError(f"varint stream holds {len(buf)} trailing bytes for zero values")
        return np.zeros(0, dtype=np.int64)
    raw = np.frombuffer(buf, dtype=np.uint8)
    ends = np.flatnonzero((raw & 0x80) == 0)
    if ends.size != count or ends[-1] != raw.size - 1:
        raise CheckpointError(f"varint stream decodes to {ends.size} values, expected {count}")
    starts = np.concatenate(([0], ends[:-1] + 1))
    lengths = ends - starts + 1
    if lengths.max() > 9:
        raise CheckpointError("varint value exceeds 63 bits")
    owner = np.repeat(np.arange(count), lengths)
    shifts = ((np.arange(raw.size) - starts[owner]) * 7).astype(np.uint64)
    parts = (raw & 0x7F).astype(np.uint64) << shifts
    return np.add.reduceat(parts, starts).astype(np.int64)


def encode_indices(indices: np.ndarray, encoding: str) -> bytes:
    if encoding == "flat32":
        return np.asarray(indices, dtype="<u4").tobytes()
    if encoding == "varint":
        indices = np.asarray(indices, dtype=np.int64)
        return encode_varint(np.diff(indices, prepend=0))
    raise ShapeError(f"Unknown index encoding '{encoding}', expected one of {INDEX_ENCODINGS}")


def decode_indices(buf: bytes, count: int, encoding: str) -> np.ndarray:
    if encoding == "flat32":
        if len(buf) != 4 * count:
            raise CheckpointError(f"flat32 index block has {len(buf)} bytes, expected {4 * count}")
        return np.frombuffer(buf, dtype="<u4").astype(np.int64)
    if encoding == "varint":
        return np.cumsum(decode_varint(buf, count))
    raise CheckpointError(f"Unknown index encoding '{encoding}'")


@dataclass
class SparseTensor:
    shape: tuple
    indices: np.ndarray  # flat, strictly increasing
    values: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        size = int(np.prod(self.shape))
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise ShapeError(f"indices {self.indices.shape} and values {self.values.shape} must be equal 1-D")
        if self.indices.size:
            if self.indices[0] < 0 or self.indices[-1] >= size:
                raise ShapeError(f"sparse indices out of range for shape {self.shape}")
            if np.any(np.diff(self.indices) <= 0):
                raise ShapeError("sparse indices must be strictly increasing")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def density(self) -> float:
        size = int(np.prod(self.shape))
        return self.nnz / size if size else 0.0

    @classmethod
    def from_dense(cls, dense: np.ndarray, mask: Optional[np.ndarray] = None) -> "SparseTensor":
        keep = dense != 0 if mask is None else np.asarray(mask, dtype=bool)
        if keep.shape != dense.shape:
            raise ShapeError(f"mask shape {keep.shape} does not match tensor shape {dense.shape}")
        indices = np.flatnonzero(keep.ravel())
        return cls(shape=dense.shape, indices=indices, values=dense.ravel()[indices].copy())

    def to_dense(self) -> np.ndarray:
        out = np.zeros(int(np.prod(self.shape)), dtype=self.values.dtype)
        out[self.indices] = self.values
        return out.reshape(self.shape)

    def payload_bytes(self, encoding: str = "varint") -> int:
        return len(encode_indices(self.indices, encoding)) + self.values.nbytes


@dataclass
class SparseModel:
    """Pruned tensors in index+value form, untouched tensors dense, plus mask provenance."""

    tensors: Dict[str, Union[SparseTensor, np.ndarray]]
    provenance: Dict[str, object] = field(default_factory=dict)

    def densify(self) -> Dict[str, np.ndarray]:
        return {name: t.to_dense() if isinstance(t, SparseTensor) else t.copy() for name, t in self.tensors.items()}

    @property
    def sparse_names(self):
        return [name for name, t in self.tensors.items() if isinstance(t, SparseTensor)]


def sparsify(state: Dict[str, np.ndarray], masks: Dict[str, np.ndarray],
             provenance: Optional[Dict[str, object]] = None) -> SparseModel:
    """Convert masked tensors of ``state`` to SparseTensor; tensors without a mask stay dense.

    The stored values are ``dense * mask``, so densify(sparsify(...)) equals the masked tensor.
    """
    tensors: Dict[str, Union[SparseTensor, np.ndarray]] = {}
    for name, value in state.items():
        mask = masks.get(name)
        if mask is None or mask.all():
            tensors[name] = value.copy()
        else:
            tensors[name] = SparseTensor.from_dense(value * mask, mask)
    sparse = SparseModel(tensors=tensors, provenance=dict(provenance or {}))
    logging.debug(f"Sparsified {len(sparse.sparse_names)} of {len(state)} tensors")
    return sparse


def densify(sparse: SparseModel) -> Dict[str, np.ndarray]:
    return sparse.densify()
