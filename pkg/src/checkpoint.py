"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic "LX3ECKPT" | version u16 | flags u16 (bit 0: sparse) | sha256(spec json) 32B
    spec json (u32 length + utf-8) | extras json (u32 length + utf-8) | n_records u32
    record*: name (u16 length + utf-8) | kind u8 | dtype u8 | ndim u8 | dims u32*ndim | payload

``kind`` 0 is a dense payload of raw values; 1 and 2 are sparse payloads
``nnz u32 | index_bytes u32 | indices | values`` with flat 32-bit or varint-gap
indices respectively.
"""
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import CheckpointError
from .model import LightX3ECG, ModelSpec
from .sparse import INDEX_ENCODINGS, SparseTensor, decode_indices, encode_indices

MAGIC = b"LX3ECKPT"
VERSION = 1
FLAG_SPARSE = 0x1

KIND_DENSE = 0
KIND_FLAT32 = 1
KIND_VARINT = 2
_KIND_BY_ENCODING = {"flat32": KIND_FLAT32, "varint": KIND_VARINT}
_ENCODING_BY_KIND = {v: k for k, v in _KIND_BY_ENCODING.items()}

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _dense_record(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr).astype(_DTYPES[_DTYPE_CODES[arr.dtype]], copy=False).tobytes()


def _sparse_record(tensor: SparseTensor, encoding: str) -> bytes:
    index_bytes = encode_indices(tensor.indices, encoding)
    values = tensor.values.astype(_DTYPES[_DTYPE_CODES[tensor.values.dtype]], copy=False).tobytes()
    return struct.pack("<II", tensor.nnz, len(index_bytes)) + index_bytes + values


def serialize(model: LightX3ECG, fmt: str = "dense", masks: Optional[Dict[str, np.ndarray]] = None,
              extras: Optional[dict] = None, index_encoding: str = "varint") -> bytes:
    """Encode ``model`` (weights, BN buffers, spec) into the checkpoint container.

    In sparse format every prunable tensor is written as index+value pairs when that
    is smaller than its dense payload; a tensor with nothing pruned is written dense.
    Without ``masks`` the nonzero pattern of prunable tensors is used.
    """
    if fmt not in ("dense", "sparse"):
        raise CheckpointError(f"Unknown checkpoint format '{fmt}', expected dense or sparse")
    if index_encoding not in INDEX_ENCODINGS:
        raise CheckpointError(f"Unknown index encoding '{index_encoding}', expected one of {INDEX_ENCODINGS}")
    if model.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"Unsupported parameter dtype {model.dtype}")

    spec_json = model.spec.model_dump_json().encode("utf-8")
    extras_json = json.dumps(extras or {}, sort_keys=True).encode("utf-8")
    prunable = {name for name, p in model.named_parameters() if p.prunable}
    state = model.state_dict()

    chunks = [
        MAGIC,
        struct.pack("<HH", VERSION, FLAG_SPARSE if fmt == "sparse" else 0),
        hashlib.sha256(spec_json).digest(),
        struct.pack("<I", len(spec_json)), spec_json,
        struct.pack("<I", len(extras_json)), extras_json,
        struct.pack("<I", len(state)),
    ]
    n_sparse = 0
    for name, value in state.items():
        value = np.asarray(value)
        kind, payload = KIND_DENSE, _dense_record(value)
        if fmt == "sparse" and name in prunable:
            mask = masks.get(name) if masks is not None else None
            tensor = SparseTensor.from_dense(value if mask is None else value * mask, mask)
            if tensor.nnz < value.size:
                sparse_payload = _sparse_record(tensor, index_encoding)
                if len(sparse_payload) < len(payload):
                    kind, payload = _KIND_BY_ENCODING[index_encoding], sparse_payload
                    n_sparse += 1
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded_name)) + encoded_name)
        chunks.append(struct.pack("<BBB", kind, _DTYPE_CODES[value.dtype], value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(payload)
    blob = b"".join(chunks)
    logging.debug(f"Serialized {len(state)} tensors ({n_sparse} sparse) into {len(blob)} bytes")
    return blob


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.offset + n > len(self.data):
            raise CheckpointError(f"byte offset {self.offset}: truncated while reading {what} "
                                  f"(need {n} bytes, {len(self.data) - self.offset} left)")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def fail(self, message: str) -> CheckpointError:
        return CheckpointError(f"byte offset {self.offset}: {message}")


def _read_record(reader: _Reader) -> Tuple[str, np.ndarray]:
    (name_len,) = reader.unpack("<H", "record name length")
    try:
        name = reader.take(name_len, "record name").decode("utf-8")
    except UnicodeDecodeError:
        raise reader.fail("record name is not valid utf-8") from None
    kind, dtype_code, ndim = reader.unpack("<BBB", f"header of record '{name}'")
    if dtype_code not in _DTYPES:
        raise reader.fail(f"record '{name}' has unknown dtype code {dtype_code}")
    dtype = _DTYPES[dtype_code]
    shape = reader.unpack(f"<{ndim}I", f"shape of record '{name}'")
    size = int(np.prod(shape))
    if kind == KIND_DENSE:
        values = np.frombuffer(reader.take(size * dtype.itemsize, f"values of record '{name}'"), dtype=dtype)
        return name, values.astype(dtype.newbyteorder("="), copy=True).reshape(shape)
    if kind not in _ENCODING_BY_KIND:
        raise reader.fail(f"record '{name}' has unknown payload kind {kind}")
    nnz, index_len = reader.unpack("<II", f"sparse header of record '{name}'")
    if nnz > size:
        raise reader.fail(f"record '{name}' declares {nnz} survivors for {size} elements")
    index_block = reader.take(index_len, f"indices of record '{name}'")
    values = np.frombuffer(reader.take(nnz * dtype.itemsize, f"values of record '{name}'"), dtype=dtype)
    try:
        indices = decode_indices(index_block, nnz, _ENCODING_BY_KIND[kind])
        tensor = SparseTensor(shape=shape, indices=indices, values=values.astype(dtype.newbyteorder("=")))
    except ValueError as e:
        raise reader.fail(f"record '{name}': {e}") from None
    return name, tensor.to_dense()


def deserialize(data: bytes) -> Tuple[LightX3ECG, dict]:
    """Rebuild the model and extras dict from ``serialize`` output."""
    reader = _Reader(data)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("byte offset 0: not a checkpoint (bad magic)")
    version, _flags = reader.unpack("<HH", "version")
    if version != VERSION:
        raise reader.fail(f"unsupported checkpoint version {version}")
    digest = reader.take(32, "config digest")
    (spec_len,) = reader.unpack("<I", "spec length")
    spec_json = reader.take(spec_len, "spec")
    if hashlib.sha256(spec_json).digest() != digest:
        raise reader.fail("config digest does not match the stored model spec")
    (extras_len,) = reader.unpack("<I", "extras length")
    try:
        spec = ModelSpec.model_validate_json(spec_json)
        extras = json.loads(reader.take(extras_len, "extras").decode("utf-8"))
    except ValueError as e:
        raise reader.fail(f"invalid header json: {e}") from None
    (n_records,) = reader.unpack("<I", "record count")

    state: Dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name, value = _read_record(reader)
        state[name] = value
    if reader.offset != len(data):
        raise reader.fail(f"{len(data) - reader.offset} trailing bytes after the last record")
    if not state:
        raise reader.fail("checkpoint holds no tensors")

    dtype = next(iter(state.values())).dtype
    model = LightX3ECG(spec, seed=0, dtype=dtype)
    try:
        model.load_state_dict(state)
    except ValueError as e:
        raise CheckpointError(f"checkpoint tensors do not match the stored spec: {e}") from None
    return model.eval(), extras


def save_checkpoint(model: LightX3ECG, path, fmt: str = "dense", masks: Optional[Dict[str, np.ndarray]] = None,
                    extras: Optional[dict] = None, index_encoding: str = "varint") -> int:
    """Write a checkpoint file and return its size in bytes."""
    blob = serialize(model, fmt, masks, extras, index_encoding)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        logging.error(f"Error writing checkpoint {path}: {e}")
        raise
    logging.info(f"Saved {fmt} checkpoint to {path} ({len(blob)} bytes)")
    return len(blob)


def load_checkpoint(path) -> Tuple[LightX3ECG, dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        logging.error(f"Error reading checkpoint {path}: {e}")
        raise
    try:
        return deserialize(data)
    except CheckpointError as e:
        logging.error(f"Error loading checkpoint {path}: {e}")
        raise
