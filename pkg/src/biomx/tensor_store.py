"""Binary checkpoint container.

File layout::

    bytes 0..7     little-endian uint64 header length N
    bytes 8..8+N   UTF-8 JSON header
                   {"format_version": "1",
                    "metadata": {str: str},
                    "tensors": {name: {"dtype", "shape", "offset", "length"}}}
    remainder      raw little-endian row-major tensor buffers, no padding

Offsets are relative to the first byte after the header. Tensors are written
in lexicographic name order and the header JSON uses sorted keys with compact
separators, so equal checkpoints always serialize to identical bytes.
"""

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import FormatError, TruncationError

FORMAT_VERSION = "1"

FLOAT_DTYPES = ("float32", "float16")
# Integer dtypes only carry quantization codes; "int4" packs two codes per
# byte, low nibble holding the even flat index.
CODE_DTYPES = ("int8", "int4")
DTYPES = FLOAT_DTYPES + CODE_DTYPES

_NUMPY = {"float32": np.dtype("<f4"), "float16": np.dtype("<f2"), "int8": np.dtype("i1")}


def dtype_nbytes(dtype, count):
    """Bytes needed to store ``count`` elements of ``dtype``."""
    if dtype == "int4":
        return (count + 1) // 2
    try:
        return _NUMPY[dtype].itemsize * count
    except KeyError:
        raise FormatError(f"unsupported dtype {dtype!r}") from None


def pack_int4(codes):
    codes = np.asarray(codes, dtype=np.int8).ravel()
    if codes.size and (codes.min() < -8 or codes.max() > 7):
        raise ValueError("int4 codes must lie in [-8, 7]")
    nib = (codes.astype(np.int16) & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(buf, count):
    raw = np.frombuffer(buf, dtype=np.uint8)
    out = np.empty(raw.size * 2, dtype=np.int16)
    out[0::2] = raw & 0xF
    out[1::2] = raw >> 4
    out[out > 7] -= 16
    return out[:count].astype(np.int8)


@dataclass(frozen=True, eq=False)
class Tensor:
    """A named, typed, shaped raw buffer."""

    name: str
    dtype: str
    shape: tuple
    data: bytes

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "data", bytes(self.data))
        if not isinstance(self.name, str) or not self.name:
            raise FormatError("tensor name must be a non-empty string")
        if self.dtype not in DTYPES:
            raise FormatError(f"tensor {self.name!r}: unsupported dtype {self.dtype!r}")
        if any(d < 0 for d in self.shape):
            raise FormatError(f"tensor {self.name!r}: negative dimension in {self.shape}")
        expected = dtype_nbytes(self.dtype, self.size)
        if len(self.data) != expected:
            raise FormatError(
                f"tensor {self.name!r}: {len(self.data)} bytes for {self.dtype}{list(self.shape)}, "
                f"expected {expected}"
            )

    @classmethod
    def from_array(cls, name, array, dtype=None):
        """Build a tensor from an array-like, casting to ``dtype`` (default: keep float16, else float32)."""
        arr = np.asarray(array)
        if dtype is None:
            dtype = "float16" if arr.dtype == np.float16 else "float32"
        if dtype == "int4":
            return cls(name, dtype, arr.shape, pack_int4(arr))
        if dtype not in _NUMPY:
            raise FormatError(f"unsupported dtype {dtype!r}")
        buf = np.ascontiguousarray(arr, dtype=_NUMPY[dtype]).tobytes()
        return cls(name, dtype, arr.shape, buf)

    @property
    def size(self):
        return math.prod(self.shape)

    @property
    def nbytes(self):
        return len(self.data)

    def numpy(self):
        """Read-only view of the values (int4 codes come back unpacked as int8)."""
        if self.dtype == "int4":
            return unpack_int4(self.data, self.size).reshape(self.shape)
        return np.frombuffer(self.data, dtype=_NUMPY[self.dtype]).reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (self.name, self.dtype, self.shape, self.data) == (
            other.name,
            other.dtype,
            other.shape,
            other.data,
        )

    def __hash__(self):
        return hash((self.name, self.dtype, self.shape, self.data))


def _default_metadata():
    return {"format_version": FORMAT_VERSION}


@dataclass(eq=True)
class Checkpoint:
    """Name-keyed tensors plus string metadata."""

    tensors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=_default_metadata)

    def __post_init__(self):
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}
        self.metadata.setdefault("format_version", FORMAT_VERSION)

    @classmethod
    def from_arrays(cls, arrays, metadata=None, dtype=None):
        """Build a checkpoint from a ``{name: array}`` mapping."""
        tensors = {name: Tensor.from_array(name, arr, dtype) for name, arr in arrays.items()}
        return cls(tensors, dict(metadata or {}))

    @classmethod
    def from_tensors(cls, tensors, metadata=None):
        out = {}
        for t in tensors:
            if t.name in out:
                raise FormatError(f"duplicate tensor name {t.name!r}")
            out[t.name] = t
        return cls(out, dict(metadata or {}))

    def names(self):
        return sorted(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def arrays(self):
        return {name: self.tensors[name].numpy() for name in self.names()}

    def validate(self):
        """Raise :class:`FormatError` if any invariant is violated."""
        seen = set()
        for key, t in self.tensors.items():
            if not isinstance(t, Tensor):
                raise FormatError(f"entry {key!r} is not a Tensor")
            if key != t.name:
                raise FormatError(f"key {key!r} does not match tensor name {t.name!r}")
            if t.name in seen:
                raise FormatError(f"duplicate tensor name {t.name!r}")
            seen.add(t.name)
        if self.metadata.get("format_version") != FORMAT_VERSION:
            raise FormatError(
                f"metadata format_version must be {FORMAT_VERSION!r}, "
                f"got {self.metadata.get('format_version')!r}"
            )
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise FormatError("metadata must map strings to strings")


@dataclass(frozen=True)
class CompatReport:
    compatible: bool
    mismatches: tuple  # of (tensor name, reason)

    def __bool__(self):
        return self.compatible

    def describe(self):
        return ", ".join(f"{name}: {reason}" for name, reason in self.mismatches)


def validate_compat(a, b):
    """Compare tensor names, shapes and dtypes of two checkpoints."""
    mismatches = []
    for name in sorted(set(a.tensors) | set(b.tensors)):
        if name not in b.tensors:
            mismatches.append((name, "missing-in-b"))
        elif name not in a.tensors:
            mismatches.append((name, "missing-in-a"))
        elif a.tensors[name].shape != b.tensors[name].shape:
            mismatches.append((name, "shape"))
        elif a.tensors[name].dtype != b.tensors[name].dtype:
            mismatches.append((name, "dtype"))
    return CompatReport(not mismatches, tuple(mismatches))


def _header_bytes(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


def checkpoint_header(ckpt):
    """The JSON header ``save_checkpoint`` would write for ``ckpt``."""
    ckpt.validate()
    entries = {}
    offset = 0
    for name in ckpt.names():
        t = ckpt.tensors[name]
        entries[name] = {
            "dtype": t.dtype,
            "shape": list(t.shape),
            "offset": offset,
            "length": t.nbytes,
        }
        offset += t.nbytes
    return {"format_version": FORMAT_VERSION, "metadata": dict(ckpt.metadata), "tensors": entries}


def to_bytes(ckpt):
    header = _header_bytes(checkpoint_header(ckpt))
    parts = [struct.pack("<Q", len(header)), header]
    parts.extend(ckpt.tensors[name].data for name in ckpt.names())
    return b"".join(parts)


def save_checkpoint(ckpt, path):
    """Serialize ``ckpt`` to ``path`` deterministically."""
    payload = to_bytes(ckpt)
    with open(os.fspath(path), "wb") as fh:
        fh.write(payload)


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise FormatError(f"duplicate key {k!r} in header")
        out[k] = v
    return out


def read_header(buf):
    """Parse and structurally check a header; returns ``(header, data_start)``."""
    if len(buf) < 8:
        raise FormatError("file too short for a header length prefix")
    (n,) = struct.unpack_from("<Q", buf, 0)
    if 8 + n > len(buf):
        raise TruncationError(f"header declares {n} bytes but only {len(buf) - 8} follow")
    try:
        header = json.loads(bytes(buf[8 : 8 + n]).decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {header.get('format_version')!r}")
    if not isinstance(header.get("metadata", {}), dict) or not isinstance(
        header.get("tensors"), dict
    ):
        raise FormatError("header needs an object 'tensors' and optional object 'metadata'")
    return header, 8 + n


def from_bytes(buf):
    header, start = read_header(buf)
    data = memoryview(buf)[start:]
    tensors = {}
    for name, entry in header["tensors"].items():
        try:
            dtype = entry["dtype"]
            shape = [int(d) for d in entry["shape"]]
            offset = int(entry["offset"])
            length = int(entry["length"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"tensor {name!r}: malformed entry {entry!r}") from None
        if dtype not in DTYPES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if offset < 0 or length < 0:
            raise FormatError(f"tensor {name!r}: negative offset or length")
        if offset + length > len(data):
            raise TruncationError(
                f"tensor {name!r} needs bytes {offset}..{offset + length} of a "
                f"{len(data)}-byte data region"
            )
        tensors[name] = Tensor(name, dtype, shape, data[offset : offset + length])
    metadata = header.get("metadata", {})
    if any(not isinstance(v, str) for v in metadata.values()):
        raise FormatError("metadata values must be strings")
    ckpt = Checkpoint(tensors, metadata)
    ckpt.validate()
    return ckpt


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(os.fspath(path), "rb") as fh:
        buf = fh.read()
    return from_bytes(buf)
