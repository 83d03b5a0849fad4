"""Binary checkpoint format.

Layout (all integers little-endian):

    magic "QATF" | u32 version | u32 config_len | config utf-8
                 | u32 meta_len | meta utf-8 | u32 n_entries
                 | zero padding to a 64-byte boundary
    entries, each beginning on a 64-byte boundary:
        u16 name_len | name utf-8
        u8 kind | u8 bits | u8 signed | u8 ndim
        f64 scale
        u32 dims[ndim]
        u64 payload_len | payload | zero padding to 64 bytes
    u32 crc32 over the whole entries region

Three entry kinds: 0 = float32 tensor, 1 = integer tensor with its
scalar and bit-width (no recomputation needed at load), 2 = a threshold
exponent z stored as float64, exactly.  Integer payloads use the
narrowest width that fits (1 byte up to 8 bits, else 2).

Round-trip is bit-exact; any flipped byte in the entries region fails
the checksum.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointFormatError, CheckpointIntegrityError
from .quant import IntTensor

MAGIC = b"QATF"
VERSION = 1
ALIGN = 64

KIND_FP32 = 0
KIND_INT = 1
KIND_THRESHOLD = 2
KNOWN_KINDS = (KIND_FP32, KIND_INT, KIND_THRESHOLD)


@dataclass
class Entry:
    name: str
    kind: int
    array: np.ndarray | None = None     # KIND_FP32: float32 data
    int_tensor: IntTensor | None = None  # KIND_INT
    z: float | None = None               # KIND_THRESHOLD

    @classmethod
    def fp32(cls, name: str, array: np.ndarray) -> "Entry":
        return cls(name, KIND_FP32, array=np.asarray(array, dtype=np.float32))

    @classmethod
    def int_t(cls, name: str, t: IntTensor) -> "Entry":
        return cls(name, KIND_INT, int_tensor=t)

    @classmethod
    def threshold(cls, name: str, z: float) -> "Entry":
        return cls(name, KIND_THRESHOLD, z=float(z))

    @property
    def shape(self) -> tuple[int, ...]:
        if self.kind == KIND_FP32:
            return self.array.shape
        if self.kind == KIND_INT:
            return self.int_tensor.shape
        return ()


def _int_payload_dtype(bits: int, signed: bool) -> np.dtype:
    width = 1 if bits <= 8 else 2
    return np.dtype(f"<{'i' if signed else 'u'}{width}")


def _pad_to(buf: bytearray, align: int) -> None:
    rem = len(buf) % align
    if rem:
        buf.extend(b"\x00" * (align - rem))


def _encode_entry(e: Entry) -> bytes:
    name = e.name.encode("utf-8")
    if e.kind == KIND_FP32:
        bits, signed, scale = 32, 1, 0.0
        dims = e.array.shape
        payload = np.ascontiguousarray(e.array, dtype="<f4").tobytes()
    elif e.kind == KIND_INT:
        t = e.int_tensor
        bits, signed, scale = t.bits, int(t.signed), t.scale
        dims = t.shape
        payload = np.ascontiguousarray(
            t.data.astype(_int_payload_dtype(t.bits, t.signed))).tobytes()
    elif e.kind == KIND_THRESHOLD:
        bits, signed, scale = 64, 1, 0.0
        dims = ()
        payload = struct.pack("<d", e.z)
    else:
        raise CheckpointFormatError(f"cannot encode entry kind {e.kind}")
    head = struct.pack("<H", len(name)) + name
    head += struct.pack("<BBBB", e.kind, bits, signed, len(dims))
    head += struct.pack("<d", scale)
    head += struct.pack(f"<{len(dims)}I", *dims)
    head += struct.pack("<Q", len(payload))
    return head + payload


def save_checkpoint(path: str, config_text: str, meta: dict[str, str],
                    entries: list[Entry]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    config_bytes = config_text.encode("utf-8")
    buf += struct.pack("<I", len(config_bytes)) + config_bytes
    meta_text = "".join(f"{k}={meta[k]}\n" for k in sorted(meta))
    meta_bytes = meta_text.encode("utf-8")
    buf += struct.pack("<I", len(meta_bytes)) + meta_bytes
    buf += struct.pack("<I", len(entries))
    _pad_to(buf, ALIGN)

    region_start = len(buf)
    for e in entries:
        buf += _encode_entry(e)
        _pad_to(buf, ALIGN)
    crc = zlib.crc32(bytes(buf[region_start:]))
    buf += struct.pack("<I", crc)

    with open(path, "wb") as f:
        f.write(bytes(buf))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def align(self, align: int) -> None:
        rem = self.pos % align
        if rem:
            self.take(align - rem)


def load_checkpoint(path: str) -> tuple[str, dict[str, str], list[Entry]]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e

    r = _Reader(data, path)
    if data[:4] != MAGIC:  # covers empty and truncated-below-4 files too
        raise CheckpointFormatError(f"{path}: magic mismatch, not a checkpoint file")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(
            f"{path}: format version {version}, this build reads version {VERSION}")
    (config_len,) = r.unpack("<I")
    config_text = r.take(config_len).decode("utf-8")
    (meta_len,) = r.unpack("<I")
    meta_text = r.take(meta_len).decode("utf-8")
    meta = {}
    for line in meta_text.splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    (n_entries,) = r.unpack("<I")
    r.align(ALIGN)

    region_start = r.pos
    if len(data) < region_start + 4:
        raise CheckpointFormatError(f"{path}: truncated checkpoint")
    region = data[region_start:-4]
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(region) != stored_crc:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch, file is corrupt")

    entries = []
    for _ in range(n_entries):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        kind, bits, signed, ndim = r.unpack("<BBBB")
        (scale,) = r.unpack("<d")
        dims = r.unpack(f"<{ndim}I")
        (payload_len,) = r.unpack("<Q")
        payload = r.take(payload_len)
        r.align(ALIGN)
        if kind == KIND_FP32:
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            entries.append(Entry.fp32(name, arr))
        elif kind == KIND_INT:
            raw = np.frombuffer(payload, dtype=_int_payload_dtype(bits, bool(signed)))
            t = IntTensor(raw.reshape(dims).astype(np.int32), scale, bits, bool(signed))
            entries.append(Entry.int_t(name, t))
        elif kind == KIND_THRESHOLD:
            (z,) = struct.unpack("<d", payload)
            entries.append(Entry.threshold(name, z))
        else:
            raise CheckpointFormatError(
                f"{path}: unknown entry kind {kind} ({name!r}); file was written "
                f"by a newer format version than {VERSION}")
    return config_text, meta, entries


def file_crc(path: str) -> int:
    with open(path, "rb") as f:
        return zlib.crc32(f.read())


# -- model <-> entries --------------------------------------------------------


def entries_from_model(model, quantized: bool) -> list[Entry]:
    """Snapshot a model: fp32 keeps raw parameters; quantized exports
    dense weights/biases as integer tensors plus every threshold."""
    from .quant import quantize_signed, range_scalar_signed

    entries = []
    if not quantized:
        for name, p in model.named_parameters():
            entries.append(Entry.fp32(name, p.data))
        return entries

    cfg = model.cfg.quant.as_signed()
    dense_param_ids = set()
    for site in model.dense_sites():
        dense_param_ids.add(id(site.weight))
        if site.bias is not None:
            dense_param_ids.add(id(site.bias))
    for name, p in model.named_parameters():
        if id(p) in dense_param_ids:
            s = range_scalar_signed(p.data, cfg)
            entries.append(Entry.int_t(name, quantize_signed(p.data, s, cfg)))
        else:
            entries.append(Entry.fp32(name, p.data))
    for name, th, _ in model.registry:
        entries.append(Entry.threshold(name, th.z))
    return entries


def apply_entries_to_model(model, entries: list[Entry]) -> None:
    """Load a snapshot back: parameters bit-exact (integers dequantized),
    thresholds exact, and integer weights stashed for the int path."""
    params = dict(model.named_parameters())
    thresholds = {name: th for name, th, _ in model.registry}
    seen_params, seen_thresholds = set(), set()
    model.loaded_int_weights = {}

    for e in entries:
        if e.kind == KIND_THRESHOLD:
            if e.name not in thresholds:
                raise CheckpointFormatError(f"unknown threshold entry {e.name!r}")
            thresholds[e.name].z = e.z
            seen_thresholds.add(e.name)
            continue
        if e.name not in params:
            raise CheckpointFormatError(f"unknown parameter entry {e.name!r}")
        p = params[e.name]
        data = e.array if e.kind == KIND_FP32 else e.int_tensor.dequantize()
        if data.shape != p.data.shape:
            raise CheckpointFormatError(
                f"shape mismatch for {e.name!r}: checkpoint {data.shape} "
                f"vs model {p.data.shape}")
        p.data = data.astype(np.float32)
        if e.kind == KIND_INT:
            model.loaded_int_weights[e.name] = e.int_tensor
        seen_params.add(e.name)

    missing = set(params) - seen_params
    if missing:
        raise CheckpointFormatError(f"checkpoint missing parameters: {sorted(missing)[:4]}")
    if seen_thresholds and len(seen_thresholds) != len(thresholds):
        gone = set(thresholds) - seen_thresholds
        raise CheckpointFormatError(f"checkpoint missing thresholds: {sorted(gone)[:4]}")
