"""Versioned binary model files with checksum validation.

Layout (all little-endian, offsets in bytes from the start)::

    0   magic            4  bytes, b"BSHD"
    4   format version   u32 (currently 1)
    8   model kind       u8  (1 = fm, 2 = linear, 3 = segmented)
    9   reserved         u8  (0)
    10  train seed       u64
    18  gamma            f64
    26  epochs           u32
    30  train window     u16 length + UTF-8 bytes
    --  kind-specific payload (below)
    end-4  checksum      u32, CRC-32 of every preceding byte

fm / linear payload::

    hash seed  u64          encoder config, embedded so the model
    bits/field u8           is self-describing
    n fields   u8
    field name (u16 len + UTF-8) x n
    K          u32          embedding dim; 0 for linear models
    w0         f32
    w          f32 x total_space          dense, in index order
    V          f32 x total_space x K      row-major; fm only

segmented payload::

    max segments  u32
    n segments    u32
    per segment: 4 key strings (u16 len + UTF-8 each),
                 u1 f32, u2 f32, b1 f32, rls_p f32,
                 count u32, last_update_ms u64

Training runs in 64-bit floats and rounds once to 32-bit at save time;
loading widens the stored values back to 64-bit, so save -> load is
idempotent and a loaded model re-saves to an identical payload.
Corrupt checksums and unknown versions are refused, never coerced.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .baseline import SegmentedShader, SegmentKey, SegmentParams, SegmentStore
from .encoding import EncoderConfig
from .models import FmModel, LinearModel

MAGIC = b"BSHD"
FORMAT_VERSION = 1
_KIND_CODES = {"fm": 1, "linear": 2, "segmented": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class ModelFileError(ValueError):
    """Unreadable, corrupt, or unsupported model file."""


@dataclass(frozen=True, slots=True)
class TrainMeta:
    """Provenance stored alongside the parameters."""

    seed: int = 0
    gamma: float = 0.0
    epochs: int = 0
    window: str = ""


@dataclass(frozen=True)
class LoadedModel:
    model: FmModel | LinearModel | SegmentedShader
    kind: str
    meta: TrainMeta
    checksum: int

    @property
    def version_tag(self) -> str:
        return f"{self.kind}-v{FORMAT_VERSION}-{self.checksum:08x}"


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ModelFileError("string field too long")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ModelFileError("model file truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values if len(values) > 1 else values[0]

    def take_str(self) -> str:
        length = self.take("<H")
        if self.pos + length > len(self.data):
            raise ModelFileError("model file truncated")
        raw = self.data[self.pos : self.pos + length]
        self.pos += length
        return raw.decode("utf-8")

    def take_f32_array(self, count: int) -> np.ndarray:
        size = 4 * count
        if self.pos + size > len(self.data):
            raise ModelFileError("model file truncated")
        arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.pos)
        self.pos += size
        return arr.astype(np.float64)


def _encoder_bytes(encoder: EncoderConfig) -> bytes:
    out = [struct.pack("<QBB", encoder.hash_seed, encoder.bits_per_field, len(encoder.fields))]
    for name in encoder.fields:
        out.append(_pack_str(name))
    return b"".join(out)


def _read_encoder(reader: _Reader) -> EncoderConfig:
    hash_seed, bits, n_fields = reader.take("<QBB")
    fields = tuple(reader.take_str() for _ in range(n_fields))
    return EncoderConfig(bits_per_field=bits, hash_seed=hash_seed, fields=fields)


def save_model(model, path: str, meta: TrainMeta | None = None) -> str:
    """Write a model file; returns its version tag."""
    meta = meta or TrainMeta()
    if isinstance(model, SegmentedShader):
        kind = "segmented"
    elif isinstance(model, (FmModel, LinearModel)):
        kind = model.kind
    else:
        raise ModelFileError(f"cannot serialize {type(model).__name__}")

    parts = [
        MAGIC,
        struct.pack("<IBB", FORMAT_VERSION, _KIND_CODES[kind], 0),
        struct.pack("<QdI", meta.seed, meta.gamma, meta.epochs),
        _pack_str(meta.window),
    ]
    if kind in ("fm", "linear"):
        parts.append(_encoder_bytes(model.encoder))
        k = model.V.shape[1] if kind == "fm" else 0
        parts.append(struct.pack("<I", k))
        parts.append(struct.pack("<f", model.w0))
        parts.append(model.w.astype("<f4").tobytes())
        if kind == "fm":
            parts.append(model.V.astype("<f4").tobytes())
    else:
        store = model.store
        parts.append(struct.pack("<II", store.max_segments, len(store)))
        for key, params in store.items():
            for component in key:
                parts.append(_pack_str(component))
            parts.append(
                struct.pack(
                    "<ffffIQ",
                    params.u1,
                    params.u2,
                    params.b1,
                    params.rls_p,
                    params.count,
                    params.last_update_ms,
                )
            )
    body = b"".join(parts)
    checksum = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", checksum))
    return f"{kind}-v{FORMAT_VERSION}-{checksum:08x}"


def load_model(path: str) -> LoadedModel:
    """Read and validate a model file.

    Refuses files with a bad magic, an unknown format version, or a
    checksum mismatch.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path!r}: {exc}") from exc
    if len(data) < len(MAGIC) + 10:
        raise ModelFileError("model file truncated")
    if data[:4] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    if actual_crc != stored_crc:
        raise ModelFileError(
            f"checksum mismatch (stored {stored_crc:08x}, computed {actual_crc:08x})"
        )

    reader = _Reader(body)
    reader.pos = 4
    version, kind_code, _reserved = reader.take("<IBB")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    if kind_code not in _KIND_NAMES:
        raise ModelFileError(f"unknown model kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]
    seed, gamma, epochs = reader.take("<QdI")
    window = reader.take_str()
    meta = TrainMeta(seed=seed, gamma=gamma, epochs=epochs, window=window)

    if kind in ("fm", "linear"):
        encoder = _read_encoder(reader)
        k = reader.take("<I")
        w0 = float(np.float64(reader.take("<f")))
        w = reader.take_f32_array(encoder.total_space)
        if kind == "fm":
            if k < 1:
                raise ModelFileError("fm model with embedding dim 0")
            v = reader.take_f32_array(encoder.total_space * k).reshape(-1, k)
            model: FmModel | LinearModel | SegmentedShader = FmModel(
                w0=w0, w=w, V=v, encoder=encoder
            )
        else:
            model = LinearModel(w0=w0, w=w, encoder=encoder)
    else:
        max_segments, n_segments = reader.take("<II")
        store = SegmentStore(max_segments=max_segments)
        for _ in range(n_segments):
            key = SegmentKey(
                reader.take_str(), reader.take_str(), reader.take_str(), reader.take_str()
            )
            u1, u2, b1, rls_p, count, last_update = reader.take("<ffffIQ")
            store.put(
                key,
                SegmentParams(
                    u1=float(u1),
                    u2=float(u2),
                    b1=float(b1),
                    rls_p=float(rls_p),
                    count=count,
                    last_update_ms=last_update,
                ),
            )
        model = SegmentedShader(store)
    if reader.pos != len(body):
        raise ModelFileError("trailing bytes in model file")
    return LoadedModel(model=model, kind=kind, meta=meta, checksum=stored_crc)
