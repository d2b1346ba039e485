"""Field-scoped feature hashing for the 13 categorical/context fields.

Each field owns a disjoint index range of ``2**bits_per_field`` buckets;
a record encodes to exactly 13 active one-hot entries, one per field::

    index(field f, token s) = f * 2**bits + (hash64(seed, f, s) mod 2**bits)

``hash64`` is keyed BLAKE2b (digest_size=8, key = seed as 8 little-endian
bytes) over ``"{f}\\x1f{s}"`` encoded UTF-8 -- stable across processes and
platforms, unlike the builtin ``hash``.  The seed and space size are
stored in the model file so training and serving agree bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from hashlib import blake2b
from typing import Sequence

import numpy as np

from .records import FIELD_ORDER, NUM_FIELDS, AuctionRecord


class ConfigError(ValueError):
    """Invalid encoder or generator configuration."""


@dataclass(frozen=True, slots=True)
class EncoderConfig:
    """Hashing parameters shared by training and serving."""

    bits_per_field: int = 18
    hash_seed: int = 0
    fields: tuple[str, ...] = FIELD_ORDER

    def __post_init__(self):
        if not 1 <= self.bits_per_field <= 24:
            raise ConfigError(f"bits_per_field out of range: {self.bits_per_field}")
        if tuple(self.fields) != FIELD_ORDER:
            raise ConfigError("field ordering must be the fixed 13-field schema order")
        if not 0 <= self.hash_seed < 2**64:
            raise ConfigError("hash_seed must fit in 64 bits")

    @property
    def space_per_field(self) -> int:
        return 1 << self.bits_per_field

    @property
    def total_space(self) -> int:
        return NUM_FIELDS << self.bits_per_field


@dataclass(frozen=True)
class SparseFeatureVector:
    """One-hot encoding of a record: 13 distinct indices, all values 1.0."""

    indices: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.ones(len(self.indices), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.indices)


@lru_cache(maxsize=1 << 18)
def _bucket(hash_seed: int, field_index: int, token: str, space: int) -> int:
    key = hash_seed.to_bytes(8, "little")
    digest = blake2b(
        f"{field_index}\x1f{token}".encode("utf-8"), digest_size=8, key=key
    ).digest()
    return int.from_bytes(digest, "little") % space


def feature_index(config: EncoderConfig, field_index: int, token: str) -> int:
    """Global hashed index for one field value."""
    space = config.space_per_field
    return field_index * space + _bucket(config.hash_seed, field_index, token, space)


def encode_tokens(tokens: Sequence[str], config: EncoderConfig) -> SparseFeatureVector:
    """Encode a 13-token row (encoder order) into a sparse vector.

    Deterministic in (tokens, config); indices come out sorted because the
    per-field ranges are disjoint and visited in field order.
    """
    if len(tokens) != NUM_FIELDS:
        raise ConfigError(f"expected {NUM_FIELDS} tokens, got {len(tokens)}")
    idx = np.empty(NUM_FIELDS, dtype=np.int64)
    space = config.space_per_field
    seed = config.hash_seed
    for f, tok in enumerate(tokens):
        idx[f] = f * space + _bucket(seed, f, tok, space)
    return SparseFeatureVector(idx)


def encode(record: AuctionRecord, config: EncoderConfig) -> SparseFeatureVector:
    """Encode a record's 13 fields (missing values map to __MISSING__)."""
    return encode_tokens(record.field_tokens(), config)


def encode_dataset(
    records: Sequence[AuctionRecord], config: EncoderConfig
) -> np.ndarray:
    """Vectorized encoding of a record sequence to an (N, 13) index matrix.

    Hashing is done once per distinct (field, token) pair, so large logs
    with modest vocabularies encode in O(N) dictionary lookups.
    """
    n = len(records)
    token_rows = [rec.field_tokens() for rec in records]
    out = np.empty((n, NUM_FIELDS), dtype=np.int64)
    space = config.space_per_field
    seed = config.hash_seed
    for f in range(NUM_FIELDS):
        col = [row[f] for row in token_rows]
        mapping = {
            tok: f * space + _bucket(seed, f, tok, space) for tok in set(col)
        }
        out[:, f] = np.fromiter((mapping[t] for t in col), dtype=np.int64, count=n)
    return out
