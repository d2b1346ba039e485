"""Segmented non-linear shading baseline.

Production-style shader that keeps a parametric shading function per
inventory segment (exchange x top-level domain x device x layout) and
adapts the parameters from auction feedback:

    f(b) = log((1 + u1 * u2 * b) / u2)   if u2 > 0
           b1 * b                        otherwise

* ``b1`` is fit by exponentially-forgetting recursive least squares on
  min_bid_to_win ~ b1 * unshaded_bid (through the origin).
* ``(u1, u2)`` are refined by a local grid search that keeps the pair
  maximizing realized surplus on the feedback batch; the incumbent pair
  is always in the grid, so a batch update never loses surplus to the
  incumbent on that batch.

Segments never share state; unseen segments shade with conservative
defaults (b1 = 0.85, linear branch).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .records import AuctionRecord

DEFAULT_B1 = 0.85
DEFAULT_U1 = 1.0
DEFAULT_U2 = 0.0
_B1_MIN = 1e-3
_RLS_INIT_P = 1e6
_GRID_STEP = 0.25
DEFAULT_MAX_SEGMENTS = 1_000_000


class SegmentKey(NamedTuple):
    """Inventory segment: exchange, top-level domain, device, layout."""

    request_publisher_id: str
    page_tld: str
    device_type_id: str
    layout_id: str

    @classmethod
    def of(cls, record: AuctionRecord) -> "SegmentKey":
        return cls(
            record.request_publisher_id,
            record.page_tld,
            record.device_type_id,
            record.layout_id,
        )


@dataclass(frozen=True, slots=True)
class SegmentParams:
    """Per-segment shading parameters plus RLS state."""

    u1: float = DEFAULT_U1
    u2: float = DEFAULT_U2
    b1: float = DEFAULT_B1
    rls_p: float = _RLS_INIT_P
    count: int = 0
    last_update_ms: int = 0


def nonlinear_shade(params: SegmentParams, unshaded_bid: float) -> float:
    """Shaded bid, always in (0, unshaded_bid].

    The log branch applies when u2 > 0 and its raw value lands in
    (0, unshaded_bid]; a non-positive log argument or raw value falls
    back to the linear branch, and values above the unshaded bid clamp
    to it (decrease-only).
    """
    if params.u2 > 0:
        arg = (1.0 + params.u1 * params.u2 * unshaded_bid) / params.u2
        if arg > 0:
            raw = math.log(arg)
            if raw > 0:
                return min(raw, unshaded_bid)
    return min(max(params.b1, _B1_MIN), 1.0) * unshaded_bid


def _batch_surplus(params: SegmentParams, pairs: Sequence[tuple[float, float]]) -> float:
    total = 0.0
    for unshaded, min_bid in pairs:
        shaded = nonlinear_shade(params, unshaded)
        if shaded >= min_bid:
            total += unshaded - shaded
    return total


def _candidate_grid(u1: float, u2: float) -> list[tuple[float, float]]:
    cands: list[tuple[float, float]] = [(u1, u2)]
    for du1 in (-_GRID_STEP, 0.0, _GRID_STEP):
        for du2 in (-_GRID_STEP, 0.0, _GRID_STEP):
            cand = (u1 + du1, max(0.0, u2 + du2))
            if cand not in cands:
                cands.append(cand)
    return cands


def update_segment(
    params: SegmentParams,
    batch: Sequence[tuple[float, float]],
    now_ms: int = 0,
    forgetting: float = 0.99,
) -> SegmentParams:
    """One feedback step: RLS on b1, then surplus grid search on (u1, u2).

    ``batch`` holds (unshaded_bid, min_bid_to_win) pairs.  Deterministic
    given batch order.
    """
    if not batch:
        raise ValueError("feedback batch is empty")

    theta = params.b1
    p = params.rls_p
    for unshaded, min_bid in batch:
        gain = p * unshaded / (forgetting + unshaded * p * unshaded)
        theta += gain * (min_bid - theta * unshaded)
        p = (p - gain * unshaded * p) / forgetting
    b1 = min(max(theta, _B1_MIN), 1.0)

    base = replace(
        params,
        b1=b1,
        rls_p=p,
        count=params.count + len(batch),
        last_update_ms=now_ms,
    )
    best = base
    best_surplus = _batch_surplus(base, batch)
    for u1, u2 in _candidate_grid(params.u1, params.u2)[1:]:
        cand = replace(base, u1=u1, u2=u2)
        cand_surplus = _batch_surplus(cand, batch)
        if cand_surplus > best_surplus:
            best, best_surplus = cand, cand_surplus
    return best


class SegmentStore:
    """Keyed segment parameters with least-recently-updated eviction."""

    def __init__(self, max_segments: int = DEFAULT_MAX_SEGMENTS):
        if max_segments < 1:
            raise ValueError("max_segments must be >= 1")
        self.max_segments = max_segments
        self._params: OrderedDict[SegmentKey, SegmentParams] = OrderedDict()

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, key: SegmentKey) -> bool:
        return key in self._params

    def get(self, key: SegmentKey) -> SegmentParams:
        """Parameters for a key; cold-start defaults when unseen."""
        return self._params.get(key, SegmentParams())

    def items(self):
        return self._params.items()

    def put(self, key: SegmentKey, params: SegmentParams) -> None:
        self._params[key] = params
        self._params.move_to_end(key)
        while len(self._params) > self.max_segments:
            self._params.popitem(last=False)

    def update(
        self,
        key: SegmentKey,
        batch: Sequence[tuple[float, float]],
        now_ms: int = 0,
    ) -> SegmentParams:
        updated = update_segment(self.get(key), batch, now_ms=now_ms)
        self.put(key, updated)
        return updated


class SegmentedShader:
    """Baseline shader over a segment store."""

    kind = "segmented"

    def __init__(self, store: SegmentStore | None = None):
        self.store = store if store is not None else SegmentStore()

    def shade(self, record: AuctionRecord) -> float:
        return nonlinear_shade(self.store.get(SegmentKey.of(record)), record.unshaded_bid)

    def raw_ratios(self, records: Sequence[AuctionRecord]) -> np.ndarray:
        out = np.empty(len(records), dtype=np.float64)
        for i, rec in enumerate(records):
            out[i] = self.shade(rec) / rec.unshaded_bid
        return out


def fit_segment_store(
    records: Iterable[AuctionRecord],
    *,
    batch_size: int = 256,
    max_segments: int = DEFAULT_MAX_SEGMENTS,
) -> SegmentStore:
    """Fit a segment store from a feedback log.

    Feedback is grouped per segment in log order and applied in batches,
    so parameters adapt iteratively the way the production loop would.
    """
    grouped: OrderedDict[SegmentKey, list[tuple[float, float]]] = OrderedDict()
    last_ts: dict[SegmentKey, int] = {}
    for rec in records:
        key = SegmentKey.of(rec)
        grouped.setdefault(key, []).append((rec.unshaded_bid, rec.min_bid_to_win))
        last_ts[key] = rec.timestamp_ms
    store = SegmentStore(max_segments=max_segments)
    for key, pairs in grouped.items():
        for start in range(0, len(pairs), batch_size):
            store.update(key, pairs[start : start + batch_size], now_ms=last_ts[key])
    return store
