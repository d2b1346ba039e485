"""Auction feedback records and the line-delimited auction log format.

A record is one logged ad opportunity from an open (non-censored)
first-price auction: the thirteen publisher/context fields available at
the ad call, the unshaded bid that the upstream bid calculation produced,
and the minimum bid to win reported by the exchange regardless of outcome.

Log format (one record per line, tab-separated, fields in fixed order)::

    page_tld  subdomain  publisher_id  request_publisher_id  country_id
    day_of_week  hour_of_day  device_type_id  app_name  is_new_user(0/1)
    target_deal_id  layout_id  ad_position_id  unshaded_bid  min_bid_to_win
    goal_type  timestamp_ms

Missing categorical values are written as the literal token
``__MISSING__``.  Prices are decimal dollars per mille (CPM dollars).
Floats are written with ``repr`` so that write -> parse -> write is
byte-identical.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Sequence

MISSING_TOKEN = "__MISSING__"

# The thirteen categorical/context fields, in log and encoder order.
FIELD_ORDER = (
    "page_tld",
    "subdomain",
    "publisher_id",
    "request_publisher_id",
    "country_id",
    "day_of_week",
    "hour_of_day",
    "device_type_id",
    "app_name",
    "is_new_user",
    "target_deal_id",
    "layout_id",
    "ad_position_id",
)

NUM_FIELDS = len(FIELD_ORDER)


class GoalType(str, Enum):
    """Advertiser line optimization objective."""

    NONE = "None"
    CPC = "CPC"
    CPA = "CPA"
    CPCV = "CPCV"
    CPVIEWI = "CPViewI"
    ECPM = "eCPM"


class InvalidRecordError(ValueError):
    """A record violates the auction record invariants."""


class LogIngestError(OSError):
    """The log stream itself could not be read."""


@dataclass(frozen=True, slots=True)
class AuctionRecord:
    """One logged ad opportunity with exchange feedback."""

    page_tld: str
    subdomain: str
    publisher_id: str
    request_publisher_id: str
    country_id: str
    day_of_week: int
    hour_of_day: int
    device_type_id: str
    app_name: str
    is_new_user: bool
    target_deal_id: str
    layout_id: str
    ad_position_id: str
    unshaded_bid: float
    min_bid_to_win: float
    goal_type: GoalType
    timestamp_ms: int

    def __post_init__(self):
        if not self.unshaded_bid > 0:
            raise InvalidRecordError(f"unshaded_bid must be > 0, got {self.unshaded_bid}")
        if not self.min_bid_to_win > 0:
            raise InvalidRecordError(f"min_bid_to_win must be > 0, got {self.min_bid_to_win}")
        if not 0 <= self.day_of_week <= 6:
            raise InvalidRecordError(f"day_of_week out of range: {self.day_of_week}")
        if not 0 <= self.hour_of_day <= 23:
            raise InvalidRecordError(f"hour_of_day out of range: {self.hour_of_day}")

    def field_tokens(self) -> tuple[str, ...]:
        """The 13 field values as strings, in encoder order.

        Integer context fields are stringified; the new-user flag becomes
        "1"/"0".  This is the exact token stream the feature encoder and
        the log writer consume.
        """
        return (
            self.page_tld,
            self.subdomain,
            self.publisher_id,
            self.request_publisher_id,
            self.country_id,
            str(self.day_of_week),
            str(self.hour_of_day),
            self.device_type_id,
            self.app_name,
            "1" if self.is_new_user else "0",
            self.target_deal_id,
            self.layout_id,
            self.ad_position_id,
        )


@dataclass(frozen=True, slots=True)
class OptimalRatio:
    """Training target: min bid to win over unshaded bid, clamped to (0, 1]."""

    value: float


def target_ratio(record: AuctionRecord) -> OptimalRatio:
    """Optimal shading ratio for a logged record.

    Records where the competing bid exceeds our bid are lost auctions;
    the ratio is clamped to 1 so shading never raises a bid.
    """
    if not record.unshaded_bid > 0:
        raise InvalidRecordError("unshaded_bid must be > 0")
    return OptimalRatio(min(record.min_bid_to_win / record.unshaded_bid, 1.0))


def won_at_full_bid(record: AuctionRecord) -> bool:
    """True when bidding the unshaded bid would have won (ties win)."""
    return record.unshaded_bid >= record.min_bid_to_win


def won_records(records: Iterable[AuctionRecord]) -> list[AuctionRecord]:
    """Filter to won-bid feedback, the training/evaluation population."""
    return [r for r in records if won_at_full_bid(r)]


def format_record(record: AuctionRecord) -> str:
    """One log line for a record (no trailing newline)."""
    toks = record.field_tokens()
    return "\t".join(
        toks
        + (
            repr(record.unshaded_bid),
            repr(record.min_bid_to_win),
            record.goal_type.value,
            str(record.timestamp_ms),
        )
    )


def _parse_line(line: str) -> AuctionRecord:
    parts = line.split("\t")
    if len(parts) != NUM_FIELDS + 4:
        raise InvalidRecordError(f"expected {NUM_FIELDS + 4} fields, got {len(parts)}")
    for tok in parts[:NUM_FIELDS]:
        if tok == "":
            raise InvalidRecordError("empty field (missing values must use __MISSING__)")
    if parts[9] not in ("0", "1"):
        raise InvalidRecordError(f"is_new_user must be 0 or 1, got {parts[9]!r}")
    return AuctionRecord(
        page_tld=parts[0],
        subdomain=parts[1],
        publisher_id=parts[2],
        request_publisher_id=parts[3],
        country_id=parts[4],
        day_of_week=int(parts[5]),
        hour_of_day=int(parts[6]),
        device_type_id=parts[7],
        app_name=parts[8],
        is_new_user=parts[9] == "1",
        target_deal_id=parts[10],
        layout_id=parts[11],
        ad_position_id=parts[12],
        unshaded_bid=float(parts[13]),
        min_bid_to_win=float(parts[14]),
        goal_type=GoalType(parts[15]),
        timestamp_ms=int(parts[16]),
    )


@dataclass(slots=True)
class ParsedLog:
    """Parse result: records in file order plus the malformed-line count."""

    records: list[AuctionRecord]
    skipped: int


def parse_log(lines: Iterable[str]) -> ParsedLog:
    """Parse a line-delimited auction log stream.

    Malformed lines are skipped and counted; an unreadable stream raises
    ``LogIngestError``.
    """
    records: list[AuctionRecord] = []
    skipped = 0
    try:
        for line in lines:
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                records.append(_parse_line(line))
            except (InvalidRecordError, ValueError):
                skipped += 1
    except OSError as exc:
        raise LogIngestError(f"log stream unreadable: {exc}") from exc
    return ParsedLog(records, skipped)


def read_log(path: str) -> ParsedLog:
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise LogIngestError(f"cannot open log {path!r}: {exc}") from exc
    with handle:
        return parse_log(handle)


def write_log(records: Sequence[AuctionRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(format_record(rec))
            fh.write("\n")


def dump_log(records: Sequence[AuctionRecord]) -> str:
    """The full log text for a record sequence (round-trip stable)."""
    buf = io.StringIO()
    for rec in records:
        buf.write(format_record(rec))
        buf.write("\n")
    return buf.getvalue()


def iter_log_lines(records: Iterable[AuctionRecord]) -> Iterator[str]:
    for rec in records:
        yield format_record(rec)
