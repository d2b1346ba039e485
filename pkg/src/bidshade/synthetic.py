"""Synthetic auction logs with multimodal minimum-bid-to-win landscapes.

Real competing-bid distributions vary wildly across inventory slices and
are often multimodal, so the generator models them as mixtures of
log-space normal components attached to latent segments.  Field
interaction rules decide which segment an opportunity belongs to; at
least one rule must condition on a conjunction of two fields so that
pairwise interactions carry signal the landscape reflects.

Unshaded bids are drawn above the segment's landscape median (median
times a per-segment uplift factor >= 1), so winning at the full bid is
common and won-bid filtering keeps most records.

Generation is deterministic for a fixed seed (numpy PCG64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Mapping, Sequence

import numpy as np
import yaml

from .encoding import ConfigError
from .records import FIELD_ORDER, AuctionRecord, GoalType, MISSING_TOKEN

SPEC_FORMAT_VERSION = 1

# 2026-01-01T00:00:00Z; generated timestamps start here.
_EPOCH_START_MS = 1_767_225_600_000
_MS_PER_DAY = 86_400_000

# Test-set goal-type mix observed on the platform; the residual mass is
# folded into the None goal so the table sums to 1.
DEFAULT_GOAL_PREVALENCE: dict[GoalType, float] = {
    GoalType.NONE: 1.0 - (0.3895 + 0.1212 + 0.0360 + 0.0078 + 0.0057),
    GoalType.CPA: 0.3895,
    GoalType.CPC: 0.1212,
    GoalType.ECPM: 0.0360,
    GoalType.CPVIEWI: 0.0078,
    GoalType.CPCV: 0.0057,
}

# Fields whose values the generator samples from a vocabulary.  Day of
# week and hour of day derive from the timestamp; is_new_user is a coin.
SAMPLED_FIELDS = (
    "page_tld",
    "subdomain",
    "publisher_id",
    "request_publisher_id",
    "country_id",
    "device_type_id",
    "app_name",
    "target_deal_id",
    "layout_id",
    "ad_position_id",
)

DEFAULT_FIELD_VALUES: dict[str, tuple[str, ...]] = {
    "page_tld": tuple(f"site_{i:02d}" for i in range(12)),
    "subdomain": ("www", "m", "amp", "shop", "news", "blog"),
    "publisher_id": ("pub_core", "pub_reach"),
    "request_publisher_id": ("exch_a", "exch_b", "exch_c", "exch_d"),
    "country_id": ("US", "GB"),
    "device_type_id": ("desktop", "phone", "tablet"),
    "app_name": ("app_news", "app_games"),
    "target_deal_id": (MISSING_TOKEN, "deal_01", "deal_02", "deal_03"),
    "layout_id": ("banner", "native", "video"),
    "ad_position_id": ("atf", "btf", "side", "top"),
}


@dataclass(frozen=True, slots=True)
class MixtureComponent:
    """One log-space normal component: exp(N(log_loc, log_scale^2))."""

    weight: float
    log_loc: float
    log_scale: float


@dataclass(frozen=True, slots=True)
class SegmentLandscape:
    """Competing-bid mixture plus the unshaded-bid uplift range."""

    components: tuple[MixtureComponent, ...]
    bid_uplift: tuple[float, float] = (1.2, 2.0)


@dataclass(frozen=True, slots=True)
class SegmentRule:
    """First matching rule assigns the latent segment.

    ``when`` maps field name -> tuple of acceptable tokens; all entries
    must match (conjunction).
    """

    when: tuple[tuple[str, tuple[str, ...]], ...]
    segment: int


@dataclass(frozen=True)
class SyntheticLandscapeSpec:
    segments: tuple[SegmentLandscape, ...]
    rules: tuple[SegmentRule, ...]
    n_records: int
    seed: int
    field_values: Mapping[str, tuple[str, ...]] = dc_field(
        default_factory=lambda: dict(DEFAULT_FIELD_VALUES)
    )
    goal_prevalence: Mapping[GoalType, float] = dc_field(
        default_factory=lambda: dict(DEFAULT_GOAL_PREVALENCE)
    )
    days: int = 8
    default_segment: int = 0
    new_user_rate: float = 0.3

    def __post_init__(self):
        if self.n_records < 0:
            raise ConfigError("n_records must be >= 0")
        if not self.segments:
            raise ConfigError("at least one segment is required")
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        for s, seg in enumerate(self.segments):
            if not seg.components:
                raise ConfigError(f"segment {s} has no mixture components")
            total = math.fsum(c.weight for c in seg.components)
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"segment {s} mixture weights sum to {total}, not 1")
            for c in seg.components:
                if c.weight < 0 or c.log_scale < 0:
                    raise ConfigError(f"segment {s} has a negative weight or scale")
            lo, hi = seg.bid_uplift
            if not (1.0 <= lo <= hi):
                raise ConfigError(f"segment {s} bid_uplift must satisfy 1 <= lo <= hi")
        total = math.fsum(self.goal_prevalence.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"goal prevalences sum to {total}, not 1")
        if not 0 <= self.default_segment < len(self.segments):
            raise ConfigError("default_segment out of range")
        for rule in self.rules:
            if not 0 <= rule.segment < len(self.segments):
                raise ConfigError(f"rule targets unknown segment {rule.segment}")
            for name, values in rule.when:
                if name not in FIELD_ORDER:
                    raise ConfigError(f"rule conditions on unknown field {name!r}")
                if not values:
                    raise ConfigError(f"rule condition on {name!r} has no values")
        for name in SAMPLED_FIELDS:
            if not self.field_values.get(name):
                raise ConfigError(f"no vocabulary for field {name!r}")


def mixture_median(components: Sequence[MixtureComponent]) -> float:
    """Median of a log-space normal mixture, by bisection on the CDF."""

    def cdf_log(z: float) -> float:
        total = 0.0
        for c in components:
            if c.log_scale > 0:
                total += c.weight * 0.5 * (1.0 + math.erf((z - c.log_loc) / (c.log_scale * math.sqrt(2.0))))
            elif z >= c.log_loc:
                total += c.weight
        return total

    span = max(c.log_scale for c in components)
    lo = min(c.log_loc for c in components) - 8.0 * span - 1e-9
    hi = max(c.log_loc for c in components) + 8.0 * span + 1e-9
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf_log(mid) >= 0.5:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-13:
            break
    return math.exp(0.5 * (lo + hi))


def _assign_segments(
    spec: SyntheticLandscapeSpec, tokens: dict[str, np.ndarray], n: int
) -> np.ndarray:
    seg = np.full(n, spec.default_segment, dtype=np.int64)
    assigned = np.zeros(n, dtype=bool)
    for rule in spec.rules:
        mask = ~assigned
        for name, values in rule.when:
            mask &= np.isin(tokens[name], values)
        seg[mask] = rule.segment
        assigned |= mask
    return seg


def generate_synthetic(spec: SyntheticLandscapeSpec) -> list[AuctionRecord]:
    """Generate a synthetic auction log per the landscape spec."""
    n = spec.n_records
    if n == 0:
        return []
    rng = np.random.default_rng(spec.seed)

    # Timestamps advance uniformly across the window; dow/hod derive from them.
    window = spec.days * _MS_PER_DAY
    ts = _EPOCH_START_MS + (np.arange(n, dtype=np.int64) * window) // n
    epoch_day = ts // _MS_PER_DAY
    dow = ((epoch_day + 3) % 7).astype(np.int64)  # 1970-01-01 was a Thursday
    hod = ((ts % _MS_PER_DAY) // 3_600_000).astype(np.int64)

    tokens: dict[str, np.ndarray] = {}
    for name in SAMPLED_FIELDS:
        vocab = np.array(spec.field_values[name], dtype=object)
        tokens[name] = vocab[rng.integers(0, len(vocab), size=n)]
    new_user = rng.random(n) < spec.new_user_rate
    tokens["day_of_week"] = dow.astype(str)
    tokens["hour_of_day"] = hod.astype(str)
    tokens["is_new_user"] = np.where(new_user, "1", "0")

    seg = _assign_segments(spec, tokens, n)

    min_bid = np.empty(n, dtype=np.float64)
    unshaded = np.empty(n, dtype=np.float64)
    for s, landscape in enumerate(spec.segments):
        ids = np.flatnonzero(seg == s)
        if len(ids) == 0:
            continue
        weights = np.array([c.weight for c in landscape.components])
        locs = np.array([c.log_loc for c in landscape.components])
        scales = np.array([c.log_scale for c in landscape.components])
        comp = rng.choice(len(weights), size=len(ids), p=weights / weights.sum())
        min_bid[ids] = np.exp(locs[comp] + scales[comp] * rng.standard_normal(len(ids)))
        lo, hi = landscape.bid_uplift
        unshaded[ids] = mixture_median(landscape.components) * rng.uniform(lo, hi, len(ids))

    goals = list(spec.goal_prevalence.keys())
    probs = np.array([spec.goal_prevalence[g] for g in goals], dtype=np.float64)
    goal_idx = rng.choice(len(goals), size=n, p=probs / probs.sum())

    records = []
    for i in range(n):
        records.append(
            AuctionRecord(
                page_tld=tokens["page_tld"][i],
                subdomain=tokens["subdomain"][i],
                publisher_id=tokens["publisher_id"][i],
                request_publisher_id=tokens["request_publisher_id"][i],
                country_id=tokens["country_id"][i],
                day_of_week=int(dow[i]),
                hour_of_day=int(hod[i]),
                device_type_id=tokens["device_type_id"][i],
                app_name=tokens["app_name"][i],
                is_new_user=bool(new_user[i]),
                target_deal_id=tokens["target_deal_id"][i],
                layout_id=tokens["layout_id"][i],
                ad_position_id=tokens["ad_position_id"][i],
                unshaded_bid=float(unshaded[i]),
                min_bid_to_win=float(min_bid[i]),
                goal_type=goals[goal_idx[i]],
                timestamp_ms=int(ts[i]),
            )
        )
    return records


def interaction_benchmark_spec(n_records: int = 50_000, seed: int = 7) -> SyntheticLandscapeSpec:
    """Benchmark landscape where the shading signal is a field interaction.

    The competing-bid regime is decided by the XOR of app_name and
    country_id -- a pure pairwise pattern with zero main effects -- while
    publisher_id adds a main effect on top.  None of the driving fields
    sit in the segmented baseline's key, and the unshaded-bid ranges of
    the regimes overlap, so neither a per-key constant nor a curve in the
    bid alone can recover the per-record optimal ratio.
    """
    tight = (  # competitors bid close to our valuation: shade little
        MixtureComponent(1.0, math.log(2.5), 0.12),
    )
    loose = (  # thin competition: deep shading pays
        MixtureComponent(1.0, math.log(1.1), 0.15),
    )
    segments = (
        SegmentLandscape(tight, bid_uplift=(1.08, 1.35)),  # 0: xor-true, pub_core
        SegmentLandscape(tight, bid_uplift=(1.35, 1.75)),  # 1: xor-true, pub_reach
        SegmentLandscape(loose, bid_uplift=(2.10, 3.30)),  # 2: xor-false, pub_core
        SegmentLandscape(loose, bid_uplift=(2.70, 4.10)),  # 3: xor-false, pub_reach
    )

    def rule(app: str, country: str, pub: str, segment: int) -> SegmentRule:
        return SegmentRule(
            when=(
                ("app_name", (app,)),
                ("country_id", (country,)),
                ("publisher_id", (pub,)),
            ),
            segment=segment,
        )

    rules = (
        rule("app_news", "US", "pub_core", 0),
        rule("app_games", "GB", "pub_core", 0),
        rule("app_news", "US", "pub_reach", 1),
        rule("app_games", "GB", "pub_reach", 1),
        rule("app_news", "GB", "pub_core", 2),
        rule("app_games", "US", "pub_core", 2),
        rule("app_news", "GB", "pub_reach", 3),
        rule("app_games", "US", "pub_reach", 3),
    )
    return SyntheticLandscapeSpec(
        segments=segments, rules=rules, n_records=n_records, seed=seed
    )


# ---------------------------------------------------------------------------
# Human-editable spec files (YAML with a versioned header).
#
# Documented keys:
#   version: 1                      required, must equal 1
#   seed, records, days             integers
#   default_segment                 integer segment index
#   new_user_rate                   float in [0, 1]
#   goal_prevalence:                goal token -> probability (sums to 1)
#   field_values:                   field name -> list of tokens
#   segments:                       list of
#     components: [{weight, log_loc, log_scale}, ...]
#     bid_uplift: [lo, hi]          lo >= 1
#   rules:                          list of {when: {field: token-or-list}, segment: i}
# ---------------------------------------------------------------------------


def spec_to_dict(spec: SyntheticLandscapeSpec) -> dict:
    return {
        "version": SPEC_FORMAT_VERSION,
        "seed": spec.seed,
        "records": spec.n_records,
        "days": spec.days,
        "default_segment": spec.default_segment,
        "new_user_rate": spec.new_user_rate,
        "goal_prevalence": {g.value: float(p) for g, p in spec.goal_prevalence.items()},
        "field_values": {k: list(v) for k, v in spec.field_values.items()},
        "segments": [
            {
                "components": [
                    {"weight": c.weight, "log_loc": c.log_loc, "log_scale": c.log_scale}
                    for c in seg.components
                ],
                "bid_uplift": list(seg.bid_uplift),
            }
            for seg in spec.segments
        ],
        "rules": [
            {"when": {name: list(values) for name, values in rule.when}, "segment": rule.segment}
            for rule in spec.rules
        ],
    }


def spec_from_dict(data: dict) -> SyntheticLandscapeSpec:
    if not isinstance(data, dict):
        raise ConfigError("synthetic spec must be a mapping")
    version = data.get("version")
    if version != SPEC_FORMAT_VERSION:
        raise ConfigError(f"unsupported synthetic spec version {version!r}")
    try:
        segments = tuple(
            SegmentLandscape(
                components=tuple(
                    MixtureComponent(
                        weight=float(c["weight"]),
                        log_loc=float(c["log_loc"]),
                        log_scale=float(c["log_scale"]),
                    )
                    for c in seg["components"]
                ),
                bid_uplift=tuple(float(x) for x in seg.get("bid_uplift", (1.2, 2.0))),
            )
            for seg in data["segments"]
        )
        rules = tuple(
            SegmentRule(
                when=tuple(
                    (name, tuple([vals] if isinstance(vals, str) else [str(v) for v in vals]))
                    for name, vals in rule["when"].items()
                ),
                segment=int(rule["segment"]),
            )
            for rule in data.get("rules", ())
        )
        field_values = {
            str(k): tuple(str(v) for v in vs)
            for k, vs in data.get("field_values", DEFAULT_FIELD_VALUES).items()
        }
        goal_prevalence = {
            GoalType(str(g)): float(p)
            for g, p in data.get(
                "goal_prevalence", {g.value: p for g, p in DEFAULT_GOAL_PREVALENCE.items()}
            ).items()
        }
        return SyntheticLandscapeSpec(
            segments=segments,
            rules=rules,
            n_records=int(data["records"]),
            seed=int(data.get("seed", 0)),
            field_values=field_values,
            goal_prevalence=goal_prevalence,
            days=int(data.get("days", 8)),
            default_segment=int(data.get("default_segment", 0)),
            new_user_rate=float(data.get("new_user_rate", 0.3)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from exc


def load_spec(path: str) -> SyntheticLandscapeSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_dict(yaml.safe_load(fh))


def save_spec(spec: SyntheticLandscapeSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(spec_to_dict(spec), fh, sort_keys=False)
