"""Offline auction replay: run shaders over a held-out log and score them.

Every shader sees the identical record sequence; wins are decided
against the logged minimum bid to win (ties win -- the feedback is the
minimum bid TO WIN), and the metric suite covers both regression quality
and platform outcomes:

* total surplus  = sum (unshaded - shaded) over won auctions
* total spend    = sum shaded over won auctions
* win rate       = wins / N
* CPM, two forms = spend / N (the per-bid-response average) and
                   spend / wins (the conventional per-won-mille average)
* MSE and r^2 (squared Pearson correlation) of predicted vs optimal ratio

Metric totals use compensated addition (math.fsum), so accumulation
order cannot perturb results.  Overall totals are defined as the sum of
the per-goal-type blocks, which therefore aggregate exactly.

Percent deltas are reported against a designated baseline shader.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoding import EncoderConfig
from .models import (
    RATIO_FLOOR,
    AsymLossConfig,
    TrainConfig,
    TrainingDiverged,
    train,
)
from .records import AuctionRecord, GoalType

DELTA_METRICS = ("surplus", "spend", "win_rate", "cpm_paper", "cpm_conventional")


class EvaluationError(ValueError):
    """Replay inputs are unusable (empty log, missing baseline, mismatch)."""


def win_indicator(shaded_bid: float, min_bid_to_win: float) -> bool:
    """True iff the shaded bid wins; ties win."""
    return shaded_bid >= min_bid_to_win


def surplus(records: Sequence[AuctionRecord], shaded_bids: Sequence[float]) -> float:
    """Total bid surplus: sum of (unshaded - shaded) over won auctions."""
    if len(records) != len(shaded_bids):
        raise EvaluationError("records and shaded bids are misaligned")
    return math.fsum(
        rec.unshaded_bid - bid
        for rec, bid in zip(records, shaded_bids)
        if bid >= rec.min_bid_to_win
    )


@dataclass(frozen=True, slots=True)
class SpendStats:
    total_spend: float
    win_rate: float
    cpm_paper: float
    cpm_conventional: float | None


def spend_winrate_cpm(
    records: Sequence[AuctionRecord], shaded_bids: Sequence[float]
) -> SpendStats:
    if len(records) != len(shaded_bids):
        raise EvaluationError("records and shaded bids are misaligned")
    n = len(records)
    if n == 0:
        return SpendStats(0.0, 0.0, 0.0, None)
    spend = math.fsum(
        bid for rec, bid in zip(records, shaded_bids) if bid >= rec.min_bid_to_win
    )
    wins = sum(1 for rec, bid in zip(records, shaded_bids) if bid >= rec.min_bid_to_win)
    return SpendStats(
        total_spend=spend,
        win_rate=wins / n,
        cpm_paper=spend / n,
        cpm_conventional=spend / wins if wins else None,
    )


def regression_metrics(
    targets: Sequence[float], predictions: Sequence[float]
) -> tuple[float, float | None]:
    """(MSE, squared Pearson correlation); r^2 is None when degenerate.

    Note the r^2 here rewards linear association, not calibration: a
    perfectly anticorrelated predictor still scores 1.
    """
    y = np.asarray(targets, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if y.shape != p.shape:
        raise EvaluationError("targets and predictions are misaligned")
    n = len(y)
    if n == 0:
        return 0.0, None
    mse = math.fsum((y - p) ** 2) / n
    if n < 2:
        return mse, None
    yc = y - y.mean()
    pc = p - p.mean()
    denom = math.sqrt(float((yc * yc).sum()) * float((pc * pc).sum()))
    if denom == 0.0:
        return mse, None
    r = float((yc * pc).sum()) / denom
    return mse, r * r


@dataclass(frozen=True, slots=True)
class MetricBlock:
    """Replay metrics for one (shader, record subset)."""

    records: int
    wins: int
    surplus: float
    spend: float
    win_rate: float
    cpm_paper: float
    cpm_conventional: float | None
    mse: float
    r2: float | None

    def metric(self, name: str) -> float | None:
        return getattr(self, name)


@dataclass
class ShaderResult:
    overall: MetricBlock
    per_goal: dict[GoalType, MetricBlock]
    fallbacks: int
    deltas: dict[str, float | None] = field(default_factory=dict)


@dataclass
class ReplayReport:
    records: int
    baseline: str
    shaders: dict[str, ShaderResult]
    gamma: float | None = None


def _block(
    bu: np.ndarray,
    minb: np.ndarray,
    y: np.ndarray,
    raw: np.ndarray,
    shaded: np.ndarray,
) -> MetricBlock:
    won = shaded >= minb
    n = len(bu)
    wins = int(won.sum())
    total_surplus = math.fsum((bu[won] - shaded[won]).tolist())
    total_spend = math.fsum(shaded[won].tolist())
    mse, r2 = regression_metrics(y, raw)
    return MetricBlock(
        records=n,
        wins=wins,
        surplus=total_surplus,
        spend=total_spend,
        win_rate=wins / n if n else 0.0,
        cpm_paper=total_spend / n if n else 0.0,
        cpm_conventional=total_spend / wins if wins else None,
        mse=mse,
        r2=r2,
    )


def _aggregate(blocks: Sequence[MetricBlock], y: np.ndarray, raw: np.ndarray) -> MetricBlock:
    """Overall block as the exact aggregate of per-goal blocks.

    Totals and counts are sums; rates are the count-weighted means those
    sums imply.  r^2 is not additive and is recomputed on the full data.
    """
    n = sum(b.records for b in blocks)
    wins = sum(b.wins for b in blocks)
    total_surplus = math.fsum(b.surplus for b in blocks)
    total_spend = math.fsum(b.spend for b in blocks)
    sse = math.fsum(b.mse * b.records for b in blocks)
    _, r2 = regression_metrics(y, raw)
    return MetricBlock(
        records=n,
        wins=wins,
        surplus=total_surplus,
        spend=total_spend,
        win_rate=wins / n if n else 0.0,
        cpm_paper=total_spend / n if n else 0.0,
        cpm_conventional=total_spend / wins if wins else None,
        mse=sse / n if n else 0.0,
        r2=r2,
    )


def percent_delta(value: float | None, base: float | None) -> float | None:
    if value is None or base is None or base == 0:
        return None
    return 100.0 * (value - base) / base


def run_replay(
    records: Sequence[AuctionRecord],
    shaders: Mapping[str, object],
    baseline: str = "baseline",
    loss_cfg: AsymLossConfig | None = None,
) -> ReplayReport:
    """Replay the log under every shader and score against the baseline.

    Shaders expose ``raw_ratios(records) -> array``.  Ratios are clamped
    to [RATIO_FLOOR, 1] before bidding; non-finite ratios fall back to
    the unshaded bid (ratio 1) and are tallied per shader.
    """
    if len(records) == 0:
        raise EvaluationError("replay log is empty")
    if baseline not in shaders:
        raise EvaluationError(
            f"baseline shader {baseline!r} missing from shader set {sorted(shaders)}"
        )

    bu = np.fromiter((r.unshaded_bid for r in records), dtype=np.float64, count=len(records))
    minb = np.fromiter((r.min_bid_to_win for r in records), dtype=np.float64, count=len(records))
    y = np.minimum(minb / bu, 1.0)
    goal_masks = {
        goal: np.fromiter(
            (r.goal_type is goal for r in records), dtype=bool, count=len(records)
        )
        for goal in GoalType
    }

    results: dict[str, ShaderResult] = {}
    for name, shader in shaders.items():
        raw = np.asarray(shader.raw_ratios(records), dtype=np.float64)
        if raw.shape != bu.shape:
            raise EvaluationError(f"shader {name!r} returned a misaligned ratio array")
        bad = ~np.isfinite(raw)
        ratio = np.clip(raw, RATIO_FLOOR, 1.0)
        if bad.any():
            ratio = np.where(bad, 1.0, ratio)
            raw = np.where(bad, 1.0, raw)
        shaded = ratio * bu

        per_goal: dict[GoalType, MetricBlock] = {}
        for goal in GoalType:
            mask = goal_masks[goal]
            if not mask.any():
                continue
            per_goal[goal] = _block(bu[mask], minb[mask], y[mask], raw[mask], shaded[mask])
        overall = _aggregate(list(per_goal.values()), y, raw)
        results[name] = ShaderResult(
            overall=overall, per_goal=per_goal, fallbacks=int(bad.sum())
        )

    base_overall = results[baseline].overall
    for name, res in results.items():
        if name == baseline:
            continue
        res.deltas = {
            m: percent_delta(res.overall.metric(m), base_overall.metric(m))
            for m in DELTA_METRICS
        }
    return ReplayReport(
        records=len(records),
        baseline=baseline,
        shaders=results,
        gamma=loss_cfg.gamma if loss_cfg else None,
    )


class IdentityShader:
    """Bids the unshaded bid (ratio 1); the no-shading reference."""

    kind = "identity"

    def raw_ratios(self, records: Sequence[AuctionRecord]) -> np.ndarray:
        return np.ones(len(records), dtype=np.float64)


class OracleShader:
    """Shades exactly to the logged minimum bid to win.

    Uses feedback unavailable at bid time; replay analysis only.  Its
    surplus is the attainable maximum for any decrease-only shader.
    """

    kind = "oracle"

    def raw_ratios(self, records: Sequence[AuctionRecord]) -> np.ndarray:
        return np.fromiter(
            (min(r.min_bid_to_win / r.unshaded_bid, 1.0) for r in records),
            dtype=np.float64,
            count=len(records),
        )


@dataclass
class SweepEntry:
    gamma: float
    report: ReplayReport | None
    error: str | None = None


def gamma_sweep(
    train_records: Sequence[AuctionRecord],
    test_records: Sequence[AuctionRecord],
    gammas: Sequence[float],
    *,
    baseline_shader,
    kind: str = "fm",
    encoder: EncoderConfig | None = None,
    train_cfg: TrainConfig | None = None,
    model_name: str = "model",
) -> list[SweepEntry]:
    """Train one model per gamma (shared seed/config) and replay each.

    Training failures are recorded per gamma without aborting the sweep.
    """
    entries: list[SweepEntry] = []
    for gamma in gammas:
        try:
            result = train(
                train_records,
                kind,  # type: ignore[arg-type]
                encoder=encoder,
                train_cfg=train_cfg,
                loss_cfg=AsymLossConfig(gamma=gamma),
            )
            report = run_replay(
                test_records,
                {"baseline": baseline_shader, model_name: result.model},
                baseline="baseline",
                loss_cfg=AsymLossConfig(gamma=gamma),
            )
            entries.append(SweepEntry(gamma=gamma, report=report))
        except TrainingDiverged as exc:
            entries.append(SweepEntry(gamma=gamma, report=None, error=str(exc)))
    return entries


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

_TABLE_METRICS = (
    ("surplus", "{:.4f}"),
    ("spend", "{:.4f}"),
    ("win_rate", "{:.4f}"),
    ("cpm_paper", "{:.4f}"),
    ("cpm_conventional", "{:.4f}"),
    ("mse", "{:.6f}"),
    ("r2", "{:.4f}"),
)


def _fmt(value, fmt: str) -> str:
    return "-" if value is None else fmt.format(value)


def report_table(report: ReplayReport) -> str:
    """Human-readable replay summary (overall plus per goal type)."""
    out = io.StringIO()
    names = list(report.shaders)
    out.write(f"replay: {report.records} records, baseline={report.baseline}\n\n")
    header = f"{'metric':<18}" + "".join(f"{n:>16}" for n in names)
    out.write(header + "\n")
    for metric, fmt in _TABLE_METRICS:
        row = f"{metric:<18}"
        for n in names:
            row += f"{_fmt(report.shaders[n].overall.metric(metric), fmt):>16}"
        out.write(row + "\n")
    for metric in DELTA_METRICS:
        row = f"{metric + ' %':<18}"
        for n in names:
            if n == report.baseline:
                row += f"{'-':>16}"
            else:
                row += f"{_fmt(report.shaders[n].deltas.get(metric), '{:+.2f}'):>16}"
        out.write(row + "\n")
    out.write(f"{'fallbacks':<18}")
    for n in names:
        out.write(f"{report.shaders[n].fallbacks:>16}")
    out.write("\n")
    for goal in GoalType:
        blocks = {
            n: report.shaders[n].per_goal.get(goal)
            for n in names
            if goal in report.shaders[n].per_goal
        }
        if not blocks:
            continue
        count = next(iter(blocks.values())).records
        out.write(f"\ngoal_type={goal.value} ({count} records)\n")
        for metric, fmt in _TABLE_METRICS:
            row = f"  {metric:<16}"
            for n in names:
                block = report.shaders[n].per_goal.get(goal)
                row += f"{_fmt(block.metric(metric) if block else None, fmt):>16}"
            out.write(row + "\n")
    return out.getvalue()


def report_csv(report: ReplayReport) -> str:
    """Machine-readable rows: shader, goal_type, metric, value."""
    lines = ["shader,goal_type,metric,value"]

    def emit(shader: str, goal: str, metric: str, value) -> None:
        lines.append(f"{shader},{goal},{metric},{'' if value is None else repr(float(value))}")

    for name, res in report.shaders.items():
        for metric, _ in _TABLE_METRICS:
            emit(name, "overall", metric, res.overall.metric(metric))
        emit(name, "overall", "records", res.overall.records)
        emit(name, "overall", "wins", res.overall.wins)
        emit(name, "overall", "fallbacks", res.fallbacks)
        if name != report.baseline:
            for metric in DELTA_METRICS:
                emit(name, "overall", f"{metric}_delta_pct", res.deltas.get(metric))
        for goal, block in res.per_goal.items():
            for metric, _ in _TABLE_METRICS:
                emit(name, goal.value, metric, block.metric(metric))
            emit(name, goal.value, "records", block.records)
            emit(name, goal.value, "wins", block.wins)
    return "\n".join(lines) + "\n"


def sweep_csv(entries: Sequence[SweepEntry], model_name: str = "model") -> str:
    """Gamma-sweep table: metric rows, one column per gamma value."""
    metrics = (
        "surplus",
        "spend",
        "win_rate",
        "cpm_paper",
        "surplus_delta_pct",
        "spend_delta_pct",
        "win_rate_delta_pct",
        "cpm_paper_delta_pct",
    )
    header = "metric," + ",".join(f"gamma={e.gamma:g}" for e in entries)
    rows = [header]
    for metric in metrics:
        cells = [metric]
        for e in entries:
            if e.report is None:
                cells.append("error")
                continue
            res = e.report.shaders[model_name]
            if metric.endswith("_delta_pct"):
                value = res.deltas.get(metric[: -len("_delta_pct")])
            else:
                value = res.overall.metric(metric)
            cells.append("" if value is None else repr(float(value)))
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"
