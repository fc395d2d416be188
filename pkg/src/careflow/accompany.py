"""Accompaniment detection: card pairs tapping in at one device within 30 s.

One of the two cards has to hold a Student, Senior or Disabled product; that
card is the accompanied one and fixes the event class. Recurring pairs become
patterns when seen 4+ times in a calendar month or 10+ times over the period.
"""

from __future__ import annotations

import csv
import datetime as dt
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

from .gender import MAN, WOMAN, CardGender
from .ingest import WEEKDAY, WEEKEND, Stage, day_type

TARGET_PRODUCTS = ("Student", "Senior", "Disabled")
MAX_GAP_S = 30
MONTH_THRESHOLD = 4
PERIOD_THRESHOLD = 10
LOW_RATE_MAX = 13   # about one accompaniment per week over a quarter
HIGH_RATE_MIN = 39  # about three per week
DISPLAY_MIN_PCT = 3.0
DEFAULT_RATE_EDGES = (1, 10, 20, 30, 40, 50)


class Tap(NamedTuple):
    device_id: str
    time: int           # seconds on a continuous clock (date ordinal * 86400 + local seconds)
    card_id: str
    fare_product: str
    mode: str
    service_date: dt.date
    seconds: int
    journey_id: str = ""


def tap_from_stage(s: Stage) -> Tap:
    return Tap(s.device_id, s.service_date.toordinal() * 86400 + s.board_time, s.card_id, s.fare_product,
               s.mode, s.service_date, s.board_time, s.journey_id)


class AccompanimentEvent(NamedTuple):
    accompanied_card: str
    accompanying_card: str
    accomp_class: str
    device_id: str
    service_date: dt.date
    seconds: int        # local time of the earlier tap
    gap_seconds: int
    mode: str
    accompanying_product: str
    accompanied_journey: str = ""
    accompanying_journey: str = ""

    @property
    def timestamp(self) -> dt.datetime:
        return dt.datetime.combine(self.service_date, dt.time()) + dt.timedelta(seconds=self.seconds)


def _device_events(taps: Sequence[Tap], max_gap: int) -> Iterable[AccompanimentEvent]:
    for a, b in zip(taps, taps[1:]):
        gap = b.time - a.time
        if gap > max_gap or a.card_id == b.card_id:
            continue
        for acc, other in ((a, b), (b, a)):
            if acc.fare_product in TARGET_PRODUCTS:
                yield AccompanimentEvent(acc.card_id, other.card_id, acc.fare_product, a.device_id,
                                         a.service_date, a.seconds, gap, a.mode, other.fare_product,
                                         acc.journey_id, other.journey_id)


def detect_events(taps: Iterable[Tap], max_gap: int = MAX_GAP_S) -> list[AccompanimentEvent]:
    """Scan each device's taps in time order and pair consecutive taps.

    A pair qualifies when the gap is at most ``max_gap`` seconds, the cards
    differ and at least one card holds a target product. If both do, one
    event is emitted per target card. Only neighbours pair up, so taps A, B, C
    give (A, B) and (B, C) but never (A, C).
    """
    by_device: dict[str, list[Tap]] = defaultdict(list)
    for t in taps:
        by_device[t.device_id].append(t)
    out = []
    for device in sorted(by_device):
        seq = sorted(by_device[device], key=lambda t: (t.time, t.card_id))
        out.extend(_device_events(seq, max_gap))
    return out


@dataclass(frozen=True)
class AccompanimentPattern:
    accompanied_card: str
    accompanying_card: str
    accomp_class: str
    total: int
    month_counts: tuple[tuple[str, int], ...]
    qualifies: bool


def aggregate_patterns(events: Iterable[AccompanimentEvent], month_threshold: int = MONTH_THRESHOLD,
                       period_threshold: int = PERIOD_THRESHOLD) -> list[AccompanimentPattern]:
    grouped: dict[tuple[str, str, str], dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for e in events:
        grouped[(e.accompanied_card, e.accompanying_card, e.accomp_class)][f"{e.service_date:%Y-%m}"] += 1
    out = []
    for key in sorted(grouped):
        months = grouped[key]
        total = sum(months.values())
        ok = total >= period_threshold or any(v >= month_threshold for v in months.values())
        out.append(AccompanimentPattern(*key, total, tuple(sorted(months.items())), ok))
    return out


def hourly_distribution(events: Iterable[AccompanimentEvent], dtype: str = WEEKDAY,
                        baseline: Iterable[Tap] | None = None) -> dict[str, list[float]]:
    """Normalized hour-of-day histogram per class, plus ``General`` from ``baseline`` taps.

    Classes without events on ``dtype`` are omitted.
    """
    hist: dict[str, list[int]] = {}
    for e in events:
        if day_type(e.service_date) != dtype:
            continue
        hist.setdefault(e.accomp_class, [0] * 24)[(e.seconds // 3600) % 24] += 1
    if baseline is not None:
        general = [0] * 24
        for t in baseline:
            if day_type(t.service_date) == dtype:
                general[(t.seconds // 3600) % 24] += 1
        if sum(general):
            hist["General"] = general
    return {cls: [c / sum(h) for c in h] for cls, h in hist.items()}


@dataclass(frozen=True)
class RateBucket:
    low: int
    high: int | None        # exclusive; None = open ended
    cards: int
    registered_gendered: int
    women: int
    unregistered: int

    @property
    def women_ratio(self) -> float | None:
        return self.women / self.registered_gendered if self.registered_gendered else None

    @property
    def unregistered_ratio(self) -> float | None:
        return self.unregistered / self.cards if self.cards else None


def gender_vs_rate(patterns: Iterable[AccompanimentPattern], genders: Mapping[str, CardGender],
                   edges: Sequence[int] = DEFAULT_RATE_EDGES) -> list[RateBucket]:
    """Women and unregistered shares of accompanying cards by total accompaniment count.

    A card's count is summed over its qualifying patterns. The women ratio
    only counts registered cards with a Woman or Man label.
    """
    totals: dict[str, int] = defaultdict(int)
    for p in patterns:
        if p.qualifies:
            totals[p.accompanying_card] += p.total
    bounds = list(zip(edges, list(edges[1:]) + [None]))
    acc = {b: [0, 0, 0, 0] for b in bounds}
    for card, n in totals.items():
        for lo, hi in bounds:
            if n >= lo and (hi is None or n < hi):
                cell = acc[(lo, hi)]
                cell[0] += 1
                g = genders.get(card)
                if g is None or not g.registered:
                    cell[3] += 1
                elif g.label in (WOMAN, MAN):
                    cell[1] += 1
                    cell[2] += g.label == WOMAN
                break
    return [RateBucket(lo, hi, *acc[(lo, hi)]) for lo, hi in bounds]


@dataclass(frozen=True)
class FareShare:
    rate: str
    accomp_class: str
    fare_product: str
    events: int
    pct: float

    @property
    def displayed(self) -> bool:
        return self.pct >= DISPLAY_MIN_PCT


def fare_breakdown(events: Iterable[AccompanimentEvent], patterns: Iterable[AccompanimentPattern],
                   low_max: int = LOW_RATE_MAX, high_min: int = HIGH_RATE_MIN) -> list[FareShare]:
    """Accompanying-card product mix per class, for low- and high-rate patterns.

    Shares are event-weighted and sum to 100 within each (rate, class); the
    ``displayed`` flag applies the 3% display cut.
    """
    rate_of: dict[tuple[str, str, str], str] = {}
    for p in patterns:
        if not p.qualifies:
            continue
        if p.total <= low_max:
            rate_of[(p.accompanied_card, p.accompanying_card, p.accomp_class)] = "low"
        elif p.total >= high_min:
            rate_of[(p.accompanied_card, p.accompanying_card, p.accomp_class)] = "high"
    counts: dict[tuple[str, str], dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for e in events:
        rate = rate_of.get((e.accompanied_card, e.accompanying_card, e.accomp_class))
        if rate is not None:
            counts[(rate, e.accomp_class)][e.accompanying_product] += 1
    out = []
    for (rate, cls) in sorted(counts, key=lambda k: (k[0] != "low", k[1])):
        prods = counts[(rate, cls)]
        total = sum(prods.values())
        for prod in sorted(prods, key=lambda p: (-prods[p], p)):
            out.append(FareShare(rate, cls, prod, prods[prod], 100.0 * prods[prod] / total))
    return out


@dataclass
class AccompanimentSummary:
    events: int = 0
    events_by_class: dict[str, int] = field(default_factory=dict)
    journeys: int = 0
    qualifying_patterns: int = 0
    qualifying_events: int = 0


def summarize(events: Sequence[AccompanimentEvent], patterns: Sequence[AccompanimentPattern]) -> AccompanimentSummary:
    """Counts in both units, events and distinct journeys touched by qualifying patterns."""
    s = AccompanimentSummary(events=len(events))
    for e in events:
        s.events_by_class[e.accomp_class] = s.events_by_class.get(e.accomp_class, 0) + 1
    good = {(p.accompanied_card, p.accompanying_card, p.accomp_class) for p in patterns if p.qualifies}
    s.qualifying_patterns = len(good)
    journeys = set()
    for e in events:
        if (e.accompanied_card, e.accompanying_card, e.accomp_class) in good:
            s.qualifying_events += 1
            journeys.add((e.accompanied_card, e.accompanied_journey))
            journeys.add((e.accompanying_card, e.accompanying_journey))
    s.journeys = len(journeys)
    return s


# -- report files -------------------------------------------------------------


def _w(path):
    f = open(path, "w", newline="", encoding="utf-8")
    return f, csv.writer(f, lineterminator="\n")


def write_events(events: Iterable[AccompanimentEvent], path: str | os.PathLike) -> None:
    f, w = _w(path)
    with f:
        w.writerow(("accompanied_card", "accompanying_card", "class", "device_id", "service_date", "seconds",
                    "gap_seconds", "mode", "accompanying_product"))
        for e in events:
            w.writerow((e.accompanied_card, e.accompanying_card, e.accomp_class, e.device_id,
                        e.service_date.isoformat(), e.seconds, e.gap_seconds, e.mode, e.accompanying_product))


def write_patterns(patterns: Iterable[AccompanimentPattern], path: str | os.PathLike) -> None:
    f, w = _w(path)
    with f:
        w.writerow(("accompanied_card", "accompanying_card", "class", "total", "month_counts", "qualifies"))
        for p in patterns:
            months = ";".join(f"{m}:{n}" for m, n in p.month_counts)
            w.writerow((p.accompanied_card, p.accompanying_card, p.accomp_class, p.total, months, int(p.qualifies)))


def write_hourly(densities: Mapping[str, Mapping[str, Sequence[float]]], path: str | os.PathLike) -> None:
    f, w = _w(path)
    with f:
        w.writerow(("day_type", "class", "hour", "density"))
        for dtype in (WEEKDAY, WEEKEND):
            for cls in sorted(densities.get(dtype, {})):
                for hour, v in enumerate(densities[dtype][cls]):
                    w.writerow((dtype, cls, hour, f"{v:.6f}"))


def write_gender_vs_rate(buckets: Iterable[RateBucket], path: str | os.PathLike) -> None:
    def pct(x):
        return "" if x is None else f"{100.0 * x:.2f}"

    f, w = _w(path)
    with f:
        w.writerow(("count_low", "count_high", "cards", "registered_gendered", "women_pct", "unregistered_pct"))
        for b in buckets:
            w.writerow((b.low, "" if b.high is None else b.high, b.cards, b.registered_gendered,
                        pct(b.women_ratio), pct(b.unregistered_ratio)))


def write_fare_breakdown(rows: Iterable[FareShare], path: str | os.PathLike) -> None:
    f, w = _w(path)
    with f:
        w.writerow(("rate", "class", "fare_product", "events", "pct", "displayed"))
        for r in rows:
            w.writerow((r.rate, r.accomp_class, r.fare_product, r.events, f"{r.pct:.2f}", int(r.displayed)))


__all__ = [
    "Tap", "tap_from_stage", "AccompanimentEvent", "AccompanimentPattern", "detect_events",
    "aggregate_patterns", "hourly_distribution", "gender_vs_rate", "fare_breakdown", "summarize",
]
