"""Mobility-of-care stage tagging and gender-parity statistics.

Case 1 tags a bus boarding with stage_index >= 2 at a POI stop (trip
chaining); Case 2 tags a bus stage whose inferred alighting is at a POI stop.
Parity is tracked in 64 fifteen-minute bins from 06:00 to 22:00.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .gender import MAN, WOMAN
from .ingest import POI_CLASSES, WEEKDAY, WEEKEND, Stage, Stop, day_type
from .netgeo import PoiStopSet

WINDOW_START = 6 * 3600
WINDOW_END = 22 * 3600
BIN_SECONDS = 15 * 60
N_BINS = (WINDOW_END - WINDOW_START) // BIN_SECONDS
WINDOW_HOURS = (WINDOW_END - WINDOW_START) / 3600
Z_95 = 1.96
ALL_STOPS = "AllStops"
ALL_AREA, OUTSIDE_CENTER = "AllArea", "OutsideCenter"


def time_bin(seconds: int) -> int | None:
    """Bin index for a local clock time, or None outside 06:00-22:00."""
    if seconds < WINDOW_START or seconds >= WINDOW_END:
        return None
    return (seconds - WINDOW_START) // BIN_SECONDS


def bin_label(index: int) -> tuple[str, str]:
    start = WINDOW_START + index * BIN_SECONDS
    end = start + BIN_SECONDS
    return f"{start // 3600:02d}:{start % 3600 // 60:02d}", f"{end // 3600:02d}:{end % 3600 // 60:02d}"


def stop_class_index(sets: Mapping[str, PoiStopSet]) -> dict[str, frozenset[str]]:
    """stop_id -> POI classes whose nearest-stop set contains it."""
    idx: dict[str, set[str]] = {}
    for cls, s in sets.items():
        for sid in s.stop_ids:
            idx.setdefault(sid, set()).add(cls)
    return {k: frozenset(v) for k, v in idx.items()}


class Tag(NamedTuple):
    stage: Stage
    poi_class: str


def tag_case1(stages: Iterable[Stage], stop_classes: Mapping[str, frozenset[str]]) -> list[Tag]:
    """Second-or-later bus boardings at a POI stop; one tag per (stage, class)."""
    out = []
    for s in stages:
        if s.mode != "Bus" or s.stage_index < 2:
            continue
        for cls in sorted(stop_classes.get(s.board_stop, ())):
            out.append(Tag(s, cls))
    return out


@dataclass
class Case2Result:
    tags: list[Tag]
    bus_stages: int = 0
    skipped_no_alighting: int = 0

    @property
    def coverage(self) -> float:
        """Share of bus stages with an inferred alighting stop."""
        return 1.0 - self.skipped_no_alighting / self.bus_stages if self.bus_stages else 0.0


def tag_case2(stages: Iterable[Stage], stop_classes: Mapping[str, frozenset[str]]) -> Case2Result:
    res = Case2Result([])
    for s in stages:
        if s.mode != "Bus":
            continue
        res.bus_stages += 1
        if s.alight_stop is None:
            res.skipped_no_alighting += 1
            continue
        for cls in sorted(stop_classes.get(s.alight_stop, ())):
            res.tags.append(Tag(s, cls))
    return res


@dataclass(frozen=True)
class ParityCell:
    bin: int
    n_trips: int
    n_women: int
    n_obs: int
    deviation: float | None
    ci_half_width: float | None

    @property
    def ci(self) -> tuple[float, float] | None:
        if self.deviation is None or self.ci_half_width is None:
            return None
        return self.deviation - self.ci_half_width, self.deviation + self.ci_half_width

    def covers(self, value: float) -> bool:
        ci = self.ci
        return ci is not None and ci[0] <= value <= ci[1]


class ParityAccumulator:
    """Women/men trip counts per (bin, stop, service date) observation."""

    def __init__(self):
        self.counts: dict[tuple[int, str, dt.date], list[int]] = {}

    def add(self, stop_id: str, service_date: dt.date, seconds: int, label: str) -> bool:
        b = time_bin(seconds)
        if b is None or label not in (WOMAN, MAN):
            return False
        key = (b, stop_id, service_date)
        c = self.counts.get(key)
        if c is None:
            c = self.counts[key] = [0, 0]
        c[0 if label == WOMAN else 1] += 1
        return True

    def restricted(self, stop_ids: Iterable[str]) -> "ParityAccumulator":
        keep = set(stop_ids)
        out = ParityAccumulator()
        out.counts = {k: v for k, v in self.counts.items() if k[1] in keep}
        return out

    def cells(self) -> list[ParityCell]:
        per_bin: list[list[tuple[int, int]]] = [[] for _ in range(N_BINS)]
        for (b, _stop, _date), (w, m) in self.counts.items():
            per_bin[b].append((w, m))
        return [_cell(b, obs) for b, obs in enumerate(per_bin)]

    def per_stop(self) -> dict[str, tuple[int, int]]:
        out: dict[str, list[int]] = {}
        for (_b, stop, _d), (w, m) in self.counts.items():
            acc = out.setdefault(stop, [0, 0])
            acc[0] += w
            acc[1] += m
        return {k: (v[0], v[1]) for k, v in out.items()}


def _cell(b: int, obs: Sequence[tuple[int, int]]) -> ParityCell:
    n_obs = len(obs)
    women = sum(w for w, _ in obs)
    trips = women + sum(m for _, m in obs)
    if trips == 0:
        return ParityCell(b, 0, 0, 0, None, None)
    deviation = women / trips - 0.5
    half = None
    if n_obs >= 2:
        devs = [w / (w + m) - 0.5 for w, m in obs]
        mu = math.fsum(devs) / n_obs
        sd = math.sqrt(math.fsum((d - mu) ** 2 for d in devs) / (n_obs - 1))
        half = Z_95 * sd / math.sqrt(n_obs)
    return ParityCell(b, trips, women, n_obs, deviation, half)


def parity_series(observations: Iterable[tuple[str, dt.date, int, str]]) -> list[ParityCell]:
    """Deviation from parity per bin with a 95% interval.

    ``observations`` are (stop_id, service_date, seconds, label) trips. The
    interval is deviation +- 1.96 * sd / sqrt(n) where sd and n are taken over
    the (stop, service date) observations in the bin.
    """
    acc = ParityAccumulator()
    for stop_id, date, seconds, label in observations:
        acc.add(stop_id, date, seconds, label)
    return acc.cells()


def per_stop_deviation(counts: Mapping[str, tuple[int, int]]) -> dict[str, float]:
    return {s: w / (w + m) - 0.5 for s, (w, m) in counts.items() if w + m > 0}


PERCENTILES = (25.0, 50.0, 75.0, 90.0)


def percentile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation percentile of ``values`` (q in percent)."""
    xs = sorted(values)
    if not xs:
        return math.nan
    pos = (len(xs) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


def percentile_table(per_stop: Mapping[str, Sequence[float]],
                     qs: Sequence[float] = PERCENTILES) -> dict[str, tuple[float, ...]]:
    return {cls: tuple(percentile(vals, q) for q in qs) for cls, vals in per_stop.items()}


@dataclass(frozen=True)
class FlowRow:
    poi_class: str
    n_stops: int
    women: int
    men: int
    women_per_hr: float
    men_per_hr: float

    @property
    def delta(self) -> float:
        return self.women_per_hr - self.men_per_hr


def stop_flow_stats(tagged: Iterable[tuple[str, str]], class_stops: Mapping[str, Iterable[str]],
                    hours: float = WINDOW_HOURS) -> list[FlowRow]:
    """Stage totals per POI class and hourly means per stop.

    ``tagged`` holds (poi_class, label) pairs. The hourly means divide the
    totals by (number of class stops x window hours).
    """
    counts = {cls: [0, 0] for cls in class_stops}
    for cls, label in tagged:
        if cls in counts and label in (WOMAN, MAN):
            counts[cls][0 if label == WOMAN else 1] += 1
    return _flow_rows(counts, class_stops, hours)


def _flow_rows(counts: Mapping[str, Sequence[int]], class_stops: Mapping[str, Iterable[str]],
               hours: float) -> list[FlowRow]:
    rows = []
    for cls in _ordered(class_stops):
        n = len(set(class_stops[cls]))
        w, m = counts.get(cls, (0, 0))
        denom = n * hours
        rows.append(FlowRow(cls, n, w, m, w / denom if denom else 0.0, m / denom if denom else 0.0))
    return rows


def city_center_filter(stops: Iterable[Stop], bbox: tuple[float, float, float, float]) -> tuple[set[str], set[str]]:
    """Split stops into (inside, outside) a closed (latS, lonW, latN, lonE) box."""
    lat_s, lon_w, lat_n, lon_e = bbox
    inside, outside = set(), set()
    for s in stops:
        if lat_s <= s.lat <= lat_n and lon_w <= s.lon <= lon_e:
            inside.add(s.stop_id)
        else:
            outside.add(s.stop_id)
    return inside, outside


def _ordered(classes: Iterable[str]) -> list[str]:
    order = list(POI_CLASSES) + [ALL_STOPS]
    return sorted(classes, key=lambda c: (order.index(c) if c in order else len(order), c))


# -- streaming driver ------------------------------------------------------------


@dataclass(frozen=True)
class Scope:
    case: int
    poi_class: str
    day_type: str
    area: str


@dataclass
class MocAnalysis:
    """Single-pass accumulation of every parity scope over a stage stream.

    Only bus stages of cards in ``labels`` (card_id -> Woman/Man) are used;
    stages on ``exclude_dates`` are ignored.
    """

    labels: Mapping[str, str]
    stop_classes: Mapping[str, frozenset[str]]
    exclude_dates: frozenset = frozenset()
    cases: tuple[int, ...] = (1, 2)
    accumulators: dict[tuple[int, str, str], ParityAccumulator] = field(default_factory=dict)
    bus_stages: int = 0
    with_alighting: int = 0
    tagged: dict[int, int] = field(default_factory=dict)
    weekdays: set = field(default_factory=set)

    def _acc(self, case: int, cls: str, dtype: str) -> ParityAccumulator:
        key = (case, cls, dtype)
        acc = self.accumulators.get(key)
        if acc is None:
            acc = self.accumulators[key] = ParityAccumulator()
        return acc

    def add(self, s: Stage) -> None:
        if s.mode != "Bus":
            return
        label = self.labels.get(s.card_id)
        if label is None or s.service_date in self.exclude_dates:
            return
        dtype = day_type(s.service_date)
        if dtype == WEEKDAY:
            self.weekdays.add(s.service_date)
        self.bus_stages += 1
        if 1 in self.cases:
            self._acc(1, ALL_STOPS, dtype).add(s.board_stop, s.service_date, s.board_time, label)
            if s.stage_index >= 2:
                for cls in self.stop_classes.get(s.board_stop, ()):
                    if self._acc(1, cls, dtype).add(s.board_stop, s.service_date, s.board_time, label):
                        self.tagged[1] = self.tagged.get(1, 0) + 1
        if s.alight_stop is not None:
            self.with_alighting += 1
            if 2 in self.cases and s.alight_time is not None:
                self._acc(2, ALL_STOPS, dtype).add(s.alight_stop, s.service_date, s.alight_time, label)
                for cls in self.stop_classes.get(s.alight_stop, ()):
                    if self._acc(2, cls, dtype).add(s.alight_stop, s.service_date, s.alight_time, label):
                        self.tagged[2] = self.tagged.get(2, 0) + 1

    def consume(self, stages: Iterable[Stage]) -> "MocAnalysis":
        for s in stages:
            self.add(s)
        return self

    @property
    def alighting_coverage(self) -> float:
        return self.with_alighting / self.bus_stages if self.bus_stages else 0.0

    def accumulator(self, case: int, cls: str, dtype: str, outside: Iterable[str] | None = None) -> ParityAccumulator:
        acc = self.accumulators.get((case, cls, dtype), ParityAccumulator())
        return acc if outside is None else acc.restricted(outside)

    def series(self, case: int, cls: str, dtype: str = WEEKDAY, outside: Iterable[str] | None = None) -> list[ParityCell]:
        return self.accumulator(case, cls, dtype, outside).cells()

    def all_series(self, outside: Iterable[str] | None = None) -> dict[Scope, list[ParityCell]]:
        out = {}
        areas = [(ALL_AREA, None)] + ([(OUTSIDE_CENTER, frozenset(outside))] if outside is not None else [])
        for case in self.cases:
            for cls in _ordered(list(POI_CLASSES) + [ALL_STOPS]):
                for dtype in (WEEKDAY, WEEKEND):
                    for area, keep in areas:
                        out[Scope(case, cls, dtype, area)] = self.series(case, cls, dtype, keep)
        return out

    def percentiles(self, case: int = 1, dtype: str = WEEKDAY,
                    outside: Iterable[str] | None = None) -> dict[str, tuple[float, ...]]:
        per_class = {}
        for cls in list(POI_CLASSES) + [ALL_STOPS]:
            devs = per_stop_deviation(self.accumulator(case, cls, dtype, outside).per_stop())
            per_class[cls] = list(devs.values())
        return percentile_table(per_class)

    def flow_stats(self, class_stops: Mapping[str, Iterable[str]], case: int = 1, dtype: str = WEEKDAY,
                   outside: Iterable[str] | None = None) -> list[FlowRow]:
        keep = None if outside is None else set(outside)
        counts, stops = {}, {}
        for cls, ids in class_stops.items():
            stops[cls] = set(ids) if keep is None else set(ids) & keep
            per_stop = self.accumulator(case, cls, dtype, keep).per_stop().values()
            counts[cls] = (sum(w for w, _ in per_stop), sum(m for _, m in per_stop))
        return _flow_rows(counts, stops, WINDOW_HOURS)


# -- per-card counts for resampling -------------------------------------------------


def card_bin_counts(stages: Iterable[Stage], cards: Iterable[str], dtype: str = WEEKDAY,
                    stops: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Bus boardings per card and time bin, for repeated parity evaluation over card subsets.

    One pass over ``stages``; ``stops`` limits the boardings counted.
    """
    wanted = set(cards)
    keep = None if stops is None else set(stops)
    out: dict[str, np.ndarray] = {}
    for s in stages:
        if s.mode != "Bus" or s.card_id not in wanted or (keep is not None and s.board_stop not in keep):
            continue
        b = time_bin(s.board_time)
        if b is None or day_type(s.service_date) != dtype:
            continue
        row = out.get(s.card_id)
        if row is None:
            row = out[s.card_id] = np.zeros(N_BINS, dtype=np.int64)
        row[b] += 1
    return out


def parity_metric(counts: Mapping[str, np.ndarray], labels: Mapping[str, str]) -> Callable[[frozenset], list[float]]:
    """Deviation per bin for a sampled card set (NaN where the sample has no trips)."""
    def metric(sample: frozenset) -> list[float]:
        women = np.zeros(N_BINS)
        total = np.zeros(N_BINS)
        for card in sample:
            row = counts.get(card)
            if row is None:
                continue
            total += row
            if labels.get(card) == WOMAN:
                women += row
        with np.errstate(invalid="ignore", divide="ignore"):
            return list(np.where(total > 0, women / total - 0.5, np.nan))
    return metric


# -- report files ------------------------------------------------------------------


def _pct(x: float | None) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100.0 * x:.2f}"


PARITY_COLUMNS = ("case", "poi_class", "day_type", "area", "bin", "start", "end", "n_trips", "n_women",
                  "n_obs", "deviation_pct", "ci_low_pct", "ci_high_pct")


def write_parity_series(series: Mapping[Scope, Sequence[ParityCell]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PARITY_COLUMNS)
        for scope, cells in series.items():
            for c in cells:
                lo_hi = c.ci
                start, end = bin_label(c.bin)
                w.writerow((scope.case, scope.poi_class, scope.day_type, scope.area, c.bin, start, end,
                            c.n_trips, c.n_women, c.n_obs, _pct(c.deviation),
                            _pct(lo_hi[0]) if lo_hi else "", _pct(lo_hi[1]) if lo_hi else ""))


def write_percentiles(tables: Mapping[str, Mapping[str, tuple[float, ...]]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("area", "poi_class", "p25_pct", "p50_pct", "p75_pct", "p90_pct"))
        for area, table in tables.items():
            for cls in _ordered(table):
                w.writerow((area, "All" if cls == ALL_STOPS else cls, *(_pct(v) for v in table[cls])))


def write_flow_stats(tables: Mapping[str, Sequence[FlowRow]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("area", "poi_class", "n_stops", "women_stages", "men_stages", "women_per_hr", "men_per_hr",
                    "delta"))
        for area, rows in tables.items():
            for r in rows:
                w.writerow((area, r.poi_class, r.n_stops, r.women, r.men, f"{r.women_per_hr:.2f}",
                            f"{r.men_per_hr:.2f}", f"{r.delta:.2f}"))
