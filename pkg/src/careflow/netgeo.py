"""Route-direction stop patterns and nearest serving stops for POIs."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import MalformedRow
from .ingest import POI_CLASSES, GtfsSnapshot, Poi, Stop, _open_csv, _require_columns

EARTH_RADIUS_M = 6_371_008.8
# meters per degree of arc on the mean sphere; used for both axes
M_PER_DEG = math.pi * EARTH_RADIUS_M / 180.0
M_PER_DEG_LAT = M_PER_DEG
M_PER_DEG_LON = M_PER_DEG
DEFAULT_RADIUS_M = 400.0


@dataclass(frozen=True)
class RouteDirectionPattern:
    route_id: str
    direction_id: int
    stop_ids: tuple[str, ...]


class PoiStopEntry(NamedTuple):
    poi_id: str
    route_id: str
    direction_id: int
    stop_id: str
    distance_m: float


@dataclass(frozen=True)
class PoiStopSet:
    poi_class: str
    entries: frozenset[PoiStopEntry]

    @property
    def stop_ids(self) -> frozenset[str]:
        return frozenset(e.stop_id for e in self.entries)

    def within(self, radius_m: float) -> "PoiStopSet":
        return PoiStopSet(self.poi_class, frozenset(e for e in self.entries if e.distance_m <= radius_m))


def build_patterns(snapshot: GtfsSnapshot) -> list[RouteDirectionPattern]:
    """One pattern per (route, direction) found in trips.

    The stop list is the union of the pair's trip stop sequences, ordered by
    first appearance when trips are visited in trip_id order.
    """
    sequences = snapshot.trip_stop_ids()
    grouped: dict[tuple[str, int], list[str]] = {}
    for trip_id in sorted(snapshot.trips):
        trip = snapshot.trips[trip_id]
        grouped.setdefault((trip.route_id, trip.direction_id), []).append(trip_id)
    patterns = []
    for (route_id, direction), trip_ids in sorted(grouped.items()):
        seen: dict[str, None] = {}
        for trip_id in trip_ids:
            for stop_id in sequences.get(trip_id, ()):
                seen.setdefault(stop_id, None)
        if seen:
            patterns.append(RouteDirectionPattern(route_id, direction, tuple(seen)))
    return patterns


def distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Equirectangular distance in meters between two (lat, lon) points."""
    mean_lat = math.radians((a[0] + b[0]) / 2.0)
    dx = (b[1] - a[1]) * math.cos(mean_lat) * M_PER_DEG_LON
    dy = (b[0] - a[0]) * M_PER_DEG_LAT
    return math.sqrt(dx * dx + dy * dy)


def _distance_vec(lat: float, lon: float, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    mean_lat = np.radians((lat + lats) / 2.0)
    dx = (lons - lon) * np.cos(mean_lat) * M_PER_DEG_LON
    dy = (lats - lat) * M_PER_DEG_LAT
    return np.sqrt(dx * dx + dy * dy)


def nearest_stops(pois: Iterable[Poi], patterns: Sequence[RouteDirectionPattern],
                  stops: Mapping[str, Stop], radius_m: float = DEFAULT_RADIUS_M) -> dict[str, PoiStopSet]:
    """Nearest stop on every pattern for every POI, kept when within ``radius_m``.

    Ties on distance go to the smaller stop_id. Returns one set per POI class
    (classes without entries map to an empty set).
    """
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    flat_ids: list[str] = []
    owner: list[int] = []
    for k, pat in enumerate(patterns):
        for sid in pat.stop_ids:
            flat_ids.append(sid)
            owner.append(k)
    lats = np.array([stops[s].lat for s in flat_ids], dtype=float)
    lons = np.array([stops[s].lon for s in flat_ids], dtype=float)
    owner_arr = np.array(owner, dtype=np.int64)
    # vectorized prefilter only; kept distances are recomputed with distance()
    slack = 1e-6 * radius_m + 1e-6

    entries: dict[str, set[PoiStopEntry]] = {c: set() for c in POI_CLASSES}
    for poi in pois:
        if not flat_ids:
            break
        approx = _distance_vec(poi.lat, poi.lon, lats, lons)
        best: dict[int, tuple[float, str]] = {}
        for i in np.nonzero(approx <= radius_m + slack)[0]:
            sid = flat_ids[i]
            s = stops[sid]
            d = distance((poi.lat, poi.lon), (s.lat, s.lon))
            if d > radius_m:
                continue
            k = int(owner_arr[i])
            cur = best.get(k)
            if cur is None or (d, sid) < cur:
                best[k] = (d, sid)
        bucket = entries.setdefault(poi.poi_class, set())
        for k, (d, sid) in best.items():
            pat = patterns[k]
            bucket.add(PoiStopEntry(poi.poi_id, pat.route_id, pat.direction_id, sid, d))
    return {c: PoiStopSet(c, frozenset(v)) for c, v in entries.items()}


SENSITIVITY_THRESHOLDS = (200.0, 100.0, 50.0)


@dataclass(frozen=True)
class SensitivityRow:
    poi_class: str
    n_stops: int
    pct_within: dict[float, float]


def buffer_sensitivity(sets: Mapping[str, PoiStopSet],
                       thresholds: Sequence[float] = SENSITIVITY_THRESHOLDS) -> list[SensitivityRow]:
    """Share of the 400 m pattern-stops that also lie within each smaller radius.

    ``n_stops`` counts (poi, route-direction) entries, not unique stops.
    Percentages are in percent; an empty class reports 0.
    """
    rows = []
    for cls in sorted(sets, key=_class_order):
        dists = [e.distance_m for e in sets[cls].entries]
        n = len(dists)
        pct = {t: (100.0 * sum(1 for d in dists if d <= t) / n if n else 0.0) for t in thresholds}
        rows.append(SensitivityRow(cls, n, pct))
    return rows


def mean_nearest_distance(sets: Mapping[str, PoiStopSet]) -> dict[str, float]:
    """Mean entry distance per class plus ``"All"`` pooled over classes. Empty classes give NaN."""
    out = {}
    pooled: list[float] = []
    for cls in sorted(sets, key=_class_order):
        d = [e.distance_m for e in sets[cls].entries]
        pooled.extend(d)
        out[cls] = math.fsum(d) / len(d) if d else math.nan
    out["All"] = math.fsum(pooled) / len(pooled) if pooled else math.nan
    return out


def _class_order(cls: str) -> tuple[int, str]:
    return (POI_CLASSES.index(cls) if cls in POI_CLASSES else len(POI_CLASSES), cls)


POI_STOP_COLUMNS = ("class", "poi_id", "route_id", "direction_id", "stop_id", "distance_m")


def write_poi_stops(sets: Mapping[str, PoiStopSet], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(POI_STOP_COLUMNS)
        for cls in sorted(sets, key=_class_order):
            for e in sorted(sets[cls].entries):
                w.writerow((cls, e.poi_id, e.route_id, e.direction_id, e.stop_id, repr(e.distance_m)))


def load_poi_stops(path: str | os.PathLike) -> dict[str, PoiStopSet]:
    p = os.fspath(path)
    entries: dict[str, set[PoiStopEntry]] = {c: set() for c in POI_CLASSES}
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), POI_STOP_COLUMNS, p)
        for row in reader:
            if not row:
                continue
            try:
                cls = row[idx["class"]]
                e = PoiStopEntry(row[idx["poi_id"]], row[idx["route_id"]], int(row[idx["direction_id"]]),
                                 row[idx["stop_id"]], float(row[idx["distance_m"]]))
            except (ValueError, IndexError):
                raise MalformedRow("bad poi_stops row", p, reader.line_num) from None
            if cls not in POI_CLASSES:
                raise MalformedRow(f"unknown class {cls!r}", p, reader.line_num)
            entries[cls].add(e)
    return {c: PoiStopSet(c, frozenset(v)) for c, v in entries.items()}
