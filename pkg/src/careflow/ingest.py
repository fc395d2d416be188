"""Parsers and writers for the pipeline's external files.

GTFS static subset (stops, routes, trips, stop_times), the POI registry,
stage transaction files and card registrations. Everything is read with the
stdlib ``csv`` module; stage files are streamed row by row.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator, NamedTuple

from .errors import DanglingReference, MalformedRow, MissingFile, UnknownClass

logger = logging.getLogger(__name__)

POI_CLASSES = ("Daycare", "School", "Grocery")
MODES = ("Bus", "Rail")
FARE_PRODUCTS = ("Full", "Student", "Senior", "Disabled", "WeeklyPass", "Other")
WEEKDAY, WEEKEND = "Weekday", "Weekend"

STAGE_COLUMNS = (
    "card_id",
    "journey_id",
    "stage_index",
    "service_date",
    "board_stop",
    "board_time",
    "alight_stop",
    "alight_time",
    "mode",
    "route_id",
    "direction_id",
    "device_id",
    "fare_product",
    "fare_paid",
    "distance_m",
)
POI_COLUMNS = ("poi_id", "class", "lat", "lon")
REGISTRATION_COLUMNS = ("card_id", "first_name", "registered")


@dataclass(frozen=True)
class Stop:
    stop_id: str
    lat: float
    lon: float
    name: str = ""


@dataclass(frozen=True)
class Poi:
    poi_id: str
    poi_class: str
    lat: float
    lon: float


class Stage(NamedTuple):
    """One fare-card leg. Times are seconds since service-day midnight."""

    card_id: str
    journey_id: str
    stage_index: int
    service_date: dt.date
    board_stop: str
    board_time: int
    alight_stop: str | None
    alight_time: int | None
    mode: str
    route_id: str | None
    direction_id: int | None
    device_id: str
    fare_product: str
    fare_paid: int
    distance_m: float | None


def day_type(service_date: dt.date) -> str:
    return WEEKEND if service_date.weekday() >= 5 else WEEKDAY


@dataclass(frozen=True)
class Journey:
    journey_id: str
    card_id: str
    stages: tuple[Stage, ...]

    @property
    def service_date(self) -> dt.date:
        return self.stages[0].service_date

    @property
    def day_type(self) -> str:
        return day_type(self.service_date)


@dataclass(frozen=True)
class CardRegistration:
    card_id: str
    first_name_raw: str | None
    registered: bool


@dataclass(frozen=True)
class Trip:
    trip_id: str
    route_id: str
    direction_id: int


@dataclass(frozen=True)
class StopTime:
    trip_id: str
    stop_sequence: int
    stop_id: str


@dataclass(frozen=True)
class GtfsSnapshot:
    stops: dict[str, Stop]
    routes: tuple[str, ...]
    trips: dict[str, Trip]
    stop_times: tuple[StopTime, ...] = field(default=())

    def trip_stop_ids(self) -> dict[str, list[str]]:
        """Stop sequence of every trip, in stop_sequence order."""
        out: dict[str, list[str]] = {}
        for st in self.stop_times:
            out.setdefault(st.trip_id, []).append(st.stop_id)
        return out


# -- helpers ---------------------------------------------------------------


def _open_csv(path: str | os.PathLike):
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingFile("file not found", path)
    # newline="" lets csv handle both LF and CRLF
    return open(path, newline="", encoding="utf-8-sig")


def _require_columns(header: list[str] | None, required: Iterable[str], path: str) -> dict[str, int]:
    if header is None:
        raise MalformedRow("empty file, header expected", path, 1)
    index = {name.strip(): i for i, name in enumerate(header)}
    missing = [c for c in required if c not in index]
    if missing:
        raise MalformedRow(f"missing column(s) {', '.join(missing)}", path, 1)
    return index


def _float(value: str, what: str, path: str, line: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise MalformedRow(f"bad {what} {value!r}", path, line) from None


def _int(value: str, what: str, path: str, line: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise MalformedRow(f"bad {what} {value!r}", path, line) from None


def _check_latlon(lat: float, lon: float, path: str, line: int) -> None:
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise MalformedRow(f"coordinate out of range ({lat}, {lon})", path, line)


def _fmt_float(x: float) -> str:
    return repr(float(x))


# -- GTFS --------------------------------------------------------------------


def load_gtfs(dir_path: str | os.PathLike) -> GtfsSnapshot:
    """Load the stops/routes/trips/stop_times subset of a GTFS static feed.

    Raises MissingFile, MalformedRow or DanglingReference, each carrying the
    file and line where the problem was found.
    """
    dir_path = os.fspath(dir_path)
    if not os.path.isdir(dir_path):
        raise MissingFile("GTFS directory not found", dir_path)

    def path(name: str) -> str:
        return os.path.join(dir_path, name)

    stops: dict[str, Stop] = {}
    p = path("stops.txt")
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), ("stop_id", "stop_name", "stop_lat", "stop_lon"), p)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            try:
                stop_id = row[idx["stop_id"]]
                lat = _float(row[idx["stop_lat"]], "stop_lat", p, line)
                lon = _float(row[idx["stop_lon"]], "stop_lon", p, line)
                name = row[idx["stop_name"]]
            except IndexError:
                raise MalformedRow("too few fields", p, line) from None
            if not stop_id:
                raise MalformedRow("empty stop_id", p, line)
            _check_latlon(lat, lon, p, line)
            if stop_id in stops:
                raise MalformedRow(f"duplicate stop_id {stop_id!r}", p, line)
            stops[stop_id] = Stop(stop_id, lat, lon, name)

    routes: list[str] = []
    p = path("routes.txt")
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), ("route_id",), p)
        seen: set[str] = set()
        for row in reader:
            if not row:
                continue
            try:
                route_id = row[idx["route_id"]]
            except IndexError:
                raise MalformedRow("too few fields", p, reader.line_num) from None
            if not route_id or route_id in seen:
                raise MalformedRow(f"empty or duplicate route_id {route_id!r}", p, reader.line_num)
            seen.add(route_id)
            routes.append(route_id)

    trips: dict[str, Trip] = {}
    p = path("trips.txt")
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), ("route_id", "trip_id", "direction_id"), p)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            try:
                route_id = row[idx["route_id"]]
                trip_id = row[idx["trip_id"]]
                direction = row[idx["direction_id"]]
            except IndexError:
                raise MalformedRow("too few fields", p, line) from None
            if direction not in ("0", "1"):
                raise MalformedRow(f"direction_id must be 0 or 1, got {direction!r}", p, line)
            if route_id not in seen:
                raise DanglingReference("route", route_id, p, line)
            if not trip_id or trip_id in trips:
                raise MalformedRow(f"empty or duplicate trip_id {trip_id!r}", p, line)
            trips[trip_id] = Trip(trip_id, route_id, int(direction))

    stop_times: list[StopTime] = []
    p = path("stop_times.txt")
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), ("trip_id", "stop_sequence", "stop_id"), p)
        keys: set[tuple[str, int]] = set()
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            try:
                trip_id = row[idx["trip_id"]]
                seq = _int(row[idx["stop_sequence"]], "stop_sequence", p, line)
                stop_id = row[idx["stop_id"]]
            except IndexError:
                raise MalformedRow("too few fields", p, line) from None
            if trip_id not in trips:
                raise DanglingReference("trip", trip_id, p, line)
            if stop_id not in stops:
                raise DanglingReference("stop", stop_id, p, line)
            if (trip_id, seq) in keys:
                raise MalformedRow(f"duplicate stop_sequence {seq} for trip {trip_id!r}", p, line)
            keys.add((trip_id, seq))
            stop_times.append(StopTime(trip_id, seq, stop_id))

    stop_times.sort(key=lambda st: (st.trip_id, st.stop_sequence))
    return GtfsSnapshot(stops=stops, routes=tuple(routes), trips=trips, stop_times=tuple(stop_times))


def write_gtfs(snapshot: GtfsSnapshot, dir_path: str | os.PathLike) -> None:
    dir_path = os.fspath(dir_path)
    os.makedirs(dir_path, exist_ok=True)
    with open(os.path.join(dir_path, "stops.txt"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("stop_id", "stop_name", "stop_lat", "stop_lon"))
        for s in snapshot.stops.values():
            w.writerow((s.stop_id, s.name, _fmt_float(s.lat), _fmt_float(s.lon)))
    with open(os.path.join(dir_path, "routes.txt"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("route_id",))
        for r in snapshot.routes:
            w.writerow((r,))
    with open(os.path.join(dir_path, "trips.txt"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("route_id", "trip_id", "direction_id"))
        for t in snapshot.trips.values():
            w.writerow((t.route_id, t.trip_id, t.direction_id))
    with open(os.path.join(dir_path, "stop_times.txt"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("trip_id", "stop_sequence", "stop_id"))
        for st in snapshot.stop_times:
            w.writerow((st.trip_id, st.stop_sequence, st.stop_id))


# -- POIs ----------------------------------------------------------------------


def load_pois(csv_path: str | os.PathLike) -> list[Poi]:
    p = os.fspath(csv_path)
    out: list[Poi] = []
    ids: set[str] = set()
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), POI_COLUMNS, p)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            try:
                poi_id = row[idx["poi_id"]]
                cls = row[idx["class"]]
                lat = _float(row[idx["lat"]], "lat", p, line)
                lon = _float(row[idx["lon"]], "lon", p, line)
            except IndexError:
                raise MalformedRow("too few fields", p, line) from None
            if cls not in POI_CLASSES:
                raise UnknownClass(cls, p, line)
            if not poi_id or poi_id in ids:
                raise MalformedRow(f"empty or duplicate poi_id {poi_id!r}", p, line)
            _check_latlon(lat, lon, p, line)
            ids.add(poi_id)
            out.append(Poi(poi_id, cls, lat, lon))
    return out


def write_pois(pois: Iterable[Poi], csv_path: str | os.PathLike) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(POI_COLUMNS)
        for poi in pois:
            w.writerow((poi.poi_id, poi.poi_class, _fmt_float(poi.lat), _fmt_float(poi.lon)))


# -- stages --------------------------------------------------------------------


@lru_cache(maxsize=4096)
def _parse_date(value: str) -> dt.date:
    return dt.date.fromisoformat(value)


_MODES = frozenset(MODES)
_PRODUCTS = frozenset(FARE_PRODUCTS)


def _parse_stage(row: list[str], path: str, line: int) -> Stage:
    if len(row) != len(STAGE_COLUMNS):
        raise MalformedRow(f"expected {len(STAGE_COLUMNS)} fields, got {len(row)}", path, line)
    (card, journey, idx, date_s, board_stop, board_t, alight_stop, alight_t,
     mode, route, direction, device, product, fare, dist) = row
    try:
        stage_index = int(idx)
        service_date = _parse_date(date_s)
        board_time = int(board_t)
        alight_time = int(alight_t) if alight_t else None
        fare_paid = int(fare)
        distance = float(dist) if dist else None
    except ValueError as exc:
        raise MalformedRow(f"bad field value ({exc})", path, line) from None
    if not card or not journey or not board_stop or not device:
        raise MalformedRow("required field is empty", path, line)
    if stage_index < 1:
        raise MalformedRow(f"stage_index must be >= 1, got {stage_index}", path, line)
    if mode not in _MODES:
        raise MalformedRow(f"unknown mode {mode!r}", path, line)
    if product not in _PRODUCTS:
        raise MalformedRow(f"unknown fare_product {product!r}", path, line)
    if direction not in ("", "0", "1"):
        raise MalformedRow(f"direction_id must be 0, 1 or empty, got {direction!r}", path, line)
    if alight_time is not None and alight_time <= board_time:
        raise MalformedRow("alight_time must be after board_time", path, line)
    return Stage(
        card,
        journey,
        stage_index,
        service_date,
        board_stop,
        board_time,
        alight_stop or None,
        alight_time,
        mode,
        route or None,
        int(direction) if direction else None,
        device,
        product,
        fare_paid,
        distance,
    )


class StageReader:
    """Iterate stages from a CSV file in file order without loading it.

    With ``on_error="skip"`` malformed rows are logged and counted in
    ``skipped`` instead of raising.
    """

    def __init__(self, path: str | os.PathLike, on_error: str = "raise"):
        if on_error not in ("raise", "skip"):
            raise ValueError("on_error must be 'raise' or 'skip'")
        self.path = os.fspath(path)
        self.on_error = on_error
        self.skipped = 0
        self.rows = 0

    def __iter__(self) -> Iterator[Stage]:
        self.skipped = 0
        self.rows = 0
        p = self.path
        with _open_csv(p) as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != STAGE_COLUMNS:
                raise MalformedRow("stage header does not match the documented column order", p, 1)
            parse = _parse_stage
            for row in reader:
                if not row:
                    continue
                try:
                    stage = parse(row, p, reader.line_num)
                except MalformedRow as exc:
                    if self.on_error == "raise":
                        raise
                    self.skipped += 1
                    logger.warning("skipping %s", exc)
                    continue
                self.rows += 1
                yield stage


def load_stages(path: str | os.PathLike, on_error: str = "raise") -> StageReader:
    return StageReader(path, on_error)


def format_stage(s: Stage) -> tuple:
    return (
        s.card_id,
        s.journey_id,
        s.stage_index,
        s.service_date.isoformat(),
        s.board_stop,
        s.board_time,
        s.alight_stop or "",
        "" if s.alight_time is None else s.alight_time,
        s.mode,
        s.route_id or "",
        "" if s.direction_id is None else s.direction_id,
        s.device_id,
        s.fare_product,
        s.fare_paid,
        "" if s.distance_m is None else _fmt_float(s.distance_m),
    )


class StageWriter:
    def __init__(self, path: str | os.PathLike):
        self._f = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(STAGE_COLUMNS)

    def write(self, stage: Stage) -> None:
        self._w.writerow(format_stage(stage))

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "StageWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_stages(stages: Iterable[Stage], path: str | os.PathLike) -> None:
    with StageWriter(path) as w:
        for s in stages:
            w.write(s)


def group_journeys(stages: Iterable[Stage]) -> list[Journey]:
    """Assemble journeys from stages, checking the stage_index invariants."""
    by_key: dict[tuple[str, str], list[Stage]] = {}
    for s in stages:
        by_key.setdefault((s.card_id, s.journey_id), []).append(s)
    owner: dict[str, str] = {}
    out = []
    for (card, jid), legs in by_key.items():
        if owner.setdefault(jid, card) != card:
            raise MalformedRow(f"journey {jid!r} has stages from more than one card")
        legs.sort(key=lambda s: s.stage_index)
        if [s.stage_index for s in legs] != list(range(1, len(legs) + 1)):
            raise MalformedRow(f"journey {jid!r} stage_index is not 1..n without gaps")
        out.append(Journey(jid, card, tuple(legs)))
    return out


# -- registrations ---------------------------------------------------------------


def load_registrations(path: str | os.PathLike) -> list[CardRegistration]:
    p = os.fspath(path)
    out = []
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), REGISTRATION_COLUMNS, p)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            try:
                card = row[idx["card_id"]]
                name = row[idx["first_name"]]
                reg = row[idx["registered"]]
            except IndexError:
                raise MalformedRow("too few fields", p, line) from None
            if reg not in ("0", "1"):
                raise MalformedRow(f"registered must be 0 or 1, got {reg!r}", p, line)
            registered = reg == "1"
            if name and not registered:
                raise MalformedRow("first_name given for an unregistered card", p, line)
            if not card:
                raise MalformedRow("empty card_id", p, line)
            out.append(CardRegistration(card, name or None, registered))
    return out


def write_registrations(regs: Iterable[CardRegistration], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REGISTRATION_COLUMNS)
        for r in regs:
            w.writerow((r.card_id, r.first_name_raw or "", int(r.registered)))
