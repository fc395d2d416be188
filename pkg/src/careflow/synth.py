"""Seeded synthetic city with a ground-truth manifest.

Everything the analyses should find is planted here and written to
``manifest.json``: card genders, POI stop membership, the women share of
chained boardings at POI stops by time window, accompaniment pairs with their
exact event counts, and mixed-model parameters.

Gender effects are planted as per-card rates. A woman card accepts a
candidate chain trip with probability ``share / s_max`` and a man card with
``(1 - share) / s_max``, so any gender-balanced subset of cards sees the
planted share in expectation no matter which men are drawn.

Each output draws from its own random stream, derived from the seed and a
fixed stream name, so adding a stream leaves the others unchanged.
"""

from __future__ import annotations

import bisect
import dataclasses
import datetime as dt
import json
import math
import os
import zlib
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from . import netgeo
from .errors import InvalidConfig
from .gender import MAN, REMOTE, UNKNOWN, WOMAN, GenderCache, GenderRecord, save_cache
from .ingest import (POI_CLASSES, CardRegistration, GtfsSnapshot, Poi, Stage, Stop, StopTime, Trip,
                     StageWriter, write_gtfs, write_pois, write_registrations)
from .mocgeo import city_center_filter
from .stats import simulate_random_intercept

HOUR = 3600
SPEED_MPS = 5.0           # about 11 mph, well inside the 25 mph screen
DWELL_S = 20
FARES = {"Full": 200, "Student": 100, "Senior": 100, "Disabled": 100, "WeeklyPass": 0, "Other": 200}
PRODUCT_WEIGHTS = (("Full", 0.55), ("WeeklyPass", 0.15), ("Student", 0.10), ("Senior", 0.08),
                   ("Disabled", 0.04), ("Other", 0.08))
TARGET = ("Student", "Senior", "Disabled")
SURVEY_GROUPS = ("18-34", "35-54", "55+")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_stops: int = 200
    n_routes: int = 12
    pois_per_class: int = 20
    n_cards: int = 5000
    days: int = 90
    start_date: dt.date = dt.date(2019, 1, 1)
    # planted mobility-of-care effect
    poi_women_share: float = 0.60
    baseline_women_share: float = 0.50
    planted_class: str = "Daycare"
    planted_start: int = 7 * HOUR
    planted_end: int = 9 * HOUR + 30 * 60
    weekend_effect: float = 0.0          # fraction of the planted deviation kept on weekends
    chain_rate: float = 0.5              # candidate chained trips per travel day
    # population
    women_card_share: float = 0.45
    registered_share: float = 0.80
    ambiguous_name_share: float = 0.04
    fallback_name_share: float = 0.05
    occasional_share: float = 0.10
    rail_only_share: float = 0.08
    alighting_coverage: float = 0.65
    two_stage_share: float = 0.25
    # accompaniment
    accompaniment_pairs: int = 45
    accompaniment_women_low: float = 0.40   # women share of accompanying cards at 1/week
    accompaniment_women_high: float = 0.80  # ... and at 5/week
    senior_pair_share: float = 0.55
    disabled_pair_share: float = 0.35
    # gender validation survey
    survey_size: int = 2000
    survey_noise: float = 0.10
    # mixed model
    mm_beta0: float = 27.94
    mm_beta1: float = 10.11
    mm_sigma_u2: float = 514.5
    mm_sigma_e2: float = 185.3
    mm_groups: int = 500
    mm_per_group: int = 20
    center_share: float = 0.40

    _SHARES = ("poi_women_share", "baseline_women_share", "weekend_effect", "women_card_share", "registered_share",
               "ambiguous_name_share", "fallback_name_share", "occasional_share", "rail_only_share",
               "alighting_coverage", "two_stage_share", "accompaniment_women_low", "accompaniment_women_high",
               "senior_pair_share", "disabled_pair_share", "survey_noise", "center_share")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in self._SHARES:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1], got {v}")
        if self.days < 14:
            raise InvalidConfig("days must be >= 14 so the 10-active-day filter can be exercised")
        for name in ("n_stops", "n_routes", "n_cards", "mm_groups", "mm_per_group"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.n_routes < 2 or self.n_stops < 4 * self.n_routes:
            raise InvalidConfig("need at least 2 routes and 4 stops per route")
        if self.planted_class not in POI_CLASSES:
            raise InvalidConfig(f"planted_class must be one of {POI_CLASSES}")
        if not 0 <= self.planted_start < self.planted_end <= 24 * HOUR:
            raise InvalidConfig("planted window is empty")
        if self.n_cards < 2 * self.accompaniment_pairs + 10:
            raise InvalidConfig("n_cards too small for the accompaniment pairs")
        if self.chain_rate < 0 or self.pois_per_class < 0 or self.survey_size < 0 or self.accompaniment_pairs < 0:
            raise InvalidConfig("rates and counts must be non-negative")
        if self.ambiguous_name_share + self.fallback_name_share > 1:
            raise InvalidConfig("ambiguous_name_share + fallback_name_share must not exceed 1")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "SynthConfig":
        """Build from string values (config file / CLI); unknown keys raise InvalidConfig."""
        kwargs: dict[str, Any] = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise InvalidConfig(f"unknown synth key {key!r}")
            default = getattr(cls, key)
            try:
                if isinstance(default, bool):
                    kwargs[key] = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kwargs[key] = _clock(raw) if key.startswith("planted_") and key != "planted_class" else int(raw)
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                elif isinstance(default, dt.date):
                    kwargs[key] = raw if isinstance(raw, dt.date) else dt.date.fromisoformat(str(raw))
                else:
                    kwargs[key] = str(raw)
            except ValueError:
                raise InvalidConfig(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)

    def as_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["start_date"] = self.start_date.isoformat()
        return out


def _clock(raw: Any) -> int:
    """Accept seconds or HH:MM."""
    s = str(raw)
    if ":" in s:
        h, m = s.split(":")
        return int(h) * HOUR + int(m) * 60
    return int(s)


def null_config(config: SynthConfig) -> SynthConfig:
    b = config.baseline_women_share
    return dataclasses.replace(config, poi_women_share=b, accompaniment_women_low=b, accompaniment_women_high=b)


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


class _Draws:
    """Scalar draws served from bulk blocks of one Generator.

    Per-call numpy overhead dominates when millions of single values are
    needed; blocks keep the stream deterministic at a fraction of the cost.
    """

    BLOCK = 1 << 16

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._u: list[float] = []
        self._z: list[float] = []

    def random(self) -> float:
        if not self._u:
            self._u = self.rng.random(self.BLOCK).tolist()
        return self._u.pop()

    def _normal(self) -> float:
        if not self._z:
            self._z = self.rng.standard_normal(self.BLOCK).tolist()
        return self._z.pop()

    def integers(self, lo: int, hi: int | None = None) -> int:
        if hi is None:
            lo, hi = 0, lo
        return lo + min(int(self.random() * (hi - lo)), hi - lo - 1)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def normal(self, mu: float, sd: float) -> float:
        return mu + sd * self._normal()

    def binomial(self, n: int, p: float) -> int:
        return sum(self.random() < p for _ in range(n))

    def poisson(self, lam: float) -> int:
        # inversion; fine for the small rates used here
        k, p = 0, math.exp(-lam)
        cdf, u = p, self.random()
        while u > cdf and k < 1000:
            k += 1
            p *= lam / k
            cdf += p
        return k

    def pick(self, weights: tuple[float, ...]) -> int:
        u, acc = self.random() * sum(weights), 0.0
        for i, w in enumerate(weights):
            acc += w
            if u < acc:
                return i
        return len(weights) - 1


# -- network ---------------------------------------------------------------------

LAT0, LON0 = 38.9, -77.03


def _to_latlon(x_m: float, y_m: float) -> tuple[float, float]:
    lat = LAT0 + y_m / netgeo.M_PER_DEG
    lon = LON0 + x_m / (netgeo.M_PER_DEG * math.cos(math.radians(LAT0)))
    return round(lat, 7), round(lon, 7)


@dataclass
class _Network:
    stops: dict[str, Stop]
    routes: list[str]
    route_stops: dict[str, list[str]]          # direction-0 order
    snapshot: GtfsSnapshot
    seg_m: dict[tuple[str, str], float] = field(default_factory=dict)
    stop_routes: dict[str, list[str]] = field(default_factory=dict)
    # per (route, direction): directed stop sequence, cumulative metres, stop position
    seq: dict[tuple[str, int], list[str]] = field(default_factory=dict)
    cum: dict[tuple[str, int], list[float]] = field(default_factory=dict)
    pos: dict[tuple[str, int], dict[str, int]] = field(default_factory=dict)

    def index(self) -> None:
        for route, stops in self.route_stops.items():
            for direction, seq in ((0, stops), (1, stops[::-1])):
                cum = [0.0]
                for a, b in zip(seq, seq[1:]):
                    cum.append(cum[-1] + self.seg_m[(a, b)])
                self.seq[(route, direction)] = seq
                self.cum[(route, direction)] = cum
                self.pos[(route, direction)] = {sid: k for k, sid in enumerate(seq)}

    def ride(self, route: str, direction: int, i: int, hops: int) -> tuple[str, str, float]:
        """Board at position ``i`` of the directed sequence and ride ``hops`` stops."""
        key = (route, direction)
        seq, cum = self.seq[key], self.cum[key]
        return seq[i], seq[i + hops], cum[i + hops] - cum[i]


def _build_network(cfg: SynthConfig, rng: np.random.Generator) -> _Network:
    n_h = cfg.n_routes // 2
    n_v = cfg.n_routes - n_h
    per = [cfg.n_stops // cfg.n_routes + (1 if r < cfg.n_stops % cfg.n_routes else 0) for r in range(cfg.n_routes)]
    extent = 8000.0
    stops: dict[str, Stop] = {}
    route_stops: dict[str, list[str]] = {}
    routes = [f"R{r + 1:02d}" for r in range(cfg.n_routes)]
    sid = 0
    for r, route in enumerate(routes):
        horizontal = r < n_h
        lane = (r if horizontal else r - n_h) + 0.5
        offset = lane * extent / (n_h if horizontal else n_v) - extent / 2
        seq = []
        for k in range(per[r]):
            along = -extent / 2 + k * extent / (per[r] - 1)
            jitter = rng.uniform(-40.0, 40.0, 2)
            x, y = (along + jitter[0], offset + jitter[1]) if horizontal else (offset + jitter[0], along + jitter[1])
            sid += 1
            stop_id = f"S{sid:03d}"
            lat, lon = _to_latlon(x, y)
            stops[stop_id] = Stop(stop_id, lat, lon, f"{route} stop {k + 1}")
            seq.append(stop_id)
        route_stops[route] = seq

    trips: dict[str, Trip] = {}
    stop_times: list[StopTime] = []
    for route in routes:
        for direction in (0, 1):
            seq = route_stops[route] if direction == 0 else route_stops[route][::-1]
            # a full trip, a short turn that skips both ends, and another full trip
            for k, pattern in enumerate((seq, seq[2:-2], seq)):
                trip_id = f"{route}_{direction}_{k}"
                trips[trip_id] = Trip(trip_id, route, direction)
                stop_times.extend(StopTime(trip_id, i + 1, s) for i, s in enumerate(pattern))
    snapshot = GtfsSnapshot(stops, tuple(routes), trips, tuple(stop_times))
    net = _Network(stops, routes, route_stops, snapshot)
    for route, seq in route_stops.items():
        for a, b in zip(seq, seq[1:]):
            d = netgeo.distance((stops[a].lat, stops[a].lon), (stops[b].lat, stops[b].lon))
            net.seg_m[(a, b)] = net.seg_m[(b, a)] = d
        for s in seq:
            net.stop_routes.setdefault(s, []).append(route)
    net.index()
    return net


def _place_pois(cfg: SynthConfig, net: _Network, rng: np.random.Generator) -> list[Poi]:
    ids = sorted(net.stops)
    pois = []
    for cls in POI_CLASSES:
        for j in range(cfg.pois_per_class):
            anchor = net.stops[ids[int(rng.integers(len(ids)))]]
            d = float(rng.uniform(20.0, 380.0))
            theta = float(rng.uniform(0.0, 2 * math.pi))
            lat = anchor.lat + d * math.sin(theta) / netgeo.M_PER_DEG
            lon = anchor.lon + d * math.cos(theta) / (netgeo.M_PER_DEG * math.cos(math.radians(anchor.lat)))
            pois.append(Poi(f"{cls[0]}{j + 1:03d}", cls, round(lat, 7), round(lon, 7)))
    return pois


def _center_bbox(cfg: SynthConfig, net: _Network) -> tuple[tuple[float, float, float, float], int]:
    """Square box around the city center holding about ``center_share`` of the stops."""
    cos0 = math.cos(math.radians(LAT0))
    cheb = sorted(max(abs(s.lat - LAT0), abs(s.lon - LON0) * cos0) for s in net.stops.values())
    k = round(cfg.center_share * len(cheb))
    if k == 0:
        half = cheb[0] / 2
    elif k >= len(cheb):
        half = cheb[-1] * 1.01
    else:
        half = (cheb[k - 1] + cheb[k]) / 2
    bbox = (LAT0 - half, LON0 - half / cos0, LAT0 + half, LON0 + half / cos0)
    inside, _ = city_center_filter(net.stops.values(), bbox)
    return bbox, len(inside)


# -- names -------------------------------------------------------------------------

_ONSETS = ("b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "br", "tr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ea", "io")
_WOMAN_ENDS = ("a", "ia", "elle", "ine", "ette", "ah")
_MAN_ENDS = ("o", "an", "er", "us", "im", "ard")
_NEUTRAL_ENDS = ("y", "en", "i", "ey")


def _names(rng: np.random.Generator, ends: tuple[str, ...], n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        k = int(rng.integers(1, 3))
        stem = "".join(_ONSETS[int(rng.integers(len(_ONSETS)))] + _VOWELS[int(rng.integers(len(_VOWELS)))]
                       for _ in range(k))
        name = (stem + ends[int(rng.integers(len(ends)))]).capitalize()
        if int(rng.integers(12)) == 0:
            name = name + "-" + _names(rng, ends, 1, taken | {name})[0]
        if name not in taken:
            taken.add(name)
            out.append(name)
    return out


def _messy(name: str, rng: np.random.Generator) -> str:
    """A raw spelling that normalizes back to ``name``."""
    r = int(rng.integers(5))
    if r == 0:
        return name.upper()
    if r == 1:
        return name.lower()
    if r == 2:
        return f"  {name} "
    if r == 3 and len(name) > 3:
        return name[:2] + " " + name[2:]
    return name


# -- city --------------------------------------------------------------------------


@dataclass
class _Card:
    card_id: str
    gender: str
    product: str
    registered: bool
    name_kind: str        # "cache", "fallback", "ambiguous", "digits", "none"
    name: str
    p_weekday: float
    rail: float           # probability a journey is by rail
    expected_label: str = UNKNOWN


@dataclass
class SynthResult:
    out_dir: str
    manifest: dict[str, Any]
    paths: dict[str, str]


class _TapIndex:
    """Tap times per device, used to keep planted accompaniment taps consecutive."""

    def __init__(self):
        self.times: dict[str, list[int]] = {}

    def add(self, device: str, t: int) -> None:
        bisect.insort(self.times.setdefault(device, []), t)

    def free(self, device: str, lo: int, hi: int) -> bool:
        ts = self.times.get(device, [])
        i = bisect.bisect_left(ts, lo)
        return i == len(ts) or ts[i] > hi


class _City:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.net = _build_network(cfg, _stream(cfg.seed, "network"))
        self.pois = _place_pois(cfg, self.net, _stream(cfg.seed, "pois"))
        patterns = netgeo.build_patterns(self.net.snapshot)
        self.patterns = patterns
        self.poi_sets = netgeo.nearest_stops(self.pois, patterns, self.net.stops)
        self.stop_classes: dict[str, set[str]] = {}
        for cls, s in self.poi_sets.items():
            for sid in s.stop_ids:
                self.stop_classes.setdefault(sid, set()).add(cls)
        self.class_stops = {c: sorted(self.poi_sets[c].stop_ids) for c in POI_CLASSES}
        self.plain_stops = sorted(s for s in self.net.stops if s not in self.stop_classes)
        self.dates = [cfg.start_date + dt.timedelta(days=i) for i in range(cfg.days)]
        self.stages: list[Stage] = []
        self.taps = _TapIndex()
        self.journey_no: dict[str, int] = {}
        self.bus_stages = 0
        self.bus_alighted = 0
        shares = (cfg.poi_women_share, 1 - cfg.poi_women_share, cfg.baseline_women_share,
                  1 - cfg.baseline_women_share)
        self.s_max = max(shares) or 1.0

    # -- helpers
    def share(self, stop: str, t: int, weekend: bool) -> float:
        cfg = self.cfg
        if cfg.planted_class in self.stop_classes.get(stop, ()) and cfg.planted_start <= t < cfg.planted_end:
            dev = cfg.poi_women_share - cfg.baseline_women_share
            return cfg.baseline_women_share + (dev * cfg.weekend_effect if weekend else dev)
        return cfg.baseline_women_share

    def _jid(self, card: str) -> str:
        n = self.journey_no.get(card, 0) + 1
        self.journey_no[card] = n
        return f"{card}-J{n:04d}"

    def _bus_stage(self, rng, card: _Card, jid: str, idx: int, date: dt.date, route: str, direction: int,
                   i: int, hops: int, t: int) -> Stage:
        board, alight, dist = self.net.ride(route, direction, i, hops)
        arrive = t + int(dist / SPEED_MPS) + DWELL_S * hops
        device = f"{route}-{direction}-{board}"
        self.taps.add(device, date.toordinal() * 86400 + t)
        self.bus_stages += 1
        if rng.random() < self.cfg.alighting_coverage:
            self.bus_alighted += 1
            return Stage(card.card_id, jid, idx, date, board, t, alight, arrive, "Bus", route, direction, device,
                         card.product, FARES[card.product], round(dist, 1))
        return Stage(card.card_id, jid, idx, date, board, t, None, None, "Bus", route, direction, device,
                     card.product, FARES[card.product], None)

    def _random_leg(self, rng, end_at: str | None = None, start_at: str | None = None):
        """(route, direction, board position, hops) for a bus leg, optionally pinned at one end."""
        net = self.net
        pin = end_at or start_at
        route = (net.stop_routes[pin][int(rng.integers(len(net.stop_routes[pin])))] if pin
                 else net.routes[int(rng.integers(len(net.routes)))])
        direction = int(rng.integers(2))
        n = len(net.route_stops[route])
        hops = int(rng.integers(1, min(8, n - 1) + 1))
        if end_at is not None:
            j = net.pos[(route, direction)][end_at]
            if j == 0:
                direction, j = 1 - direction, n - 1
            hops = min(hops, j)
            return route, direction, j - hops, hops
        if start_at is not None:
            i = net.pos[(route, direction)][start_at]
            if i == n - 1:
                direction, i = 1 - direction, 0
            hops = min(hops, n - 1 - i)
            return route, direction, i, hops
        i = int(rng.integers(0, n - hops))
        return route, direction, i, hops

    # -- population
    def cards(self, rng_pop: np.random.Generator, rng_names: np.random.Generator):
        cfg = self.cfg
        n_acc = cfg.accompaniment_pairs
        n_general = cfg.n_cards - 2 * n_acc
        taken: set[str] = set()
        women = _names(rng_names, _WOMAN_ENDS, 300, taken)
        men = _names(rng_names, _MAN_ENDS, 300, taken)
        fallback_w = _names(rng_names, _WOMAN_ENDS, 30, taken)
        fallback_m = _names(rng_names, _MAN_ENDS, 30, taken)
        ambiguous = _names(rng_names, _NEUTRAL_ENDS, 30, taken)
        self.name_lists = dict(women=women, men=men, fallback_w=fallback_w, fallback_m=fallback_m,
                               ambiguous=ambiguous)
        products, weights = zip(*PRODUCT_WEIGHTS)
        cards = []
        for k in range(n_general):
            cid = f"C{k + 1:05d}"
            gender = WOMAN if rng_pop.random() < cfg.women_card_share else MAN
            product = products[int(rng_pop.choice(len(products), p=weights))]
            registered = rng_pop.random() < cfg.registered_share
            u = rng_pop.random()
            if not registered:
                kind, name = "none", ""
            elif u < cfg.ambiguous_name_share:
                kind, name = "ambiguous", ambiguous[int(rng_pop.integers(len(ambiguous)))]
            elif u < cfg.ambiguous_name_share + cfg.fallback_name_share:
                pool = fallback_w if gender == WOMAN else fallback_m
                kind, name = "fallback", pool[int(rng_pop.integers(len(pool)))]
            elif u > 0.995:
                kind, name = "digits", str(int(rng_pop.integers(1000, 99999)))
            else:
                pool = women if gender == WOMAN else men
                kind, name = "cache", pool[int(rng_pop.integers(len(pool)))]
            occasional = rng_pop.random() < cfg.occasional_share
            p_weekday = 0.08 if occasional else float(rng_pop.uniform(0.4, 0.95))
            v = rng_pop.random()
            rail = 1.0 if v < cfg.rail_only_share else (0.3 if v < cfg.rail_only_share + 0.2 else 0.0)
            card = _Card(cid, gender, product, registered, kind, name, p_weekday, rail)
            card.expected_label = gender if kind in ("cache", "fallback") else UNKNOWN
            cards.append(card)
        return cards

    # -- background travel
    def background(self, cards: list[_Card], rng: _Draws) -> None:
        cfg = self.cfg
        for card in cards:
            for date in self.dates:
                weekend = date.weekday() >= 5
                p = card.p_weekday * (0.4 if weekend else 1.0)
                if rng.random() >= p:
                    continue
                for _ in range(1 + int(rng.binomial(2, 0.3))):
                    t = _trip_time(rng, weekend)
                    if card.rail and rng.random() < card.rail:
                        self._rail(card, date, t, rng)
                    else:
                        self._general_bus(card, date, t, rng)
                n_chain = int(rng.poisson(cfg.chain_rate))
                for _ in range(n_chain):
                    if card.rail < 1.0:
                        self._chain(card, date, weekend, rng)

    def _rail(self, card: _Card, date: dt.date, t: int, rng) -> None:
        a = rng.integers(12)
        b = (a + 1 + rng.integers(11)) % 12
        ride = int(rng.integers(600, 1800))
        jid = self._jid(card.card_id)
        self.stages.append(Stage(card.card_id, jid, 1, date, f"RS{a + 1:02d}", t, f"RS{b + 1:02d}", t + ride,
                                 "Rail", None, None, f"RAIL-RS{a + 1:02d}", card.product, FARES[card.product],
                                 float(round(ride * 9.0, 1))))

    def _general_bus(self, card: _Card, date: dt.date, t: int, rng) -> None:
        jid = self._jid(card.card_id)
        leg = self._random_leg(rng)
        s1 = self._bus_stage(rng, card, jid, 1, date, *leg, t)
        self.stages.append(s1)
        if rng.random() < self.cfg.two_stage_share and self.plain_stops:
            # transfers happen at stops that serve no POI so chained boardings stay planted-only
            start = self.plain_stops[int(rng.integers(len(self.plain_stops)))]
            _, _, d = self.net.ride(*leg)
            t2 = t + int(d / SPEED_MPS) + DWELL_S * leg[3] + int(rng.integers(120, 900))
            leg2 = self._random_leg(rng, start_at=start)
            self.stages.append(self._bus_stage(rng, card, jid, 2, date, *leg2, t2))

    def _chain(self, card: _Card, date: dt.date, weekend: bool, rng) -> None:
        """Candidate trip chain through a POI stop, thinned by gender-specific acceptance."""
        cls = POI_CLASSES[rng.pick((0.4, 0.3, 0.3))]
        stops = self.class_stops[cls]
        if not stops:
            return
        stop = stops[int(rng.integers(len(stops)))]
        t2 = _chain_time(rng, cls, weekend, self.cfg)
        s = self.share(stop, t2, weekend)
        accept = (s if card.gender == WOMAN else 1.0 - s) / self.s_max
        if rng.random() >= accept:
            return
        jid = self._jid(card.card_id)
        leg1 = self._random_leg(rng, end_at=stop)
        _, _, d1 = self.net.ride(*leg1)
        t1 = t2 - int(rng.integers(300, 1200)) - int(d1 / SPEED_MPS) - DWELL_S * leg1[3]
        self.stages.append(self._bus_stage(rng, card, jid, 1, date, *leg1, t1))
        leg2 = self._random_leg(rng, start_at=stop)
        self.stages.append(self._bus_stage(rng, card, jid, 2, date, *leg2, t2))

    # -- accompaniment
    def accompaniment(self, rng_pairs: np.random.Generator, rng_events: _Draws,
                      rng_names: np.random.Generator,
                      rng_travel: _Draws) -> tuple[list[_Card], list[dict]]:
        cfg = self.cfg
        n = cfg.accompaniment_pairs
        n_general = cfg.n_cards - 2 * n
        women, men = self.name_lists["women"], self.name_lists["men"]
        slots = [(TARGET[(i // 5) % 3], 1 + i % 5) for i in range(n)]
        # exact counts per group: women among accompanying cards by rate, partner product by class
        by_rate: dict[int, list[int]] = {}
        by_class: dict[str, list[int]] = {}
        for i, (cls, rate) in enumerate(slots):
            by_rate.setdefault(rate, []).append(i)
            by_class.setdefault(cls, []).append(i)
        gender = {}
        for rate, idx in by_rate.items():
            w_share = cfg.accompaniment_women_low + (cfg.accompaniment_women_high - cfg.accompaniment_women_low) * (rate - 1) / 4
            k = math.floor(w_share * len(idx) + 0.5)  # half up, so 4.5 of 9 gives 5
            order = rng_pairs.permutation(len(idx))
            for rank, j in enumerate(order):
                gender[idx[j]] = WOMAN if rank < k else MAN
        partner_product = {}
        for cls, idx in by_class.items():
            share = {"Senior": cfg.senior_pair_share, "Disabled": cfg.disabled_pair_share}.get(cls, 0.0)
            k = round(share * len(idx))
            order = rng_pairs.permutation(len(idx))
            for rank, j in enumerate(order):
                partner_product[idx[j]] = cls if rank < k else ("Full" if rng_pairs.random() < 0.7 else "WeeklyPass")

        cards, pairs = [], []
        for i, (cls, rate) in enumerate(slots):
            a_id = f"C{n_general + 2 * i + 1:05d}"
            b_id = f"C{n_general + 2 * i + 2:05d}"
            a = _Card(a_id, WOMAN if rng_pairs.random() < 0.5 else MAN, cls, False, "none", "", 0.3, 0.0)
            g = gender[i]
            pool = women if g == WOMAN else men
            b = _Card(b_id, g, partner_product[i], True, "cache", pool[int(rng_names.integers(len(pool)))], 0.5, 0.0,
                      expected_label=g)
            cards += [a, b]
            days = sorted(int(d) for d in rng_pairs.choice(7, size=rate, replace=False))
            pairs.append(dict(accompanied=a_id, accompanying=b_id, accomp_class=cls, rate_per_week=rate,
                              weekdays=days, events=0, accompanying_product=b.product,
                              accompanying_gender=g))
        # their own travel goes in first so the collision check below sees it
        self.background(cards, rng_travel)
        for i, pair in enumerate(pairs):
            a, b = cards[2 * i], cards[2 * i + 1]
            for date in self.dates:
                if date.weekday() in pair["weekdays"]:
                    pair["events"] += self._plant_pair(a, b, date, pair["accomp_class"], rng_events)
        return cards, pairs

    def _plant_pair(self, a: _Card, b: _Card, date: dt.date, cls: str, rng) -> int:
        weekend = date.weekday() >= 5
        for _ in range(200):
            if weekend:
                t = int(rng.integers(10 * HOUR, 14 * HOUR))
            elif cls == "Student":
                t = int(rng.integers(7 * HOUR + 900, 8 * HOUR + 900)) if rng.random() < 0.5 else \
                    int(rng.integers(14 * HOUR + 2700, 15 * HOUR + 2700))
            else:
                t = int(rng.integers(9 * HOUR + 1800, 14 * HOUR + 1800))
            gap = int(rng.integers(0, 31))
            leg = self._random_leg(rng)
            board = self.net.ride(*leg)[0]
            device = f"{leg[0]}-{leg[1]}-{board}"
            base = date.toordinal() * 86400 + t
            if not self.taps.free(device, base - 31, base + gap + 31):
                continue
            first, second = (a, b) if rng.random() < 0.5 else (b, a)
            self.stages.append(self._bus_stage(rng, first, self._jid(first.card_id), 1, date, *leg, t))
            self.stages.append(self._bus_stage(rng, second, self._jid(second.card_id), 1, date, *leg, t + gap))
            return 1
        raise RuntimeError("could not place an accompaniment tap pair without collisions")


def _trip_time(rng, weekend: bool) -> int:
    u = rng.random()
    if weekend:
        t = rng.normal(13.5 * HOUR, 2.5 * HOUR) if u < 0.6 else rng.uniform(6 * HOUR, 23 * HOUR)
    elif u < 0.3:
        t = rng.normal(8 * HOUR, 0.8 * HOUR)
    elif u < 0.6:
        t = rng.normal(17.5 * HOUR, 1.0 * HOUR)
    else:
        t = rng.uniform(5.5 * HOUR, 23.5 * HOUR)
    return int(min(max(t, 5 * HOUR), 23.9 * HOUR))


def _chain_time(rng, cls: str, weekend: bool, cfg: SynthConfig) -> int:
    if weekend:
        return int(rng.integers(9 * HOUR, 18 * HOUR))
    am = rng.random() < 0.5
    if cls == "Daycare":
        return int(rng.integers(cfg.planted_start, cfg.planted_end)) if am else int(rng.integers(16 * HOUR, 18 * HOUR + 1800))
    if cls == "School":
        return int(rng.integers(7 * HOUR, 8 * HOUR + 900)) if am else int(rng.integers(14 * HOUR + 1800, 16 * HOUR))
    return int(rng.integers(9 * HOUR, 20 * HOUR))


# -- entry points --------------------------------------------------------------------


def generate(config: SynthConfig, out_dir: str | os.PathLike) -> SynthResult:
    """Write the synthetic city under ``out_dir`` and return the manifest."""
    cfg = config
    cfg.validate()
    out = os.fspath(out_dir)
    os.makedirs(out, exist_ok=True)
    city = _City(cfg)
    general = city.cards(_stream(cfg.seed, "population"), _stream(cfg.seed, "names"))
    city.background(general, _Draws(_stream(cfg.seed, "travel")))
    acc_cards, pairs = city.accompaniment(_stream(cfg.seed, "pairs"), _Draws(_stream(cfg.seed, "accompaniment")),
                                          _stream(cfg.seed, "pair-names"), _Draws(_stream(cfg.seed, "pair-travel")))
    cards = general + acc_cards

    paths = {k: os.path.join(out, v) for k, v in (
        ("gtfs", "gtfs"), ("pois", "pois.csv"), ("stages", "stages.csv"), ("registrations", "registrations.csv"),
        ("name_cache", "name_cache.csv"), ("baby_names", "baby_names.csv"), ("survey", "survey.csv"),
        ("mixed_model", "mixed_model.csv"), ("manifest", "manifest.json"))}

    write_gtfs(city.net.snapshot, paths["gtfs"])
    write_pois(city.pois, paths["pois"])
    city.stages.sort(key=lambda s: (s.service_date, s.board_time, s.card_id, s.journey_id, s.stage_index))
    with StageWriter(paths["stages"]) as w:
        for s in city.stages:
            w.write(s)

    rng_reg = _stream(cfg.seed, "registration-spelling")
    write_registrations([CardRegistration(c.card_id, _messy(c.name, rng_reg) if c.name else None, c.registered)
                         for c in cards], paths["registrations"])
    _write_name_sources(city, cfg, paths, _stream(cfg.seed, "name-cache"))
    survey = _write_survey(cards, cfg, paths["survey"], _stream(cfg.seed, "survey"))
    _write_mixed(cfg, paths["mixed_model"], _stream(cfg.seed, "mixed-model"))

    bbox, n_inside = _center_bbox(cfg, city.net)
    journeys = sum(city.journey_no.values())
    expected_patterns = []
    for p in pairs:
        expected_patterns.append([p["accompanied"], p["accompanying"], p["accomp_class"], p["events"]])
        if p["accompanying_product"] in TARGET:
            expected_patterns.append([p["accompanying"], p["accompanied"], p["accompanying_product"], p["events"]])
    manifest = {
        "config": cfg.as_dict(),
        "counts": {"cards": len(cards), "stages": len(city.stages), "journeys": journeys,
                   "bus_stages": city.bus_stages, "bus_stages_with_alighting": city.bus_alighted},
        "card_gender": {c.card_id: c.gender for c in cards},
        "expected_label": {c.card_id: c.expected_label for c in cards if c.registered},
        "patterns": [[p.route_id, p.direction_id, list(p.stop_ids)] for p in city.patterns],
        "poi_stops": city.class_stops,
        "planted": {
            "case": 1,
            "poi_class": cfg.planted_class,
            "bins": list(range((cfg.planted_start - 6 * HOUR) // 900, -(-(cfg.planted_end - 6 * HOUR) // 900))),
            "women_share": cfg.poi_women_share,
            "weekend_women_share": cfg.baseline_women_share
            + (cfg.poi_women_share - cfg.baseline_women_share) * cfg.weekend_effect,
            "baseline_women_share": cfg.baseline_women_share,
            "stops": city.class_stops[cfg.planted_class],
        },
        "center": {"bbox": list(bbox), "stops_inside": n_inside, "stops_total": len(city.net.stops)},
        "accompaniment": {"pairs": pairs, "expected_patterns": sorted(expected_patterns)},
        "survey": survey,
        "mixed_model": {"beta0": cfg.mm_beta0, "beta1": cfg.mm_beta1, "sigma_u2": cfg.mm_sigma_u2,
                        "sigma_e2": cfg.mm_sigma_e2, "groups": cfg.mm_groups, "per_group": cfg.mm_per_group},
        "files": {k: os.path.relpath(v, out) for k, v in paths.items()},
    }
    with open(paths["manifest"], "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return SynthResult(out, manifest, paths)


def null_city(config: SynthConfig, out_dir: str | os.PathLike) -> SynthResult:
    """The same city with every planted women share set to the baseline."""
    return generate(null_config(config), out_dir)


def _write_name_sources(city: _City, cfg: SynthConfig, paths: Mapping[str, str], rng) -> None:
    lists = city.name_lists
    recs = []
    for label, key in ((WOMAN, "women"), (MAN, "men")):
        for name in lists[key]:
            recs.append(GenderRecord(name, label, round(float(rng.uniform(0.55, 0.995)), 4),
                                     int(rng.integers(50, 20000)), REMOTE))
    for name in lists["ambiguous"]:
        recs.append(GenderRecord(name, WOMAN if rng.random() < 0.5 else MAN, round(float(rng.uniform(0.5, 0.509)), 4),
                                 int(rng.integers(50, 5000)), REMOTE))
    # the provider knows nothing about these; the baby-names table resolves them
    for name in lists["fallback_w"] + lists["fallback_m"]:
        recs.append(GenderRecord(name, UNKNOWN, 0.0, 0, REMOTE))
    save_cache(GenderCache({(r.name, r.source): r for r in recs}), paths["name_cache"])
    with open(paths["baby_names"], "w", encoding="utf-8", newline="") as f:
        f.write("name,gender,count\n")
        for gender, key in (("F", "fallback_w"), ("M", "fallback_m")):
            for name in lists[key]:
                major = int(rng.integers(200, 3000))
                minor = int(rng.integers(0, major // 4))
                other = "M" if gender == "F" else "F"
                f.write(f"{name},{gender},{major}\n{name},{other},{minor}\n")


def _write_survey(cards: list[_Card], cfg: SynthConfig, path: str, rng) -> dict[str, Any]:
    """Self-reported genders for resolvable cards, with an exact share flipped."""
    pool = [c for c in cards if c.expected_label in (WOMAN, MAN)]
    n = min(cfg.survey_size, len(pool))
    chosen = sorted((pool[int(i)] for i in rng.choice(len(pool), size=n, replace=False)), key=lambda c: c.card_id)
    n_flip = round(cfg.survey_noise * n)
    flip = set(int(i) for i in rng.choice(n, size=n_flip, replace=False)) if n_flip else set()
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("card_id,self_reported,group\n")
        for k, c in enumerate(chosen):
            reported = c.gender if k not in flip else (MAN if c.gender == WOMAN else WOMAN)
            f.write(f"{c.card_id},{reported},{SURVEY_GROUPS[int(rng.integers(3))]}\n")
    return {"respondents": n, "flipped": n_flip}


def _write_mixed(cfg: SynthConfig, path: str, rng) -> None:
    obs = simulate_random_intercept(cfg.mm_groups, cfg.mm_per_group, cfg.mm_beta0, cfg.mm_beta1,
                                    cfg.mm_sigma_u2, cfg.mm_sigma_e2, rng)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("od_pair,moc_flag,in_vehicle_minutes\n")
        for g, flag, y in obs:
            f.write(f"OD{g + 1:04d},{flag},{y!r}\n")


def load_manifest(path: str | os.PathLike) -> dict[str, Any]:
    p = os.fspath(path)
    if os.path.isdir(p):
        p = os.path.join(p, "manifest.json")
    with open(p, encoding="utf-8") as f:
        return json.load(f)
