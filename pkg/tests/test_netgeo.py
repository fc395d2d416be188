import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from careflow import netgeo
from careflow.ingest import POI_CLASSES, GtfsSnapshot, Poi, Stop, StopTime, Trip
from careflow.netgeo import M_PER_DEG_LAT, RouteDirectionPattern

EARTH_R = 6_371_008.8


def haversine(a, b):
    la1, lo1, la2, lo2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    h = math.sin((la2 - la1) / 2) ** 2 + math.cos(la1) * math.cos(la2) * math.sin((lo2 - lo1) / 2) ** 2
    return 2 * EARTH_R * math.asin(math.sqrt(h))


def brute_force(pois, patterns, stops, radius):
    """Every (poi, pattern, stop) triple, no prefilter."""
    out = {c: set() for c in POI_CLASSES}
    for poi in pois:
        for pat in patterns:
            best = None
            for sid in pat.stop_ids:
                s = stops[sid]
                d = netgeo.distance((poi.lat, poi.lon), (s.lat, s.lon))
                if d <= radius and (best is None or d < best[0] or (d == best[0] and sid < best[1])):
                    best = (d, sid)
            if best:
                out[poi.poi_class].add((poi.poi_id, pat.route_id, pat.direction_id, best[1], best[0]))
    return out


def random_instance(rng, max_stops=50, max_patterns=10, max_pois=20):
    lat0, lon0 = 38.9, -77.03
    n_stops = rng.randint(1, max_stops)
    # coarse grid so equal distances (ties) actually occur
    stops = {}
    for i in range(n_stops):
        stops[f"S{i:02d}"] = Stop(f"S{i:02d}", lat0 + rng.randint(-8, 8) * 0.0005,
                                  lon0 + rng.randint(-8, 8) * 0.0005)
    ids = sorted(stops)
    patterns = []
    for k in range(rng.randint(1, max_patterns)):
        patterns.append(RouteDirectionPattern(f"R{k}", rng.randint(0, 1),
                                              tuple(rng.sample(ids, rng.randint(1, len(ids))))))
    pois = [Poi(f"P{j}", rng.choice(POI_CLASSES), lat0 + rng.randint(-8, 8) * 0.0005,
                lon0 + rng.randint(-8, 8) * 0.0005) for j in range(rng.randint(0, max_pois))]
    return pois, patterns, stops


def as_tuples(sets):
    return {c: set(map(tuple, s.entries)) for c, s in sets.items()}


def snapshot(trip_stops, directions=None):
    stops = {s: Stop(s, 38.9, -77.0) for seq in trip_stops.values() for s in seq}
    trips = {t: Trip(t, "R1", (directions or {}).get(t, 0)) for t in trip_stops}
    sts = tuple(StopTime(t, i + 1, s) for t, seq in sorted(trip_stops.items()) for i, s in enumerate(seq))
    return GtfsSnapshot(stops, ("R1",), trips, sts)


def test_patterns_both_directions():
    pats = netgeo.build_patterns(snapshot({"T1": ["A", "B"], "T2": ["B", "A"]}, {"T2": 1}))
    assert [(p.route_id, p.direction_id, p.stop_ids) for p in pats] == [("R1", 0, ("A", "B")), ("R1", 1, ("B", "A"))]


def test_patterns_first_appearance_union():
    (pat,) = netgeo.build_patterns(snapshot({"T2": ["A", "B", "D"], "T1": ["A", "B", "C"]}))
    assert pat.stop_ids == ("A", "B", "C", "D")


def test_distance_basics():
    assert netgeo.distance((38.9, -77.0), (38.9, -77.0)) == 0.0
    assert netgeo.distance((38.9, -77.0), (38.901, -77.0)) == pytest.approx(111.19508, abs=1e-5)


@settings(max_examples=200)
@given(st.floats(-60, 60), st.floats(-179, 179), st.floats(-0.01, 0.01), st.floats(-0.01, 0.01))
def test_distance_symmetric(lat, lon, dlat, dlon):
    a, b = (lat, lon), (lat + dlat, lon + dlon)
    assert netgeo.distance(a, b) == netgeo.distance(b, a)


def test_distance_matches_haversine_short_range():
    rng = random.Random(7)
    for _ in range(500):
        lat, lon = rng.uniform(-60, 60), rng.uniform(-170, 170)
        bearing, dist = rng.uniform(0, 2 * math.pi), rng.uniform(1, 2000)
        b = (lat + dist * math.cos(bearing) / 111_000, lon + dist * math.sin(bearing) / (111_000 * math.cos(math.radians(lat))))
        h = haversine((lat, lon), b)
        assert abs(netgeo.distance((lat, lon), b) - h) <= 1e-4 * h


def test_no_stop_in_radius():
    stops = {"S": Stop("S", 38.9 + 500 / M_PER_DEG_LAT, -77.0)}
    sets = netgeo.nearest_stops([Poi("P", "Daycare", 38.9, -77.0)], [RouteDirectionPattern("R", 0, ("S",))], stops)
    assert not sets["Daycare"].entries


def test_nearest_of_three():
    stops = {k: Stop(k, 38.9 + d / M_PER_DEG_LAT, -77.0) for k, d in (("S50", 50), ("S120", 120), ("S390", 390))}
    sets = netgeo.nearest_stops([Poi("P", "School", 38.9, -77.0)],
                                [RouteDirectionPattern("R", 0, ("S390", "S120", "S50"))], stops)
    (e,) = sets["School"].entries
    assert e.stop_id == "S50" and e.distance_m == pytest.approx(50)


def test_tie_breaks_on_stop_id():
    stops = {"B": Stop("B", 38.9 + 0.001, -77.0), "A": Stop("A", 38.9 - 0.001, -77.0)}
    sets = netgeo.nearest_stops([Poi("P", "Grocery", 38.9, -77.0)], [RouteDirectionPattern("R", 0, ("B", "A"))], stops)
    assert [e.stop_id for e in sets["Grocery"].entries] == ["A"]


@pytest.mark.parametrize("seed", range(40))
def test_matches_brute_force(seed):
    rng = random.Random(seed)
    pois, patterns, stops = random_instance(rng)
    radius = rng.choice([50.0, 100.0, 200.0, 400.0])
    assert as_tuples(netgeo.nearest_stops(pois, patterns, stops, radius)) == brute_force(pois, patterns, stops, radius)


@pytest.mark.parametrize("seed", range(10))
def test_permutation_invariant_and_radius_monotone(seed):
    rng = random.Random(100 + seed)
    pois, patterns, stops = random_instance(rng)
    ref = as_tuples(netgeo.nearest_stops(pois, patterns, stops))
    shuffled_pois = pois[:]
    rng.shuffle(shuffled_pois)
    shuffled_stops = dict(rng.sample(sorted(stops.items()), len(stops)))
    assert as_tuples(netgeo.nearest_stops(shuffled_pois, patterns, shuffled_stops)) == ref
    prev = None
    for r in (50.0, 100.0, 200.0, 400.0):
        cur = as_tuples(netgeo.nearest_stops(pois, patterns, stops, r))
        for c in cur:
            assert all(e[4] <= r for e in cur[c])
            if prev is not None:
                assert prev[c] <= cur[c]
        prev = cur


def test_entry_distances_recomputed_exactly():
    rng = random.Random(3)
    pois, patterns, stops = random_instance(rng)
    poi_by_id = {p.poi_id: p for p in pois}
    for s in netgeo.nearest_stops(pois, patterns, stops).values():
        for e in s.entries:
            p, st_ = poi_by_id[e.poi_id], stops[e.stop_id]
            assert e.distance_m == netgeo.distance((p.lat, p.lon), (st_.lat, st_.lon))


def _set(cls, dists):
    return netgeo.PoiStopSet(cls, frozenset(netgeo.PoiStopEntry(f"P{i}", "R", 0, f"S{i}", d) for i, d in enumerate(dists)))


def test_sensitivity_all_close():
    (row,) = netgeo.buffer_sensitivity({"Daycare": _set("Daycare", [10.0] * 7)})
    assert row.n_stops == 7
    assert row.pct_within == {200.0: 100.0, 100.0: 100.0, 50.0: 100.0}


def test_sensitivity_recount():
    dists = [30, 75, 75, 150, 150, 150, 300, 300]
    (row,) = netgeo.buffer_sensitivity({"School": _set("School", dists)})
    assert row.pct_within == {200.0: 75.0, 100.0: 37.5, 50.0: 12.5}


def test_mean_distance():
    m = netgeo.mean_nearest_distance({"Daycare": _set("Daycare", [74.0]), "School": _set("School", [100.0, 150.0])})
    assert m == {"Daycare": 74.0, "School": 125.0, "All": pytest.approx(108.0)}


def test_poi_stops_file_round_trip(tmp_path):
    rng = random.Random(5)
    pois, patterns, stops = random_instance(rng)
    sets = netgeo.nearest_stops(pois, patterns, stops)
    netgeo.write_poi_stops(sets, tmp_path / "poi_stops.csv")
    assert netgeo.load_poi_stops(tmp_path / "poi_stops.csv") == sets
