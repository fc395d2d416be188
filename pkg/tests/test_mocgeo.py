import datetime as dt
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from careflow import mocgeo
from careflow.gender import MAN, WOMAN
from careflow.ingest import WEEKDAY, WEEKEND, Stop
from careflow.mocgeo import ALL_STOPS, MocAnalysis

from .conftest import make_stage

MON = dt.date(2019, 1, 7)
SAT = dt.date(2019, 1, 12)


def test_bins():
    assert mocgeo.N_BINS == 64
    assert mocgeo.time_bin(6 * 3600) == 0
    assert mocgeo.time_bin(6 * 3600 + 899) == 0
    assert mocgeo.time_bin(6 * 3600 + 900) == 1
    assert mocgeo.time_bin(22 * 3600 - 1) == 63
    assert mocgeo.time_bin(22 * 3600) is None
    assert mocgeo.time_bin(6 * 3600 - 1) is None
    assert mocgeo.bin_label(0) == ("06:00", "06:15")
    assert mocgeo.bin_label(63) == ("21:45", "22:00")


def test_six_women_four_men():
    obs = [("S", MON, 8 * 3600, WOMAN)] * 6 + [("S", MON, 8 * 3600, MAN)] * 4
    cell = mocgeo.parity_series(obs)[8]
    assert cell.n_trips == 10 and cell.n_women == 6
    assert cell.deviation == pytest.approx(0.10)
    assert cell.ci is None  # one (stop, date) observation: no spread estimate


def test_all_women_bin():
    cell = mocgeo.parity_series([("S", MON, 7 * 3600, WOMAN)] * 3)[4]
    assert cell.deviation == 0.5


def test_empty_bins_absent():
    cells = mocgeo.parity_series([])
    assert len(cells) == 64 and all(c.deviation is None and c.n_trips == 0 for c in cells)


def test_ci_matches_hand_formula():
    # three (stop, date) observations in bin 0 with women shares 1/2, 3/4, 1/4
    obs = []
    for stop, w, m in (("A", 1, 1), ("B", 3, 1), ("C", 1, 3)):
        obs += [(stop, MON, 6 * 3600, WOMAN)] * w + [(stop, MON, 6 * 3600, MAN)] * m
    cell = mocgeo.parity_series(obs)[0]
    devs = np.array([0.0, 0.25, -0.25])
    half = 1.96 * devs.std(ddof=1) / math.sqrt(3)
    assert cell.n_obs == 3
    assert cell.deviation == pytest.approx(5 / 10 - 0.5)
    assert cell.ci_half_width == pytest.approx(half, abs=1e-12)
    assert cell.covers(0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABC"), st.integers(0, 3), st.integers(5 * 3600, 23 * 3600),
                          st.booleans()), max_size=60))
def test_label_swap_antisymmetry(rows):
    obs = [(s, MON + dt.timedelta(d), t, WOMAN if w else MAN) for s, d, t, w in rows]
    swapped = [(s, d, t, MAN if lab == WOMAN else WOMAN) for s, d, t, lab in obs]
    for a, b in zip(mocgeo.parity_series(obs), mocgeo.parity_series(swapped)):
        assert a.n_trips == b.n_trips and a.n_obs == b.n_obs
        if a.deviation is None:
            assert b.deviation is None
        else:
            assert a.deviation == pytest.approx(-b.deviation, abs=1e-12)
            assert (a.ci_half_width is None) == (b.ci_half_width is None)
            if a.ci_half_width is not None:
                assert a.ci_half_width == pytest.approx(b.ci_half_width, abs=1e-12)


def test_unknown_labels_ignored():
    acc = mocgeo.ParityAccumulator()
    assert not acc.add("S", MON, 8 * 3600, "Unknown")
    assert not acc.add("S", MON, 23 * 3600, WOMAN)
    assert acc.counts == {}


@pytest.mark.parametrize("seed", range(10))
def test_percentile_matches_numpy(seed):
    rng = random.Random(seed)
    xs = [rng.uniform(-0.5, 0.5) for _ in range(rng.randint(1, 40))]
    for q in mocgeo.PERCENTILES:
        assert mocgeo.percentile(xs, q) == pytest.approx(float(np.percentile(xs, q)), abs=1e-12)


def test_percentile_empty_is_nan():
    assert math.isnan(mocgeo.percentile([], 50))


CLASSES = {"P1": frozenset({"Daycare"}), "P2": frozenset({"Daycare", "Grocery"})}


def test_case1_requires_second_stage_on_bus():
    stages = [make_stage(index=1, board="P1"), make_stage(index=2, board="P1"),
              make_stage(index=2, board="P1", mode="Rail"), make_stage(index=3, board="P2"),
              make_stage(index=2, board="X")]
    tags = mocgeo.tag_case1(stages, CLASSES)
    assert [(t.stage.board_stop, t.poi_class) for t in tags] == [("P1", "Daycare"), ("P2", "Daycare"),
                                                                 ("P2", "Grocery")]


def test_case2_coverage_and_skip():
    stages = [make_stage(alight="P1"), make_stage(alight=None), make_stage(alight="X"),
              make_stage(alight=None), make_stage(alight="P1", mode="Rail")]
    res = mocgeo.tag_case2(stages, CLASSES)
    assert res.bus_stages == 4 and res.skipped_no_alighting == 2
    assert res.coverage == 0.5
    assert [t.poi_class for t in res.tags] == ["Daycare"]


def test_analysis_scopes_and_baselines():
    labels = {"w": WOMAN, "m": MAN}
    stages = [
        make_stage(card="w", index=2, board="P1", alight="Q", t=8 * 3600),
        make_stage(card="m", index=1, board="P1", alight="P2", t=8 * 3600),
        make_stage(card="w", index=2, board="P2", alight=None, t=9 * 3600, date=SAT),
        make_stage(card="nobody", index=2, board="P1"),
    ]
    a = MocAnalysis(labels, CLASSES).consume(stages)
    assert a.bus_stages == 3 and a.alighting_coverage == pytest.approx(2 / 3)
    # case 1: only the woman's second boarding is tagged; the baseline sees both weekday boardings
    assert a.series(1, "Daycare")[8].n_women == 1 and a.series(1, "Daycare")[8].n_trips == 1
    assert a.series(1, ALL_STOPS)[8].n_trips == 2
    assert a.series(1, "Grocery", WEEKEND)[12].n_trips == 1
    # case 2 uses alighting stop and time (08:10 -> bin 8)
    assert a.series(2, "Grocery")[8].n_trips == 1 and a.series(2, "Grocery")[8].n_women == 0
    assert a.tagged == {1: 3, 2: 2}


def test_exclude_dates():
    a = MocAnalysis({"w": WOMAN}, CLASSES, exclude_dates=frozenset({MON}))
    a.consume([make_stage(card="w", index=2, board="P1")])
    assert a.bus_stages == 0


def test_flow_stats_per_stop_hour():
    rows = mocgeo.stop_flow_stats([("Daycare", WOMAN)] * 64 + [("Daycare", MAN)] * 32,
                                  {"Daycare": ["P1", "P2"]})
    (r,) = rows
    assert (r.n_stops, r.women, r.men) == (2, 64, 32)
    assert r.women_per_hr == pytest.approx(2.0) and r.men_per_hr == pytest.approx(1.0)
    assert r.delta == pytest.approx(1.0)


def test_analysis_flow_stats_matches_function():
    labels = {"w": WOMAN, "m": MAN}
    stages = [make_stage(card=c, index=2, board=b, t=t) for c, b, t in
              (("w", "P1", 8 * 3600), ("w", "P2", 10 * 3600), ("m", "P2", 10 * 3600))]
    a = MocAnalysis(labels, CLASSES).consume(stages)
    class_stops = {"Daycare": ["P1", "P2"], "Grocery": ["P2"]}
    direct = mocgeo.stop_flow_stats([(t.poi_class, labels[t.stage.card_id])
                                     for t in mocgeo.tag_case1(stages, CLASSES)], class_stops)
    assert a.flow_stats(class_stops) == direct


def test_city_center_closed_box():
    stops = [Stop("in", 1.0, 1.0), Stop("edge", 2.0, 2.0), Stop("out", 2.1, 1.0)]
    inside, outside = mocgeo.city_center_filter(stops, (0.0, 0.0, 2.0, 2.0))
    assert inside == {"in", "edge"} and outside == {"out"}


def test_outside_restriction():
    labels = {"w": WOMAN}
    a = MocAnalysis(labels, CLASSES).consume([make_stage(card="w", index=2, board="P1")])
    assert a.series(1, "Daycare", WEEKDAY, outside={"P2"})[8].n_trips == 0


def test_writers(tmp_path):
    a = MocAnalysis({"w": WOMAN, "m": MAN}, CLASSES).consume(
        [make_stage(card="w", index=2, board="P1"), make_stage(card="m", index=2, board="P1", date=MON + dt.timedelta(1))])
    series = a.all_series(outside={"P1"})
    mocgeo.write_parity_series(series, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].split(",")[0] == "case"
    assert len(lines) == 1 + len(series) * 64
    row = next(l for l in lines if l.startswith("1,Daycare,Weekday,AllArea,8,"))
    assert row.split(",")[7:] == ["2", "1", "2", "0.00", "-98.00", "98.00"]  # sd(+-0.5) = 0.7071
    mocgeo.write_percentiles({"AllArea": a.percentiles()}, tmp_path / "q.csv")
    assert "AllArea,All," in (tmp_path / "q.csv").read_text()
