import os
import textwrap

import pytest


def write(path, text):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(textwrap.dedent(text).lstrip("\n"))
    return path


@pytest.fixture
def minimal_feed(tmp_path):
    d = tmp_path / "gtfs"
    write(str(d / "stops.txt"), """
        stop_id,stop_name,stop_lat,stop_lon
        A,First,38.90,-77.03
        B,Second,38.901,-77.03
        C,Third,38.902,-77.03
    """)
    write(str(d / "routes.txt"), """
        route_id
        R1
    """)
    write(str(d / "trips.txt"), """
        route_id,trip_id,direction_id
        R1,T1,0
    """)
    write(str(d / "stop_times.txt"), """
        trip_id,stop_sequence,stop_id
        T1,3,C
        T1,1,A
        T1,2,B
    """)
    return d


def make_stage(card="C1", journey="J1", index=1, date=None, board="S1", t=8 * 3600, alight="S2",
               alight_t=None, mode="Bus", device="D1", product="Full"):
    import datetime as dt

    from careflow.ingest import Stage

    date = date or dt.date(2019, 1, 7)
    if alight is not None and alight_t is None:
        alight_t = t + 600
    return Stage(card, journey, index, date, board, t, alight, alight_t if alight else None, mode,
                 "R1", 0, device, product, 200, None)


def pytest_terminal_summary(terminalreporter):
    modules = __import__("sys").modules
    mod = modules.get("tests.test_acceptance") or modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: int(k[1:])):
        ok, detail = results[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'} - {detail}")
