import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from urllib.parse import parse_qs, urlparse

import pytest
from hypothesis import given
from hypothesis import strategies as st

from careflow import gender as g
from careflow.errors import ProviderUnreachable, RateLimited
from careflow.gender import MAN, UNKNOWN, WOMAN, GenderCache, GenderRecord
from careflow.ingest import CardRegistration


@pytest.mark.parametrize("raw, expected", [
    ("  mARy ann ", "Maryann"),
    ("12345", ""),
    ("anne-marie", "Anne-Marie"),
    ("", ""),
    ("   ", ""),
    (None, ""),
    ("JOSÉ", "José"),
    ("o'neil", "O'neil"),
])
def test_normalize(raw, expected):
    assert g.normalize_name(raw) == expected


@given(st.text())
def test_normalize_idempotent(raw):
    once = g.normalize_name(raw)
    assert g.normalize_name(once) == once


def cache_of(*recs):
    return GenderCache({}).merged(recs)


def test_infer_absent_name():
    assert g.infer_gender("Zed", cache_of()) == (UNKNOWN, 0.0)


def test_infer_cutoff_boundaries():
    cache = cache_of(GenderRecord("Sam", WOMAN, 0.50, 10, g.REMOTE),
                     GenderRecord("Alex", MAN, 0.51, 10, g.REMOTE))
    assert g.infer_gender("Sam", cache)[0] == UNKNOWN
    assert g.infer_gender("Alex", cache) == (MAN, 0.51)


def test_infer_rejects_bad_cutoff():
    with pytest.raises(ValueError):
        g.infer_gender("Alex", cache_of(), cutoff=0.5)


def test_manual_overrides_remote():
    cache = cache_of(GenderRecord("Kim", WOMAN, 0.9, 10, g.REMOTE),
                     GenderRecord("Kim", MAN, 1.0, 1, g.MANUAL))
    assert g.infer_gender("Kim", cache) == (MAN, 1.0)


probs = st.floats(0, 1)


@given(st.lists(st.tuples(st.sampled_from(["A", "B", "C", "D"]), st.sampled_from([WOMAN, MAN, UNKNOWN]), probs)),
       st.floats(0.5001, 1.0), st.floats(0.5001, 1.0))
def test_cutoff_monotone(entries, c1, c2):
    lo, hi = sorted((c1, c2))
    cache = cache_of(*(GenderRecord(n, lab, p, 1, g.REMOTE) for n, lab, p in entries))
    for name in "ABCD":
        l_lo, p_lo = g.infer_gender(name, cache, lo)
        l_hi, p_hi = g.infer_gender(name, cache, hi)
        if l_hi != UNKNOWN:
            assert l_hi == l_lo
        if l_lo != UNKNOWN:
            assert p_lo >= lo


def test_cache_merge_last_writer_wins_and_commutes():
    a = [GenderRecord("Ann", WOMAN, 0.9, 5, g.REMOTE)]
    b = [GenderRecord("Bob", MAN, 0.95, 5, g.REMOTE)]
    base = GenderCache({})
    assert base.merged(a).merged(b) == base.merged(b).merged(a)
    newer = GenderRecord("Ann", WOMAN, 0.99, 50, g.REMOTE)
    assert base.merged(a).merged([newer]).lookup("Ann") == newer


def test_cache_file_round_trip(tmp_path):
    cache = cache_of(GenderRecord("Ann", WOMAN, 0.9, 5, g.REMOTE), GenderRecord("Ann", MAN, 0.6, 2, g.BABY_NAMES))
    p = tmp_path / "name_cache.csv"
    g.save_cache(cache, p)
    assert g.load_cache(p) == cache


def test_fallback_rules():
    table = g.baby_names_table([("Lee", "F", 60), ("Lee", "F", 30), ("Lee", "M", 10)])
    recs = [GenderRecord("Lee", UNKNOWN, 0.0, 0, g.REMOTE),
            GenderRecord("Ann", WOMAN, 0.8, 3, g.REMOTE),
            GenderRecord("Zed", UNKNOWN, 0.0, 0, g.REMOTE)]
    out = g.apply_fallback(recs, table)
    assert (out[0].label, out[0].probability, out[0].source) == (WOMAN, 0.9, g.BABY_NAMES)
    assert out[1] == recs[1]
    assert out[2] == recs[2]


def test_fetch_remote_empty_makes_no_call():
    stub = g.StubProvider({})
    assert g.fetch_remote(set(), provider=stub) == []
    assert stub.calls == 0


def test_fetch_remote_null_gender():
    stub = g.StubProvider({"Quin": {"name": "Quin", "gender": None, "probability": 0.0, "count": 0}})
    (rec,) = g.fetch_remote({"Quin"}, provider=stub)
    assert rec.label == UNKNOWN


class _Handler(BaseHTTPRequestHandler):
    payloads = {}
    throttle = 0
    seen = []

    def do_GET(self):
        q = parse_qs(urlparse(self.path).query)
        _Handler.seen.append(q)
        if _Handler.throttle > 0:
            _Handler.throttle -= 1
            self.send_response(429)
            self.end_headers()
            return
        body = json.dumps([self.payloads.get(n, {"name": n, "gender": None, "probability": 0, "count": 0})
                           for n in q.get("name[]", [])]).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    _Handler.payloads = {
        "Ann": {"name": "Ann", "gender": "female", "probability": 0.98, "count": 1200},
        "Bob": {"name": "Bob", "gender": "male", "probability": 0.99, "count": 900},
        "Sky": {"name": "Sky", "gender": None, "probability": 0.0, "count": 0},
    }
    _Handler.throttle = 0
    _Handler.seen = []
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/"
    srv.shutdown()


def test_fetch_remote_http_stub(stub_server, tmp_path):
    cache_path = tmp_path / "name_cache.csv"
    recs = g.fetch_remote({"Ann", "Bob", "Sky"}, stub_server, "KEY", cache_path=cache_path)
    assert [(r.name, r.label, r.probability, r.count) for r in recs] == [
        ("Ann", WOMAN, 0.98, 1200), ("Bob", MAN, 0.99, 900), ("Sky", UNKNOWN, 0.0, 0)]
    assert _Handler.seen[0]["apikey"] == ["KEY"]
    # merged into the cache file so later runs need no network
    cache = g.load_cache(cache_path)
    assert g.infer_gender("Ann", cache) == (WOMAN, 0.98)


def test_rate_limit_retries_then_succeeds(stub_server):
    _Handler.throttle = 2
    sleeps = []
    provider = g.HttpGenderProvider(stub_server, sleep=sleeps.append, backoff=0.1)
    recs = g.fetch_remote({"Ann"}, provider=provider)
    assert recs[0].label == WOMAN
    assert sleeps == [0.1, 0.2]


def test_rate_limit_bounded(stub_server):
    _Handler.throttle = 10
    provider = g.HttpGenderProvider(stub_server, max_attempts=3, sleep=lambda s: None)
    with pytest.raises(RateLimited):
        g.fetch_remote({"Ann"}, provider=provider)
    assert provider.requests_made == 3


def test_unreachable_provider_falls_through():
    regs = [CardRegistration("C1", "lee", True), CardRegistration("C2", None, False)]
    table = g.baby_names_table([("Lee", "M", 70), ("Lee", "F", 30)])

    def remote(names):
        raise ProviderUnreachable("down")

    cards, summary, _ = g.assign_card_genders(regs, GenderCache({}), baby_names=table, remote=remote)
    assert [(c.card_id, c.label) for c in cards] == [("C1", MAN), ("C2", UNKNOWN)]
    assert summary.resolved_by_fallback == 1 and summary.resolved_by_remote == 0


def test_http_unreachable():
    with pytest.raises(ProviderUnreachable):
        g.fetch_remote({"Ann"}, "http://127.0.0.1:9/")


def test_validation_all_agree():
    rep = g.validate_inference([(WOMAN, WOMAN, "x"), (MAN, MAN, "x"), (MAN, MAN, "y")])
    assert all(c.error_pct == 0 for c in rep.cells.values())
    assert rep.accuracy == 1.0


def test_validation_table_a1_cell():
    pairs = [(MAN, WOMAN, "White")] * 95 + [(WOMAN, WOMAN, "White")] * (1289 - 95) + [(UNKNOWN, WOMAN, "White")] * 4
    cell = g.validate_inference(pairs).cells[(WOMAN, "White")]
    assert (cell.misclassifications, cell.total, cell.unknown) == (95, 1289, 4)
    assert round(cell.error_pct, 2) == 7.37
