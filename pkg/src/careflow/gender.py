"""First-name gender inference backed by a local name cache.

Names are normalized, looked up in a CSV cache (optionally refreshed from a
remote provider) and names still unresolved fall back to a baby-names count
table. ``validate_inference`` scores inferred labels against self-reported
ones.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

from .errors import MalformedRow, ProviderUnreachable, RateLimited
from .ingest import CardRegistration, _open_csv, _require_columns

logger = logging.getLogger(__name__)

WOMAN, MAN, UNKNOWN = "Woman", "Man", "Unknown"
LABELS = (WOMAN, MAN, UNKNOWN)
REMOTE, BABY_NAMES, MANUAL = "RemoteProvider", "BabyNames", "Manual"
SOURCES = (REMOTE, BABY_NAMES, MANUAL)
# lookup precedence when a name has records from several sources
_SOURCE_PRIORITY = {MANUAL: 0, REMOTE: 1, BABY_NAMES: 2}
DEFAULT_CUTOFF = 0.51
CACHE_COLUMNS = ("name", "label", "probability", "count", "source")

_GENDER_ALIASES = {
    "female": WOMAN, "f": WOMAN, "woman": WOMAN, "women": WOMAN,
    "male": MAN, "m": MAN, "man": MAN, "men": MAN,
}


def _case_first(ch: str) -> str:
    up = ch.upper()
    return up if len(up) == 1 else ch


def _case_rest(ch: str) -> str:
    low = ch.lower()
    return low if len(low) == 1 else ch


def normalize_name(raw: str | None) -> str:
    """Canonical form of a first name; ``""`` when nothing usable is left.

    Whitespace is dropped everywhere, digit-only strings are discarded and
    every hyphen-separated part is capitalized:

    >>> normalize_name("  mARy ann ")
    'Maryann'
    >>> normalize_name("anne-marie")
    'Anne-Marie'
    """
    if raw is None:
        return ""
    s = "".join(ch for ch in raw if not ch.isspace())
    if not s or s.isdigit():
        return ""
    parts = []
    for token in s.split("-"):
        if token:
            token = _case_first(token[0]) + "".join(_case_rest(c) for c in token[1:])
        parts.append(token)
    return "-".join(parts)


@dataclass(frozen=True)
class GenderRecord:
    name: str
    label: str
    probability: float
    count: int
    source: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"bad label {self.label!r}")
        if self.source not in SOURCES:
            raise ValueError(f"bad source {self.source!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability out of range: {self.probability}")
        if self.count < 0:
            raise ValueError("count must be non-negative")


@dataclass(frozen=True)
class GenderCache:
    """Immutable name cache; ``merged`` returns a new snapshot."""

    records: Mapping[tuple[str, str], GenderRecord] = field(default_factory=dict)

    def lookup(self, name: str) -> GenderRecord | None:
        best = None
        for source in (MANUAL, REMOTE, BABY_NAMES):
            rec = self.records.get((name, source))
            if rec is not None:
                best = rec
                break
        return best

    def merged(self, new: Iterable[GenderRecord]) -> "GenderCache":
        out = dict(self.records)
        for rec in new:
            out[(rec.name, rec.source)] = rec
        return GenderCache(out)

    def names(self) -> set[str]:
        return {name for name, _ in self.records}

    def __len__(self) -> int:
        return len(self.records)


def load_cache(path: str | os.PathLike) -> GenderCache:
    p = os.fspath(path)
    if not os.path.exists(p):
        return GenderCache({})
    recs: dict[tuple[str, str], GenderRecord] = {}
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), CACHE_COLUMNS, p)
        for row in reader:
            if not row:
                continue
            try:
                rec = GenderRecord(
                    row[idx["name"]],
                    row[idx["label"]],
                    float(row[idx["probability"]]),
                    int(row[idx["count"]]),
                    row[idx["source"]],
                )
            except (ValueError, IndexError) as exc:
                raise MalformedRow(str(exc), p, reader.line_num) from None
            recs[(rec.name, rec.source)] = rec
    return GenderCache(recs)


def save_cache(cache: GenderCache, path: str | os.PathLike) -> None:
    """Write atomically (temp file + rename) so readers never see a partial file."""
    p = os.fspath(path)
    d = os.path.dirname(os.path.abspath(p))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".name_cache.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CACHE_COLUMNS)
            for key in sorted(cache.records):
                r = cache.records[key]
                w.writerow((r.name, r.label, repr(r.probability), r.count, r.source))
        os.replace(tmp, p)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def infer_gender(name: str, cache: GenderCache, cutoff: float = DEFAULT_CUTOFF) -> tuple[str, float]:
    """Label from the highest-priority source that clears ``cutoff``.

    A manual entry is final. Otherwise an undecided provider answer does not
    hide a decisive baby-names record for the same name.
    """
    if not 0.5 < cutoff <= 1.0:
        raise ValueError("cutoff must be in (0.5, 1]")
    if not name:
        return UNKNOWN, 0.0
    manual = cache.records.get((name, MANUAL))
    candidates = [manual] if manual is not None else [cache.records.get((name, s)) for s in (REMOTE, BABY_NAMES)]
    found = [r for r in candidates if r is not None]
    for rec in found:
        if rec.label != UNKNOWN and rec.probability >= cutoff:
            return rec.label, rec.probability
    return UNKNOWN, (found[0].probability if found else 0.0)


# -- remote provider ------------------------------------------------------------


def _record_from_payload(item: Mapping, source: str = REMOTE) -> GenderRecord:
    name = normalize_name(str(item.get("name") or ""))
    gender = item.get("gender")
    label = _GENDER_ALIASES.get(str(gender).lower()) if gender is not None else None
    count = int(item.get("count") or 0)
    if label is None:
        return GenderRecord(name, UNKNOWN, 0.0, count, source)
    prob = float(item.get("probability") or 0.0)
    return GenderRecord(name, label, min(max(prob, 0.0), 1.0), count, source)


class HttpGenderProvider:
    """Client for a Genderize-style endpoint.

    ``GET url?name[]=a&name[]=b&apikey=K`` returning a JSON array of
    ``{name, gender, probability, count}``. HTTP 429 is retried with
    exponential backoff up to ``max_attempts``.
    """

    def __init__(self, url: str, api_key: str | None = None, batch_size: int = 10,
                 max_attempts: int = 4, backoff: float = 0.5, timeout: float = 10.0,
                 sleep: Callable[[float], None] = time.sleep):
        self.url = url
        self.api_key = api_key
        self.batch_size = batch_size
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        self._sleep = sleep
        self.requests_made = 0

    def _request(self, names: Sequence[str]) -> list[dict]:
        params = [("name[]", n) for n in names]
        if self.api_key:
            params.append(("apikey", self.api_key))
        url = self.url + ("&" if "?" in self.url else "?") + urllib.parse.urlencode(params)
        for attempt in range(self.max_attempts):
            self.requests_made += 1
            try:
                with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                if exc.code == 429:
                    if attempt + 1 < self.max_attempts:
                        self._sleep(self.backoff * 2**attempt)
                        continue
                    raise RateLimited(f"rate limited after {self.max_attempts} attempts") from exc
                raise ProviderUnreachable(f"HTTP {exc.code} from provider") from exc
            except (urllib.error.URLError, OSError, ValueError) as exc:
                raise ProviderUnreachable(str(exc)) from exc
            if isinstance(payload, dict):
                payload = [payload]
            return list(payload)
        raise RateLimited("rate limited")  # pragma: no cover

    def query(self, names: Sequence[str]) -> list[dict]:
        out: list[dict] = []
        for i in range(0, len(names), self.batch_size):
            out.extend(self._request(names[i:i + self.batch_size]))
        return out


class StubProvider:
    """In-memory provider returning canned payloads; used by tests."""

    def __init__(self, payloads: Mapping[str, Mapping]):
        self.payloads = payloads
        self.calls = 0

    def query(self, names: Sequence[str]) -> list[dict]:
        self.calls += 1
        return [dict(self.payloads.get(n, {"name": n, "gender": None, "probability": 0.0, "count": 0}))
                for n in names]


def fetch_remote(names: Iterable[str], provider_url: str | None = None, api_key: str | None = None,
                 *, provider=None, cache_path: str | os.PathLike | None = None) -> list[GenderRecord]:
    """Query the provider for ``names`` and merge the answers into the cache file.

    Returns one record per queried name; names the provider does not know come
    back as Unknown. Raises ProviderUnreachable or RateLimited.
    """
    unique = sorted({n for n in names if n})
    if not unique:
        return []
    if provider is None:
        if not provider_url:
            raise ProviderUnreachable("no provider configured")
        provider = HttpGenderProvider(provider_url, api_key)
    by_name = {}
    for item in provider.query(unique):
        rec = _record_from_payload(item)
        by_name[rec.name] = rec
    records = [by_name.get(n, GenderRecord(n, UNKNOWN, 0.0, 0, REMOTE)) for n in unique]
    if cache_path is not None:
        save_cache(load_cache(cache_path).merged(records), cache_path)
    return records


# -- baby names fallback ----------------------------------------------------------


def load_baby_names(path: str | os.PathLike) -> dict[str, dict[str, int]]:
    """Summed counts per normalized name and label, across all rows (all years)."""
    p = os.fspath(path)
    table: dict[str, dict[str, int]] = {}
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), ("name", "gender", "count"), p)
        for row in reader:
            if not row:
                continue
            try:
                name = normalize_name(row[idx["name"]])
                label = _GENDER_ALIASES.get(row[idx["gender"]].strip().lower())
                count = int(row[idx["count"]])
            except (ValueError, IndexError):
                raise MalformedRow("bad baby-names row", p, reader.line_num) from None
            if label is None or count < 0:
                raise MalformedRow("bad baby-names row", p, reader.line_num)
            if name:
                bucket = table.setdefault(name, {})
                bucket[label] = bucket.get(label, 0) + count
    return table


def baby_names_table(rows: Iterable[tuple[str, str, int]]) -> dict[str, dict[str, int]]:
    table: dict[str, dict[str, int]] = {}
    for name, gender, count in rows:
        label = _GENDER_ALIASES.get(gender.lower(), gender)
        bucket = table.setdefault(normalize_name(name), {})
        bucket[label] = bucket.get(label, 0) + int(count)
    return table


def apply_fallback(records: Iterable[GenderRecord], table: Mapping[str, Mapping[str, int]]) -> list[GenderRecord]:
    out = []
    for rec in records:
        counts = table.get(rec.name) if rec.label == UNKNOWN else None
        if counts:
            w, m = counts.get(WOMAN, 0), counts.get(MAN, 0)
            total = w + m
            if total > 0 and w != m:
                label, top = (WOMAN, w) if w > m else (MAN, m)
                rec = GenderRecord(rec.name, label, top / total, total, BABY_NAMES)
        out.append(rec)
    return out


# -- card-level assignment -------------------------------------------------------


@dataclass(frozen=True)
class CardGender:
    card_id: str
    label: str
    probability: float
    registered: bool


@dataclass
class InferenceSummary:
    unique_names: int = 0
    resolved_by_cache: int = 0
    resolved_by_remote: int = 0
    resolved_by_fallback: int = 0
    unresolved: int = 0
    cards: dict[str, int] = field(default_factory=dict)


def assign_card_genders(registrations: Iterable[CardRegistration], cache: GenderCache,
                        cutoff: float = DEFAULT_CUTOFF,
                        baby_names: Mapping[str, Mapping[str, int]] | None = None,
                        remote: Callable[[set[str]], list[GenderRecord]] | None = None,
                        ) -> tuple[list[CardGender], InferenceSummary, GenderCache]:
    """Label every card; returns labels, a resolution summary and the updated cache.

    Only names absent from the cache are sent to ``remote``. Names still
    Unknown afterwards go through the baby-names fallback.
    """
    regs = list(registrations)
    canonical = {r.card_id: normalize_name(r.first_name_raw) if r.registered else "" for r in regs}
    names = {n for n in canonical.values() if n}
    summary = InferenceSummary(unique_names=len(names))

    missing = {n for n in names if cache.lookup(n) is None}
    summary.resolved_by_cache = len(names) - len(missing)
    if remote is not None and missing:
        try:
            fetched = remote(missing)
        except (ProviderUnreachable, RateLimited) as exc:
            logger.warning("remote provider unavailable, using cache and fallback only: %s", exc)
            fetched = []
        cache = cache.merged(fetched)
        summary.resolved_by_remote = sum(1 for r in fetched if r.label != UNKNOWN)

    if baby_names:
        pending = []
        for n in sorted(names):
            label, _ = infer_gender(n, cache, cutoff)
            if label == UNKNOWN:
                rec = cache.lookup(n) or GenderRecord(n, UNKNOWN, 0.0, 0, REMOTE)
                pending.append(replace(rec, label=UNKNOWN))
        filled = [r for r in apply_fallback(pending, baby_names) if r.source == BABY_NAMES]
        cache = cache.merged(filled)
        summary.resolved_by_fallback = sum(1 for r in filled if infer_gender(r.name, cache, cutoff)[0] != UNKNOWN)

    out = []
    resolved: set[str] = set()
    for r in regs:
        name = canonical[r.card_id]
        label, prob = infer_gender(name, cache, cutoff) if name else (UNKNOWN, 0.0)
        if label != UNKNOWN:
            resolved.add(name)
        out.append(CardGender(r.card_id, label, prob, r.registered))
        summary.cards[label] = summary.cards.get(label, 0) + 1
    summary.unresolved = len(names - resolved)
    out.sort(key=lambda c: c.card_id)
    return out, summary, cache


CARD_GENDER_COLUMNS = ("card_id", "label", "probability", "registered")


def write_card_genders(cards: Iterable[CardGender], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CARD_GENDER_COLUMNS)
        for c in cards:
            w.writerow((c.card_id, c.label, repr(c.probability), int(c.registered)))


def load_card_genders(path: str | os.PathLike) -> dict[str, CardGender]:
    p = os.fspath(path)
    out = {}
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), CARD_GENDER_COLUMNS, p)
        for row in reader:
            if not row:
                continue
            try:
                c = CardGender(row[idx["card_id"]], row[idx["label"]], float(row[idx["probability"]]),
                               row[idx["registered"]] == "1")
            except (ValueError, IndexError):
                raise MalformedRow("bad card gender row", p, reader.line_num) from None
            if c.label not in LABELS:
                raise MalformedRow(f"bad label {c.label!r}", p, reader.line_num)
            out[c.card_id] = c
    return out


# -- validation -----------------------------------------------------------------


@dataclass(frozen=True)
class ValidationCell:
    misclassifications: int
    total: int
    unknown: int

    @property
    def error_pct(self) -> float:
        return 100.0 * self.misclassifications / self.total if self.total else 0.0


@dataclass(frozen=True)
class ValidationReport:
    cells: dict[tuple[str, str], ValidationCell]

    @property
    def scored(self) -> int:
        return sum(c.total for c in self.cells.values())

    @property
    def misclassified(self) -> int:
        return sum(c.misclassifications for c in self.cells.values())

    @property
    def excluded_unknown(self) -> int:
        return sum(c.unknown for c in self.cells.values())

    @property
    def error_rate(self) -> float:
        return self.misclassified / self.scored if self.scored else 0.0

    @property
    def accuracy(self) -> float:
        return 1.0 - self.error_rate

    def error_ci(self, z: float = 1.96) -> tuple[float, float]:
        """Normal-approximation binomial interval on the overall error rate."""
        n = self.scored
        if n == 0:
            return 0.0, 0.0
        p = self.error_rate
        h = z * math.sqrt(p * (1 - p) / n)
        return max(0.0, p - h), min(1.0, p + h)


def validate_inference(pairs: Iterable[tuple[str, str, str]]) -> ValidationReport:
    """Score (inferred, self_reported, group) triples.

    Pairs inferred as Unknown are left out of the error rates and counted in
    the cell's ``unknown`` field.
    """
    acc: dict[tuple[str, str], list[int]] = {}
    for inferred, reported, group in pairs:
        cell = acc.setdefault((reported, group), [0, 0, 0])
        if inferred == UNKNOWN:
            cell[2] += 1
            continue
        cell[1] += 1
        if inferred != reported:
            cell[0] += 1
    return ValidationReport({k: ValidationCell(*v) for k, v in sorted(acc.items())})
