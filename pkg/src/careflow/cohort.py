"""Active-user filtering and gender-balanced card sampling."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .gender import MAN, UNKNOWN, WOMAN, CardGender
from .ingest import Stage, _open_csv, _require_columns

logger = logging.getLogger(__name__)

DEFAULT_MIN_DAYS = 10


@dataclass
class CardActivity:
    """Per-card counters gathered in one pass over the stage stream."""

    dates: set = field(default_factory=set)
    journeys: set = field(default_factory=set)
    bus_journeys: set = field(default_factory=set)
    stages: int = 0
    bus_stages: int = 0


def collect_activity(stages: Iterable[Stage]) -> dict[str, CardActivity]:
    acts: dict[str, CardActivity] = {}
    for s in stages:
        a = acts.get(s.card_id)
        if a is None:
            a = acts[s.card_id] = CardActivity()
        a.dates.add(s.service_date)
        a.journeys.add(s.journey_id)
        a.stages += 1
        if s.mode == "Bus":
            a.bus_stages += 1
            a.bus_journeys.add(s.journey_id)
    return acts


@dataclass(frozen=True)
class CardProfile:
    card_id: str
    gender_label: str
    active_days: int
    registered: bool
    bus_stages: int = 0


def build_profiles(activity: Mapping[str, CardActivity], genders: Mapping[str, CardGender]) -> list[CardProfile]:
    out = []
    for card in sorted(activity):
        a = activity[card]
        g = genders.get(card)
        out.append(CardProfile(card, g.label if g else UNKNOWN, len(a.dates), bool(g and g.registered), a.bus_stages))
    return out


def filter_active(profiles: Iterable[CardProfile], min_days: int = DEFAULT_MIN_DAYS) -> list[CardProfile]:
    if min_days < 1:
        raise ValueError("min_days must be >= 1")
    return [p for p in profiles if p.active_days >= min_days]


@dataclass(frozen=True)
class FunnelRow:
    step: str
    cards: int
    journeys: int
    stages: int


def funnel(activity: Mapping[str, CardActivity], genders: Mapping[str, CardGender],
           min_days: int = DEFAULT_MIN_DAYS, sample: Iterable[str] | None = None) -> list[FunnelRow]:
    """Card/journey/stage counts after each filtering step.

    Rows after the bus filter count only bus journeys and bus stages.
    """
    def row(step, cards, bus_only):
        if bus_only:
            return FunnelRow(step, len(cards), sum(len(activity[c].bus_journeys) for c in cards),
                             sum(activity[c].bus_stages for c in cards))
        return FunnelRow(step, len(cards), sum(len(activity[c].journeys) for c in cards),
                         sum(activity[c].stages for c in cards))

    everyone = sorted(activity)
    active = [c for c in everyone if len(activity[c].dates) >= min_days]
    on_bus = [c for c in active if activity[c].bus_stages > 0]
    gendered = [c for c in on_bus if c in genders and genders[c].registered and genders[c].label != UNKNOWN]
    rows = [
        row("Full dataset", everyone, False),
        row(f"{min_days}+ active days", active, False),
        row("On bus", on_bus, True),
        row("Registered w/ gender inference", gendered, True),
    ]
    if sample is not None:
        chosen = set(sample)
        rows.append(row("Balanced sample", [c for c in gendered if c in chosen], True))
    return rows


@dataclass(frozen=True)
class SampleResult:
    card_ids: tuple[str, ...]
    seed: int
    women: int
    men: int
    insufficient_men: bool = False


def balance_sample(profiles: Iterable[CardProfile], seed: int) -> SampleResult:
    """Keep every Woman card and an equal-size uniform draw of Man cards.

    When there are fewer men than women all men are kept and the result is
    flagged ``insufficient_men`` instead of raising.
    """
    profiles = list(profiles)
    women = sorted(p.card_id for p in profiles if p.gender_label == WOMAN)
    men = sorted(p.card_id for p in profiles if p.gender_label == MAN)
    if not women or not men:
        raise ValueError("balanced sampling needs at least one Woman and one Man card")
    short = len(men) < len(women)
    if short:
        logger.warning("InsufficientMen: %d men for %d women; keeping all men", len(men), len(women))
        drawn = men
    else:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(men), size=len(women), replace=False)
        drawn = [men[i] for i in sorted(idx)]
    return SampleResult(tuple(sorted(women + drawn)), seed, len(women), len(drawn), short)


@dataclass(frozen=True)
class StabilityReport:
    seeds: tuple[int, ...]
    mean: tuple[float, ...]
    spread: tuple[float, ...]

    @property
    def max_spread(self) -> float:
        finite = [s for s in self.spread if not math.isnan(s)]
        return max(finite) if finite else 0.0


def resample_stability(profiles: Sequence[CardProfile], metric: Callable[[frozenset], Sequence[float]],
                       k: int = 10, base_seed: int = 0, seeds: Sequence[int] | None = None) -> StabilityReport:
    """Rerun ``balance_sample`` with ``k`` seeds and summarize ``metric`` per bin.

    ``metric`` maps a sampled card set to a vector (NaN for empty bins).
    Spread is max minus min across runs, ignoring NaNs.
    """
    if seeds is None:
        if k < 2:
            raise ValueError("k must be >= 2")
        seeds = [base_seed + i for i in range(k)]
    profiles = list(profiles)
    runs = np.array([metric(frozenset(balance_sample(profiles, s).card_ids)) for s in seeds], dtype=float)
    mean, spread = [], []
    for col in runs.T:
        ok = col[~np.isnan(col)]
        mean.append(float(ok.mean()) if ok.size else math.nan)
        spread.append(float(ok.max() - ok.min()) if ok.size else math.nan)
    return StabilityReport(tuple(seeds), tuple(mean), tuple(spread))


SAMPLE_COLUMNS = ("card_id", "label")


def write_sample(result: SampleResult, genders: Mapping[str, CardGender], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SAMPLE_COLUMNS)
        for c in result.card_ids:
            w.writerow((c, genders[c].label))


def load_sample(path: str | os.PathLike) -> dict[str, str]:
    p = os.fspath(path)
    out = {}
    with _open_csv(p) as f:
        reader = csv.reader(f)
        idx = _require_columns(next(reader, None), SAMPLE_COLUMNS, p)
        for row in reader:
            if row:
                out[row[idx["card_id"]]] = row[idx["label"]]
    return out
