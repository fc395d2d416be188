"""Chi-square independence test, Welch's t-test and a random-intercept mixed model.

The special functions behind the p-values (regularized incomplete gamma and
beta) are implemented here so results do not depend on a stats package.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .errors import DegenerateMargin, InsufficientSample, SingularDesign
from .ingest import Journey

logger = logging.getLogger(__name__)

_EPS = 1e-15
_TINY = 1e-300
_MAX_ITER = 10_000


# -- special functions ----------------------------------------------------------


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def _gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    # modified Lentz on the continued fraction for Q(a, x)
    b = x + 1 - a
    c = 1 / _TINY
    d = 1 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2
        d = an * d + b
        d = _TINY if abs(d) < _TINY else d
        c = b + an / c
        c = _TINY if abs(c) < _TINY else c
        d = 1 / d
        delta = d * c
        h *= delta
        if abs(delta - 1) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1) / (a + b + 2):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1 - x) / b


def _beta_cf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1, a - 1
    c = 1.0
    d = 1 - qab * x / qap
    d = 1 / (_TINY if abs(d) < _TINY else d)
    h = d
    for m in range(1, _MAX_ITER):
        m2 = 2 * m
        for aa in (m * (b - m) * x / ((qam + m2) * (a + m2)), -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))):
            d = 1 + aa * d
            d = 1 / (_TINY if abs(d) < _TINY else d)
            c = 1 + aa / c
            c = _TINY if abs(c) < _TINY else c
            h *= d * c
        if abs(d * c - 1) < _EPS:
            break
    return h


def chi2_sf(x: float, df: float) -> float:
    return gammaincc(df / 2.0, x / 2.0)


def t_sf_two_sided(t: float, df: float) -> float:
    if t == 0:
        return 1.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


# -- chi-square -------------------------------------------------------------------


@dataclass(frozen=True)
class ContingencyTable:
    counts: tuple[tuple[float, ...], ...]
    row_labels: tuple[str, ...] = ()
    col_labels: tuple[str, ...] = ()

    def __post_init__(self):
        widths = {len(r) for r in self.counts}
        if len(self.counts) < 2 or len(widths) != 1 or widths.pop() < 2:
            raise ValueError("a contingency table needs at least 2 rows and 2 equal-length columns")
        if any(v < 0 or math.isnan(v) for r in self.counts for v in r):
            raise ValueError("counts must be non-negative")


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    df: int
    p_value: float
    expected: tuple[tuple[float, ...], ...]
    min_expected: float


def chi_square(table: ContingencyTable | Sequence[Sequence[float]]) -> ChiSquareResult:
    """Pearson test of independence on an r x c table.

    Expected counts come from the margins. A warning (not an error) is issued
    when any expected count is below 5.
    """
    if not isinstance(table, ContingencyTable):
        table = ContingencyTable(tuple(tuple(float(v) for v in r) for r in table))
    obs = table.counts
    rows = [math.fsum(r) for r in obs]
    cols = [math.fsum(c) for c in zip(*obs)]
    n = math.fsum(rows)
    if any(r == 0 for r in rows) or any(c == 0 for c in cols):
        raise DegenerateMargin("a row or column of the table sums to zero")
    expected = tuple(tuple(r * c / n for c in cols) for r in rows)
    stat = math.fsum((o - e) ** 2 / e for ro, re in zip(obs, expected) for o, e in zip(ro, re))
    df = (len(rows) - 1) * (len(cols) - 1)
    min_e = min(min(r) for r in expected)
    if min_e < 5:
        warnings.warn(f"expected count {min_e:.3g} < 5; the chi-square approximation may be poor", stacklevel=2)
    return ChiSquareResult(stat, df, chi2_sf(stat, df), expected, min_e)


# -- Welch ------------------------------------------------------------------------


@dataclass(frozen=True)
class WelchResult:
    mean_a: float
    mean_b: float
    diff: float
    t: float
    df: float
    p_value: float


def welch_t(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise InsufficientSample("each sample needs at least 2 values")
    ma, mb = math.fsum(a) / na, math.fsum(b) / nb
    va = math.fsum((x - ma) ** 2 for x in a) / (na - 1)
    vb = math.fsum((x - mb) ** 2 for x in b) / (nb - 1)
    if va == 0 and vb == 0:
        raise InsufficientSample("both samples have zero variance")
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    t = (ma - mb) / math.sqrt(se2)
    df = se2 * se2 / (sa * sa / (na - 1) + sb * sb / (nb - 1))
    return WelchResult(ma, mb, ma - mb, t, df, t_sf_two_sided(t, df))


def moments(xs: Sequence[float]) -> tuple[float, float]:
    """Sample skewness and excess kurtosis (population moments), a cheap normality screen."""
    x = np.asarray(xs, dtype=float)
    d = x - x.mean()
    m2 = float(np.mean(d ** 2))
    if m2 == 0:
        return 0.0, 0.0
    return float(np.mean(d ** 3)) / m2 ** 1.5, float(np.mean(d ** 4)) / m2 ** 2 - 3.0


# -- random-intercept mixed model ---------------------------------------------------


@dataclass(frozen=True)
class MixedModelFit:
    beta0: float
    beta1: float
    sigma_u2: float
    sigma_e2: float
    std_errors: tuple[float, float]
    converged: bool
    iterations: int
    loglik: float
    loglik_trace: tuple[float, ...] = field(default=(), repr=False)
    n_groups: int = 0
    n_obs: int = 0


class _Design:
    def __init__(self, groups: Sequence[Hashable], flags: Sequence[int], y: Sequence[float]):
        keys = {}
        gid = np.fromiter((keys.setdefault(g, len(keys)) for g in groups), dtype=np.int64, count=len(groups))
        self.g = gid
        self.x = np.asarray(flags, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.k = len(keys)
        self.n = np.bincount(gid, minlength=self.k).astype(float)
        self.N = len(self.y)
        self.X = np.column_stack([np.ones(self.N), self.x])
        self.xtx = self.X.T @ self.X
        # per-group sums of the design columns, used by the GLS information
        self.gx = np.bincount(gid, weights=self.x, minlength=self.k)

    def group_sum(self, v: np.ndarray) -> np.ndarray:
        return np.bincount(self.g, weights=v, minlength=self.k)


def _loglik(d: _Design, beta: np.ndarray, su2: float, se2: float) -> float:
    r = d.y - d.X @ beta
    s = d.group_sum(r)
    ss = d.group_sum(r * r)
    lam = se2 + d.n * su2
    logdet = (d.n - 1) * math.log(se2) + np.log(lam)
    quad = (ss - su2 / lam * s * s) / se2
    return float(-0.5 * (d.N * math.log(2 * math.pi) + logdet.sum() + quad.sum()))


def _gls_information(d: _Design, su2: float, se2: float) -> tuple[np.ndarray, np.ndarray]:
    """X'V^-1 X and the per-group X_i'1 sums, with V_i = se2 I + su2 11'."""
    gamma = su2 / (se2 + d.n * su2)
    ones_x = np.column_stack([d.n, d.gx])
    return (d.xtx - (ones_x * gamma[:, None]).T @ ones_x) / se2, gamma


def _gls_beta(d: _Design, su2: float, se2: float) -> np.ndarray:
    info, gamma = _gls_information(d, su2, se2)
    sy = d.group_sum(d.y)
    ones_x = np.column_stack([d.n, d.gx])
    rhs = (d.X.T @ d.y - ones_x.T @ (gamma * sy)) / se2
    return np.linalg.solve(info, rhs)


def fit_random_intercept(observations: Iterable[tuple[Hashable, int, float]], tol: float = 1e-8,
                         max_iter: int = 500) -> MixedModelFit:
    """ML fit of y_ij = b0 + b1 * flag_ij + u_i + e_ij by expectation-maximization.

    Stops when every parameter moves less than ``tol`` in one step, or after
    ``max_iter`` steps with ``converged=False``. The log-likelihood is checked
    after each step and must not decrease. Standard errors are for the fixed
    effects, from the GLS information at the final variance components.
    """
    obs = list(observations)
    if not obs:
        raise InsufficientSample("no observations")
    groups, flags, ys = zip(*obs)
    if any(f not in (0, 1) for f in flags):
        raise ValueError("moc_flag must be 0 or 1")
    d = _Design(groups, flags, ys)
    if d.x.min() == d.x.max():
        raise SingularDesign("moc_flag is constant; the flag effect is not identifiable")

    beta = np.linalg.solve(d.xtx, d.X.T @ d.y)
    r = d.y - d.X @ beta
    total = float(r @ r) / d.N
    gm = d.group_sum(r) / d.n
    su2 = max(float(np.mean(gm ** 2)) - total / float(np.mean(d.n)), 0.1 * total) if d.k > 1 else 0.1 * total
    se2 = max(total - su2, 0.1 * total, _TINY)
    ll = _loglik(d, beta, su2, se2)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # CM step for the fixed effects: exact GLS maximizer at the current variances.
        # Plain EM crawls along the intercept when groups are large; this keeps the
        # likelihood monotone (ECME) while converging in far fewer iterations.
        new_beta = _gls_beta(d, su2, se2)
        # E step: posterior of each u_i given the new fixed effects
        v = 1.0 / (d.n / se2 + 1.0 / su2) if su2 > 0 else np.zeros(d.k)
        m = v * d.group_sum(d.y - d.X @ new_beta) / se2
        # M step for the variance components
        resid = d.y - d.X @ new_beta - m[d.g]
        new_se2 = (float(resid @ resid) + float(d.n @ v)) / d.N
        new_su2 = float(np.mean(m * m + v))
        step = max(float(np.max(np.abs(new_beta - beta))), abs(new_su2 - su2), abs(new_se2 - se2))
        beta, su2, se2 = new_beta, new_su2, new_se2
        ll = _loglik(d, beta, su2, se2)
        if ll < trace[-1] - 1e-9 * max(1.0, abs(trace[-1])):
            raise ArithmeticError(f"EM log-likelihood decreased at iteration {it}: {trace[-1]!r} -> {ll!r}")
        trace.append(ll)
        if step < tol:
            converged = True
            break
    if not converged:
        logger.warning("NotConverged: EM stopped after %d iterations", it)

    cov = np.linalg.inv(_gls_information(d, su2, se2)[0])
    se = (math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1]))
    return MixedModelFit(float(beta[0]), float(beta[1]), su2, se2, se, converged, it, ll, tuple(trace), d.k, d.N)


def simulate_random_intercept(n_groups: int, per_group: int, beta0: float, beta1: float, sigma_u2: float,
                              sigma_e2: float, rng: np.random.Generator,
                              flag_share: float = 0.5, exact_moments: bool = True) -> list[tuple[int, int, float]]:
    """Draw observations from the random-intercept model.

    Flags are assigned so every group holds ``round(flag_share * per_group)``
    flagged observations, which keeps the flag uncorrelated with the group effects.
    With ``exact_moments`` the group effects are centered and rescaled so
    their empirical variance is exactly ``sigma_u2``; with a few hundred
    groups a plain draw is off by several percent on its own.
    """
    u = rng.normal(0.0, 1.0, n_groups)
    if exact_moments and n_groups > 1:
        u = (u - u.mean()) / u.std()
    u = u * math.sqrt(sigma_u2)
    n1 = round(flag_share * per_group)
    out = []
    for i in range(n_groups):
        flags = np.array([1] * n1 + [0] * (per_group - n1))
        rng.shuffle(flags)
        e = rng.normal(0.0, math.sqrt(sigma_e2), per_group)
        for f, eps in zip(flags, e):
            out.append((i, int(f), float(beta0 + beta1 * f + u[i] + eps)))
    return out


# -- convenience metrics for MoC vs non-MoC journeys ----------------------------------

MAX_SPEED_MPH = 25.0
MAX_IN_VEHICLE_MIN = 180.0
_MPS_TO_MPH = 3600.0 / 1609.344


@dataclass(frozen=True)
class ConvenienceRow:
    od_pair: str
    moc: bool
    in_vehicle_min: float
    transfers: int


@dataclass
class ConvenienceData:
    rows: list[ConvenienceRow]
    dropped_outliers: int = 0
    dropped_unpaired: int = 0
    dropped_incomplete: int = 0

    def samples(self, metric: str) -> tuple[list[float], list[float]]:
        """(MoC, non-MoC) values of ``in_vehicle_min`` or ``transfers``."""
        moc = [float(getattr(r, metric)) for r in self.rows if r.moc]
        non = [float(getattr(r, metric)) for r in self.rows if not r.moc]
        return moc, non

    def mixed_observations(self) -> list[tuple[str, int, float]]:
        return [(r.od_pair, int(r.moc), r.in_vehicle_min) for r in self.rows]


def moc_convenience(journeys: Iterable[Journey], moc_journeys: Iterable[tuple[str, str]],
                    max_speed_mph: float = MAX_SPEED_MPH,
                    max_minutes: float = MAX_IN_VEHICLE_MIN) -> ConvenienceData:
    """In-vehicle time and transfers of MoC and non-MoC journeys between shared O-D pairs.

    ``moc_journeys`` holds (card_id, journey_id) keys of journeys with a MoC
    tag. Journeys whose last stage has no inferred alighting are dropped, as
    are those above ``max_minutes`` or faster than ``max_speed_mph``. The
    speed screen is skipped for journeys without distances. Only O-D pairs
    that keep both kinds of journey are returned.
    """
    tagged = set(moc_journeys)
    kept: list[ConvenienceRow] = []
    out = ConvenienceData([])
    for j in journeys:
        if any(s.alight_stop is None or s.alight_time is None for s in j.stages):
            out.dropped_incomplete += 1
            continue
        seconds = sum(s.alight_time - s.board_time for s in j.stages)
        minutes = seconds / 60.0
        dists = [s.distance_m for s in j.stages]
        speed = None
        if all(x is not None for x in dists) and seconds > 0:
            speed = sum(dists) / seconds * _MPS_TO_MPH
        if minutes > max_minutes or (speed is not None and speed > max_speed_mph):
            out.dropped_outliers += 1
            continue
        od = f"{j.stages[0].board_stop}>{j.stages[-1].alight_stop}"
        kept.append(ConvenienceRow(od, (j.card_id, j.journey_id) in tagged, minutes, len(j.stages) - 1))
    kinds: dict[str, set[bool]] = {}
    for r in kept:
        kinds.setdefault(r.od_pair, set()).add(r.moc)
    for r in kept:
        if len(kinds[r.od_pair]) == 2:
            out.rows.append(r)
        else:
            out.dropped_unpaired += 1
    out.rows.sort(key=lambda r: (r.od_pair, not r.moc, r.in_vehicle_min, r.transfers))
    return out


def sample_rows(rows: Sequence, n: int | None, seed: int) -> list:
    """Uniform sample of ``n`` rows without replacement (all rows when n is None or too big)."""
    if n is None or n >= len(rows):
        return list(rows)
    idx = np.sort(np.random.default_rng(seed).choice(len(rows), size=n, replace=False))
    return [rows[i] for i in idx]
