"""Objective duration metrics and listening-test statistics."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import PAU_INTER, PAU_INTRA


class MetricError(ValueError):
    pass


class DegenerateTestError(MetricError):
    """The paired differences carry no information (all zero)."""


def _pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    r = np.asarray(ref, dtype=np.float64).ravel()
    if p.shape != r.shape:
        raise MetricError(f"length mismatch: {p.size} predictions vs {r.size} references")
    if p.size == 0:
        raise MetricError("metrics need at least one value")
    return p, r


def mse(pred, ref) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean((p - r) ** 2))


def mae(pred, ref) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean(np.abs(p - r)))


def r_squared(pred, ref) -> float:
    """Coefficient of determination; negative when worse than predicting the mean."""
    p, r = _pair(pred, ref)
    ss_tot = float(np.sum((r - r.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricError("R^2 is undefined for a constant reference")
    return 1.0 - float(np.sum((p - r) ** 2)) / ss_tot


# ---------------------------------------------------------------------------
# duration metrics


class DurationCategory(str, enum.Enum):
    NON_PAUSE = "non_pause"
    INTRA_PAUSE = "intra_pause"
    INTER_PAUSE = "inter_pause"

    @classmethod
    def of(cls, symbol: str) -> DurationCategory:
        if symbol == PAU_INTRA:
            return cls.INTRA_PAUSE
        if symbol == PAU_INTER:
            return cls.INTER_PAUSE
        return cls.NON_PAUSE


@dataclass(frozen=True)
class CategoryMetrics:
    count: int
    mse: float
    r2: float | None = None


@dataclass
class MetricsReport:
    """Per-category MSE; R^2 for inter-sentence pauses. Empty categories are absent."""

    categories: dict[DurationCategory, CategoryMetrics] = field(default_factory=dict)
    counts: dict[DurationCategory, int] = field(default_factory=dict)

    def get(self, category: DurationCategory) -> CategoryMetrics | None:
        return self.categories.get(category)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def duration_metrics(pred: Sequence[float], ref: Sequence[float], symbols: Sequence[str]) -> MetricsReport:
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if not (len(p) == len(r) == len(symbols)):
        raise MetricError(f"length mismatch: pred {len(p)}, ref {len(r)}, symbols {len(symbols)}")
    cats = np.array([DurationCategory.of(s).value for s in symbols])
    report = MetricsReport()
    for cat in DurationCategory:
        sel = cats == cat.value
        n = int(sel.sum())
        report.counts[cat] = n
        if n == 0:
            continue
        r2 = None
        if cat is DurationCategory.INTER_PAUSE and n >= 2 and np.ptp(r[sel]) > 0:
            r2 = r_squared(p[sel], r[sel])
        report.categories[cat] = CategoryMetrics(n, mse(p[sel], r[sel]), r2)
    return report


def pause_histogram(durations: Sequence[int], bin_width: int = 10) -> list[tuple[int, int]]:
    """Contiguous ``(bin_start, count)`` pairs from the lowest to the highest occupied bin."""
    if bin_width < 1:
        raise MetricError("bin_width must be >= 1")
    d = np.asarray(durations, dtype=np.int64)
    if d.size == 0:
        return []
    starts = (d // bin_width) * bin_width
    lo, hi = int(starts.min()), int(starts.max())
    edges = range(lo, hi + 1, bin_width)
    counts = {s: 0 for s in edges}
    for s in starts.tolist():
        counts[s] += 1
    return [(s, counts[s]) for s in edges]


def durations_in(category: DurationCategory, durations: Sequence[int], symbols: Sequence[str]) -> list[int]:
    return [int(d) for d, s in zip(durations, symbols) if DurationCategory.of(s) is category]


# ---------------------------------------------------------------------------
# distributions


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return regularized_beta(df / 2.0, 0.5, df / (df + t * t))


# ---------------------------------------------------------------------------
# listening tests


@dataclass(frozen=True)
class TTestResult:
    t: float
    p_value: float
    df: int
    mean_difference: float


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``a - b``.

    All-zero differences raise :class:`DegenerateTestError`; constant
    non-zero differences give an infinite statistic and ``p = 0``.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("paired t-test needs two equal-length 1-D samples")
    n = x.size
    if n < 2:
        raise MetricError("paired t-test needs at least two pairs")
    diff = x - y
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            raise DegenerateTestError("no difference: every paired difference is zero")
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1, mean)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_two_sided_p(t, n - 1), n - 1, mean)


def gap_reduction(s1: float, s2: float, ref: float) -> float:
    """Percent of the gap between system 2 and the reference closed by system 1."""
    if ref == s2:
        raise MetricError("gap reduction is undefined when the reference equals system 2")
    return 100.0 * (s1 - s2) / (ref - s2)


def preference_test(prefer_a: int, prefer_b: int) -> float:
    """Two-sided exact binomial sign test against 0.5."""
    n = prefer_a + prefer_b
    if prefer_a < 0 or prefer_b < 0 or n < 1:
        raise MetricError("preference counts must be non-negative with a positive total")
    k = min(prefer_a, prefer_b)
    tail = sum(math.comb(n, i) for i in range(k + 1))
    return min(1.0, 2 * tail / 2**n)


@dataclass
class MushraTable:
    """Scores indexed ``[rater, sample, system]``."""

    scores: np.ndarray
    raters: list[str]
    samples: list[str]
    systems: list[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        expected = (len(self.raters), len(self.samples), len(self.systems))
        if self.scores.shape != expected:
            raise MetricError(f"score array {self.scores.shape} does not match labels {expected}")
        if np.isnan(self.scores).any():
            raise MetricError("MUSHRA table has missing cells")
        if ((self.scores < 0) | (self.scores > 100)).any():
            raise MetricError("MUSHRA scores must lie in [0, 100]")

    def system(self, name: str) -> np.ndarray:
        try:
            return self.scores[:, :, self.systems.index(name)]
        except ValueError:
            raise MetricError(f"unknown system {name!r}; have {self.systems}") from None


@dataclass(frozen=True)
class MushraSummary:
    mean: float
    half_width: float
    n: int
    interval: str = "95% normal-approximation CI half-width (1.96 x standard error over all ratings)"


def mushra_summary(table: MushraTable, system: str) -> MushraSummary:
    ratings = table.system(system).ravel()
    if ratings.size == 0:
        raise MetricError("no ratings for system " + system)
    n = ratings.size
    half = 1.96 * float(ratings.std(ddof=1)) / math.sqrt(n) if n > 1 else math.nan
    return MushraSummary(float(ratings.mean()), half, n)


PAIRING_UNITS = ("rating", "sample", "rater")


def mushra_paired_test(table: MushraTable, system_a: str, system_b: str, unit: str = "rating") -> TTestResult:
    """Paired t-test between two systems, paired per rating, per sample mean or per rater mean."""
    a, b = table.system(system_a), table.system(system_b)
    if unit == "rating":
        return paired_t_test(a.ravel(), b.ravel())
    if unit == "sample":
        return paired_t_test(a.mean(axis=0), b.mean(axis=0))
    if unit == "rater":
        return paired_t_test(a.mean(axis=1), b.mean(axis=1))
    raise MetricError(f"unit must be one of {PAIRING_UNITS}")


def synthetic_mushra_table(
    system_means: dict[str, float],
    n_raters: int = 24,
    n_samples: int = 50,
    noise: float = 10.0,
    seed: int = 0,
) -> MushraTable:
    """Seeded fake ratings for exercising the statistics pipeline."""
    rng = np.random.default_rng(seed)
    rater_bias = rng.normal(0, noise / 2, (n_raters, 1, 1))
    sample_bias = rng.normal(0, noise / 2, (1, n_samples, 1))
    means = np.array(list(system_means.values()))[None, None, :]
    scores = means + rater_bias + sample_bias + rng.normal(0, noise, (n_raters, n_samples, len(system_means)))
    return MushraTable(
        np.clip(np.round(scores), 0, 100),
        [f"r{i:02d}" for i in range(n_raters)],
        [f"s{i:03d}" for i in range(n_samples)],
        list(system_means),
    )


# ---------------------------------------------------------------------------
# file formats

DURATION_FIELDS = ("utterance_id", "phoneme_index", "symbol", "pred", "ref")
MUSHRA_FIELDS = ("rater", "sample", "system", "score")


@dataclass
class DurationRows:
    utterance_ids: list[str]
    symbols: list[str]
    pred: np.ndarray
    ref: np.ndarray


def write_duration_csv(path: str | Path, rows: Iterable[tuple[str, int, str, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DURATION_FIELDS)
        for uid, idx, sym, pred, ref in rows:
            writer.writerow([uid, idx, sym, _fmt(pred), _fmt(ref)])


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def read_duration_csv(path: str | Path) -> DurationRows:
    uids, syms, pred, ref = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(DURATION_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise MetricError(f"{path}: missing columns {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                pred.append(float(row["pred"]))
                ref.append(float(row["ref"]))
            except ValueError as exc:
                raise MetricError(f"{path}:{line_no}: non-numeric duration") from exc
            uids.append(row["utterance_id"])
            syms.append(row["symbol"])
    return DurationRows(uids, syms, np.array(pred), np.array(ref))


def read_mushra_csv(path: str | Path) -> MushraTable:
    cells: dict[tuple[str, str, str], float] = {}
    raters: dict[str, None] = {}
    samples: dict[str, None] = {}
    systems: dict[str, None] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MUSHRA_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise MetricError(f"{path}: missing columns {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            key = (row["rater"], row["sample"], row["system"])
            if key in cells:
                raise MetricError(f"{path}:{line_no}: duplicate rating for {key}")
            try:
                cells[key] = float(row["score"])
            except ValueError as exc:
                raise MetricError(f"{path}:{line_no}: non-numeric score") from exc
            raters.setdefault(key[0])
            samples.setdefault(key[1])
            systems.setdefault(key[2])
    scores = np.full((len(raters), len(samples), len(systems)), np.nan)
    r_idx = {r: i for i, r in enumerate(raters)}
    s_idx = {s: i for i, s in enumerate(samples)}
    y_idx = {y: i for i, y in enumerate(systems)}
    for (r, s, y), v in cells.items():
        scores[r_idx[r], s_idx[s], y_idx[y]] = v
    return MushraTable(scores, list(raters), list(samples), list(systems))


def write_mushra_csv(path: str | Path, table: MushraTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MUSHRA_FIELDS)
        for i, r in enumerate(table.raters):
            for j, s in enumerate(table.samples):
                for k, y in enumerate(table.systems):
                    writer.writerow([r, s, y, _fmt(table.scores[i, j, k])])


METRICS_FIELDS = ("variant", "non_pause_mse", "intra_pause_mse", "inter_pause_mse", "inter_pause_r2")


def metrics_row(name: str, report: MetricsReport) -> list[str]:
    def cell(cat, attr):
        m = report.get(cat)
        value = None if m is None else getattr(m, attr)
        return "" if value is None else f"{value:.4f}"

    return [
        name,
        cell(DurationCategory.NON_PAUSE, "mse"),
        cell(DurationCategory.INTRA_PAUSE, "mse"),
        cell(DurationCategory.INTER_PAUSE, "mse"),
        cell(DurationCategory.INTER_PAUSE, "r2"),
    ]


def write_metrics_csv(path: str | Path, reports: dict[str, MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_FIELDS)
        for name, report in reports.items():
            writer.writerow(metrics_row(name, report))


def format_metrics_table(reports: dict[str, MetricsReport]) -> str:
    """Plain-text table with the within/between pause split."""
    header = ("", "non-pauses MSE", "within MSE", "between MSE", "between R2")
    rows = [header]
    for name, report in reports.items():
        cells = metrics_row(name, report)
        rows.append(tuple([cells[0]] + [c if c else "-" for c in cells[1:]]))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for k, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def write_histogram_csv(path: str | Path, histogram: Sequence[tuple[int, int]], category: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("category", "bin_start", "count"))
        for start, count in histogram:
            writer.writerow((category, start, count))
