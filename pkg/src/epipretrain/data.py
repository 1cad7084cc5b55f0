"""Corpus ingestion, filtering, dataset normalization and season labelling."""

from __future__ import annotations

import csv
import datetime as dt
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

STD_EPS = 1e-8
WEEKS_PER_YEAR = 52
CSV_HEADER = ("disease", "region", "date", "value")

# Calendar blocks in chronological order starting from December.
SEASON_BLOCKS = ("Dec-Feb", "Mar-May", "Jun-Aug", "Sep-Nov")


class CorpusError(ValueError):
    """Raised for malformed corpus files."""


def month_block(month: int) -> int:
    """Block index 0..3 of a calendar month (0 = Dec-Feb)."""
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range: {month}")
    return (month % 12) // 3


@dataclass
class TimeSeries:
    values: np.ndarray
    month_stamps: np.ndarray
    region: str = ""
    disease: str = ""
    dates: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.month_stamps = np.asarray(self.month_stamps, dtype=np.int64)
        if self.values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if len(self.values) != len(self.month_stamps):
            raise ValueError(
                f"length mismatch: {len(self.values)} values, {len(self.month_stamps)} month stamps"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("series contains non-finite values")
        m = self.month_stamps
        if len(m) and (m.min() < 1 or m.max() > 12):
            raise ValueError("month stamps must lie in 1..12")
        if len(m) > 1:
            step = (m[1:] - m[:-1]) % 12
            if np.any(step > 1):
                i = int(np.argmax(step > 1))
                raise ValueError(f"month stamps jump from {m[i]} to {m[i + 1]} at position {i + 1}")
        if self.dates is not None:
            self.dates = np.asarray(self.dates, dtype="datetime64[D]")
            if len(self.dates) != len(self.values):
                raise ValueError("dates must align with values")

    def __len__(self) -> int:
        return len(self.values)

    def truncate(self, stop: int) -> "TimeSeries":
        return replace(
            self,
            values=self.values[:stop].copy(),
            month_stamps=self.month_stamps[:stop].copy(),
            dates=None if self.dates is None else self.dates[:stop].copy(),
        )


@dataclass
class DiseaseDataset:
    name: str
    series: list[TimeSeries] = field(default_factory=list)
    seasonal: bool = False
    normalization_stats: tuple[float, float] | None = None

    def pooled_values(self) -> np.ndarray:
        if not self.series:
            return np.zeros(0)
        return np.concatenate([s.values for s in self.series])


@dataclass(frozen=True)
class SeasonMap:
    disease: str
    peak_block: int
    labels: dict[int, int]

    @property
    def peak_season_block(self) -> str:
        return SEASON_BLOCKS[self.peak_block]

    @classmethod
    def from_peak_block(cls, disease: str, peak_block: int) -> "SeasonMap":
        labels = {b: (b - peak_block) % 4 + 1 for b in range(4)}
        return cls(disease, peak_block, labels)


# ---------------------------------------------------------------------------
# ingestion


def _split_runs(dates: list[dt.date]) -> list[slice]:
    """Contiguous weekly runs; a gap other than 7 days starts a new run."""
    runs, start = [], 0
    for i in range(1, len(dates)):
        if (dates[i] - dates[i - 1]).days != 7:
            runs.append(slice(start, i))
            start = i
    if dates:
        runs.append(slice(start, len(dates)))
    return runs


def load_csv(path: str | Path, seasonal: dict[str, bool] | None = None) -> list[DiseaseDataset]:
    """Read a ``disease,region,date,value`` file into datasets grouped by disease.

    Rows may appear in any order; each (disease, region) pair is sorted by
    date. A region whose weekly dates have gaps is split into one series per
    contiguous run. Any non-finite value drops that (disease, region) series
    with a warning.
    """
    path = Path(path)
    seasonal = seasonal or {}
    rows: "OrderedDict[tuple[str, str], list[tuple[dt.date, float]]]" = OrderedDict()
    bad: set[tuple[str, str]] = set()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise CorpusError(f"{path}:1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise CorpusError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            disease, region, date_s, value_s = (c.strip() for c in row)
            try:
                date = dt.date.fromisoformat(date_s)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: bad date {date_s!r}") from None
            try:
                value = float(value_s)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: bad value {value_s!r}") from None
            key = (disease, region)
            if not np.isfinite(value):
                if key not in bad:
                    logger.warning("%s:%d: non-finite value for %s/%s; dropping series", path, lineno, *key)
                bad.add(key)
            rows.setdefault(key, []).append((date, value))

    by_disease: "OrderedDict[str, DiseaseDataset]" = OrderedDict()
    for (disease, region), obs in rows.items():
        ds = by_disease.setdefault(disease, DiseaseDataset(disease, seasonal=seasonal.get(disease, False)))
        if (disease, region) in bad:
            continue
        obs.sort(key=lambda o: o[0])
        dates = [o[0] for o in obs]
        if len(set(dates)) != len(dates):
            raise CorpusError(f"{path}: duplicate dates for {disease}/{region}")
        values = np.array([o[1] for o in obs])
        for run in _split_runs(dates):
            d = dates[run]
            ds.series.append(
                TimeSeries(
                    values=values[run],
                    month_stamps=[x.month for x in d],
                    region=region,
                    disease=disease,
                    dates=np.array(d, dtype="datetime64[D]"),
                )
            )
    return list(by_disease.values())


def write_csv(path: str | Path, datasets: Iterable[DiseaseDataset]) -> None:
    """Inverse of :func:`load_csv` for series that carry dates."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for ds in datasets:
            for s in ds.series:
                if s.dates is None:
                    raise ValueError(f"series {ds.name}/{s.region} has no dates")
                for d, v in zip(s.dates, s.values):
                    w.writerow((ds.name, s.region, str(d), repr(float(v))))


def truncate_before(datasets: Sequence[DiseaseDataset], cutoffs: dict[str, str]) -> list[DiseaseDataset]:
    """Keep only observations dated strictly before each disease's cutoff."""
    out = []
    for ds in datasets:
        cutoff = cutoffs.get(ds.name)
        if cutoff is None:
            out.append(ds)
            continue
        limit = np.datetime64(cutoff, "D")
        kept = []
        for s in ds.series:
            if s.dates is None:
                raise ValueError(f"cutoff for {ds.name} needs dated series")
            n = int(np.searchsorted(s.dates, limit, side="left"))
            if n:
                kept.append(s.truncate(n))
        out.append(replace(ds, series=kept))
    return out


# ---------------------------------------------------------------------------
# filtering and normalization


def filter_sparse(datasets: Sequence[DiseaseDataset], min_length: int = 10) -> list[DiseaseDataset]:
    if min_length < 1:
        raise ValueError("min_length must be >= 1")
    out = []
    for ds in datasets:
        kept = [s for s in ds.series if len(s) >= min_length]
        if kept:
            out.append(replace(ds, series=kept))
    return out


def dataset_normalize(dataset: DiseaseDataset) -> DiseaseDataset:
    """Pooled z-score over every value of every series (population std).

    The returned dataset carries ``normalization_stats = (mean, std)`` where
    ``std`` is the raw population std; division uses ``max(std, 1e-8)``.
    """
    pooled = dataset.pooled_values()
    if pooled.size == 0:
        raise ValueError(f"dataset {dataset.name!r} has no values")
    mean = float(pooled.mean())
    std = float(pooled.std())
    scale = max(std, STD_EPS)
    series = [replace(s, values=(s.values - mean) / scale) for s in dataset.series]
    return replace(dataset, series=series, normalization_stats=(mean, std))


def dataset_denormalize(dataset: DiseaseDataset) -> DiseaseDataset:
    if dataset.normalization_stats is None:
        raise ValueError("dataset is not normalized")
    mean, std = dataset.normalization_stats
    scale = max(std, STD_EPS)
    series = [replace(s, values=s.values * scale + mean) for s in dataset.series]
    return replace(dataset, series=series, normalization_stats=None)


# ---------------------------------------------------------------------------
# seasons


def year_slices(n: int) -> list[slice]:
    """Consecutive runs of at most 52 weeks from the series start."""
    return [slice(i, min(i + WEEKS_PER_YEAR, n)) for i in range(0, n, WEEKS_PER_YEAR)]


def peak_block_counts(dataset: DiseaseDataset) -> np.ndarray:
    counts = np.zeros(4, dtype=np.int64)
    for s in dataset.series:
        for sl in year_slices(len(s)):
            i = int(np.argmax(s.values[sl]))
            counts[month_block(int(s.month_stamps[sl][i]))] += 1
    return counts


def detect_peak_season(dataset: DiseaseDataset) -> SeasonMap:
    """Block holding the most yearly maxima; ties go to the earlier block from December."""
    if not dataset.seasonal:
        raise ValueError(f"season map undefined for non-seasonal disease {dataset.name!r}")
    counts = peak_block_counts(dataset)
    if counts.sum() == 0:
        raise ValueError(f"dataset {dataset.name!r} has no observations")
    return SeasonMap.from_peak_block(dataset.name, int(np.argmax(counts)))


def assign_segment_season(segment_months: Sequence[int], season_map: SeasonMap) -> int:
    if len(segment_months) == 0:
        raise ValueError("segment_months must be non-empty")
    counts = Counter(month_block(int(m)) for m in segment_months)
    top = max(counts.values())
    block = min(b for b, c in counts.items() if c == top)
    return season_map.labels[block]


def segment_season_labels(month_stamps: np.ndarray, P: int, S: int, season_map: SeasonMap) -> np.ndarray:
    """Season label (1..4) for every segment of a stamped window."""
    n = (len(month_stamps) - P) // S + 1
    return np.array(
        [assign_segment_season(month_stamps[i * S : i * S + P], season_map) for i in range(n)],
        dtype=np.int64,
    )
