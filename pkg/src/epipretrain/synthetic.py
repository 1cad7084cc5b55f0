"""Synthetic multi-disease corpora for desk-scale experiments."""

from __future__ import annotations

import datetime as dt
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import DiseaseDataset, TimeSeries, write_csv


@dataclass
class DiseaseSpec:
    name: str
    seasonal: bool = True
    period: int = 52
    amplitude: float = 1.0
    noise: float = 0.05
    peak_month: int = 1
    series: int = 3
    length: int = 260
    baseline: float = 0.2
    outbreak_rate: float = 0.02
    phase_jitter: float = 1.0
    cutoff: str | None = None

    def __post_init__(self):
        if self.period < 4:
            raise ValueError(f"{self.name}: period must be >= 4")
        if self.length < self.period:
            raise ValueError(f"{self.name}: length must be >= period")
        if self.noise < 0:
            raise ValueError(f"{self.name}: noise must be >= 0")
        if not 1 <= self.peak_month <= 12:
            raise ValueError(f"{self.name}: peak_month must be in 1..12")
        if self.series < 1:
            raise ValueError(f"{self.name}: series must be >= 1")


@dataclass
class SyntheticCorpusSpec:
    diseases: list[DiseaseSpec] = field(default_factory=list)
    start: str = "1960-01-04"

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticCorpusSpec":
        ds = [DiseaseSpec(**d) for d in raw.get("diseases", [])]
        names = [d.name for d in ds]
        if len(set(names)) != len(names):
            raise ValueError("disease names must be unique")
        return cls(ds, str(raw.get("start", cls.start)))

    @classmethod
    def from_yaml(cls, path) -> "SyntheticCorpusSpec":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        return {"start": self.start, "diseases": [asdict(d) for d in self.diseases]}


def _dates(start: dt.date, n: int) -> list[dt.date]:
    return [start + dt.timedelta(weeks=i) for i in range(n)]


def seasonal_curve(dates, period: int, peak_month: int, phase_shift_weeks: float = 0.0) -> np.ndarray:
    """Unit cosine peaking mid-``peak_month`` of each cycle; ``period`` in weeks."""
    ref = dt.date(dates[0].year, peak_month, 15)
    days = np.array([(d - ref).days for d in dates], dtype=np.float64) - 7.0 * phase_shift_weeks
    cycle = 365.25 * period / 52.0
    return np.cos(2 * np.pi * days / cycle)


def generate_series(spec: DiseaseSpec, start: dt.date, rng) -> list[TimeSeries]:
    dates = _dates(start, spec.length)
    months = [d.month for d in dates]
    out = []
    for r in range(spec.series):
        scale = spec.amplitude * rng.uniform(0.8, 1.2)
        if spec.seasonal:
            shift = rng.uniform(-spec.phase_jitter, spec.phase_jitter)
            clean = scale * (1.2 + seasonal_curve(dates, spec.period, spec.peak_month, shift))
        else:
            clean = np.full(spec.length, spec.baseline * scale)
            n_out = rng.poisson(spec.outbreak_rate * spec.length)
            t = np.arange(spec.length)
            for _ in range(n_out):
                centre = rng.uniform(0, spec.length)
                width = rng.uniform(2.0, 5.0)
                clean += scale * rng.uniform(0.5, 1.5) * np.exp(-0.5 * ((t - centre) / width) ** 2)
        values = clean + spec.noise * spec.amplitude * rng.standard_normal(spec.length)
        out.append(TimeSeries(values, months, region=f"R{r}", disease=spec.name,
                              dates=np.array(dates, dtype="datetime64[D]")))
    return out


def generate_datasets(spec: SyntheticCorpusSpec, seed: int) -> list[DiseaseDataset]:
    start = dt.date.fromisoformat(spec.start)
    out = []
    for i, d in enumerate(spec.diseases):
        rng = np.random.default_rng([seed, i])
        out.append(DiseaseDataset(d.name, generate_series(d, start, rng), seasonal=d.seasonal))
    return out


def generate_synthetic(spec: SyntheticCorpusSpec, seed: int, out_dir) -> Path:
    """Write one CSV per disease plus ``manifest.yaml``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    diseases = {}
    files = []
    for d, ds in zip(spec.diseases, generate_datasets(spec, seed)):
        fname = f"{d.name}.csv"
        write_csv(out_dir / fname, [ds])
        files.append(fname)
        entry = {"seasonal": d.seasonal}
        if d.cutoff:
            entry["pretrain_cutoff"] = d.cutoff
        diseases[d.name] = entry
    manifest = out_dir / "manifest.yaml"
    with manifest.open("w") as fh:
        yaml.safe_dump({"files": files, "diseases": diseases, "synthetic_seed": seed}, fh, sort_keys=True)
    return manifest
