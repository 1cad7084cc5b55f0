"""Downstream epidemic tasks and the rolling real-time evaluation protocol.

Week indices handed to :func:`realtime_eval` are 0-based positions in the
series and denote the *current* (last observed) week. Weeks reported inside a
season (peak week, onset week) are 1-based.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import training as TR

logger = logging.getLogger(__name__)

SEASON_KINDS = ("peak_week", "peak_intensity", "onset_week")


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class ForecastTask:
    """``masked_horizon`` appends the K target weeks as zero placeholders to the input."""

    horizon: int = 4
    input_window: int = 16
    masked_horizon: bool = True

    @property
    def pad(self) -> int:
        return self.horizon if self.masked_horizon else 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.input_window < 1:
            raise ValueError("input_window must be >= 1")

    kind = "forecast"


@dataclass(frozen=True)
class SeasonTask:
    kind: str
    season_length: int = 52
    season_offset: int = 0
    input_window: int = 16
    baseline: float | None = None

    def __post_init__(self):
        if self.kind not in SEASON_KINDS:
            raise ValueError(f"unknown season task {self.kind!r}")
        if self.season_length < 1:
            raise ValueError("season_length must be >= 1")
        if self.kind == "onset_week" and (self.baseline is None or not math.isfinite(self.baseline)):
            raise ValueError("onset_week needs a finite baseline")

    def season_of(self, t: int) -> int | None:
        """Season number containing position ``t`` (None before the first season)."""
        if t < self.season_offset:
            return None
        return (t - self.season_offset) // self.season_length

    def season_slice(self, s: int) -> slice:
        start = self.season_offset + s * self.season_length
        return slice(start, start + self.season_length)


# ---------------------------------------------------------------------------
# targets and metrics


def peak_targets(season_series) -> tuple[int, float]:
    """1-based week of the first maximum and the maximum value."""
    x = np.asarray(season_series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("season_series must be non-empty")
    i = int(np.argmax(x))
    return i + 1, float(x[i])


def onset_week(season_series, baseline: float, run: int = 3) -> int | None:
    """1-based first week of the earliest run of ``run`` weeks strictly above ``baseline``."""
    if not math.isfinite(baseline):
        raise ValueError("baseline must be finite")
    above = np.asarray(season_series, dtype=np.float64) > baseline
    count = 0
    for i, a in enumerate(above):
        count = count + 1 if a else 0
        if count == run:
            return i - run + 2
    return None


def rmse(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("rmse needs at least one pair")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def peak_week_loss(logits, true_week: int) -> float:
    """Cross-entropy of 1-based ``true_week`` under ``logits`` over the season's weeks."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 1 <= true_week <= logits.shape[-1]:
        raise ValueError(f"week {true_week} outside 1..{logits.shape[-1]}")
    return M.cross_entropy_loss(logits[None], np.array([true_week - 1]))[0]


def season_truth(task: SeasonTask, values) -> float | None:
    if task.kind == "peak_week":
        return float(peak_targets(values)[0])
    if task.kind == "peak_intensity":
        return peak_targets(values)[1]
    w = onset_week(values, task.baseline)
    return None if w is None else float(w)


# ---------------------------------------------------------------------------
# evaluation records


@dataclass
class EvalResult:
    task: str
    dataset: str = ""
    records: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def horizons(self) -> list[int]:
        return sorted({r["horizon"] for r in self.records})

    def rmse_by_horizon(self) -> dict[int, float]:
        out = {}
        for h in self.horizons():
            rs = [r for r in self.records if r["horizon"] == h]
            out[h] = rmse([r["pred"] for r in rs], [r["truth"] for r in rs])
        return out

    def count_by_horizon(self) -> dict[int, int]:
        return {h: sum(r["horizon"] == h for r in self.records) for h in self.horizons()}

    @property
    def avg_rmse(self) -> float:
        by = self.rmse_by_horizon()
        return float(np.mean(list(by.values()))) if by else float("nan")

    def table_rows(self) -> list[dict]:
        rows = []
        counts = self.count_by_horizon()
        for h, v in self.rmse_by_horizon().items():
            rows.append({"task": self.task, "dataset": self.dataset, "horizon": h, "rmse": v, "n": counts[h]})
        if rows:
            rows.append({"task": self.task, "dataset": self.dataset, "horizon": "avg",
                         "rmse": self.avg_rmse, "n": len(self.records)})
        return rows

    def to_csv(self, path=None, header=True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["task", "dataset", "horizon", "rmse", "n"], lineterminator="\n")
        if header:
            w.writeheader()
        for row in self.table_rows():
            w.writerow({**row, "rmse": repr(float(row["rmse"]))})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "dataset": self.dataset,
            "rmse_by_horizon": {str(k): v for k, v in self.rmse_by_horizon().items()},
            "avg_rmse": self.avg_rmse,
            "records": self.records,
            "skipped": self.skipped,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------------------
# forecasters


class PersistenceForecaster:
    """Predicts every future week equal to the last observed value."""

    def fit(self, history, task):
        return self

    def predict(self, history, task):
        h = np.asarray(history, dtype=np.float64)
        if isinstance(task, ForecastTask):
            return np.full(task.horizon, h[-1])
        raise ValueError("persistence is defined for forecasting only")


def forecast_samples(history, input_window: int, horizon: int, pad: int = 0) -> TR.SupervisedData:
    h = np.asarray(history, dtype=np.float64)
    ends = range(input_window - 1, len(h) - horizon)
    if len(ends) == 0:
        raise InsufficientData(f"need >= {input_window + horizon} weeks, have {len(h)}")
    X = np.stack([h[t - input_window + 1 : t + 1] for t in ends])
    Y = np.stack([h[t + 1 : t + 1 + horizon] for t in ends])
    return TR.SupervisedData(X, Y, "forecast", pad)


def season_samples(history, task: SeasonTask) -> TR.SupervisedData:
    """Training pairs from every season completed within ``history``."""
    h = np.asarray(history, dtype=np.float64)
    head = {"peak_week": "week", "onset_week": "onset", "peak_intensity": "scalar"}[task.kind]
    X, Y = [], []
    s = 0
    while task.season_slice(s).stop <= len(h):
        sl = task.season_slice(s)
        truth = season_truth(task, h[sl])
        if truth is not None:
            label = truth if task.kind == "peak_intensity" else int(truth) - 1
            for t in range(sl.start, sl.stop):
                if t - task.input_window + 1 >= 0:
                    X.append(h[t - task.input_window + 1 : t + 1])
                    Y.append(label)
        s += 1
    if not X:
        raise InsufficientData("no completed season with a defined target in history")
    return TR.SupervisedData(np.stack(X), np.array(Y), head)


class FineTunedForecaster:
    """Fine-tunes a copy of (pre-)trained parameters on the visible history.

    History values are z-scored with statistics of the history alone, so
    nothing past the current week influences training or prediction.
    """

    def __init__(self, params, cfg: M.ModelConfig, train_cfg: TR.TrainConfig, *,
                 instance_norm: bool = True, no_linear_probe: bool = False,
                 data_fraction: float = 1.0):
        if not 0.0 < data_fraction <= 1.0:
            raise ValueError("data_fraction must lie in (0, 1]")
        self.base = params
        self.cfg = cfg
        self.train_cfg = train_cfg
        self.instance_norm = instance_norm
        self.no_linear_probe = no_linear_probe
        self.data_fraction = data_fraction
        self.params = None
        self.reports: list[TR.TrainReport] = []

    def _visible(self, history):
        h = np.asarray(history, dtype=np.float64)
        n = int(math.ceil(self.data_fraction * len(h)))
        return h[len(h) - n :]

    def fit(self, history, task):
        h = self._visible(history)
        self.mean = float(h.mean())
        self.scale = max(float(h.std()), M.STD_EPS)
        hn = (h - self.mean) / self.scale
        if isinstance(task, ForecastTask):
            data = forecast_samples(hn, task.input_window, task.horizon, task.pad)
            width = task.horizon
        else:
            data = season_samples(hn, task)
            width = task.season_length if data.head in ("week", "onset") else None
        if task.input_window < self.cfg.P:
            raise InsufficientData("input window shorter than segment length")
        self.params, self.reports = TR.two_stage_finetune(
            self.base, data, self.train_cfg, self.cfg, width,
            instance_norm=self.instance_norm, no_linear_probe=self.no_linear_probe,
        )
        self.head = data.head
        self.pad = data.pad
        return self

    def predict(self, history, task):
        h = np.asarray(history, dtype=np.float64)
        x = (h[-task.input_window :] - self.mean) / self.scale
        if len(x) < task.input_window:
            raise InsufficientData("history shorter than input window")
        out = TR.predict(self.params, self.cfg, x, self.head, self.instance_norm, self.pad)[0]
        if self.head in ("week", "onset"):
            return float(np.argmax(out) + 1)
        return out * self.scale + self.mean


# ---------------------------------------------------------------------------
# rolling evaluation


def realtime_eval(model_factory: Callable[[], object], series, eval_weeks: Sequence[int], task,
                  dataset: str = "") -> EvalResult:
    """Fit a fresh model at every current week on data up to that week only.

    ``model_factory()`` must return an object with ``fit(history, task)`` and
    ``predict(history, task)``. For forecasting, one record per available
    horizon step; for season tasks, one record per week with the truth taken
    from the complete season.
    """
    values = np.asarray(getattr(series, "values", series), dtype=np.float64)
    kind = task.kind
    result = EvalResult("forecast" if kind == "forecast" else kind, dataset)
    for w in eval_weeks:
        w = int(w)
        if not 0 <= w < len(values):
            result.skipped.append({"week": w, "reason": "outside series"})
            continue
        history = values[: w + 1].copy()  # built before any model access
        if kind == "forecast":
            steps = [k for k in range(1, task.horizon + 1) if w + k < len(values)]
            for k in range(len(steps) + 1, task.horizon + 1):
                result.skipped.append({"week": w, "horizon": k, "reason": "no future data"})
                logger.info("week %d horizon %d skipped: no future data", w, k)
            if not steps:
                continue
            truth = None
        else:
            s = task.season_of(w)
            sl = task.season_slice(s) if s is not None else None
            if sl is None or sl.stop > len(values):
                result.skipped.append({"week": w, "reason": "season incomplete"})
                continue
            truth = season_truth(task, values[sl])
            if truth is None:
                result.skipped.append({"week": w, "reason": "no onset in season"})
                continue
        try:
            model = model_factory()
            model.fit(history, task)
            pred = model.predict(history, task)
        except InsufficientData as exc:
            result.skipped.append({"week": w, "reason": str(exc)})
            logger.info("week %d skipped: %s", w, exc)
            continue
        if kind == "forecast":
            pred = np.asarray(pred, dtype=np.float64)
            for k in steps:
                result.records.append({"week": w, "horizon": k, "pred": float(pred[k - 1]),
                                       "truth": float(values[w + k])})
        else:
            result.records.append({"week": w, "horizon": 0, "pred": float(np.ravel(pred)[0]), "truth": truth})
    return result
