"""Experiment runner: corpus assembly, pre-training, real-time evaluation, sweeps."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from . import model as M
from . import ssl as T
from . import tasks as TK
from . import training as TR
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, load_manifest
from .data import DiseaseDataset, dataset_normalize, filter_sparse, load_csv, truncate_before

logger = logging.getLogger(__name__)

OUTPUT_ENV = "EPIPRETRAIN_OUTPUT_ROOT"


@dataclass
class Corpus:
    pretrain: list[DiseaseDataset]
    target: DiseaseDataset
    target_series: object


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    """Pre-train datasets (cut, filtered, excluded, normalized) and the raw target series."""
    manifest = load_manifest(cfg.manifest_path())
    datasets: dict[str, DiseaseDataset] = {}
    for f in manifest.files:
        for ds in load_csv(f, manifest.seasonal):
            if ds.name in datasets:
                datasets[ds.name].series.extend(ds.series)
            else:
                datasets[ds.name] = ds
    if cfg.task.dataset not in datasets:
        raise ValueError(f"target disease {cfg.task.dataset!r} has no data")
    target = datasets[cfg.task.dataset]
    if cfg.task.region is None:
        series = target.series[0]
    else:
        matches = [s for s in target.series if s.region == cfg.task.region]
        if not matches:
            raise ValueError(f"region {cfg.task.region!r} not found for {cfg.task.dataset!r}")
        series = max(matches, key=len)
    cutoffs = {**manifest.cutoffs, **{k: str(v) for k, v in cfg.pretrain_cutoffs.items()}}
    pre = [d for n, d in datasets.items() if n != cfg.ablation.exclude_disease]
    pre = filter_sparse(truncate_before(pre, cutoffs), cfg.min_length)
    pre = [dataset_normalize(d) for d in pre]
    return Corpus(pre, target, series)


def task_object(cfg: ExperimentConfig):
    t = cfg.task
    if t.kind == "forecast":
        return TK.ForecastTask(t.horizon, t.input_window, bool(t.masked_horizon))
    return TK.SeasonTask(t.kind, t.season_length, t.season_offset, t.input_window, t.baseline)


def _week_index(series, value, name):
    if value is None:
        return None
    if isinstance(value, int):
        return value if value >= 0 else len(series) + value
    if series.dates is None:
        raise ValueError(f"task.{name} given as a date but the series has no dates")
    d = np.datetime64(value if isinstance(value, dt.date) else dt.date.fromisoformat(str(value)), "D")
    return int(np.searchsorted(series.dates, d, side="left"))


def eval_weeks(cfg: ExperimentConfig, series) -> list[int]:
    t = cfg.task
    n = len(series)
    start = _week_index(series, t.eval_start, "eval_start")
    end = _week_index(series, t.eval_end, "eval_end")
    if start is None:
        start = n - 1 - 10 * t.eval_step - (t.horizon if t.kind == "forecast" else 0)
    if end is None:
        end = n - 1 - (t.horizon if t.kind == "forecast" else 0)
    return list(range(max(start, 0), min(end, n - 1) + 1, t.eval_step))


def pretrain_params(cfg: ExperimentConfig, corpus: Corpus, seed: int, out: Path | None = None):
    """Fresh parameters, pre-trained unless ``no_pretrain``; returns ``(params, report)``."""
    mcfg = cfg.model_config(seed)
    params = M.init_params(mcfg)
    if cfg.ablation.no_pretrain:
        return params, None
    pcorpus = T.PretrainCorpus(corpus.pretrain)
    params, report = TR.pretrain(params, pcorpus, cfg.pretrain_config(seed), cfg.ssl_config(), mcfg)
    if out is not None:
        save_checkpoint(params, out / "pretrained.ckpt", mcfg, {"seed": seed})
        report.to_json(out / "pretrain_report.json")
    return params, report


def evaluate(cfg: ExperimentConfig, corpus: Corpus, params, seed: int, data_fraction: float | None = None):
    """Rolling evaluation of fine-tuned copies of ``params``; returns ``(EvalResult, reports)``."""
    mcfg = cfg.model_config(seed)
    fcfg = cfg.finetune_config(seed)
    task = task_object(cfg)
    models = []
    frac = cfg.ablation.data_fraction if data_fraction is None else data_fraction

    def factory():
        f = TK.FineTunedForecaster(params, mcfg, fcfg, instance_norm=not cfg.ablation.no_instance_norm,
                             no_linear_probe=cfg.ablation.no_linear_probe, data_fraction=frac)
        models.append(f)
        return f

    weeks = eval_weeks(cfg, corpus.target_series)
    res = TK.realtime_eval(factory, corpus.target_series, weeks, task, cfg.task.dataset)
    trajectories = [[r.to_dict() for r in f.reports] for f in models]
    return res, trajectories


def persistence_eval(cfg: ExperimentConfig, corpus: Corpus):
    task = task_object(cfg)
    if not isinstance(task, TK.ForecastTask):
        return None
    res = TK.realtime_eval(TK.PersistenceForecaster, corpus.target_series,
                           eval_weeks(cfg, corpus.target_series), task, cfg.task.dataset)
    res.task = "persistence"
    return res


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path) -> TK.EvalResult:
    out = out_dir / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg)
    params, _ = pretrain_params(cfg, corpus, seed, out)
    res, traj = evaluate(cfg, corpus, params, seed)
    res.to_json(out / "eval.json")
    res.to_csv(out / "eval.csv")
    with open(out / "finetune_reports.json", "w") as fh:
        json.dump(traj, fh)
    base = persistence_eval(cfg, corpus)
    if base is not None:
        base.to_csv(out / "persistence.csv")
    return res


def _run_seed_job(args):
    cfg, seed, out_dir = args
    return seed, run_seed(cfg, seed, Path(out_dir))


def write_provenance(cfg: ExperimentConfig, out_dir: Path, extra: dict | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    prov = {"seeds": cfg.seeds, "master_seed": cfg.seeds[0], "source_config": cfg.source,
            "kernel_backend": kernels.BACKEND}
    prov.update(extra or {})
    with open(out_dir / "provenance.json", "w") as fh:
        json.dump(prov, fh, indent=1)


def run(cfg: ExperimentConfig, out_dir: Path | None = None) -> dict[int, TK.EvalResult]:
    """Run every seed of an experiment and write all artifacts under ``out_dir``."""
    out_dir = Path(out_dir or cfg.output_path(os.environ.get(OUTPUT_ENV)))
    write_provenance(cfg, out_dir)
    jobs = [(cfg, s, str(out_dir)) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = dict(ex.map(_run_seed_job, jobs))
    else:
        results = dict(map(_run_seed_job, jobs))
    write_results_table(results, out_dir / "results.csv")
    return results


def write_results_table(results: dict[int, TK.EvalResult], path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "task", "dataset", "horizon", "rmse", "n"])
        for seed in sorted(results):
            for row in results[seed].table_rows():
                w.writerow([seed, row["task"], row["dataset"], row["horizon"], repr(float(row["rmse"])), row["n"]])


# ---------------------------------------------------------------------------
# data-fraction sweep


def sweep_data_fraction(cfg: ExperimentConfig, fractions, out_dir: Path | None = None) -> list[dict]:
    """One row per (fraction, seed): the most recent fraction of history is used for fine-tuning."""
    fractions = [float(f) for f in fractions]
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction {f} outside (0, 1]")
    out_dir = Path(out_dir or cfg.output_path(os.environ.get(OUTPUT_ENV)))
    write_provenance(cfg, out_dir, {"fractions": fractions})
    corpus = load_corpus(cfg)
    task = task_object(cfg)
    weeks = eval_weeks(cfg, corpus.target_series)
    need = task.input_window + (task.horizon if isinstance(task, TK.ForecastTask) else 0)
    rows = []
    for seed in cfg.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        params, _ = pretrain_params(cfg, corpus, seed, seed_dir)
        for f in fractions:
            visible = math.ceil(f * (weeks[0] + 1)) if weeks else 0
            mcfg = cfg.model_config(seed)
            if visible < max(mcfg.P, need):
                rows.append({"fraction": f, "seed": seed, "avg_rmse": float("nan"), "n": 0, "flag": "window_too_short"})
                continue
            res, _ = evaluate(cfg, corpus, params, seed, data_fraction=f)
            res.to_csv(seed_dir / f"eval_fraction_{f:g}.csv")
            rows.append({"fraction": f, "seed": seed, "avg_rmse": res.avg_rmse, "n": len(res.records), "flag": ""})
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["fraction", "seed", "avg_rmse", "n", "flag"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "avg_rmse": repr(float(r["avg_rmse"]))})
    trend = fraction_trend(rows)
    with open(out_dir / "sweep_summary.json", "w") as fh:
        json.dump(trend, fh, indent=1)
    return rows


def fraction_trend(rows) -> dict:
    """Median RMSE per fraction and whether it is non-increasing in the fraction (reported only)."""
    by: dict[float, list[float]] = {}
    for r in rows:
        if not r["flag"]:
            by.setdefault(r["fraction"], []).append(r["avg_rmse"])
    fr = sorted(by)
    med = [float(np.median(by[f])) for f in fr]
    mono = all(b <= a for a, b in zip(med, med[1:]))
    return {"fractions": fr, "median_avg_rmse": med, "monotone_nonincreasing": mono}


def load_pretrained(path, cfg: ExperimentConfig, seed: int):
    params, _, _ = load_checkpoint(path, cfg.model_config(seed))
    return params


def with_ablation(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    raw = cfg.resolved_dict()
    raw.setdefault("ablation", {}).update(changes)
    return replace(cfg, ablation=replace(cfg.ablation, **changes), raw=raw)
