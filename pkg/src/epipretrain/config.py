"""Experiment configuration: YAML loading, CLI overrides and validation.

Validation errors carry the YAML line of the offending field::

    exp.yaml:12: ablation.data_fraction: must lie in (0, 1]
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .ssl import SSLConfig, task_name
from .tasks import SEASON_KINDS
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class TaskSpec:
    kind: str = "forecast"
    dataset: str = ""
    region: str | None = None
    horizon: int = 4
    input_window: int = 16
    masked_horizon: bool = True
    eval_start: Any = None
    eval_end: Any = None
    eval_step: int = 1
    season_length: int = 52
    season_offset: int = 0
    baseline: float | None = None


@dataclass
class Ablation:
    no_pretrain: bool = False
    no_linear_probe: bool = False
    no_segments: bool = False
    no_instance_norm: bool = False
    exclude_disease: str | None = None
    only_task: str | None = None
    data_fraction: float = 1.0


@dataclass
class ManifestEntry:
    seasonal: bool = False
    pretrain_cutoff: str | None = None


@dataclass
class ExperimentConfig:
    manifest: str = ""
    output_dir: str = "results"
    seeds: list[int] = field(default_factory=lambda: [0])
    min_length: int = 10
    workers: int = 1
    pretrain_cutoffs: dict[str, str] = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    ssl: dict = field(default_factory=dict)
    task: TaskSpec = field(default_factory=TaskSpec)
    ablation: Ablation = field(default_factory=Ablation)
    source: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    # resolved views -------------------------------------------------------

    def model_config(self, seed: int) -> ModelConfig:
        kw = dict(self.model)
        if self.ablation.no_segments:
            kw["P"], kw["S"] = 1, 1
        kw["seed"] = seed
        return ModelConfig(**kw)

    def pretrain_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.pretrain, "stage": "pretrain", "seed": seed})

    def finetune_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.finetune, "stage": "finetune", "seed": seed})

    def ssl_config(self) -> SSLConfig:
        kw = dict(self.ssl)
        if self.ablation.only_task:
            kw["tasks"] = (self.ablation.only_task,)
        kw["instance_norm"] = not self.ablation.no_instance_norm
        return SSLConfig(**kw)

    def manifest_path(self) -> Path:
        p = Path(self.manifest)
        if not p.is_absolute() and self.source:
            p = Path(self.source).parent / p
        return p

    def output_path(self, root_override: str | None = None) -> Path:
        p = Path(self.output_dir)
        if root_override:
            return Path(root_override) / p.name if p.is_absolute() else Path(root_override) / p
        if not p.is_absolute() and self.source:
            p = Path(self.source).parent / p
        return p

    def resolved_dict(self) -> dict:
        """Raw config with the manifest path made absolute."""
        raw = copy.deepcopy(self.raw)
        if self.manifest:
            raw["manifest"] = str(self.manifest_path().resolve())
        return raw


# ---------------------------------------------------------------------------
# line tracking


def _line_map(text: str) -> dict[tuple, int]:
    lines: dict[tuple, int] = {}

    def walk(node, path):
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = path + (k.value,)
                lines[key] = k.start_mark.line + 1
                walk(v, key)
                lines[key] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return lines


class _Validator:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def fail(self, path: tuple, msg: str):
        line = None
        for n in range(len(path), -1, -1):
            if path[:n] in self.lines:
                line = self.lines[path[:n]]
                break
        where = f"{self.source}:{line}" if line else self.source
        dotted = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{where}: {dotted}: {msg}")


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        nxt = cur.get(k)
        if nxt is None:
            nxt = cur[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {dotted}: {k} is not a section")
        cur = nxt
    cur[keys[-1]] = value


def apply_overrides(raw: dict, overrides: dict[str, str]) -> dict:
    """Set dotted field paths; values are parsed as YAML scalars."""
    raw = copy.deepcopy(raw)
    for k, v in overrides.items():
        _set_path(raw, k, yaml.safe_load(v) if isinstance(v, str) else v)
    return raw


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _check_keys(v: _Validator, section: dict, allowed, path):
    if not isinstance(section, dict):
        v.fail(path, "expected a mapping")
    for k in section:
        if k not in allowed:
            v.fail(path + (k,), f"unknown field (allowed: {', '.join(sorted(allowed))})")


def _build(v: _Validator, cls, section, path, exclude=()):
    section = section or {}
    allowed = [f for f in _fields(cls) if f not in exclude]
    _check_keys(v, section, allowed, path)
    try:
        cls(**section)
    except (TypeError, ValueError) as exc:
        v.fail(path, str(exc))
    return dict(section)


def validate(raw: dict, source: str = "<config>", lines: dict | None = None, check_files: bool = True) -> ExperimentConfig:
    v = _Validator(source, lines or {})
    if not isinstance(raw, dict):
        v.fail((), "config must be a mapping")
    top = {f for f in _fields(ExperimentConfig) if f not in ("source", "raw")}
    _check_keys(v, raw, top, ())
    if not raw.get("manifest"):
        v.fail(("manifest",), "required")

    model = _build(v, ModelConfig, raw.get("model"), ("model",), exclude=("seed",))
    pre = _build(v, TrainConfig, raw.get("pretrain"), ("pretrain",), exclude=("stage", "seed"))
    fin = _build(v, TrainConfig, raw.get("finetune"), ("finetune",), exclude=("stage", "seed"))
    ssl_raw = _build(v, SSLConfig, raw.get("ssl"), ("ssl",), exclude=("instance_norm",))

    task_raw = raw.get("task") or {}
    _check_keys(v, task_raw, _fields(TaskSpec), ("task",))
    task = TaskSpec(**task_raw)
    if task.kind not in ("forecast",) + SEASON_KINDS:
        v.fail(("task", "kind"), f"must be one of forecast, {', '.join(SEASON_KINDS)}")
    if not task.dataset:
        v.fail(("task", "dataset"), "required")
    for name in ("horizon", "input_window", "eval_step", "season_length"):
        val = getattr(task, name)
        if not isinstance(val, int) or val < 1:
            v.fail(("task", name), "must be a positive integer")
    if task.kind == "onset_week" and task.baseline is None:
        v.fail(("task", "baseline"), "onset_week needs a baseline")

    abl_raw = raw.get("ablation") or {}
    _check_keys(v, abl_raw, _fields(Ablation), ("ablation",))
    abl = Ablation(**abl_raw)
    if not isinstance(abl.data_fraction, (int, float)) or not 0.0 < abl.data_fraction <= 1.0:
        v.fail(("ablation", "data_fraction"), "must lie in (0, 1]")
    if abl.only_task is not None:
        try:
            abl.only_task = task_name(str(abl.only_task))
        except ValueError as exc:
            v.fail(("ablation", "only_task"), str(exc))
        if abl.no_pretrain:
            v.fail(("ablation", "only_task"), "cannot be combined with no_pretrain")

    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        v.fail(("seeds",), "must be a non-empty list of integers")

    cfg = ExperimentConfig(
        manifest=str(raw["manifest"]),
        output_dir=str(raw.get("output_dir", "results")),
        seeds=list(seeds),
        min_length=int(raw.get("min_length", 10)),
        workers=int(raw.get("workers", 1)),
        pretrain_cutoffs=dict(raw.get("pretrain_cutoffs") or {}),
        model=model,
        pretrain=pre,
        finetune=fin,
        ssl=ssl_raw,
        task=task,
        ablation=abl,
        source=source,
        raw=copy.deepcopy(raw),
    )
    if cfg.min_length < 1:
        v.fail(("min_length",), "must be >= 1")
    try:
        cfg.model_config(0)
        cfg.ssl_config()
    except ValueError as exc:
        v.fail(("model",), str(exc))
    if check_files:
        mp = cfg.manifest_path()
        if not mp.exists():
            v.fail(("manifest",), f"file not found: {mp}")
        manifest = load_manifest(mp)
        if task.dataset not in manifest.diseases:
            v.fail(("task", "dataset"), f"disease {task.dataset!r} not in manifest")
        if abl.exclude_disease is not None and abl.exclude_disease not in manifest.diseases:
            v.fail(("ablation", "exclude_disease"), f"disease {abl.exclude_disease!r} not in manifest")
    return cfg


def load_config(path, overrides: dict[str, str] | None = None, check_files: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: file not found")
    text = path.read_text()
    try:
        raw = yaml.safe_load(text) or {}
        lines = _line_map(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else "?"
        raise ConfigError(f"{path}:{line}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if overrides:
        raw = apply_overrides(raw, overrides)
    return validate(raw, str(path), lines, check_files)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.resolved_dict(), fh, sort_keys=True)


# ---------------------------------------------------------------------------
# corpus manifest


@dataclass
class Manifest:
    files: list[Path]
    diseases: dict[str, ManifestEntry]

    @property
    def seasonal(self) -> dict[str, bool]:
        return {k: e.seasonal for k, e in self.diseases.items()}

    @property
    def cutoffs(self) -> dict[str, str]:
        return {k: e.pretrain_cutoff for k, e in self.diseases.items() if e.pretrain_cutoff}


def load_manifest(path) -> Manifest:
    path = Path(path)
    text = path.read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML syntax error: {exc}") from None
    v = _Validator(str(path), _line_map(text))
    _check_keys(v, raw, {"files", "diseases", "synthetic_seed"}, ())
    files = []
    for i, f in enumerate(raw.get("files") or []):
        p = Path(f)
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            v.fail(("files", i), f"file not found: {p}")
        files.append(p)
    diseases = {}
    for name, entry in (raw.get("diseases") or {}).items():
        entry = entry or {}
        _check_keys(v, entry, _fields(ManifestEntry), ("diseases", name))
        if not isinstance(entry.get("seasonal", False), bool):
            v.fail(("diseases", name, "seasonal"), "must be true or false")
        cut = entry.get("pretrain_cutoff")
        diseases[str(name)] = ManifestEntry(bool(entry.get("seasonal", False)), None if cut is None else str(cut))
    return Manifest(files, diseases)
