"""Multi-task pre-training and two-stage (probe, then full) fine-tuning."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from . import ssl as T
from .optim import Adam

logger = logging.getLogger(__name__)

REGRESSION_HEADS = ("forecast", "scalar")
CLASSIFIER_HEADS = ("week", "onset")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 5000
    early_stop_patience: int = 100
    batch_mode: str = "full"
    stage: str = "pretrain"
    seed: int = 0
    smooth_window: int = 50
    probe_fraction: float = 0.2
    val_fraction: float = 0.1
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.stage not in ("pretrain", "probe", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_mode not in ("full", "windowed"):
            raise ValueError(f"unknown batch_mode {self.batch_mode!r}")


@dataclass
class TrainReport:
    stage: str
    losses: dict[str, list[float]] = field(default_factory=dict)
    total: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    reason: str = "max"
    final_metric: float | None = None
    seconds: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


class EarlyStopper:
    """Stops after ``patience`` consecutive epochs without a new best value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record ``value``; True when it is a new best."""
        if value < self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


def _finite_or_raise(loss, grads, where):
    if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingError(f"non-finite loss or gradient ({where})")


# ---------------------------------------------------------------------------
# pre-training


def ssl_step(params, cfg, batches):
    """Summed loss and gradients over one set of task batches."""
    per_task, grads = {}, {}
    for b in batches:
        loss, g = T.batch_loss_and_grads(params, cfg, b)
        per_task[b.task] = loss
        M.add_grads(grads, g)
    return per_task, grads


def pretrain(params: M.Params, corpus: T.PretrainCorpus, train_cfg: TrainConfig,
             ssl_cfg: T.SSLConfig, cfg: M.ModelConfig, callback=None):
    """Pre-train backbone and SSL heads jointly; returns ``(params, report)``.

    One epoch is one sampled multi-task batch. Early stopping watches the
    moving average of the summed loss over ``smooth_window`` epochs.
    """
    t0 = time.perf_counter()
    params = T.ensure_ssl_heads(params, cfg, ssl_cfg.tasks)
    opt = Adam(train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    report = TrainReport("pretrain", {t: [] for t in ssl_cfg.tasks})
    stopper = EarlyStopper(train_cfg.early_stop_patience)
    best = M.copy_params(params)
    window: list[float] = []
    for epoch in range(train_cfg.max_epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch])
        batches = T.sample_batch(corpus, cfg, ssl_cfg, rng)
        per_task, grads = ssl_step(params, cfg, batches)
        total = float(sum(per_task.values()))
        _finite_or_raise(total, grads, f"pretrain epoch {epoch}, dataset {batches[0].source}, tasks {list(per_task)}")
        for t in ssl_cfg.tasks:
            report.losses[t].append(per_task.get(t, float("nan")))
        report.total.append(total)
        opt.step(params, grads)
        report.stop_epoch = epoch + 1
        window.append(total)
        if len(window) > train_cfg.smooth_window:
            window.pop(0)
        if callback:
            callback(epoch, per_task)
        if len(window) == train_cfg.smooth_window or train_cfg.smooth_window <= 1:
            if stopper.update(float(np.mean(window)), epoch):
                best = M.copy_params(params)
            elif stopper.should_stop:
                report.reason = "patience"
                params = best
                break
    report.final_metric = float(np.mean(window)) if window else None
    report.seconds = time.perf_counter() - t0
    return params, report


# ---------------------------------------------------------------------------
# supervised fine-tuning


@dataclass
class SupervisedData:
    """Raw input windows ``(N, T)`` with regression targets or 0-based class labels.

    ``pad`` zero weeks are appended to every window after instance
    normalization, the same placeholder LastMask uses for hidden segments.
    """

    inputs: np.ndarray
    targets: np.ndarray
    head: str
    pad: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.head in REGRESSION_HEADS:
            self.targets = self.targets.astype(np.float64).reshape(len(self.inputs), -1)
        elif self.head in CLASSIFIER_HEADS:
            self.targets = self.targets.astype(np.int64).reshape(len(self.inputs))
        else:
            raise ValueError(f"unknown downstream head {self.head!r}")
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in length")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "SupervisedData":
        return SupervisedData(self.inputs[idx], self.targets[idx], self.head, self.pad)

    def split_tail(self, fraction: float):
        """Chronological split; the last ``fraction`` of samples become validation."""
        n = len(self)
        n_val = int(round(fraction * n)) if n >= 2 else 0
        if fraction > 0 and n >= 2:
            n_val = max(1, n_val)
        n_val = min(n_val, n - 1) if n else 0
        if n_val == 0:
            return self, None
        return self.subset(slice(0, n - n_val)), self.subset(slice(n - n_val, n))


def _prepare(inputs, cfg: M.ModelConfig, instance_norm: bool, pad: int = 0):
    if instance_norm:
        x, stats = M.instance_normalize(inputs)
    else:
        x, stats = np.asarray(inputs, dtype=np.float64), None
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,))], axis=-1)
    return M.segment(x, cfg.P, cfg.S).segments, stats


def predict(params, cfg: M.ModelConfig, inputs, head: str, instance_norm: bool = True, pad: int = 0):
    """Regression heads return values in input scale; classifier heads return logits."""
    segs, stats = _prepare(np.atleast_2d(inputs), cfg, instance_norm, pad)
    z, _ = M.encode(params, cfg, segs)
    out, _ = M.head_forward(params, head, z)
    if head in REGRESSION_HEADS and stats is not None:
        out = M.instance_denormalize(out, stats)
    return out


def supervised_loss_and_grads(params, cfg: M.ModelConfig, data: SupervisedData,
                              instance_norm: bool = True, backbone: bool = True):
    segs, stats = _prepare(data.inputs, cfg, instance_norm, data.pad)
    z, cache = M.encode(params, cfg, segs)
    out, hcache = M.head_forward(params, data.head, z)
    if data.head in REGRESSION_HEADS:
        if stats is not None:
            scale = np.maximum(stats.std, M.STD_EPS)
            loss, dout = M.mse_loss(out * scale + stats.mean, data.targets)
            dout = dout * scale
        else:
            loss, dout = M.mse_loss(out, data.targets)
    else:
        loss, dout = M.cross_entropy_loss(out, data.targets)
    dz, grads = M.head_backward(params, data.head, dout, hcache)
    if backbone:
        M.add_grads(grads, M.encode_backward(params, cfg, dz, cache))
    return loss, grads


def supervised_loss(params, cfg, data, instance_norm=True) -> float:
    segs, stats = _prepare(data.inputs, cfg, instance_norm, data.pad)
    z, _ = M.encode(params, cfg, segs)
    out, _ = M.head_forward(params, data.head, z)
    if data.head in REGRESSION_HEADS:
        if stats is not None:
            out = M.instance_denormalize(out, stats)
        return M.mse_loss(out, data.targets)[0]
    return M.cross_entropy_loss(out, data.targets)[0]


def _fit(params, cfg, data, train_cfg, epochs, instance_norm, backbone, stage):
    t0 = time.perf_counter()
    report = TrainReport(stage, {data.head: []})
    train, val = data.split_tail(train_cfg.val_fraction)
    opt = Adam(train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    stopper = EarlyStopper(train_cfg.early_stop_patience)
    best = M.copy_params(params)
    for epoch in range(epochs):
        loss, grads = supervised_loss_and_grads(params, cfg, train, instance_norm, backbone)
        _finite_or_raise(loss, grads, f"{stage} epoch {epoch}, head {data.head}")
        report.losses[data.head].append(loss)
        report.total.append(loss)
        opt.step(params, grads)
        report.stop_epoch = epoch + 1
        monitor = supervised_loss(params, cfg, val, instance_norm) if val is not None else loss
        report.val.append(monitor)
        if stopper.update(monitor, epoch):
            best = M.copy_params(params)
        elif stopper.should_stop:
            report.reason = "patience"
            break
    if epochs:
        params = best
    report.final_metric = None if stopper.best == np.inf else float(stopper.best)
    report.seconds = time.perf_counter() - t0
    return params, report


def linear_probe(params, head: str, data: SupervisedData, train_cfg: TrainConfig,
                 cfg: M.ModelConfig, instance_norm: bool = True, epochs: int | None = None):
    """Train only the task head; the backbone arrays are copied unchanged."""
    params = M.copy_params(params)
    if data.head != head:
        raise ValueError(f"data is for head {data.head!r}, not {head!r}")
    if not M.head_names(params, head):
        raise ValueError(f"head {head!r} is not attached")
    if epochs is None:
        epochs = int(train_cfg.probe_fraction * train_cfg.max_epochs)
    return _fit(params, cfg, data, train_cfg, epochs, instance_norm, backbone=False, stage="probe")


def fine_tune(params, data: SupervisedData, train_cfg: TrainConfig, cfg: M.ModelConfig,
              instance_norm: bool = True, epochs: int | None = None, *,
              probed: bool = False, no_linear_probe: bool = False):
    """Full fine-tuning of backbone and head.

    Requires ``probed=True`` (stage one done) unless ``no_linear_probe`` is set.
    """
    if not (probed or no_linear_probe):
        raise TrainingError("fine_tune requires linear probing first (or no_linear_probe)")
    params = M.copy_params(params)
    if epochs is None:
        epochs = train_cfg.max_epochs
    return _fit(params, cfg, data, train_cfg, epochs, instance_norm, backbone=True, stage="finetune")


def attach_head(params, cfg: M.ModelConfig, head: str, width: int | None = None):
    params = M.copy_params(params)
    return M.add_head(params, cfg, head, width)


def two_stage_finetune(params, data: SupervisedData, train_cfg: TrainConfig, cfg: M.ModelConfig,
                       width: int | None = None, instance_norm: bool = True, no_linear_probe: bool = False):
    """Attach a fresh head, probe it, then tune everything; returns ``(params, reports)``."""
    params = attach_head(params, cfg, data.head, width)
    reports = []
    probe_epochs = 0 if no_linear_probe else int(train_cfg.probe_fraction * train_cfg.max_epochs)
    if probe_epochs:
        params, rep = linear_probe(params, data.head, data, train_cfg, cfg, instance_norm, probe_epochs)
        reports.append(rep)
    rest = train_cfg.max_epochs - probe_epochs
    params, rep = fine_tune(params, data, train_cfg, cfg, instance_norm, rest,
                            probed=not no_linear_probe, no_linear_probe=no_linear_probe)
    reports.append(rep)
    return params, reports
