"""Self-supervised pre-training tasks: three masking variants and season detection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from .data import DiseaseDataset, SeasonMap, assign_segment_season, detect_peak_season

RANDMASK, LASTMASK, PEAKMASK, SEASON = "randmask", "lastmask", "peakmask", "season"
TASKS = (RANDMASK, LASTMASK, PEAKMASK, SEASON)
MASK_TASKS = (RANDMASK, LASTMASK, PEAKMASK)

_ALIASES = {
    "randmask": RANDMASK,
    "lastmask": LASTMASK,
    "peakmask": PEAKMASK,
    "season": SEASON,
    "seasondetect": SEASON,
    "seasonselect": SEASON,
}


def task_name(name: str) -> str:
    try:
        return _ALIASES[name.lower().replace("_", "").replace("-", "")]
    except KeyError:
        raise ValueError(f"unknown SSL task {name!r}; expected one of {TASKS}") from None


@dataclass
class SSLConfig:
    randmask_gamma: float = 0.2
    lastmask_gamma: float = 0.1
    window: int = 64
    batch_size: int = 16
    tasks: tuple[str, ...] = TASKS
    instance_norm: bool = True

    def __post_init__(self):
        self.tasks = tuple(task_name(t) for t in self.tasks)
        for g in (self.randmask_gamma, self.lastmask_gamma):
            if not 0.0 <= g <= 1.0:
                raise ValueError("mask fractions must lie in [0, 1]")
        if self.window < 1 or self.batch_size < 1:
            raise ValueError("window and batch_size must be >= 1")


@dataclass
class SSLBatch:
    """Inputs ``(..., L, P)``; targets are segments (masking) or 1-based season labels."""

    task: str
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray | None = None  # boolean (..., L)
    gamma: float | None = None
    source: str = ""
    stats: M.InstanceStats | None = None

    @property
    def masked_indices(self) -> frozenset[int]:
        """1-based masked segment indices of a single (unbatched) sequence."""
        if self.mask is None:
            return frozenset()
        if self.mask.ndim != 1:
            raise ValueError("masked_indices is defined for a single sequence; use .mask")
        return frozenset(int(i) + 1 for i in np.flatnonzero(self.mask))


def mask_count(L: int, gamma: float) -> int:
    if gamma <= 0:
        return 0
    return min(L, max(1, int(np.floor(gamma * L + 1e-12))))


def _segments(seq) -> np.ndarray:
    return seq.segments if isinstance(seq, M.SegmentSequence) else np.asarray(seq, dtype=np.float64)


def _apply_mask(task, segs, mask, gamma=None) -> SSLBatch:
    inputs = np.where(mask[..., None], 0.0, segs)
    return SSLBatch(task, inputs, segs.copy(), mask, gamma)


def rand_mask(seq, gamma: float, rng: np.random.Generator) -> SSLBatch:
    segs = _segments(seq)
    L = segs.shape[-2]
    n = mask_count(L, gamma)
    lead = segs.shape[:-2]
    mask = np.zeros(lead + (L,), dtype=bool)
    flat = mask.reshape(-1, L)
    for row in flat:
        if n:
            row[rng.choice(L, size=n, replace=False)] = True
    return _apply_mask(RANDMASK, segs, mask, gamma)


def last_mask(seq, gamma: float) -> SSLBatch:
    segs = _segments(seq)
    L = segs.shape[-2]
    mask = np.zeros(segs.shape[:-1], dtype=bool)
    n = mask_count(L, gamma)
    if n:
        mask[..., L - n :] = True
    return _apply_mask(LASTMASK, segs, mask, gamma)


def peak_cover_mask(T: int, P: int, S: int, t_peak: int) -> np.ndarray:
    """Boolean ``(L,)`` of segments whose span contains 0-based position ``t_peak``."""
    starts = np.arange(M.segment_count(T, P, S)) * S
    return (starts <= t_peak) & (t_peak <= starts + P - 1)


def peak_mask(seq, raw_series, P: int | None = None, S: int | None = None) -> SSLBatch:
    """Mask every segment covering the first argmax of ``raw_series``.

    ``raw_series`` may be batched ``(B, T)``. ``P`` defaults to the segment
    width of ``seq``. ``S`` may be omitted only for unit stride.
    """
    segs = _segments(seq)
    raw = np.asarray(raw_series, dtype=np.float64)
    L, width = segs.shape[-2], segs.shape[-1]
    P = P or width
    T = raw.shape[-1]
    if S is None:
        if L != T - P + 1:
            raise ValueError("stride is not 1; pass S")
        S = 1
    if M.segment_count(T, P, S) != L:
        raise ValueError("raw_series does not match the segment sequence")
    peaks = np.argmax(raw, axis=-1)
    mask = np.zeros(segs.shape[:-1], dtype=bool)
    flat_m = mask.reshape(-1, L)
    for row, t in zip(flat_m, np.ravel(peaks)):
        row[:] = peak_cover_mask(T, P, S, int(t))
    return _apply_mask(PEAKMASK, segs, mask)


def season_targets(seq, season_map: SeasonMap | None) -> SSLBatch:
    """Per-segment season labels (1..4) from the segment month stamps."""
    if season_map is None:
        raise ValueError("season targets need a seasonal disease")
    if not isinstance(seq, M.SegmentSequence) or seq.segment_months is None:
        raise ValueError("season targets need month stamps")
    months = np.asarray(seq.segment_months)
    labels = np.empty(months.shape[:-1], dtype=np.int64)
    flat_l = labels.reshape(-1, labels.shape[-1])
    for row, m in zip(flat_l, months.reshape(-1, *months.shape[-2:])):
        row[:] = [assign_segment_season(seg, season_map) for seg in m]
    return SSLBatch(SEASON, seq.segments.copy(), labels, None)


def ssl_loss(batch: SSLBatch, predictions):
    """Loss value only; see :func:`ssl_loss_grad` for the gradient."""
    return ssl_loss_grad(batch, predictions)[0]


def ssl_loss_grad(batch: SSLBatch, predictions):
    pred = np.asarray(predictions, dtype=np.float64)
    if batch.task == SEASON:
        if pred.shape != batch.targets.shape + (4,):
            raise ValueError(f"prediction shape {pred.shape} does not match targets {batch.targets.shape}")
        return M.cross_entropy_loss(pred, batch.targets - 1)
    if pred.shape != batch.targets.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match targets {batch.targets.shape}")
    return M.mse_loss(pred, batch.targets)


# ---------------------------------------------------------------------------
# corpus sampling


@dataclass
class PretrainCorpus:
    datasets: list[DiseaseDataset]
    season_maps: dict[str, SeasonMap] = field(default_factory=dict)

    def __post_init__(self):
        if not self.datasets:
            raise ValueError("pre-train corpus is empty")
        for ds in self.datasets:
            if ds.seasonal and ds.name not in self.season_maps:
                self.season_maps[ds.name] = detect_peak_season(ds)


def sample_windows(dataset: DiseaseDataset, n: int, window: int, min_len: int, rng):
    """Sample ``n`` equal-length contiguous windows; returns ``(values, months)``."""
    idx = rng.integers(len(dataset.series), size=n)
    chosen = [dataset.series[i] for i in idx]
    w = min(window, min(len(s) for s in chosen))
    if w < min_len:
        raise ValueError(f"dataset {dataset.name!r} has series shorter than {min_len}")
    vals = np.empty((n, w))
    months = np.empty((n, w), dtype=np.int64)
    for j, s in enumerate(chosen):
        start = int(rng.integers(len(s) - w + 1))
        vals[j] = s.values[start : start + w]
        months[j] = s.month_stamps[start : start + w]
    return vals, months


def make_task_batch(task, raw, months, cfg: M.ModelConfig, ssl_cfg: SSLConfig, rng, season_map=None):
    """Instance-normalize, segment and build one task batch from raw windows ``(B, T)``."""
    if ssl_cfg.instance_norm:
        x, stats = M.instance_normalize(raw)
    else:
        x, stats = raw, None
    seq = M.segment(x, cfg.P, cfg.S, months)
    if task == RANDMASK:
        b = rand_mask(seq, ssl_cfg.randmask_gamma, rng)
    elif task == LASTMASK:
        b = last_mask(seq, ssl_cfg.lastmask_gamma)
    elif task == PEAKMASK:
        b = peak_mask(seq, raw, cfg.P, cfg.S)
    else:
        b = season_targets(seq, season_map)
    b.stats = stats
    return b


def sample_batch(corpus: PretrainCorpus, cfg: M.ModelConfig, ssl_cfg: SSLConfig, rng) -> list[SSLBatch]:
    """Pick one dataset uniformly and build a batch for every applicable task.

    Season detection is skipped for non-seasonal diseases.
    """
    ds = corpus.datasets[int(rng.integers(len(corpus.datasets)))]
    raw, months = sample_windows(ds, ssl_cfg.batch_size, ssl_cfg.window, cfg.P, rng)
    out = []
    for task in ssl_cfg.tasks:
        if task == SEASON and not ds.seasonal:
            continue
        b = make_task_batch(task, raw, months, cfg, ssl_cfg, rng, corpus.season_maps.get(ds.name))
        b.source = ds.name
        out.append(b)
    return out


def batch_loss_and_grads(params: M.Params, cfg: M.ModelConfig, batch: SSLBatch):
    """Forward and backward for one task batch through the shared backbone."""
    z, cache = M.encode(params, cfg, batch.inputs)
    pred, hcache = M.head_forward(params, batch.task, z)
    loss, dpred = ssl_loss_grad(batch, pred)
    dz, grads = M.head_backward(params, batch.task, dpred, hcache)
    M.add_grads(grads, M.encode_backward(params, cfg, dz, cache))
    return loss, grads


def ensure_ssl_heads(params: M.Params, cfg: M.ModelConfig, tasks: Sequence[str] = TASKS) -> M.Params:
    for t in tasks:
        if not M.head_names(params, t):
            M.add_head(params, cfg, t)
    return params
