"""Shared oracles for the test suite."""

import numpy as np

from epipretrain import model as M
from epipretrain import ssl as T
from epipretrain import training as TR
from epipretrain.data import SeasonMap


def rel_error(a, n, floor=1e-6):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def numeric_grad(loss_fn, params, name, h=1e-4):
    arr = params[name]
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn(params)
        flat[i] = old - h
        down = loss_fn(params)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def max_grad_error(loss_fn, grads, params, h=1e-4):
    """Worst relative error over every parameter the loss depends on."""
    worst, where = 0.0, None
    for name in sorted(params):
        n = numeric_grad(loss_fn, params, name, h)
        a = grads.get(name, np.zeros_like(n))
        e = float(rel_error(a, n).max())
        if e > worst:
            worst, where = e, name
    return worst, where


def ssl_batches(cfg, rng, B=2, T_len=6):
    """One batch per SSL task on random data with month stamps."""
    raw = rng.normal(size=(B, T_len))
    months = np.array([[(i // 2) % 12 + 1 for i in range(T_len)]] * B)
    x, stats = M.instance_normalize(raw)
    seq = M.segment(x, cfg.P, cfg.S, months)
    out = [
        T.rand_mask(seq, 0.3, rng),
        T.last_mask(seq, 0.2),
        T.peak_mask(seq, raw, cfg.P, cfg.S),
        T.season_targets(seq, SeasonMap.from_peak_block("x", 0)),
    ]
    return out


def ssl_grad_error(cfg, batch, seed=0):
    p = T.ensure_ssl_heads(M.init_params(cfg), cfg)
    _, grads = T.batch_loss_and_grads(p, cfg, batch)

    def loss(q):
        z, _ = M.encode(q, cfg, batch.inputs)
        return T.ssl_loss(batch, M.head_forward(q, batch.task, z)[0])

    used = {k: v for k, v in p.items() if M.is_backbone(k) or k.startswith(f"head.{batch.task}.")}
    return max_grad_error(loss, grads, used)


def supervised_grad_error(cfg, data, width=None, instance_norm=True):
    p = M.add_head(M.init_params(cfg), cfg, data.head, width)
    _, grads = TR.supervised_loss_and_grads(p, cfg, data, instance_norm)
    return max_grad_error(lambda q: TR.supervised_loss(q, cfg, data, instance_norm), grads, p)


def supervised_cases(rng, T_len=8):
    X = rng.normal(size=(3, T_len)) + 2.0
    return [
        (TR.SupervisedData(X, rng.normal(size=(3, 2)), "forecast"), 2),
        (TR.SupervisedData(X[:, :-2], rng.normal(size=(3, 2)), "forecast", pad=2), 2),
        (TR.SupervisedData(X, rng.normal(size=3), "scalar"), None),
        (TR.SupervisedData(X, np.array([0, 4, 2]), "week"), 5),
        (TR.SupervisedData(X, np.array([1, 1, 3]), "onset"), 5),
    ]
