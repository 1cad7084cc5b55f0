"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes follow the model sizes used in the experiments: a batch of 32
windows of 5 tokens at D=32 with 4 heads, plus one encoder forward/backward.
"""

import argparse
import timeit

import numpy as np

from epipretrain import _kernels_py
from epipretrain import kernels
from epipretrain import model as M


def cases(rng):
    B, H, L, dh = 32, 4, 5, 8
    N, D = B * L, H * dh
    x = rng.normal(size=(N, D))
    g, b = rng.normal(size=D), rng.normal(size=D)
    y, xhat, rstd = _kernels_py.layernorm_forward(x, g, b, 1e-5)
    q, k, v = (rng.normal(size=(B, H, L, dh)) for _ in range(3))
    out, p = _kernels_py.attention_forward(q, k, v, 0.35)
    a = rng.normal(size=(N, 4 * D))
    return {
        "layernorm_forward": lambda m: m.layernorm_forward(x, g, b, 1e-5),
        "layernorm_backward": lambda m: m.layernorm_backward(x, xhat, rstd, g),
        "gelu_forward": lambda m: m.gelu_forward(a),
        "gelu_backward": lambda m: m.gelu_backward(a, a),
        "attention_forward": lambda m: m.attention_forward(q, k, v, 0.35),
        "attention_backward": lambda m: m.attention_backward(out, q, k, v, p, 0.35),
    }


def encoder_step(rng):
    cfg = M.ModelConfig(P=4, S=4, D=32, n_layers=2, n_heads=4, ffn_width=64)
    params = M.init_params(cfg)
    x = rng.normal(size=(32, 5, 4))

    def step():
        z, cache = M.encode(params, cfg, x)
        M.encode_backward(params, cfg, np.ones_like(z), cache)

    return step


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    try:
        compiled = kernels.get_backend("compiled")
    except ImportError:
        compiled = None
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':22s} {'numpy us':>10s} {'compiled us':>12s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=args.repeat, repeat=3)) / args.repeat * 1e6
        if compiled is None:
            print(f"{name:22s} {t_py:10.1f}")
            continue
        t_c = min(timeit.repeat(lambda: fn(compiled), number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:22s} {t_py:10.1f} {t_c:12.1f} {t_py / t_c:7.2f}x")
    step = encoder_step(rng)
    n = max(1, args.repeat // 10)
    t = min(timeit.repeat(step, number=n, repeat=3)) / n * 1e3
    print(f"encoder fwd+bwd with the active backend ({kernels.BACKEND}): {t:.2f} ms")


if __name__ == "__main__":
    main()
