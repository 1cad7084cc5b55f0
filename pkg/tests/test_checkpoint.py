import numpy as np
import pytest

from epipretrain import model as M
from epipretrain import ssl as T
from epipretrain.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def test_round_trip_bit_exact(tmp_path, small_cfg):
    p = T.ensure_ssl_heads(M.init_params(small_cfg), small_cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path, small_cfg, {"epochs": 3})
    q, cfg, extra = load_checkpoint(path, small_cfg)
    assert cfg == small_cfg and extra == {"epochs": 3}
    assert list(q) == list(p)
    for k in p:
        assert q[k].tobytes() == p[k].tobytes()


def test_config_mismatch(tmp_path, small_cfg):
    path = tmp_path / "m.ckpt"
    save_checkpoint(M.init_params(small_cfg), path, small_cfg)
    other = M.ModelConfig(P=4, S=4, D=32, n_layers=1, n_heads=2, ffn_width=32)
    with pytest.raises(CheckpointError, match="D"):
        load_checkpoint(path, other)


def test_truncated_and_corrupt(tmp_path, small_cfg):
    path = tmp_path / "m.ckpt"
    save_checkpoint(M.init_params(small_cfg), path, small_cfg)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 1
    path.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"junk")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_load_then_encode_matches(tmp_path, small_cfg, rng):
    p = M.init_params(small_cfg)
    save_checkpoint(p, tmp_path / "m.ckpt", small_cfg)
    q, cfg, _ = load_checkpoint(tmp_path / "m.ckpt")
    x = rng.normal(size=(2, 5, 4))
    assert np.array_equal(M.encode(p, small_cfg, x)[0], M.encode(q, cfg, x)[0])
