import numpy as np
import pytest
import yaml

from epipretrain import harness as H
from epipretrain import model as M
from epipretrain import tasks as TK
from epipretrain.config import load_config
from epipretrain.plots import MissingResults, emit_plots
from epipretrain.synthetic import DiseaseSpec, SyntheticCorpusSpec, generate_synthetic


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    root = tmp_path_factory.mktemp("h")
    spec = SyntheticCorpusSpec([
        DiseaseSpec("flu", peak_month=1, series=2, length=110, cutoff="1961-06-01"),
        DiseaseSpec("rsv", peak_month=7, series=2, length=110),
        DiseaseSpec("typhoid", seasonal=False, series=2, length=110),
    ])
    manifest = generate_synthetic(spec, 0, root / "corpus")
    raw = {
        "manifest": str(manifest), "output_dir": str(root / "out"), "seeds": [0, 1],
        "model": {"P": 4, "S": 4, "D": 8, "n_layers": 1, "n_heads": 2, "ffn_width": 8},
        "pretrain": {"learning_rate": 1e-3, "max_epochs": 4},
        "finetune": {"learning_rate": 1e-3, "max_epochs": 4},
        "ssl": {"window": 32, "batch_size": 4},
        "task": {"dataset": "flu", "horizon": 2, "input_window": 8, "eval_start": 96, "eval_end": 100, "eval_step": 2},
    }
    (root / "e.yaml").write_text(yaml.safe_dump(raw))
    return load_config(root / "e.yaml")


def test_corpus_cutoff_and_normalization(cfg):
    corpus = H.load_corpus(cfg)
    names = [d.name for d in corpus.pretrain]
    assert names == ["flu", "rsv", "typhoid"]
    flu = corpus.pretrain[0]
    assert all(len(s) < 110 for s in flu.series)  # cut at 1961-06-01
    pooled = flu.pooled_values()
    assert abs(pooled.mean()) < 1e-9 and abs(pooled.std() - 1) < 1e-9
    assert len(corpus.target_series) == 110  # the target keeps its full raw history


def test_exclude_disease(cfg):
    corpus = H.load_corpus(H.with_ablation(cfg, exclude_disease="flu"))
    assert [d.name for d in corpus.pretrain] == ["rsv", "typhoid"]
    assert corpus.target.name == "flu"


def test_no_pretrain_returns_init(cfg):
    corpus = H.load_corpus(cfg)
    params, report = H.pretrain_params(H.with_ablation(cfg, no_pretrain=True), corpus, 0)
    init = M.init_params(cfg.model_config(0))
    assert report is None
    assert all(np.array_equal(params[k], init[k]) for k in init)


def test_only_task(cfg):
    corpus = H.load_corpus(cfg)
    _, report = H.pretrain_params(H.with_ablation(cfg, only_task="peakmask"), corpus, 0)
    assert list(report.losses) == ["peakmask"]


def test_no_instance_norm_keeps_dataset_norm(cfg):
    c = H.with_ablation(cfg, no_instance_norm=True)
    assert not c.ssl_config().instance_norm
    corpus = H.load_corpus(c)
    assert abs(corpus.pretrain[1].pooled_values().mean()) < 1e-9


def test_eval_weeks(cfg):
    series = H.load_corpus(cfg).target_series
    assert H.eval_weeks(cfg, series) == [96, 98, 100]
    c = H.replace(cfg, task=H.replace(cfg.task, eval_start=None, eval_end=None, eval_step=1))
    weeks = H.eval_weeks(c, series)
    assert weeks[-1] == 110 - 1 - 2 and len(weeks) == 11


def test_fraction_one_equals_base(cfg, tmp_path):
    c = H.replace(cfg, seeds=[0])
    base = H.run(c, tmp_path / "base")
    rows = H.sweep_data_fraction(c, [0.6, 0.8, 1.0], tmp_path / "sweep")
    assert [r["fraction"] for r in rows] == [0.6, 0.8, 1.0]
    assert rows[-1]["avg_rmse"] == base[0].avg_rmse
    trend = H.fraction_trend(rows)
    assert isinstance(trend["monotone_nonincreasing"], bool)


def test_workers_match_serial(cfg, tmp_path):
    serial = H.run(cfg, tmp_path / "s")
    parallel = H.run(H.replace(cfg, workers=2), tmp_path / "p")
    assert (tmp_path / "s/results.csv").read_text() == (tmp_path / "p/results.csv").read_text()
    assert serial.keys() == parallel.keys() == {0, 1}


def test_persistence_baseline(cfg):
    res = H.persistence_eval(cfg, H.load_corpus(cfg))
    assert res.task == "persistence" and len(res.records) == 6


def test_checkpoint_reload(cfg, tmp_path):
    H.run(H.replace(cfg, seeds=[1]), tmp_path)
    p = H.load_pretrained(tmp_path / "seed_1/pretrained.ckpt", cfg, 1)
    assert "head.peakmask.w1" in p


def test_plots(cfg, tmp_path):
    with pytest.raises(MissingResults, match="no results"):
        emit_plots(tmp_path / "empty")
    assert not (tmp_path / "empty").exists() or not any((tmp_path / "empty").iterdir())
    H.run(H.replace(cfg, seeds=[0]), tmp_path / "one")
    files = emit_plots(tmp_path / "one")
    assert len(files) >= 2 and all(f.exists() and f.suffix == ".png" for f in files)
