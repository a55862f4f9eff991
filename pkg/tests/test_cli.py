import csv
import filecmp
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from rws.checkpoint import load_checkpoint, save_checkpoint
from rws.cli import ConfigError, RunConfig, load_dataset, main, parse_model_spec
from rws.estimators import draw_importance_batch
from rws.model import build_models
from rws.numerics import make_rng, sigmoid
from rws.oracle import exact_log_marginal
from rws.training import TrainConfig


def _config(tmp_path, **kw):
    d = {"model": "sbn/sbn:4-8", "train_data": "bars:3:1000", "epochs": 2, "learning_rate": 0.003}
    d.update(kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return str(path)


def _read_pgm(path):
    raw = path.read_bytes()
    m = re.match(rb"P5\n(\d+) (\d+)\n255\n", raw)
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw[m.end():], dtype=np.uint8).reshape(h, w)


# -- config ------------------------------------------------------------------


def test_model_spec_parsing():
    s = parse_model_spec("SBN/NADE:10-200-200")
    assert s.widths == [10, 200, 200]
    assert s.p_families == ["sbn"] * 4 and s.q_families == ["nade"] * 3
    s = parse_model_spec("sbn,sbn,nade/arsbn,sbn:3-5")
    assert s.p_families == ["sbn", "sbn", "nade"] and s.q_families == ["arsbn", "sbn"]
    assert str(parse_model_spec("sbn/sbn:4-16")) == "sbn/sbn:4-16"


@pytest.mark.parametrize("text", ["sbn:10", "sbn/sbn:", "sbn/sbn:4-0", "rbm/sbn:3", "sbn,sbn/sbn:3-4", "sbn/sbn,sbn,sbn:3-4"])
def test_model_spec_errors(text):
    with pytest.raises(ConfigError):
        parse_model_spec(text)


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="colour"):
        RunConfig.from_dict({"colour": "blue"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"momentum": 1.5})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"subset_sizes": [5, 2]})
    rc = RunConfig.from_dict({"K_train": 7})
    assert rc.train_config() == TrainConfig(K_train=7)


def test_synthetic_dataset_source_is_seeded():
    a = load_dataset("bars:3:100", "train", 5)
    b = load_dataset("bars:3:100", "train", 5)
    c = load_dataset("bars:3:100", "test", 5)
    assert np.array_equal(a.rows, b.rows) and not np.array_equal(a.rows, c.rows)


# -- train -------------------------------------------------------------------


def test_train_writes_metrics_and_checkpoints(tmp_path):
    out = tmp_path / "run"
    cfg = _config(tmp_path, epochs=30)
    assert main(["train", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "split", "ll_estimate", "ess_mean", "lr", "seconds"]
    assert len(rows) == 30 and all(r["split"] == "train" for r in rows)
    assert float(rows[-1]["ll_estimate"]) > float(rows[0]["ll_estimate"])
    assert all(r["seconds"] == "" for r in rows)
    cks = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert {"epoch-0000", "epoch-0030", "best"} <= set(cks) and len(cks) == 32
    assert load_checkpoint(out / "checkpoints" / "epoch-0030").state.epoch == 30


def test_train_with_validation_keeps_best(tmp_path):
    out = tmp_path / "run"
    cfg = _config(tmp_path, valid_data="bars:3:100", valid_K=50, epochs=3)
    assert main(["train", "--config", cfg, "--out", str(out), "--quiet", "--workers", "1"]) == 0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    valid = [r for r in rows if r["split"] == "valid"]
    assert len(valid) == 3
    best_epoch = 1 + int(np.argmax([float(r["ll_estimate"]) for r in valid]))
    best = load_checkpoint(out / "checkpoints" / "best")
    assert best.state.epoch == best_epoch


def test_train_zero_epochs_writes_initial_checkpoint_only(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", _config(tmp_path), "--epochs", "0", "--out", str(out), "--quiet"]) == 0
    assert [p.name for p in (out / "checkpoints").iterdir()] == ["epoch-0000"]
    assert (out / "metrics.csv").read_text().splitlines() == ["epoch,split,ll_estimate,ess_mean,lr,seconds"]


def test_train_overrides(tmp_path):
    out = tmp_path / "run"
    args = ["train", "--config", _config(tmp_path), "--k", "3", "--lr", "0.01", "--epochs", "1",
            "--seed", "9", "--q-update", "sleep", "--out", str(out), "--quiet"]
    assert main(args) == 0
    saved = json.loads((out / "run_config.json").read_text())
    assert (saved["K_train"], saved["learning_rate"], saved["seed"], saved["q_update_mode"]) == (3, 0.01, 9, "sleep")


@pytest.mark.parametrize("extra", [{"model": "sbn/sbn:4-x"}, {"model": "sbn,sbn/sbn:4-8"}, {"bogus": 1}, {"K_train": 0}])
def test_train_rejects_bad_config_before_compute(tmp_path, capsys, extra):
    out = tmp_path / "run"
    assert main(["train", "--config", _config(tmp_path, **extra), "--out", str(out)]) == 2
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_train_rejects_missing_data(tmp_path):
    assert main(["train", "--config", _config(tmp_path, train_data=str(tmp_path / "nope.amat")),
                 "--out", str(tmp_path / "r"), "--quiet"]) == 2


def test_train_runs_are_bit_identical(tmp_path):
    cfg = _config(tmp_path, valid_data="bars:3:100", valid_K=20, epochs=2)
    for name, workers in (("a", "1"), ("b", "2")):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name), "--quiet", "--workers", workers]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files
    for sub in ("checkpoints/epoch-0002", "checkpoints/best"):
        c = filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub)
        assert not c.diff_files and not c.left_only and not c.right_only
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


# -- eval --------------------------------------------------------------------


@pytest.fixture
def toy_checkpoint(tmp_path):
    r = make_rng(3)
    p, q = build_models([2, 3], 4, rng=r)
    for stack in (p, q):
        for layer in stack.layers:
            for v in layer.params.values():
                v[...] = r.normal(size=v.shape)
    return save_checkpoint(tmp_path / "toy", p, q, TrainConfig()), p, q


def test_eval_exact_proposal_matches_enumeration(tmp_path, toy_checkpoint, capsys):
    ck, p, _ = toy_checkpoint
    assert main(["eval", "--checkpoint", str(ck), "--data", "bars:2:40", "--proposal", "exact", "--k", "10",
                 "--workers", "1"]) == 0
    out = capsys.readouterr().out
    got = float(re.search(r"mean_ll=(\S+)", out).group(1))
    rows = load_dataset("bars:2:40", "test", 1234).rows
    want = np.mean([exact_log_marginal(p, x) for x in rows])
    assert abs(got - want) < 1e-6


def test_eval_k1_is_mean_single_sample_log_weight(tmp_path, toy_checkpoint, capsys):
    ck, p, q = toy_checkpoint
    assert main(["eval", "--checkpoint", str(ck), "--data", "bars:2:30", "--k", "1", "--chunk", "8",
                 "--seed", "4", "--workers", "1"]) == 0
    got = float(re.search(r"mean_ll=(\S+)", capsys.readouterr().out).group(1))
    rows = load_dataset("bars:2:30", "test", 1234).rows
    # eval stream 3, blocks of chunk // K rows, one substream per block
    logw = np.concatenate([
        draw_importance_batch(p, q, rows[s:s + 8], 1, make_rng(4, 3, j)).log_weights[:, 0]
        for j, s in enumerate(range(0, 30, 8))
    ])
    assert got == pytest.approx(float(logw.mean()), abs=1e-9)


def test_eval_is_reproducible_and_worker_independent(tmp_path, toy_checkpoint):
    ck, _, _ = toy_checkpoint
    outs = []
    for i, w in enumerate(["1", "1", "3"]):
        f = tmp_path / f"e{i}.txt"
        assert main(["eval", "--checkpoint", str(ck), "--data", "bars:2:50", "--k", "20", "--chunk", "100",
                     "--workers", w, "--out", str(f)]) == 0
        outs.append(f.read_text())
    assert outs[0] == outs[1] == outs[2]
    assert re.fullmatch(r"mean_ll=\S+ ci95=\[\S+, \S+\] ess_mean=\S+ n=50 K=20\n", outs[0])


def test_eval_streams_large_k(tmp_path, toy_checkpoint, capsys):
    # K above the chunk size goes through the per-datapoint streaming path
    ck, p, _ = toy_checkpoint
    assert main(["eval", "--checkpoint", str(ck), "--data", "bars:2:3", "--k", "25", "--chunk", "10",
                 "--proposal", "exact", "--workers", "1"]) == 0
    got = float(re.search(r"mean_ll=(\S+)", capsys.readouterr().out).group(1))
    rows = load_dataset("bars:2:3", "test", 1234).rows
    assert abs(got - np.mean([exact_log_marginal(p, x) for x in rows])) < 1e-9


def test_eval_width_mismatch(tmp_path, toy_checkpoint, capsys):
    ck, _, _ = toy_checkpoint
    assert main(["eval", "--checkpoint", str(ck), "--data", "bars:3:5", "--k", "2"]) == 2
    assert "width" in capsys.readouterr().err


# -- sample ------------------------------------------------------------------


def test_sample_pixels_are_visible_probabilities(tmp_path, toy_checkpoint):
    ck, p, _ = toy_checkpoint
    out = tmp_path / "s.pgm"
    assert main(["sample", "--checkpoint", str(ck), "--n", "5", "--seed", "2", "--out", str(out)]) == 0
    img = _read_pgm(out)
    assert img.shape == (2 * 2, 3 * 2)
    x, h, _ = p.sample(make_rng(2, 4), n=5)
    probs = sigmoid(p.layers[-1].logits(x, h[0]))
    for i in range(5):
        r, c = divmod(i, 3)
        tile = img[2 * r:2 * r + 2, 2 * c:2 * c + 2].reshape(-1)
        assert np.array_equal(tile, np.rint(255 * probs[i]).astype(np.uint8))
    assert np.all(img[2:, 4:] == 0)  # unused slot stays blank


def test_sample_single_tile_and_saturated_model(tmp_path):
    p, q = build_models([2], 6)
    p.layers[0].params["b"][:] = [30.0, -30.0]
    p.layers[1].params["W"][:] = 40.0 * np.array([[1, -1]] * 3 + [[-1, 1]] * 3)
    ck = save_checkpoint(tmp_path / "sat", p, q, TrainConfig())
    one = tmp_path / "one.pgm"
    assert main(["sample", "--checkpoint", str(ck), "--n", "1", "--shape", "2x3", "--out", str(one)]) == 0
    assert _read_pgm(one).shape == (2, 3)
    many = tmp_path / "many.pgm"
    assert main(["sample", "--checkpoint", str(ck), "--n", "4", "--shape", "3x2", "--out", str(many)]) == 0
    img = _read_pgm(many)
    tiles = [img[3 * r:3 * r + 3, 2 * c:2 * c + 2] for r in range(2) for c in range(2)]
    assert all(np.array_equal(t, tiles[0]) for t in tiles)
    assert sorted(set(img.ravel().tolist())) == [0, 255]
    assert main(["sample", "--checkpoint", str(ck), "--n", "2", "--out", str(tmp_path / "x.pgm")]) == 2


# -- analyze -----------------------------------------------------------------


def test_analyze_modes(tmp_path, toy_checkpoint):
    ck, _, _ = toy_checkpoint
    base = ["analyze", "--checkpoint", str(ck), "--data", "bars:2:20", "--n-datapoints", "3"]
    g = tmp_path / "g.csv"
    assert main(base + ["--mode", "grad-bias", "--reference-k", "50", "--sizes", "5,50", "--resamples", "10",
                        "--no-resample", "--out", str(g)]) == 0
    rows = list(csv.DictReader(open(g)))
    assert rows[-1]["size"] == "50" and float(rows[-1]["bias_l2"]) == 0 and float(rows[-1]["std"]) == 0

    ll = tmp_path / "ll.csv"
    assert main(base + ["--mode", "ll-bias", "--proposal", "exact", "--reference-k", "40", "--sizes", "1,4,40",
                        "--resamples", "20", "--out", str(ll)]) == 0
    assert all(abs(float(r["bias_l2"])) < 1e-10 and float(r["std"]) < 1e-10 for r in csv.DictReader(open(ll)))

    curve = tmp_path / "k.csv"
    assert main(base + ["--mode", "ll-vs-k", "--k-values", "1,2,4", "--out", str(curve)]) == 0
    assert [r["K"] for r in csv.DictReader(open(curve))] == ["1", "2", "4"]

    again = tmp_path / "g2.csv"
    main(base + ["--mode", "grad-bias", "--reference-k", "50", "--sizes", "5,50", "--resamples", "10",
                 "--no-resample", "--out", str(again)])
    assert again.read_bytes() == g.read_bytes()


def test_analyze_rejects_bad_sizes(tmp_path, toy_checkpoint):
    ck, _, _ = toy_checkpoint
    assert main(["analyze", "--checkpoint", str(ck), "--data", "bars:2:20", "--mode", "grad-bias",
                 "--reference-k", "10", "--sizes", "5,50", "--out", str(tmp_path / "x.csv")]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "rws", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train" in res.stdout
