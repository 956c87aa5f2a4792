import json
import subprocess
import sys

import numpy as np
import pytest

from dfr.cli import main, reproducibility_probe, run_command
from dfr.data import EmbeddingDataset, save_embeddings


def _config(tmp_path, name, cfg):
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    run_command("generate", {"output_dir": str(root / "gen"), "seed": 3,
                             "synth": {"n_train": 400, "n_val": 120, "n_test": 200}})
    run_command("train-erm", {"output_dir": str(root / "erm"), "seed": 3, "dataset": str(root / "gen"),
                              "train": {"epochs": 2, "hidden": [16]}})
    run_command("extract", {"output_dir": str(root / "ext"), "seed": 3, "dataset": str(root / "gen"),
                            "model": str(root / "erm" / "model.dfrm")})
    return root


def test_pipeline_outputs(pipeline, tmp_path, capsys):
    assert (pipeline / "gen" / "dataset.json").exists()
    assert (pipeline / "erm" / "model.dfrm").exists()
    meta = json.loads((pipeline / "ext" / "dataset.json").read_text())
    assert meta["kind"] == "embeddings" and meta["d_core"] is None
    cfg = _config(tmp_path, "dfr", {"output_dir": str(tmp_path / "d"), "dataset": str(pipeline / "ext"),
                                    "dfr": {"n_retrains": 2, "c_grid": [1.0, 0.3]}})
    assert main(["dfr", "--config", cfg]) == 0
    res = json.loads((tmp_path / "d" / "result.json").read_text())
    assert res["chosen_C"] in (1.0, 0.3)
    ev = _config(tmp_path, "ev", {"output_dir": str(tmp_path / "e"), "dataset": str(pipeline / "gen"),
                                  "model": str(pipeline / "erm" / "model.dfrm")})
    assert main(["evaluate", "--config", ev]) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert 0.0 <= m["worst"] <= 1.0
    assert "worst-group accuracy" in capsys.readouterr().out


def test_dfr_on_embedding_files(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    g = y * 2 + rng.integers(0, 2, 200)
    X = rng.standard_normal((200, 6)) + 2.0 * y[:, None]
    save_embeddings(EmbeddingDataset(X[:100], y[:100], g[:100], 2, 4), tmp_path / "rw.csv")
    save_embeddings(EmbeddingDataset(X[100:], y[100:], g[100:], 2, 4), tmp_path / "te.csv")
    out = run_command("dfr", {"output_dir": str(tmp_path / "o"), "seed": 0, "embeddings": {
        "reweight": str(tmp_path / "rw.csv"), "test": str(tmp_path / "te.csv"),
        "n_classes": 2, "n_groups": 4}})
    res = json.loads((out / "result.json").read_text())
    assert res["chosen_C"] in (1, 0.7, 0.3, 0.1, 0.07, 0.03, 0.01)
    assert json.loads((out / "metrics.json").read_text())["worst"] > 0.8


def test_manifest_contents_and_replay(pipeline, tmp_path):
    man = json.loads((pipeline / "erm" / "manifest.json").read_text())
    assert man["command"] == "train-erm" and man["seed"] == 3
    assert set(man["outputs"]) >= {"model.dfrm", "training.json"}
    assert all(len(h) == 64 for h in man["inputs"].values())
    assert main(["train-erm", "--manifest", str(pipeline / "erm" / "manifest.json"),
                 "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "model.dfrm").read_bytes() == (pipeline / "erm" / "model.dfrm").read_bytes()


def test_wrong_manifest_command(pipeline, capsys):
    assert main(["dfr", "--manifest", str(pipeline / "erm" / "manifest.json")]) == 2
    assert "train-erm" in _error(capsys)["message"]


def test_schema_error_names_path(tmp_path, capsys):
    cfg = _config(tmp_path, "g", {"output_dir": str(tmp_path / "g"), "synth": {"p_corr": 1.5}})
    assert main(["generate", "--config", cfg]) == 2
    err = _error(capsys)
    assert err["json_path"] == "$.synth.p_corr" and err["type"] == "ConfigError"


def test_unknown_field_rejected(tmp_path, capsys):
    cfg = _config(tmp_path, "g", {"output_dir": str(tmp_path / "g"), "synthh": {}})
    assert main(["generate", "--config", cfg]) == 2
    assert "synthh" in _error(capsys)["message"]


def test_missing_input_file(tmp_path, capsys):
    cfg = _config(tmp_path, "e", {"output_dir": str(tmp_path / "e"), "dataset": str(tmp_path / "nope")})
    assert main(["extract", "--config", cfg, "--set", "model=/nonexistent.dfrm"]) == 2
    assert _error(capsys)["type"] == "FileNotFoundError"


def test_invalid_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{\"output_dir\": ")
    assert main(["generate", "--config", str(p)]) == 2
    assert "line 1" in _error(capsys)["message"]


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = _config(tmp_path, "g", {"output_dir": str(tmp_path / "g"), "seed": 1,
                                  "synth": {"n_train": 50, "n_val": 20, "n_test": 20}})
    monkeypatch.setenv("DFR_SEED", "7")
    assert main(["generate", "--config", cfg]) == 0
    assert json.loads((tmp_path / "g" / "manifest.json").read_text())["seed"] == 7
    assert main(["generate", "--config", cfg, "--seed", "9"]) == 0
    assert json.loads((tmp_path / "g" / "manifest.json").read_text())["seed"] == 9
    monkeypatch.setenv("DFR_SEED", "x")
    assert main(["generate", "--config", cfg]) == 2


def test_set_overrides(tmp_path, capsys):
    cfg = _config(tmp_path, "g", {"output_dir": str(tmp_path / "g"),
                                  "synth": {"n_train": 50, "n_val": 20, "n_test": 20}})
    assert main(["generate", "--config", cfg, "--set", "synth.n_train=60", "--set", "format=csv"]) == 0
    man = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert man["config"]["synth"]["n_train"] == 60 and man["config"]["format"] == "csv"
    assert main(["generate", "--config", cfg, "--set", "synth={}"]) == 2
    assert "scalar" in _error(capsys)["message"]
    assert main(["generate", "--config", cfg, "--set", "novalue"]) == 2


def test_sweep_and_verify(tmp_path):
    out = run_command("sweep", {"output_dir": str(tmp_path / "s"), "seed": 0,
                                "analysis": "ablation_l1", "n_outer_seeds": 2})
    assert (out / "ablation_l1.json").exists() and (out / "ablation_l1.csv").exists()
    assert main(["verify", "--out", str(tmp_path / "v"), "--set", "criteria=3"]) == 2
    cfg = _config(tmp_path, "v", {"output_dir": str(tmp_path / "v"), "criteria": [3]})
    assert main(["verify", "--config", cfg]) == 0
    rep = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert rep["results"][0]["criterion"] == 3


def test_reproducibility_probe():
    mismatches, n = reproducibility_probe(0)
    assert mismatches == [] and n >= 10


def test_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "dfr.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("dfr ")
