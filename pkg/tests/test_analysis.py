import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest

from dfr.analysis import (
    FAMILIES,
    ExperimentGrid,
    Family,
    ablation_l1,
    ablation_retrains,
    core_only_accuracy,
    decoding_sweep,
    logit_additivity,
    method_comparison,
    pcorr_sweep,
    report_to_csv,
    write_report,
)
from dfr.erm import TrainConfig, init_mlp, train_erm
from dfr.preprocessing import Scaler
from dfr.reweighting import DfrConfig
from dfr.solver import LinearHead
from dfr.synth import SpuriousSpec, generate

TINY = Family(
    SpuriousSpec(n_classes=2, d_core=4, d_spurious=4, core_margin=2.0, spurious_margin=6.0,
                 p_corr=0.9, n_train=300, n_val=120, n_test=300),
    TrainConfig(epochs=3, hidden=(16,)),
    DfrConfig(n_retrains=2, c_grid=(1.0, 0.1)),
)


def test_family_registry():
    assert {"colormnist5", "dominoes_moderate", "dominoes_easy", "imbalanced",
            "celeba_like", "high_dim"} <= set(FAMILIES)
    assert FAMILIES["colormnist5"].spec.n_classes == 5
    assert FAMILIES["high_dim"].train.epochs == 0


def test_grid_validation():
    with pytest.raises(ValueError):
        ExperimentGrid(p_corr_values=(0.5, 1.2))
    with pytest.raises(ValueError):
        ExperimentGrid(n_outer_seeds=0)


def test_additivity_affine_heads():
    rng = np.random.default_rng(0)
    _, _, te = generate(SpuriousSpec(n_classes=3, n_test=200), 0)
    d = te.inputs.shape[1]
    scaler = Scaler().fit(rng.standard_normal((50, d)) * rng.uniform(0.5, 2.0, d) + 3.0)
    head = LinearHead(rng.standard_normal((3, d)), rng.standard_normal(3), scaler)
    assert logit_additivity(head, te)["max_abs_deviation"] < 1e-9
    linear_net = init_mlp((d, 3), 4)
    out = logit_additivity(linear_net, te)
    assert out["max_abs_deviation"] < 1e-9
    assert all(r > 1 - 1e-9 for r in out["r_squared"])


def test_additivity_reports_relu_deviation():
    tr, _, te = generate(TINY.spec, 0)
    model = train_erm(tr, replace(TINY.train, seed=0))
    out = logit_additivity(model, te)
    assert out["max_abs_deviation"] >= 0 and len(out["r_squared"]) == 2


def test_core_only_noise_reader_is_chance():
    # a head reading only the spurious block sees nothing once it is zeroed
    _, _, te = generate(SpuriousSpec(n_test=2000), 1)
    d_core, d = 10, te.inputs.shape[1]
    W = np.zeros((2, d))
    W[1, d_core:] = 1.0
    head = LinearHead(W, np.zeros(2), Scaler.identity(d))
    m = core_only_accuracy(head, te)
    assert m.unweighted_mean_over_examples == pytest.approx(0.5, abs=0.05)


def test_pcorr_sweep_shape_and_determinism():
    grid = ExperimentGrid(p_corr_values=(0.9, 1.0), n_outer_seeds=2)
    rep = pcorr_sweep(grid, TINY)
    assert [r["p_corr"] for r in rep["rows"]] == ["no_corr"] * 2 + ["0.9"] * 2 + ["1.0"] * 2
    assert "dfr" not in rep["summary"]["no_corr"] and rep["summary"]["0.9"]["dfr"]["n"] == 2
    assert json.dumps(rep, sort_keys=True) == json.dumps(pcorr_sweep(grid, TINY), sort_keys=True)


def test_decoding_sweep_columns():
    rep = decoding_sweep(ExperimentGrid(p_corr_values=(0.9,), n_outer_seeds=1), TINY,
                        include_transfer=True)
    row = rep["rows"][0]
    assert {"original_wga", "core_only_wga", "decoded_wga", "optimal_wga", "transfer_wga"} <= set(row)
    assert all(0.0 <= row[k] <= 1.0 for k in row if k.endswith("_wga"))


def test_ablation_retrains_table():
    rep = ablation_retrains(TINY, ks=(1, 2), n_outer_seeds=3)
    assert len(rep["rows"]) == 6 and len(rep["table"]) == 2
    assert rep["table"][0] == [rep["summary"]["1"]["mean"], rep["summary"]["1"]["std"]]


def test_ablation_l1_is_paired():
    fam = replace(FAMILIES["high_dim"], spec=replace(FAMILIES["high_dim"].spec, n_test=400))
    rep = ablation_l1(fam, n_outer_seeds=2, no_penalty_max_iter=200)
    assert all(r["same_subsamples"] for r in rep["rows"])
    assert rep["summary"]["difference"]["n"] == 2


def test_method_comparison_methods():
    rep = method_comparison(TINY, n_outer_seeds=1, include_nm=True)
    assert set(rep["summary"]) == {"erm", "dfr_val", "dfr_train", "group_balanced_train",
                                   "group_balanced_val", "crt", "lws", "dfr_train_nm"}


def test_report_files(tmp_path):
    rep = {"analysis": "x", "rows": [{"a": 0.1, "b": 1}, {"a": 0.2, "c": "z"}], "summary": {}}
    text = report_to_csv(rep)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert rows[0] == {"a": "0.1", "b": "1", "c": ""}
    jp, cp = write_report(rep, tmp_path)
    assert json.loads(jp.read_text()) == rep and cp.read_text() == text
