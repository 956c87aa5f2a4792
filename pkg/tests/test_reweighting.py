import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from dfr.data import EmbeddingDataset
from dfr.metrics import evaluate
from dfr.reweighting import (
    BASELINE_SOLVER,
    DEFAULT_C_GRID,
    DFRClassifier,
    DfrConfig,
    _weighted_fit,
    balanced_subsample_indices,
    class_weight_candidates,
    crt_baseline,
    fit_reweighted_head,
    group_balanced_sampling_retrain,
    group_balanced_subsample,
    lws_baseline,
    run_dfr,
    stratified_halves,
    tune,
)
from dfr.solver import predict_labels
from dfr.synth import SpuriousSpec, bayes_core_accuracy, generate


def _counts_after(counts, seed):
    groups = np.repeat(np.arange(len(counts)), counts)
    idx = balanced_subsample_indices(groups, len(counts), seed)
    return groups, idx


def test_reference_counts():
    groups, idx = _counts_after([3498, 184, 56, 1057], 0)
    assert np.bincount(groups[idx]).tolist() == [56, 56, 56, 56]
    assert idx.size == 224
    # the smallest group is kept whole
    assert set(np.flatnonzero(groups == 2)) <= set(idx)


@given(st.lists(st.integers(1, 300), min_size=1, max_size=8), st.integers(0, 2**32))
def test_random_counts(counts, seed):
    groups, idx = _counts_after(counts, seed)
    assert np.all(np.bincount(groups[idx], minlength=len(counts)) == min(counts))
    assert np.unique(idx).size == idx.size


def test_seeds_agree_on_smallest_group_only():
    groups, a = _counts_after([50, 5, 80], 1)
    _, b = _counts_after([50, 5, 80], 2)
    small = set(np.flatnonzero(groups == 1))
    assert small <= set(a) and small <= set(b)
    assert set(a) != set(b)


def test_balanced_input_is_full_copy():
    groups, idx = _counts_after([7, 7, 7], 3)
    assert np.array_equal(idx, np.arange(21))


def test_empty_group_error():
    with pytest.raises(ValueError, match="group 1"):
        balanced_subsample_indices([0, 0, 2], 3, 0)


def _emb(raw, core_only=False):
    X = raw.core if core_only else raw.inputs
    return EmbeddingDataset(X, raw.labels, raw.groups, raw.n_classes, raw.n_groups)


def test_core_features_reach_bayes():
    spec = SpuriousSpec(core_margin=1.5, n_val=2000, n_test=20000)
    _, va, te = generate(spec, 0)
    res = run_dfr(None, _emb(va, True), _emb(te, True), None, DfrConfig(seed=1))
    assert res.test_metrics.worst_group_accuracy >= bayes_core_accuracy(spec) - 0.02


def test_provenance_and_replay():
    spec = SpuriousSpec(n_val=400, n_test=400)
    _, va, te = generate(spec, 2)
    cfg = DfrConfig(n_retrains=3, seed=5)
    res = run_dfr(None, _emb(va), _emb(te), None, cfg)
    assert len(res.retrain_seeds) == 3 and len(res.subset_sizes) == 3
    again, _, _ = fit_reweighted_head(_emb(va), cfg, res.chosen_C, seeds=res.retrain_seeds)
    assert again.equals(res.head)
    d = json.loads(res.to_json())
    assert d["chosen_C"] in DEFAULT_C_GRID and d["provenance"]["lambda_rule"] == "1/(C*n)"
    assert res.to_json() == run_dfr(None, _emb(va), _emb(te), None, cfg).to_json()


def test_single_value_grid_skips_tuning():
    _, va, _ = generate(SpuriousSpec(), 0)
    C, cw, table = tune(_emb(va), DfrConfig(c_grid=(0.3,)))
    assert (C, cw, table) == (0.3, None, [])


def test_ties_go_to_smaller_c():
    r = np.random.default_rng(0)
    y = np.repeat([0, 1], 40)
    X = np.where(y[:, None] == 1, 20.0, -20.0) + r.standard_normal((80, 2))
    ds = EmbeddingDataset(X, y, y * 2 + (np.arange(80) % 2), 2, 4)
    C, _, table = tune(ds, DfrConfig(c_grid=(1.0, 0.7)))
    assert all(row["worst_group_accuracy"] == 1.0 for row in table)
    assert C == 0.7


def test_heavy_l1_family_picks_small_c():
    spec = SpuriousSpec(d_core=5, d_spurious=300, spurious_noise_sigma=1.0, spurious_margin=3.0,
                        n_train=8, n_val=40, n_test=400)
    picks = []
    for s in range(5):
        _, va, _ = generate(spec, s)
        picks.append(tune(_emb(va), DfrConfig(seed=s))[0])
    assert np.median(picks) < 1.0


def test_class_weight_candidates():
    grid = (1, 2, 3, 10, 100, 300, 1000)
    cands = class_weight_candidates(2, grid)
    assert len(cands) == 13 and cands[0] == (1.0, 1.0)
    assert (1.0, 1000.0) in cands and (1000.0, 1.0) in cands
    assert len(class_weight_candidates(3, (1, 2))) == 4


def test_tr_tr_tunes_class_weights():
    spec = SpuriousSpec(n_train=400, n_val=200, n_test=400)
    tr, va, te = generate(spec, 0)
    cfg = DfrConfig(variant="tr_tr", c_grid=(1.0, 0.1), class_weight_grid=(1.0, 3.0), seed=0)
    res = run_dfr(_emb(tr), _emb(va), _emb(te), None, cfg)
    assert len(res.tuning_table) == 2 * 3
    assert res.provenance["head_data_rows"] == tr.n
    with pytest.raises(ValueError, match="training embeddings"):
        run_dfr(None, _emb(va), None, None, cfg)


def test_halves_need_two_rows_per_group():
    with pytest.raises(ValueError, match="group 1"):
        stratified_halves([0, 0, 1, 2, 2], 3, 0.5, 0)


def test_crt_on_balanced_classes_is_plain_fit():
    _, va, _ = generate(SpuriousSpec(n_val=200), 0)
    ds = _emb(va)
    assert crt_baseline(ds).equals(_weighted_fit(ds, None, BASELINE_SOLVER))
    assert group_balanced_sampling_retrain(ds).equals(_weighted_fit(ds, None, BASELINE_SOLVER))
    one = EmbeddingDataset(np.ones((3, 2)), [0, 0, 0], [0, 0, 0], 1, 1)
    with pytest.raises(ValueError):
        crt_baseline(one)


def test_lws_identity_and_scaling():
    tr, va, _ = generate(SpuriousSpec(n_train=300), 0)
    head = crt_baseline(_emb(tr))
    f, same = lws_baseline(head, _emb(va), max_iter=0)
    assert np.all(f == 1.0) and same.equals(head)
    f, fitted = lws_baseline(head, _emb(va))
    assert f.shape == (2,) and np.array_equal(fitted.b, head.b)
    # a common positive scale on the weights with zero bias keeps predictions
    from dfr.solver import LinearHead
    h0 = LinearHead(head.W, np.zeros(2), head.scaler)
    h3 = LinearHead(3.0 * head.W, np.zeros(2), head.scaler)
    assert np.array_equal(predict_labels(h0, va.inputs), predict_labels(h3, va.inputs))


def test_group_balanced_sampling_empty_group():
    ds = EmbeddingDataset(np.ones((4, 2)), [0, 1, 0, 1], [0, 1, 0, 1], 2, 3)
    with pytest.raises(ValueError, match="group 2"):
        group_balanced_sampling_retrain(ds)


def test_estimator():
    spec = SpuriousSpec(n_val=400, n_test=2000)
    _, va, te = generate(spec, 0)
    est = DFRClassifier(n_retrains=3, c_grid=(1.0, 0.1))
    assert clone(est).get_params() == est.get_params()
    est.fit(va.inputs, va.labels, va.groups)
    m = evaluate(est.predict(te.inputs), te.labels, te.groups, 4)
    assert m.worst_group_accuracy > 0.8
    assert est.C_ in (1.0, 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        DfrConfig(variant="other")
    with pytest.raises(ValueError):
        DfrConfig(c_grid=())
    with pytest.raises(ValueError):
        DfrConfig(tuning_split_fraction=1.0)
