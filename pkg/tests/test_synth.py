import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from dfr.synth import (
    SpuriousSpec,
    ablate_spurious_block,
    assign_groups,
    bayes_core_accuracy,
    drop_minority,
    generate,
)


def test_p_corr_one_has_no_minority():
    tr, _, _ = generate(SpuriousSpec(p_corr=1.0, n_train=1000), 0)
    assert np.all(tr.attributes == tr.labels)


def test_minority_fraction_binomial():
    n, p = 4000, 0.95
    tr, _, _ = generate(SpuriousSpec(p_corr=p, n_train=n), 1)
    frac = np.mean(tr.attributes != tr.labels)
    assert abs(frac - (1 - p)) <= 3 * np.sqrt(p * (1 - p) / n)


def test_five_class_match_rate():
    spec = SpuriousSpec(n_classes=5, d_core=6, d_spurious=6, p_corr=0.8, n_train=5000)
    tr, _, _ = generate(spec, 2)
    for c in range(5):
        rows = tr.labels == c
        rate = np.mean(tr.attributes[rows] == c)
        assert abs(rate - 0.8) <= 3 * np.sqrt(0.16 / rows.sum())
        # non-matching attributes spread over the other four values
        others = tr.attributes[rows & (tr.attributes != c)]
        assert set(np.unique(others)) == set(range(5)) - {c}


def test_val_and_test_group_balanced():
    _, va, te = generate(SpuriousSpec(n_val=403, n_test=1001), 3)
    for part in (va, te):
        counts = np.bincount(part.groups, minlength=4)
        assert counts.max() - counts.min() <= 1


def test_val_can_follow_train_distribution():
    _, va, _ = generate(SpuriousSpec(n_val=2000, val_distribution="train"), 3)
    assert np.mean(va.attributes == va.labels) > 0.9


def test_generate_is_deterministic():
    a = generate(SpuriousSpec(), 11)
    b = generate(SpuriousSpec(), 11)
    c = generate(SpuriousSpec(), 12)
    assert all(x.equals(y) for x, y in zip(a, b))
    assert not a[0].equals(c[0])


def test_groups_follow_label_times_a_plus_attribute():
    tr, _, _ = generate(SpuriousSpec(n_classes=3, d_core=4, d_spurious=4, p_corr=0.5), 0)
    assert np.array_equal(tr.groups, tr.labels * 3 + tr.attributes)
    assert tr.inputs.shape[1] == 8 and tr.d_core == 4


def test_assign_groups_examples():
    g, _ = assign_groups([0, 0, 1, 1], [0, 1, 0, 1], 2)
    assert g.tolist() == [0, 1, 2, 3]
    g, _ = assign_groups([0, 1, 1, 0], [0, 0, 0, 0], 1)
    assert g.tolist() == [0, 1, 1, 0]
    labels = np.repeat([0, 0, 1, 1], [3498, 184, 56, 1057])
    attrs = np.repeat([0, 1, 0, 1], [3498, 184, 56, 1057])
    _, schema = assign_groups(labels, attrs, 2)
    assert schema.train_counts.tolist() == [3498, 184, 56, 1057]
    np.testing.assert_allclose(np.round(schema.proportions * 100), [73, 4, 1, 22])
    with pytest.raises(ValueError, match="row 1"):
        assign_groups([0, 1], [0, 2], 2)


def test_ablations():
    tr, _, _ = generate(SpuriousSpec(), 0)
    zs = ablate_spurious_block(tr, "zero_spurious")
    assert np.array_equal(zs.core, tr.core) and not zs.spurious.any()
    assert not ablate_spurious_block(zs, "zero_core").inputs.any()
    assert np.array_equal(zs.groups, tr.groups) and np.array_equal(zs.labels, tr.labels)
    with pytest.raises(ValueError):
        ablate_spurious_block(tr, "zero_everything")


def test_spurious_reader_is_chance_on_core_only():
    from dfr.solver import LinearHead, predict_labels
    from dfr.preprocessing import Scaler
    from dfr.metrics import evaluate
    spec = SpuriousSpec(n_test=4000)
    tr, _, te = generate(spec, 0)
    d = spec.d_core + spec.d_spurious
    # read the attribute direction only: perfect on the spurious block
    means = np.array([tr.spurious[tr.attributes == a].mean(0) for a in range(2)])
    W = np.zeros((2, d))
    W[:, spec.d_core:] = means
    head = LinearHead(W, np.zeros(2), Scaler.identity(d))
    zs = ablate_spurious_block(te, "zero_spurious")
    acc = evaluate(predict_labels(head, zs.inputs), zs.labels, zs.groups, 4)
    assert acc.unweighted_mean_over_examples == pytest.approx(0.5, abs=0.03)


def test_drop_minority():
    tr, _, _ = generate(SpuriousSpec(p_corr=0.8), 0)
    nm = drop_minority(tr)
    assert np.all(nm.attributes == nm.labels) and nm.n == np.sum(tr.attributes == tr.labels)


def test_spec_validation():
    with pytest.raises(ValueError):
        SpuriousSpec(p_corr=1.2)
    with pytest.raises(ValueError):
        SpuriousSpec(n_train=3)
    with pytest.raises(ValueError):
        SpuriousSpec(core_structure="xor", n_classes=3, d_core=3, d_spurious=3)


def test_bayes_accuracy_oracles():
    assert bayes_core_accuracy(SpuriousSpec(core_margin=1.5)) == pytest.approx(norm.cdf(1.5))
    spec = SpuriousSpec(n_classes=5, d_core=10, d_spurious=10, core_margin=3.5)
    # Monte Carlo oracle with the same orthonormal-mean geometry
    r = np.random.default_rng(0)
    z = r.standard_normal((400_000, 5))
    z[:, 0] += 3.5
    mc = np.mean(z.argmax(1) == 0)
    assert bayes_core_accuracy(spec) == pytest.approx(mc, abs=3e-3)
    xor = SpuriousSpec(core_structure="xor", core_margin=1.0, core_noise_sigma=0.5)
    p = norm.cdf(2.0)
    assert bayes_core_accuracy(xor) == pytest.approx(p * p + (1 - p) ** 2)


def test_empirical_core_accuracy_near_bayes():
    spec = SpuriousSpec(core_margin=1.5, n_test=20000)
    tr, _, te = generate(spec, 0)
    mu = tr.core[tr.labels == 1].mean(0) - tr.core[tr.labels == 0].mean(0)
    pred = (te.core @ mu > 0).astype(int)
    assert np.mean(pred == te.labels) == pytest.approx(bayes_core_accuracy(spec), abs=0.015)
