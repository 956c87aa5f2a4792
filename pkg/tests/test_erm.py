import numpy as np
import pytest

from dfr.erm import (
    ERMNetwork,
    MlpModel,
    TrainConfig,
    TrainingDivergedError,
    extract_features,
    grad_check,
    init_mlp,
    load_model,
    loss_and_grads,
    save_model,
    train_erm,
)
from dfr.metrics import evaluate
from dfr.preprocessing import Scaler
from dfr.solver import LinearHead, predict_logits
from dfr.synth import SpuriousSpec, generate


def _blobs(seed=0, n=200):
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, n)
    X = r.standard_normal((n, 2)) * 0.5 + np.where(y[:, None] == 1, 3.0, -3.0)
    return X, y


def test_separable_blobs():
    X, y = _blobs()
    model = train_erm((X, y), TrainConfig(epochs=50, hidden=(16,)))
    assert np.mean(model.predict(X) == y) >= 0.99
    L = model.train_losses
    k = max(1, len(L) // 10)
    assert np.mean(L[-k:]) < np.mean(L[:k])


def test_full_correlation_collapses_worst_group():
    spec = SpuriousSpec(p_corr=1.0, d_core=10, d_spurious=10, core_margin=1.5,
                        spurious_margin=8.0, n_train=2000, n_test=2000)
    tr, _, te = generate(spec, 0)
    model = train_erm(tr, TrainConfig(epochs=20))
    assert evaluate(model.predict(te.inputs), te.labels, te.groups, 4).worst_group_accuracy < 0.05


def test_zero_epochs_is_init():
    X, y = _blobs()
    cfg = TrainConfig(epochs=0, hidden=(8,), seed=3)
    assert train_erm((X, y), cfg).equals(init_mlp((2, 8, 2), 3))


def test_deterministic():
    X, y = _blobs()
    cfg = TrainConfig(epochs=5, hidden=(8,), seed=1)
    assert train_erm((X, y), cfg).equals(train_erm((X, y), cfg))


def test_divergence_reports_epoch():
    X, y = _blobs()
    with pytest.raises(TrainingDivergedError) as info:
        train_erm((X * 1e150, y), TrainConfig(epochs=3, learning_rate=1e10))
    assert info.value.epoch == 0


def test_identity_features_and_zero_input():
    d = 4
    model = MlpModel((d, d, 2), [np.eye(d), np.ones((2, d))], [np.zeros(d), np.zeros(2)])
    X = np.abs(np.random.default_rng(0).standard_normal((5, d)))
    np.testing.assert_array_equal(model.features(X), X)
    b = np.array([0.5, -1.0, 2.0, 0.0])
    model.biases[0] = b
    np.testing.assert_array_equal(model.features(np.zeros((1, d)))[0], np.maximum(b, 0))
    with pytest.raises(ValueError):
        model.features(np.zeros((1, d + 1)))


def test_probe_equal_to_output_layer_reproduces_logits():
    spec = SpuriousSpec(n_train=300)
    tr, _, _ = generate(spec, 0)
    model = train_erm(tr, TrainConfig(epochs=3))
    emb = extract_features(model, tr)
    assert np.array_equal(emb.labels, tr.labels) and np.array_equal(emb.groups, tr.groups)
    probe = LinearHead(model.weights[-1], model.biases[-1], Scaler.identity(model.n_features))
    np.testing.assert_allclose(predict_logits(probe, emb.features), model.logits(tr.inputs),
                               rtol=1e-5, atol=1e-5)  # features are stored as float32


def test_grad_check_random_models():
    r = np.random.default_rng(0)
    for k in range(5):
        model = init_mlp((5, 7, 6, 3), k)
        for b in model.biases:  # zero biases put dead rows exactly on a ReLU kink
            b += r.normal(0, 0.1, b.shape)
        X, y = r.standard_normal((9, 5)), r.integers(0, 3, 9)
        assert grad_check(model, (X, y), n_params=200) < 1e-4


def test_grad_check_zero_loss_batch():
    model = init_mlp((2, 3), 0)
    model.weights[0][:] = [[1e4, 0], [0, 0], [-1e4, 0]]
    X, y = np.array([[5.0, 0.0]]), np.array([0])
    assert grad_check(model, (X, y)) == 0.0
    with pytest.raises(ValueError):
        grad_check(model, (X, y), epsilon=1e-2)


def test_linear_model_closed_form_gradient():
    r = np.random.default_rng(1)
    model = init_mlp((4, 3), 0)
    model.biases[0][:] = r.standard_normal(3)
    X, y = r.standard_normal((6, 4)), r.integers(0, 3, 6)
    Z = X @ model.weights[0].T + model.biases[0]
    P = np.exp(Z - Z.max(1, keepdims=True))
    P /= P.sum(1, keepdims=True)
    P[np.arange(6), y] -= 1
    _, (gW, gb) = loss_and_grads(model, X, y)
    np.testing.assert_allclose(gW, P.T @ X / 6, atol=1e-10)
    np.testing.assert_allclose(gb, P.mean(0), atol=1e-10)


def test_checkpoint_round_trip(tmp_path):
    model = init_mlp((3, 5, 4, 2), 7)
    p = tmp_path / "m.dfrm"
    save_model(model, p)
    assert load_model(p).equals(model)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="bytes"):
        load_model(p)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")


def test_estimator_api():
    X, y = _blobs()
    est = ERMNetwork(hidden=(8,), epochs=10)
    est.fit(X, y)
    assert est.transform(X).shape == (len(y), 8)
    assert est.score(X, y) > 0.95
