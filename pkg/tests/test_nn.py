import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from saga import nn
from saga.autodiff import Tensor, cross_entropy
from saga.datagen import default_family, instance_mesh
from saga.nn import (Adam, CheckpointError, MlpModel, PointClassifier, TrainConfig, autoencoder,
                     detector, load_model, predict, reconstruction_error, save_model,
                     train_autoencoder, train_classifier, train_detector, weight_penalty)


@pytest.fixture(scope="module")
def small_family():
    spec = default_family(seed=0, subdivisions=1, amplitude=0.2, jitter=0.04)
    meshes = {c: [instance_mesh(spec, c, i, 0).vertices for i in range(30)] for c in range(3)}
    return meshes


def _split(meshes, lo, hi):
    X = [v for c in range(3) for v in meshes[c][lo:hi]]
    y = np.repeat(np.arange(3), hi - lo)
    return X, y


def test_architectures():
    ae = autoencoder(642)
    assert ae.dims == [1926, 300, 200, 30, 200, 1926]
    assert ae.activations == ["tanh"] * 4 + ["none"]
    det = detector(642)
    assert det.dims == [1926, 300, 200, 2] and det.activations == ["relu", "relu", "none"]
    pc = PointClassifier.create(3)
    assert pc.point_dims == [3, 32, 128, 256, 512] and pc.head_dims == [512, 256, 128, 64, 3]


def test_xavier_bounds():
    W = autoencoder(10, seed=3).weights[0]
    assert np.max(np.abs(W)) <= np.sqrt(6 / (30 + 300))


def test_adam_first_step():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    opt = Adam([p], lr=0.1)
    opt.step([g])
    # bias-corrected first step moves each entry by lr * g / (|g| + eps)
    expect = np.array([1.0, -2.0, 0.5]) - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p, expect, rtol=1e-12)
    assert opt.betas == (0.9, 0.999) and opt.eps == 1e-8


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)


def test_mlp_forward_matches_numpy_call():
    m = MlpModel.create("autoencoder", (6, 5, 4, 6), ("tanh", "relu", "none"), seed=1)
    x = np.random.default_rng(0).normal(size=(3, 6))
    assert np.allclose(m.forward(Tensor(x)).data, m(x), atol=1e-14)


def test_ae_loss_parameter_gradient():
    m = MlpModel.create("autoencoder", (6, 5, 2, 5, 6), ("tanh",) * 3 + ("none",), seed=2)
    rng = np.random.default_rng(0)
    for trial in range(20):
        X = rng.normal(size=(3, 6))
        ps = [Tensor(p, requires_grad=True) for p in m.parameters()]
        loss = (m.forward(Tensor(X), ps) - Tensor(X)).square().sum() * (1 / 6) + weight_penalty(m, ps, 0.01)
        loss.backward()
        i = trial % len(ps)

        def f(w, i=i):
            params = [Tensor(p) for p in m.parameters()]
            params[i] = Tensor(w)
            val = (m.forward(Tensor(X), params) - Tensor(X)).square().sum() * (1 / 6)
            return float(val.data) + float(weight_penalty(m, params, 0.01).data)
        assert rel_error(ps[i].grad, numeric_grad(f, m.parameters()[i])) <= 1e-5


def test_ae_input_gradient():
    m = MlpModel.create("autoencoder", (9, 7, 3, 7, 9), ("tanh",) * 3 + ("none",), seed=4)
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.normal(size=(1, 9))
        t = rng.normal(size=(1, 9))
        xt = Tensor(x, requires_grad=True)
        (m.forward(xt) - t).square().sum().backward()
        num = numeric_grad(lambda v: float(np.sum((m(v) - t) ** 2)), x)
        assert rel_error(xt.grad, num) <= 1e-5


def test_point_classifier_train_mode_gradient():
    pc = PointClassifier.create(3, seed=0)
    rng = np.random.default_rng(2)
    labels = np.array([0, 2])
    for trial in range(20):
        x = rng.normal(size=(2, 7, 3))
        ps = [Tensor(p, requires_grad=True) for p in pc.parameters()]
        cross_entropy(pc.forward(Tensor(x), ps, train=True), labels).backward()
        i = trial % len(ps)
        p0 = pc.parameters()[i]
        # probe entries of large tensors; an entry whose one-sided differences
        # disagree sits on a relu or max-pool kink and is redrawn
        checked = 0
        while checked < 4:
            idx = np.unravel_index(rng.integers(p0.size), p0.shape)

            def f(val, i=i, idx=idx):
                params = [Tensor(p) for p in pc.parameters()]
                w = pc.parameters()[i].copy()
                w[idx] = val
                params[i] = Tensor(w)
                return float(cross_entropy(pc.forward(Tensor(x), params, train=True), labels).data)
            h = 1e-4
            fp, f0, fm = f(p0[idx] + h), f(p0[idx]), f(p0[idx] - h)
            # biases ahead of batch norm have an identically zero gradient
            scale = max(np.max(np.abs(ps[i].grad)), 1e-6)
            if abs((fp - f0) - (f0 - fm)) / h > 1e-3 * scale:
                continue
            num = (fp - fm) / (2 * h)
            assert abs(ps[i].grad[idx] - num) <= 1e-5 * max(abs(num), scale)
            checked += 1


def test_weight_penalty_formula():
    m = autoencoder(20, seed=5)
    expect = 0.01 * sum(np.sqrt(np.sum(W * W)) for W in m.weights[:4])
    assert weight_penalty(m) == pytest.approx(expect, rel=1e-13)
    ps = [Tensor(p) for p in m.parameters()]
    assert float(weight_penalty(m, ps).data) == pytest.approx(expect, rel=1e-13)


def test_ae_overfits_single_mesh(small_family):
    V = small_family[0][0]
    diag = np.linalg.norm(V.max(axis=0) - V.min(axis=0))
    ae = train_autoencoder([V], TrainConfig(epochs=2000, batch_size=1, lr=1e-3, seed=0))
    rms = np.sqrt(reconstruction_error(ae, V.reshape(1, -1)))
    assert rms < 0.01 * diag
    hist = [h["train_loss"] for h in ae.training_meta["history"]]
    assert np.all(np.isfinite(hist))
    ma = np.convolve(hist, np.ones(5) / 5, mode="valid")
    assert ma[-1] < ma[0] * 1e-2


def test_ae_loss_moving_average_non_increasing(small_family):
    X, _ = _split(small_family, 0, 10)
    for wd in (0.0, 0.01):
        cfg = TrainConfig(epochs=100, batch_size=16, lr=1e-4, weight_decay_factor=wd, seed=0)
        hist = np.array([h["train_loss"] for h in train_autoencoder(X, cfg).training_meta["history"]])
        assert np.all(np.isfinite(hist))
        ma = np.convolve(hist, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(ma) <= 0)


def test_ae_deterministic_and_validates(small_family):
    X, _ = _split(small_family, 0, 4)
    cfg = TrainConfig(epochs=3, batch_size=4, lr=1e-3, weight_decay_factor=0.01, seed=7)
    a, b = train_autoencoder(X, cfg, val=X[:2]), train_autoencoder(X, cfg, val=X[:2])
    assert a.checksum() == b.checksum()
    assert all("val_recon" in h for h in a.training_meta["history"])
    with pytest.raises(ValueError):
        train_autoencoder([np.zeros((4, 3)), np.zeros((5, 3))], cfg)


def test_classifier_accuracy_and_permutation(small_family):
    Xtr, ytr = _split(small_family, 0, 20)
    Xte, yte = _split(small_family, 20, 30)
    pc = train_classifier(Xtr, ytr, TrainConfig(epochs=10, batch_size=6, lr=1e-3, seed=0))
    acc = np.mean(predict(pc, np.stack(Xte)) == yte)
    assert acc >= 0.95
    perm = np.random.default_rng(0).permutation(Xte[0].shape[0])
    Xp = np.stack([x[perm] for x in Xte])
    assert np.allclose(pc(Xp), pc(np.stack(Xte)), rtol=0, atol=1e-12)
    assert np.mean(predict(pc, Xp) == yte) == acc


def test_classifier_inference_is_repeatable(small_family):
    pc = PointClassifier.create(3, seed=1)
    x = np.stack(small_family[0][:3])
    pc.forward(Tensor(x), train=True)
    assert np.array_equal(pc(x), pc(x))


def test_classifier_random_labels_chance():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 10, 3))
    y = rng.integers(0, 2, 400)
    pc = train_classifier(X[:200], y[:200], TrainConfig(epochs=5, batch_size=16, lr=1e-3, seed=0))
    assert abs(np.mean(predict(pc, X[200:]) == y[200:]) - 0.5) <= 0.1


def test_classifier_label_errors():
    with pytest.raises(ValueError):
        train_classifier(np.zeros((4, 5, 3)), [0, 0, 0, 0], TrainConfig())
    with pytest.raises(ValueError):
        train_classifier(np.zeros((4, 5, 3)), [0, 2, 0, 2], TrainConfig())


def test_detector_label_swap_symmetry(monkeypatch):
    rng = np.random.default_rng(3)
    X = np.concatenate([rng.normal(0, 1, (40, 12)), rng.normal(0.4, 1, (40, 12))])
    y = np.repeat([0, 1], 40)
    cfg = TrainConfig(epochs=5, batch_size=8, lr=1e-3, seed=0)
    a = train_detector(X, y, cfg, select_best=False)

    def swapped(n, seed=0):
        m = detector(n, seed)
        m.weights[-1] = m.weights[-1][:, ::-1].copy()
        m.biases[-1] = m.biases[-1][::-1].copy()
        return m
    monkeypatch.setattr(nn, "detector", swapped)
    b = train_detector(X, 1 - y, cfg, select_best=False)
    acc_a = np.mean(predict(a, X) == y)
    acc_b = np.mean(predict(b, X) == 1 - y)
    assert acc_a == acc_b
    assert np.allclose(a(X), b(X)[:, ::-1], atol=1e-12)


def test_detector_unbalanced_warns():
    X = np.zeros((10, 6))
    with pytest.warns(UserWarning, match="unbalanced"):
        m = train_detector(X, [1] * 8 + [0] * 2, TrainConfig(epochs=1, batch_size=4))
    assert "warning" in m.training_meta


@pytest.mark.parametrize("make", [
    lambda: autoencoder(8, seed=1),
    lambda: detector(8, seed=2),
    lambda: PointClassifier.create(3, seed=3),
])
def test_checkpoint_round_trip(make):
    m = make()
    x = np.random.default_rng(0).normal(size=(2, 8, 3))
    inp = x if isinstance(m, PointClassifier) else x.reshape(2, -1)
    back = load_model(save_model(m))
    assert np.array_equal(back(inp), m(inp))
    assert save_model(back) == save_model(m)


def test_checkpoint_records_ae_dims():
    import json
    doc = json.loads(save_model(autoencoder(642)))
    assert doc["dims"] == [1926, 300, 200, 30, 200, 1926]


def test_truncated_checkpoint():
    data = save_model(autoencoder(4))
    with pytest.raises(CheckpointError):
        load_model(data[: len(data) // 2])
    import json
    doc = json.loads(data)
    doc["weights"] = doc["weights"][:-1]
    with pytest.raises(CheckpointError):
        load_model(json.dumps(doc))
