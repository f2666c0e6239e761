import csv

import numpy as np
import pytest
import torch

from splitbnn.bnn import BinaryTensor, LayerSpec
from splitbnn.models import random_mlp
from splitbnn.reconstruct import reconstruct_network, split_layer
from splitbnn.trainer import (
    ConfigError,
    SplitStage,
    TrainConfig,
    TrainingDivergedError,
    build_mlp,
    evaluate,
    fit,
    frozen_merge_digest,
    model_from_network,
    retrain_split,
    scale_inputs,
    sign_ste,
    split_train_val,
    torch_accuracy,
    train_baseline,
    write_log,
)
from splitbnn.xbar import ArrayConfig, plan_tiling, simulate_batched


def toy_data(n=600, d=24, seed=0):
    """Two classes separated by a margin on a fixed random direction."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=d)
    x = rng.integers(0, 256, (4 * n, d))
    score = (2 * x - 255) @ w
    keep = np.abs(score) > 0.5 * np.abs(score).mean()
    return x[keep][:n].astype(np.uint8), (score[keep][:n] > 0).astype(np.int64)


FAST = TrainConfig(epochs=3, batch_size=50, val_size=100, lr=1e-2, lr_decay=1.0)


def test_sign_ste_forward_backward():
    x = torch.tensor([-2.0, -1.0, -0.3, 0.0, 0.4, 1.0, 3.0], requires_grad=True)
    y = sign_ste(x)
    assert y.tolist() == [-1, -1, -1, 1, 1, 1, 1]
    y.sum().backward()
    assert x.grad.tolist() == [0, 1, 1, 1, 1, 1, 0]


def test_toy_problem_learns():
    x, y = toy_data()
    cfg = TrainConfig(epochs=50, batch_size=50, val_size=0, lr=1e-2, lr_decay=0.95)
    result = train_baseline((24, 32, 32, 2), x, y, cfg)
    assert evaluate(result.model.export(), x, y).accuracy >= 0.99


def test_deterministic():
    x, y = toy_data()
    a = train_baseline((24, 32, 2), x, y, FAST).model.shadow_weights()
    b = train_baseline((24, 32, 2), x, y, FAST).model.shadow_weights()
    for wa, wb in zip(a, b):
        np.testing.assert_array_equal(wa, wb)


def test_shadow_weights_clipped():
    x, y = toy_data()
    cfg = TrainConfig(epochs=2, batch_size=50, val_size=100, lr=0.5)
    model = train_baseline((24, 32, 2), x, y, cfg).model
    for w in model.shadow_weights():
        assert np.abs(w).max() <= 1.0


def test_best_snapshot_and_history(tmp_path):
    x, y = toy_data()
    result = train_baseline((24, 32, 2), x, y, FAST)
    assert len(result.history) == 3
    assert result.best_val_accuracy == max(h["val_accuracy"] for h in result.history)
    path = tmp_path / "log.csv"
    write_log(result.history, path)
    rows = list(csv.DictReader(open(path)))
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"epoch", "train_loss", "val_accuracy"}


def test_nan_loss_aborts():
    x, y = toy_data()
    model = build_mlp((24, 16, 2), FAST)
    with torch.no_grad():
        model.classifier.log_scale.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        fit(model, x, y, FAST)


def test_split_train_val_disjoint():
    tr, va = split_train_val(100, 10, 42)
    assert len(tr) == 90 and len(va) == 10
    assert not set(tr) & set(va)
    np.testing.assert_array_equal(va, split_train_val(100, 10, 42)[1])


def test_torch_matches_integer_pipeline():
    x, y = toy_data()
    model = train_baseline((24, 32, 32, 2), x, y, FAST).model
    with torch.no_grad():
        ours = model(scale_inputs(x)).argmax(1).numpy()
    np.testing.assert_array_equal(ours, _predict(model.export(), x))


def test_split_model_matches_integer_pipeline():
    x, y = toy_data()
    base = train_baseline((24, 40, 40, 2), x, y, FAST).model.export()
    recon = reconstruct_network(base, 16)
    assert isinstance(recon[1], type(split_layer(base[1], 2)))
    model = model_from_network(recon, FAST)
    model.eval()
    with torch.no_grad():
        ours = model(scale_inputs(x)).argmax(1).numpy()
    np.testing.assert_array_equal(ours, _predict(recon, x))


def _predict(network, x):
    from splitbnn.bnn import reference_forward

    return reference_forward(network, x).predictions


def test_export_import_roundtrip():
    net = random_mlp((24, 32, 16, 3), seed=5)
    back = model_from_network(net, FAST).export()
    for a, b in zip(net, back):
        assert a.weights == b.weights
    for a, b in zip(net[:-1], back[:-1]):
        np.testing.assert_array_equal(a.thresholds().thresholds, b.thresholds().thresholds)


def test_retrain_keeps_merge_frozen():
    x, y = toy_data()
    base = train_baseline((24, 40, 40, 2), x, y, FAST)
    recon = reconstruct_network(base.model.export(), 16)
    model = model_from_network(recon, FAST)
    before = frozen_merge_digest(model)
    assert before
    names = {n for n, _ in model.named_parameters()}
    assert not any("merge" in n for n in names)
    fit(model, x, y, FAST)
    assert frozen_merge_digest(model) == before
    exported = model.export()
    assert exported[1].merge_threshold == 0 and np.all(exported[1].merge_weights == 1)


def test_retrain_split_runs_and_rejects_merge_training():
    x, y = toy_data()
    base = train_baseline((24, 40, 40, 2), x, y, FAST)
    recon = reconstruct_network(base.model.export(), 16)
    result = retrain_split(recon, x, y, FAST, shadow=base.model.shadow_weights())
    assert isinstance(result.model.stages[1], SplitStage)
    with pytest.raises(ConfigError):
        retrain_split(recon, x, y, FAST, train_merge=True)


def test_identity_split_matches_baseline_training():
    x, y = toy_data()
    base = train_baseline((24, 40, 2), x, y, FAST).model
    net = base.export()
    shadow = base.shadow_weights()
    a = fit(model_from_network(net, FAST, shadow), x, y, FAST).model.shadow_weights()
    b = fit(model_from_network(net, FAST, shadow), x, y, FAST).model.shadow_weights()
    for wa, wb in zip(a, b):
        np.testing.assert_array_equal(wa, wb)


def test_surrogate_gradients_match_finite_differences():
    torch.manual_seed(0)
    cfg = TrainConfig(seed=3)
    recon = reconstruct_network(random_mlp((6, 12, 8, 3), seed=2), 6)
    model = model_from_network(recon, cfg, shadow_scale=0.3).double()
    model.train()
    x = torch.rand(16, 6, dtype=torch.float64) * 0.4 - 0.2
    y = torch.randint(0, 3, (16,))

    def loss():
        return torch.nn.functional.cross_entropy(model(x, surrogate=True), y)

    model.zero_grad()
    loss().backward()
    h = 1e-6
    for p in model.parameters():
        flat = p.data.view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 5)):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss().item()
            flat[i] = orig - h
            down = loss().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = p.grad.view(-1)[i].item()
            assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(numeric))


def test_constant_predictor_scores_ten_percent():
    rng = np.random.default_rng(0)
    k = 16
    hidden = random_mlp((8, k, 10), seed=0)[0]
    clf = LayerSpec("dense", k, 10, BinaryTensor.from_signs(np.ones((k, 10), dtype=np.int8)))
    labels = np.repeat(np.arange(10), 20)
    pixels = rng.integers(0, 256, (200, 8), dtype=np.uint8)
    res = evaluate([hidden, clf], pixels, labels)
    assert res.accuracy == pytest.approx(0.1)
    np.testing.assert_array_equal(res.confusion.sum(axis=1), np.full(10, 20))
    assert res.count == 200


def test_evaluate_matches_ideal_simulation():
    net = random_mlp((784, 256, 256, 10), seed=1)
    rng = np.random.default_rng(2)
    pixels = rng.integers(0, 256, (200, 784), dtype=np.uint8)
    labels = rng.integers(0, 10, 200)
    cfg = ArrayConfig.for_capacity(128, output_mode="IDEAL")
    sim = simulate_batched(plan_tiling(net, cfg), cfg, pixels).argmax(1)
    assert evaluate(net, pixels, labels).accuracy == pytest.approx(float(np.mean(sim == labels)))


def test_torch_accuracy_helper():
    x, y = toy_data()
    model = train_baseline((24, 32, 2), x, y, FAST).model
    acc = torch_accuracy(model, scale_inputs(x), torch.from_numpy(y))
    assert acc == pytest.approx(evaluate(model.export(), x, y).accuracy)
