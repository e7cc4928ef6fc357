import json

import numpy as np
import pytest

from mmlstm import checkpoint, lstm
from mmlstm import multimodal as mm
from mmlstm.dataset import SynthConfig, synth_generate
from mmlstm.lstm import LstmParams
from mmlstm.numeric import ShapeError, make_rng
from mmlstm.trainer import (Adam, SGDMomentum, TrainConfig, balanced_order, clip_global, global_norm, grad_check,
                            init_model, loss_and_grad, random_check_case, step, train)


def test_clip_zero_norm_unchanged():
    g = {"a": np.zeros(3)}
    assert clip_global(g, 1.0)["a"].tobytes() == g["a"].tobytes()


def test_clip_halves():
    g = {"a": np.array([6.0, 0.0]), "b": np.array([[8.0]])}
    out = clip_global(g, 5.0)
    np.testing.assert_array_equal(out["a"], [3.0, 0.0])
    np.testing.assert_array_equal(out["b"], [[4.0]])


def test_clip_norm_is_min(rng):
    for _ in range(50):
        g = {k: rng.normal(0, rng.uniform(0.01, 10), size=rng.integers(1, 6, size=2)) for k in "abc"}
        thr = rng.uniform(0.1, 20)
        before = np.sqrt(sum(np.sum(v ** 2) for v in g.values()))
        assert abs(global_norm(clip_global(g, thr)) - min(before, thr)) < 1e-10


def test_clip_rejects_nonpositive():
    with pytest.raises(ValueError):
        clip_global({"a": np.ones(2)}, 0.0)


def test_sgd_step_definition():
    w = {"w": np.array([0.0])}
    step(w, {"w": np.array([1.0])}, SGDMomentum(lr=0.1, momentum=0.9))
    assert w["w"][0] == pytest.approx(-0.1, abs=1e-15)


@pytest.mark.parametrize("opt", [SGDMomentum(0.1), Adam(0.1)])
def test_zero_gradient_no_change(opt):
    w = {"w": np.array([1.5, -2.0])}
    step(w, {"w": np.zeros(2)}, opt)
    np.testing.assert_array_equal(w["w"], [1.5, -2.0])


def test_adam_quadratic_bowl(rng):
    w = {"w": rng.normal(size=10)}
    f0 = float(np.sum(w["w"] ** 2))
    opt = Adam(lr=0.1)
    for _ in range(100):
        step(w, {"w": 2 * w["w"]}, opt)
    assert float(np.sum(w["w"] ** 2)) <= f0 / 100


def test_step_shape_mismatch():
    with pytest.raises(ShapeError):
        step({"w": np.zeros(2)}, {"w": np.zeros(3)}, Adam(0.1))
    with pytest.raises(ShapeError):
        step({"w": np.zeros(2)}, {"v": np.zeros(2)}, Adam(0.1))


def test_step_updates_shared_once(rng):
    p = mm.build("full", (3, 2), 4, 3, rng)
    grads = {k: np.ones_like(a) for k, a in p.arrays.items()}
    before = p.arrays["W_hf"].copy()
    step(p.arrays, grads, SGDMomentum(lr=0.1))
    np.testing.assert_allclose(p.arrays["W_hf"], before - 0.1)
    assert p.view(0).W_hf is p.view(1).W_hf


def test_config_validation():
    for bad in (dict(lr=-1.0), dict(clip=0.0), dict(optimizer="rmsprop"), dict(variant="both"), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


@pytest.fixture(scope="module")
def pools():
    return synth_generate(SynthConfig(n_train=40, n_test=20, seed=3))


def test_balanced_order(pools):
    train_pool, _ = pools
    order = balanced_order(train_pool, make_rng(0))
    assert sorted(order.tolist()) == list(range(len(train_pool)))
    for start in range(0, len(order), 10):
        counts = np.bincount(train_pool.identity[order[start:start + 10]], minlength=5)
        assert counts.max() - counts.min() <= 1


def test_lr_zero_flat_loss(pools):
    train_pool, test_pool = pools
    cfg = TrainConfig(variant="single", lr=0.0, epochs=3, hidden=4)
    model = init_model(cfg, train_pool.dims, 5)
    hist = train(model, train_pool, test_pool, cfg).history
    losses = [h["loss"] for h in hist]
    assert max(losses) - min(losses) <= 1e-12


def test_lr_zero_multimodal_params_unchanged(pools):
    train_pool, _ = pools
    cfg = TrainConfig(variant="half", lr=0.0, epochs=2, hidden=4)
    model = init_model(cfg, train_pool.dims, 5)
    before = {k: a.copy() for k, a in model.arrays.items()}
    train(model, train_pool, None, cfg)
    assert all(before[k].tobytes() == a.tobytes() for k, a in model.arrays.items())


@pytest.mark.parametrize("variant", ["single", "full", "half", "none"])
def test_training_decreases_loss(pools, variant):
    train_pool, test_pool = pools
    cfg = TrainConfig(variant=variant, epochs=4, hidden=8, lr=1e-2)
    model = init_model(cfg, train_pool.dims, 5)
    hist = train(model, train_pool, test_pool, cfg).history
    assert hist[-1]["loss"] < hist[0]["loss"]
    assert all(np.isfinite(h["loss"]) for h in hist)


def test_shared_weights_survive_training(pools):
    train_pool, _ = pools
    cfg = TrainConfig(variant="full", epochs=1, hidden=4)
    model = init_model(cfg, train_pool.dims, 5)
    train(model, train_pool, None, cfg)
    assert model.view(0).W_hf is model.view(1).W_hf is model.arrays["W_hf"]


def test_dimension_mismatch_rejected(pools):
    train_pool, _ = pools
    with pytest.raises(ShapeError):
        train(mm.build("full", (3, 8), 4, 5, make_rng(0)), train_pool, None, TrainConfig())
    with pytest.raises(ShapeError):
        train(LstmParams.init(16, 4, 3, make_rng(0)), train_pool, None, TrainConfig(variant="single"))


def test_deterministic_history_and_checkpoint(pools, tmp_path):
    train_pool, test_pool = pools
    outs = []
    for run in ("a", "b"):
        cfg = TrainConfig(variant="full", epochs=2, hidden=4, seed=9)
        model = init_model(cfg, train_pool.dims, 5)
        train(model, train_pool, test_pool, cfg, metrics_path=tmp_path / f"{run}.jsonl", checkpoint_path=tmp_path / run)
        outs.append(((tmp_path / f"{run}.jsonl").read_bytes(), (tmp_path / run / "params.bin").read_bytes(),
                     (tmp_path / run / "manifest.json").read_bytes()))
    assert outs[0] == outs[1]
    records = [json.loads(line) for line in outs[0][0].decode().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2] and all({"loss", "accuracy"} <= r.keys() for r in records)


def test_checkpoint_roundtrip(tmp_path, rng):
    for model in (LstmParams.init(3, 4, 2, rng), mm.build("half", (3, 2), 4, 5, rng)):
        checkpoint.save(tmp_path / "ck", model, seed=1)
        back, manifest = checkpoint.load(tmp_path / "ck")
        a, b = checkpoint.model_arrays(model), checkpoint.model_arrays(back)
        assert list(a) == list(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert manifest["rng"] == "numpy.PCG64" and "b_f = 1.0" in manifest["init"]
    ck = checkpoint.load(tmp_path / "ck")[0]
    assert ck.variant.value == "half" and ck.d_xs == (3, 2)


def test_checkpoint_corruption_detected(tmp_path, rng):
    checkpoint.save(tmp_path / "ck", LstmParams.init(3, 4, 2, rng))
    blob = tmp_path / "ck" / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "ck")


@pytest.mark.parametrize("variant", ["single", "full", "half", "none"])
def test_grad_check_fresh_models(variant):
    model, inputs, labels = random_check_case(make_rng(17), variant)
    assert grad_check(model, inputs, labels).max_rel_error < 1e-5


@pytest.mark.parametrize("variant", ["single", "full"])
def test_grad_check_detects_corruption(variant):
    model, inputs, labels = random_check_case(make_rng(21), variant, max_dh=4)
    B, T = labels.shape
    w = np.full((B, T), 1.0 / labels.size)
    _, grads = loss_and_grad(model, inputs, labels, w)
    key = max(grads, key=lambda k: np.abs(grads[k]).max())
    j = int(np.abs(grads[key]).argmax())
    bad = {k: g.copy() for k, g in grads.items()}
    bad[key].reshape(-1)[j] *= 1.01
    res = grad_check(model, inputs, labels, weights=w, analytic=bad)
    assert res.max_rel_error > 1e-3
    assert res.key == key and np.ravel_multi_index(res.index, grads[key].shape) == j


def test_grad_check_eps_sweep_v_shape():
    model, inputs, labels = random_check_case(make_rng(3), "single", max_dh=3)
    B, T = labels.shape
    w = np.full((B, T), 1.0 / labels.size)
    _, grads = loss_and_grad(model, inputs, labels, w)
    epss = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9]
    errs = []
    for eps in epss:
        res = grad_check(model, inputs, labels, eps=eps, weights=w)
        errs.append(res.max_rel_error)
    best = int(np.argmin(errs))
    assert 0 < best < len(epss) - 1
    assert errs[0] > 100 * errs[best] and errs[-1] > 100 * errs[best]


def test_grad_check_subsamples_large_models():
    rng = make_rng(0)
    model = LstmParams.init(40, 40, 3, rng)
    res = grad_check(model, [rng.normal(size=(1, 2, 40))], rng.integers(3, size=(1, 2)))
    assert 0.03 * model.count() < res.probed < 0.07 * model.count()
    assert res.max_rel_error < 1e-5
