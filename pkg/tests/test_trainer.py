import numpy as np
import pytest

import oracles
from aesthetic_mtl.config import TrainConfig
from aesthetic_mtl.data import DIMENSIONS, FeatureResolver, SampleBatch, SplitSpec, split, synth_generate
from aesthetic_mtl.errors import InvalidInputError
from aesthetic_mtl.nn_core import Architecture, init_params, zero_params
from aesthetic_mtl.preprocess import image_features
from aesthetic_mtl.trainer import (ResumeState, TrainingAborted, TrainLog, lr_at, predict, predict_features,
                                   predict_records, train)

SMALL = dict(encoder_sizes=(16, 8), epochs=4, lr=0.05, batch_size=8)


def _sets(n=120, seed=0, dims=DIMENSIONS):
    recs = synth_generate(n, feature_dim=24, seed=seed)
    tr, va, _ = split(recs, SplitSpec(seed=seed))
    res = FeatureResolver()
    return res.batch(tr, dims)[0], res.batch(va, dims)[0]


def test_lr_schedule_65_epochs():
    trace = [lr_at(e, 1e-4, 30) for e in range(1, 66)]
    assert trace == oracles.lr_schedule(65)
    assert set(trace[:30]) == {1e-4} and set(trace[30:60]) == {5e-5} and set(trace[60:]) == {2.5e-5}


def test_training_is_deterministic():
    tr, va = _sets()
    cfg = TrainConfig(**SMALL)
    a, b = train(cfg, tr, va), train(cfg, tr, va)
    assert a.final_params.flat().tobytes() == b.final_params.flat().tobytes()
    assert a.log.epochs == b.log.epochs and a.log.deltas == b.log.deltas


@pytest.mark.parametrize("mode", ["linear", "mgda-ub"])
def test_loss_decreases_over_seeds(mode):
    for seed in range(5):
        tr, va = _sets(seed=seed)
        res = train(TrainConfig(mode=mode, seed=seed, **SMALL), tr, va)
        assert res.log.epochs[-1]["train_mean"] < res.log.epochs[0]["train_mean"]


def test_log_mode_field_and_deltas():
    tr, va = _sets()
    lin = train(TrainConfig(mode="linear", **SMALL), tr, va).log
    mg = train(TrainConfig(mode="mgda-ub", **SMALL), tr, va).log
    assert {r["mode"] for r in lin.epochs} == {"linear"} and not lin.deltas
    assert {r["mode"] for r in mg.epochs} == {"mgda-ub"}
    steps_per_epoch = -(-len(tr) // SMALL["batch_size"])
    assert len(mg.deltas) == SMALL["epochs"] * steps_per_epoch
    for d in mg.deltas:
        assert abs(sum(d[f"delta_{t}"] for t in DIMENSIONS) - 1) < 1e-9


def test_delta_stride():
    tr, va = _sets()
    log = train(TrainConfig(delta_stride=3, **SMALL), tr, va).log
    assert all(d["step"] % 3 == 0 for d in log.deltas)


def test_linear_single_task_reduces_bit_for_bit():
    # weights (1,0,0,0) over four tasks vs a one-task model on fineness alone
    recs = synth_generate(100, feature_dim=24, seed=2)
    tr, va, _ = split(recs, SplitSpec(seed=2))
    res = FeatureResolver()
    four = train(TrainConfig(mode="linear", weights=(1, 0, 0, 0), **SMALL), res.batch(tr)[0], res.batch(va)[0])
    one = train(TrainConfig(mode="linear", tasks=("fineness",), **SMALL),
                res.batch(tr, ("fineness",))[0], res.batch(va, ("fineness",))[0])
    assert [r["train_fineness"] for r in four.log.epochs] == [r["train_fineness"] for r in one.log.epochs]
    assert [r["val_mean"] for r in four.log.epochs] == [r["val_mean"] for r in one.log.epochs]
    assert four.final_params.shared.tobytes() == one.final_params.shared.tobytes()


def test_resume_matches_uninterrupted_run():
    tr, va = _sets()
    cfg = TrainConfig(**{**SMALL, "epochs": 6, "lr_halve_every": 2})
    full = train(cfg, tr, va)
    saved = {}

    def grab(epoch, params, v, best, best_val, log):
        if epoch == 3:
            saved.update(params=params.copy(), v=v.copy(), best=best.copy(), best_val=best_val)

    first = train(cfg.replace(epochs=3), tr, va, on_epoch=grab)
    state = ResumeState(saved["params"], saved["v"], 3, saved["best"], saved["best_val"], first.log)
    rest = train(cfg, tr, va, resume=state)
    assert rest.log.lr_trace == [lr_at(e, cfg.lr, 2) for e in range(1, 7)]
    assert rest.final_params.flat().tobytes() == full.final_params.flat().tobytes()
    assert rest.log.epochs == full.log.epochs


def test_best_checkpoint_is_min_validation():
    tr, va = _sets()
    res = train(TrainConfig(**{**SMALL, "epochs": 6}), tr, va)
    best = min(res.log.epochs, key=lambda r: r["val_mean"])
    assert res.log.best_epoch == best["epoch"] and res.best_val == best["val_mean"]


def test_numeric_abort_carries_last_good():
    tr, va = _sets()
    with pytest.raises(TrainingAborted) as exc:
        train(TrainConfig(**{**SMALL, "lr": 1e300}), tr, va)
    assert exc.value.last_good.is_finite()


def test_input_errors():
    tr, va = _sets()
    with pytest.raises(InvalidInputError):
        train(TrainConfig(tasks=("fineness",)), tr, va)
    with pytest.raises(InvalidInputError):
        train(TrainConfig(), SampleBatch(np.zeros((0, 24)), np.zeros((4, 0, 5))))


def test_log_write_read_roundtrip(tmp_path):
    tr, va = _sets()
    log = train(TrainConfig(**SMALL), tr, va).log
    log.write(tmp_path)
    back = TrainLog.read(tmp_path)
    assert back.epochs == log.epochs and back.deltas == log.deltas and back.best_epoch == log.best_epoch


def test_prediction_zero_model_uniform():
    arch = Architecture(16 * 32 * 3, (4,), n_tasks=4)
    img = np.random.default_rng(0).integers(0, 256, size=(454, 984, 3), dtype=np.uint8)
    (out,) = predict(zero_params(arch), [img])
    assert all(np.allclose(out[d].probs, 0.2) for d in DIMENSIONS)


def test_pad_rescale_on_canvas_image_equals_raw_features():
    rng = np.random.default_rng(1)
    arch = Architecture(16 * 32 * 3, (6,), n_tasks=4)
    params = init_params(arch, rng)
    img = rng.integers(0, 256, size=(454, 984, 3), dtype=np.uint8)
    (out,) = predict(params, [img])
    raw = predict_features(params, image_features(img)[None, :])[0]
    assert all(np.allclose(out[d].probs, raw[t], atol=1e-15) for t, d in enumerate(DIMENSIONS))


def test_batch_prediction_equals_per_image():
    recs = synth_generate(10, feature_dim=24, seed=0)
    tr, va = _sets()
    params = train(TrainConfig(**{**SMALL, "epochs": 1}), tr, va).params
    res = FeatureResolver()
    batch = predict_records(params, recs, res)
    for r in recs:
        (one,) = predict_records(params, [r], res).values()
        assert all(np.allclose(one[d].probs, batch[r.id][d].probs, atol=1e-14) for d in DIMENSIONS)
