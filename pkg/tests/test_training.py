import csv
import os

import numpy as np
import pytest

from pcjoint.data import synth_dataset
from pcjoint.errors import TrainingAbort
from pcjoint.model import CodecModel
from pcjoint.training import METRICS_FIELDS, TrainConfig, forward_training, train

from conftest import TINY_CONFIG


def tiny_train_config(tmp_path, **kw):
    defaults = dict(
        epochs=2,
        batch_size=4,
        dataset_size=8,
        edge=16,
        seed=5,
        out_path=str(tmp_path / "toy.ckpt"),
        checkpoint_every=0,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_forward_training_components_finite():
    model = CodecModel(TINY_CONFIG, seed=1)
    (sample,) = synth_dataset(1, 16, seed=4)
    loss, diag = forward_training(model, sample, np.random.default_rng(0))
    assert np.isfinite(loss.data)
    assert diag["rate_bits"] > 0
    assert diag["d_geo"] >= 0
    assert diag["d_attr"] >= 0
    assert diag["total"] == pytest.approx(
        diag["rate_bits"] + diag["d_geo"] + diag["d_attr"], rel=1e-9
    )


def test_two_epoch_smoke(tmp_path):
    tc = tiny_train_config(tmp_path)
    model = CodecModel(TINY_CONFIG, seed=tc.seed)
    model, rows = train(tc, model)
    assert os.path.exists(tc.out_path)
    assert all(np.isfinite(r["total"]) for r in rows)
    assert {r["epoch"] for r in rows} == {0, 1}


def test_metrics_csv_schema(tmp_path):
    tc = tiny_train_config(tmp_path)
    train(tc, CodecModel(TINY_CONFIG, seed=tc.seed))
    with open(os.path.splitext(tc.out_path)[0] + "_metrics.csv") as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == METRICS_FIELDS
        rows = list(reader)
    assert len(rows) == 2 * 2  # 2 epochs x (8 samples / batch 4)


def test_resume_reproduces_next_step(tmp_path):
    # one 2-epoch run equals a 1-epoch run resumed for one more epoch
    tc_full = tiny_train_config(tmp_path, epochs=2,
                                out_path=str(tmp_path / "full.ckpt"))
    full, _ = train(tc_full, CodecModel(TINY_CONFIG, seed=tc_full.seed))

    tc_half = tiny_train_config(tmp_path, epochs=1,
                                out_path=str(tmp_path / "half.ckpt"))
    train(tc_half, CodecModel(TINY_CONFIG, seed=tc_half.seed))
    resumed_model, meta, opt_state = CodecModel.load(tc_half.out_path)
    assert meta["epoch"] == 1
    tc_resume = tiny_train_config(tmp_path, epochs=2,
                                  out_path=str(tmp_path / "resumed.ckpt"))
    resumed, _ = train(tc_resume, resumed_model, resume_optimizer=opt_state,
                       start_epoch=1)

    for name, p in full.store.items():
        np.testing.assert_array_equal(resumed.store[name].data, p.data)


def test_abort_on_nonfinite_loss(tmp_path, monkeypatch):
    import pcjoint.training as training_mod

    tc = tiny_train_config(tmp_path)

    def poisoned(model, sample, rng):
        loss, diag = forward_training(model, sample, rng)
        from pcjoint import autodiff as ad

        bad = loss * np.nan
        return bad, {**diag, "total": float("nan")}

    monkeypatch.setattr(training_mod, "forward_training", poisoned)
    with pytest.raises(TrainingAbort):
        train(tc, CodecModel(TINY_CONFIG, seed=tc.seed))
    assert os.path.exists(tc.out_path)  # last-good checkpoint retained
