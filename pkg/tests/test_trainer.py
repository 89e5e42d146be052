import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imiwae import model as model_mod
from imiwae.datagen import DataTable
from imiwae.exceptions import DomainError, ShapeError, SpecError, TrainingError
from imiwae.model import ModelConfig, load_checkpoint
from imiwae.nn import make_rng
from imiwae.trainer import TrainConfig, TrainTrace, early_stop, train


def small_config(p=3, **kw):
    return ModelConfig(p=p, latent_dim=2, hidden=8, encoder_layers=1, decoder_layers=1, **kw)


def small_table(n=40, p=3, seed=0, missing=0.3):
    rng = make_rng(seed)
    x = rng.normal(size=(n, p))
    mask = (rng.random((n, p)) > missing).astype(int)
    mask[:, 0] = 1
    return DataTable(x, mask)


def test_defaults():
    tc = TrainConfig()
    assert tc.lr == 1e-3 and tc.batch_size == 16
    assert tc.window == 200 and tc.tol == 1e-4


def test_config_validation():
    with pytest.raises(SpecError):
        TrainConfig(batch_size=0)
    with pytest.raises(SpecError):
        TrainConfig(lr=0.0)
    with pytest.raises(SpecError):
        TrainConfig(checkpoint_every=5)
    with pytest.raises(SpecError):
        TrainConfig.from_dict({"epochs": 3})


def test_two_row_toy_descends():
    table = DataTable(np.array([[0.5, -1.0, 2.0], [1.0, 0.0, -0.5]]), np.array([[1, 0, 1], [1, 1, 0]]))
    _, trace = train(table, small_config(), TrainConfig(batch_size=2, max_epochs=30, lr=1e-2,
                                                        early_stopping=False, seed=3))
    assert trace.epochs == 30
    assert np.mean(trace.loss[-5:]) <= trace.loss[0]


def test_same_seed_same_trace():
    table = small_table()
    tc = TrainConfig(batch_size=8, max_epochs=4, seed=11)
    p1, t1 = train(table, small_config(), tc)
    p2, t2 = train(table, small_config(), tc)
    assert json.dumps(t1.to_dict(include_time=False)) == json.dumps(t2.to_dict(include_time=False))
    for k, a in p1.arrays().items():
        np.testing.assert_array_equal(a, p2.arrays()[k])


def test_steps_per_epoch():
    table = small_table(n=37)
    _, trace = train(table, small_config(), TrainConfig(batch_size=8, max_epochs=3, early_stopping=False))
    assert trace.steps == 3 * math.ceil(37 / 8)
    assert len(trace.loss) == len(trace.wall_time) == len(trace.param_norm) == 3


def test_every_row_visited_once_per_epoch(monkeypatch):
    seen = []
    real = model_mod.lhat_and_grad

    def spy(params, x, mask, **kw):
        seen.append(x[:, 0].copy())
        return real(params, x, mask, **kw)

    monkeypatch.setattr("imiwae.trainer.lhat_and_grad", spy)
    table = small_table(n=21)
    table.values[:, 0] = np.arange(21)
    train(table, small_config(), TrainConfig(batch_size=5, max_epochs=2, early_stopping=False))
    assert len(seen) == 2 * 5
    for epoch in range(2):
        rows = np.concatenate(seen[epoch * 5:(epoch + 1) * 5])
        np.testing.assert_array_equal(np.sort(rows), np.arange(21))


def test_masked_cells_never_read():
    table = small_table(seed=2)
    poisoned = DataTable(np.where(table.mask == 1, table.values, np.nan), table.mask)
    tc = TrainConfig(batch_size=8, max_epochs=3, seed=1)
    p_clean, t_clean = train(table, small_config(), tc)
    p_poison, t_poison = train(poisoned, small_config(), tc)
    assert np.isfinite(t_poison.loss).all() and p_poison.all_finite()
    assert t_clean.loss == t_poison.loss


def test_params_finite_and_step_count():
    params, trace = train(small_table(), small_config(), TrainConfig(batch_size=16, max_epochs=5))
    assert params.all_finite()
    assert params.trained_steps == trace.steps


def test_rejects_fully_missing_rows_and_shape():
    table = small_table()
    table.mask[0] = 0
    with pytest.raises(DomainError):
        train(table, small_config(), TrainConfig(max_epochs=1))
    with pytest.raises(ShapeError):
        train(small_table(p=4), small_config(), TrainConfig(max_epochs=1))


def test_non_finite_objective_aborts_with_last_good(tmp_path):
    table = small_table()
    tc = TrainConfig(batch_size=8, max_epochs=50, lr=1e6, optimizer="sgd",
                     checkpoint_path=str(tmp_path / "ck.json"))
    with pytest.warns(RuntimeWarning):
        with pytest.raises(TrainingError) as info:
            train(table, small_config(), tc)
    err = info.value
    assert err.last_good is not None and err.last_good.all_finite()
    assert isinstance(err.trace, TrainTrace)
    restored, extra = load_checkpoint(tmp_path / "ck.json", with_extra=True)
    assert restored.all_finite()
    assert "failed_epoch" in extra


def test_checkpoint_cadence(tmp_path):
    path = tmp_path / "run.json"
    params, _ = train(small_table(), small_config(),
                      TrainConfig(batch_size=16, max_epochs=4, checkpoint_every=2, checkpoint_path=str(path)))
    restored, extra = load_checkpoint(path, with_extra=True)
    assert extra["epoch"] == 4
    for k, a in params.arrays().items():
        np.testing.assert_array_equal(a, restored.arrays()[k])


@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_resume_matches_uninterrupted_run(tmp_path, dtype):
    table = small_table(seed=5)
    mc = small_config(dtype=dtype)
    full, full_trace = train(table, mc, TrainConfig(batch_size=8, max_epochs=6, seed=2, early_stopping=False))
    path = str(tmp_path / "half.json")
    train(table, mc, TrainConfig(batch_size=8, max_epochs=3, seed=2, early_stopping=False,
                                 checkpoint_every=3, checkpoint_path=path))
    resumed, trace = train(table, mc, TrainConfig(batch_size=8, max_epochs=6, seed=2, early_stopping=False),
                           resume_from=path)
    assert trace.loss == full_trace.loss and trace.steps == full_trace.steps
    for k, a in full.arrays().items():
        np.testing.assert_array_equal(a, resumed.arrays()[k])


def test_sgd_option_runs():
    params, trace = train(small_table(), small_config(), TrainConfig(optimizer="sgd", max_epochs=2))
    assert params.all_finite() and trace.epochs == 2


def test_early_stop_examples():
    assert not early_stop([10.0 - i for i in range(10)], window=2, tol=1e-4)
    assert early_stop([1.0] * 10, window=2, tol=1e-4)
    # improvement of exactly tol (powers of two keep the arithmetic exact)
    assert not early_stop([1.0, 1.0, 0.9375, 0.9375], window=2, tol=0.0625)
    assert early_stop([1.0, 1.0, 0.9375, 0.9375], window=2, tol=0.125)


def test_early_stop_needs_two_windows():
    assert not early_stop([1.0] * 3, window=2, tol=1.0)
    with pytest.raises(SpecError):
        early_stop([1.0] * 10, window=1, tol=1e-4)


def test_early_stop_accepts_trace():
    assert early_stop(TrainTrace(loss=[2.0] * 6), window=3, tol=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=40), st.integers(2, 10))
def test_early_stop_matches_windowed_rule(losses, window):
    if len(losses) < 2 * window:
        assert not early_stop(losses, window, 1e-4)
        return
    prev = np.mean(losses[-2 * window:-window])
    cur = np.mean(losses[-window:])
    expected = (prev - cur) / max(abs(prev), 1e-12) < 1e-4
    assert early_stop(losses, window, 1e-4) == expected


def test_early_stopping_ends_training():
    _, trace = train(small_table(), small_config(),
                     TrainConfig(max_epochs=500, window=2, tol=1.0, batch_size=40))
    assert trace.stopped_early and trace.epochs == 4


def test_trace_json(tmp_path):
    _, trace = train(small_table(), small_config(), TrainConfig(max_epochs=2))
    trace.to_json(tmp_path / "t.json", include_time=False)
    d = json.loads((tmp_path / "t.json").read_text())
    assert d["epochs"] == 2 and "wall_time" not in d


def test_progress_lines(capsys):
    train(small_table(), small_config(), TrainConfig(max_epochs=2, progress_every=1))
    err = capsys.readouterr().err
    assert err.count("epoch") == 2
