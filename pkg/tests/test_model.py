import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imiwae.exceptions import NumericError, ShapeError, SpecError
from imiwae.model import (ModelConfig, ModelParams, decode_data, decode_missingness, draw_noise,
                          encode, gaussian_log_density, importance_weights, lhat_and_grad,
                          lhat_fixed_noise, load_checkpoint, objective_lhat_k, save_checkpoint)
from imiwae.nn import make_rng, softplus
from imiwae.theory import check_monotone_bounds


def _params(seed=0, **kw):
    cfg = dict(p=3, latent_dim=2, missing_latent_dim=1, hidden=8, n_importance=3)
    cfg.update(kw)
    return ModelParams.init(ModelConfig(**cfg), make_rng(seed))


def _batch(rng, n=4, p=3):
    x = rng.standard_normal((n, p))
    m = (rng.random((n, p)) > 0.4).astype(float)
    m[0] = 1.0
    return x, m


def test_config_validation_collects_problems():
    with pytest.raises(SpecError) as err:
        ModelConfig(p=0, latent_dim=0, n_importance=0, gamma_init=-1.0)
    msg = str(err.value)
    for piece in ("p must", "latent_dim", "n_importance", "gamma_init"):
        assert piece in msg


def test_default_config_values():
    c = ModelConfig(p=3)
    assert (c.missing_latent_dim, c.hidden, c.n_importance, c.gamma_init) == (1, 128, 20, 0.25)
    assert c.no_self_censoring


def test_zero_encoder_outputs():
    params = ModelParams.zeros(ModelConfig(p=3, latent_dim=2, hidden=4))
    mu, sig, mut, sigt = encode(params, np.ones((2, 3)), np.ones((2, 3)))
    assert np.all(mu == 0) and np.all(mut == 0)
    assert np.allclose(sig, softplus(0.0)) and np.allclose(sigt, softplus(0.0))
    assert mut.shape == (2, 1) and sigt.shape == (2, 1)


def test_encoder_rejects_non_finite():
    with pytest.raises(NumericError):
        encode(_params(), np.array([[np.inf, 0, 0]]), np.ones((1, 3)))


def test_identical_observed_rows_encode_identically():
    params = _params()
    m = np.array([[1, 0, 1], [1, 0, 1]], dtype=float)
    x = np.array([[0.3, 9.0, -1.0], [0.3, -4.0, -1.0]])
    out = encode(params, np.where(m == 1, x, 0.0), m)
    for a in out:
        assert np.array_equal(a[0], a[1])


def test_zero_decoder_and_density_at_mean():
    params = ModelParams.zeros(ModelConfig(p=3, latent_dim=2, hidden=4))
    mux, gamma = decode_data(params, np.ones((5, 2)))
    assert np.all(mux == 0) and gamma == pytest.approx(0.25)
    ld = gaussian_log_density(np.zeros(3), np.zeros(3), gamma)
    assert ld == pytest.approx(-1.5 * math.log(2 * math.pi * gamma), abs=1e-12)


def test_decoder_shape_error():
    with pytest.raises(ShapeError):
        decode_data(_params(), np.ones((2, 5)))


def test_zero_missingness_net_gives_half():
    for kind in ("linear", "nonlinear"):
        params = ModelParams.zeros(ModelConfig(p=3, hidden=4, missingness=kind))
        pi = decode_missingness(params, np.ones((2, 3)), np.ones((2, 1)))
        assert np.all(pi == 0.5)


@pytest.mark.parametrize("kind", ["linear", "nonlinear"])
def test_no_self_censoring_remask(kind):
    params = _params(missingness=kind)
    rng = make_rng(5)
    xbar, zt = rng.standard_normal((10, 3)), rng.standard_normal((10, 1))
    base = decode_missingness(params, xbar, zt)
    for j in range(3):
        moved = xbar.copy()
        moved[:, j] += rng.standard_normal(10) * 5
        out = decode_missingness(params, moved, zt)
        assert np.array_equal(out[:, j], base[:, j])
        others = [k for k in range(3) if k != j]
        assert not np.allclose(out[:, others], base[:, others])


@pytest.mark.parametrize("kind", ["linear", "nonlinear"])
def test_self_censoring_ablation_responds(kind):
    params = _params(missingness=kind, no_self_censoring=False)
    xbar, zt = np.zeros((1, 3)), np.zeros((1, 1))
    moved = xbar.copy()
    moved[0, 1] = 2.0
    assert decode_missingness(params, moved, zt)[0, 1] != decode_missingness(params, xbar, zt)[0, 1]


def test_fully_observed_row_mixed_vector_equals_data():
    params = _params()
    x = np.array([[0.5, -1.0, 2.0]])
    batch = importance_weights(params, x, np.ones((1, 3)), make_rng(0), K=7)
    assert np.array_equal(batch.x_bar[0], np.broadcast_to(x[0], (7, 3)))


def test_observed_entries_exact_in_mixed_vector():
    params = _params()
    rng = make_rng(2)
    x, m = _batch(rng)
    batch = importance_weights(params, x, m, rng, K=5)
    obs = np.broadcast_to(m[:, None, :] == 1, batch.x_bar.shape)
    assert np.array_equal(batch.x_bar[obs], np.broadcast_to(x[:, None, :], batch.x_bar.shape)[obs])
    assert np.all(np.isfinite(batch.log_w))


def test_prior_encoder_cancellation():
    cfg = ModelConfig(p=3, latent_dim=2, hidden=4)
    params = ModelParams.init(cfg, make_rng(1))
    # zero the encoders then set raw scales so sigma = 1 exactly
    raw_one = math.log(math.e - 1.0)
    for net, k in ((params.encoder_z, 2), (params.encoder_zt, 1)):
        for w in net.weights:
            w[...] = 0.0
        for b in net.biases:
            b[...] = 0.0
        net.biases[-1][k:] = raw_one
    rng = make_rng(3)
    x, m = _batch(rng)
    batch = importance_weights(params, x, m, rng, K=6)
    c = batch.components
    assert np.allclose(c["log_prior"] - c["log_q"], 0.0, atol=1e-10)
    assert np.allclose(batch.log_w, c["log_px"] + c["log_pr"], atol=1e-10)


def test_objective_examples():
    assert objective_lhat_k(np.full((2, 5), math.log(3.0))) == pytest.approx([math.log(3.0)] * 2)
    assert objective_lhat_k(np.array([[0.7]]))[0] == 0.7
    assert objective_lhat_k(np.array([[0.0, 1.0]]))[0] == pytest.approx(math.log((1 + math.e) / 2), abs=1e-15)


def test_objective_log_domain_stability():
    out = objective_lhat_k(np.array([[-900.0, 0.0, -2000.0]]))
    assert np.isfinite(out[0]) and out[0] == pytest.approx(-math.log(3.0))


@settings(max_examples=50)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_objective_between_mean_and_max(logs):
    a = np.array([logs])
    val = objective_lhat_k(a)[0]
    assert np.mean(a) - 1e-9 <= val <= np.max(a) + 1e-9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_log_weight_reports_components():
    params = _params()
    params.decoder.biases[-1][0] = np.inf
    with pytest.raises(NumericError, match="log_px"):
        importance_weights(params, np.ones((1, 3)), np.ones((1, 3)), make_rng(0))


def _fd_check(params, rng, coords=40):
    x, m = _batch(rng)
    noise = draw_noise(rng, len(x), params.config.n_importance, params.config)
    _, grads = lhat_and_grad(params, x, m, noise=noise)
    arrays = params.arrays()
    names = list(arrays)
    worst = 0.0
    for _ in range(coords):
        name = names[rng.integers(len(names))]
        flat = arrays[name].reshape(-1)
        i = rng.integers(flat.size)
        old = flat[i]
        h = 1e-5
        flat[i] = old + h
        up = lhat_fixed_noise(params, x, m, noise).sum()
        flat[i] = old - h
        down = lhat_fixed_noise(params, x, m, noise).sum()
        flat[i] = old
        fd = (up - down) / (2 * h)
        an = grads[name].reshape(-1)[i]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


@pytest.mark.parametrize("kind", ["linear", "nonlinear"])
@pytest.mark.parametrize("nsc", [True, False])
@pytest.mark.parametrize("k2", [0, 1, 2])
def test_gradients_match_finite_differences(kind, nsc, k2):
    params = _params(seed=k2, missingness=kind, no_self_censoring=nsc, missing_latent_dim=k2)
    assert _fd_check(params, make_rng(11, k2)) < 1e-4


def test_gamma_gradient_nonzero():
    params = _params()
    rng = make_rng(4)
    x, m = _batch(rng)
    _, grads = lhat_and_grad(params, x, m, rng=rng)
    assert grads["theta.raw_gamma"] != 0.0


def test_float32_model_runs():
    params = _params(dtype="float32")
    rng = make_rng(0)
    x, m = _batch(rng)
    lhat, grads = lhat_and_grad(params, x, m, rng=rng)
    assert lhat.dtype == np.float32
    assert all(g.dtype == np.float32 for g in grads.values())


def test_checkpoint_roundtrip(tmp_path):
    params = _params(missingness="nonlinear")
    params.trained_steps = 17
    path = tmp_path / "m.json"
    save_checkpoint(path, params, {"note": "x"})
    back = load_checkpoint(path)
    assert back.trained_steps == 17
    for k, a in params.arrays().items():
        assert np.array_equal(a, back.arrays()[k])
    assert json.loads(path.read_text())["extra"] == {"note": "x"}


def test_checkpoint_version_checked(tmp_path):
    d = _params().to_dict()
    d["format_version"] = 99
    with pytest.raises(SpecError):
        ModelParams.from_dict(d)


def test_bound_nondecreasing_on_frozen_model():
    params = _params(n_importance=1)
    x = np.array([[0.4, -0.2, 1.0]])
    m = np.array([[1.0, 0.0, 1.0]])
    Ks = [1, 2, 5, 20, 100]
    reps = 10_000
    rng = make_rng(8)
    # nested prefixes of shared draws, as in the synthetic-law check
    log_w = importance_weights(params, np.repeat(x, reps, 0), np.repeat(m, reps, 0), rng, K=100).log_w
    est, se = [], []
    for K in Ks:
        v = objective_lhat_k(log_w[:, :K])
        est.append(v.mean())
        se.append(v.std(ddof=1) / math.sqrt(reps))
    for i in range(len(Ks) - 1):
        assert est[i + 1] - est[i] >= -2 * math.hypot(se[i], se[i + 1])
