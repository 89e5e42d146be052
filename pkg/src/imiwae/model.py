"""Working model: Gaussian encoders for the data latent ``z`` and the
missingness latent ``zt``, a Gaussian data decoder with shared variance
``gamma``, and Bernoulli missingness decoders that never see the variable
whose indicator they predict.

Gradients of the importance-weighted objective are derived by hand and
propagated through :class:`imiwae.nn.Mlp`. Shapes used throughout::

    b  rows in the batch        K  importance samples
    p  data dimension           k1, k2  latent dimensions
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import NumericError, ShapeError, SpecError
from .nn import Mlp, make_rng, positive_scale, softplus_inverse

LOG_2PI = float(np.log(2.0 * np.pi))
GAMMA_FLOOR = 1e-4
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    p: int
    latent_dim: int = 3
    missing_latent_dim: int = 1
    hidden: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    missingness: str = "linear"
    missingness_hidden: int | None = None
    no_self_censoring: bool = True
    n_importance: int = 20
    gamma_init: float = 0.25
    encode_mask: bool = False
    data_decoder: str = "gaussian"
    dtype: str = "float64"

    def __post_init__(self):
        problems = []
        if self.p < 1:
            problems.append("p must be >= 1")
        if self.latent_dim < 1:
            problems.append("latent_dim must be >= 1")
        if self.missing_latent_dim < 0:
            problems.append("missing_latent_dim must be >= 0")
        if self.hidden < 1:
            problems.append("hidden must be >= 1")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            problems.append("layer counts must be >= 0")
        if self.missingness not in ("linear", "nonlinear"):
            problems.append(f"unknown missingness decoder {self.missingness!r}")
        if self.n_importance < 1:
            problems.append("n_importance must be >= 1")
        if not self.gamma_init > 0:
            problems.append("gamma_init must be > 0")
        if self.data_decoder != "gaussian":
            problems.append(f"unsupported data decoder {self.data_decoder!r}")
        if self.dtype not in ("float64", "float32"):
            problems.append(f"dtype must be float64 or float32, got {self.dtype!r}")
        if problems:
            raise SpecError("; ".join(problems))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def encoder_input_dim(self) -> int:
        return 2 * self.p if self.encode_mask else self.p

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    """All trainable weights.

    ``encoder_z`` (phi) outputs ``[mu_z, raw_scale_z]``; ``encoder_zt``
    (lambda) does the same for ``zt`` and is ``None`` when
    ``missing_latent_dim == 0``. ``decoder`` and ``raw_gamma`` form theta;
    ``missingness`` (psi) maps ``[x_bar, zt]`` to ``p`` logits.
    """

    config: ModelConfig
    encoder_z: Mlp
    encoder_zt: Mlp | None
    decoder: Mlp
    missingness: Mlp
    raw_gamma: np.ndarray
    trained_steps: int = 0

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        c = config
        enc_hidden = [c.hidden] * c.encoder_layers
        dec_hidden = [c.hidden] * c.decoder_layers
        dt = c.np_dtype
        encoder_z = Mlp.init([c.encoder_input_dim, *enc_hidden, 2 * c.latent_dim], rng, dt)
        encoder_zt = None
        if c.missing_latent_dim:
            encoder_zt = Mlp.init([c.encoder_input_dim, *enc_hidden, 2 * c.missing_latent_dim], rng, dt)
        decoder = Mlp.init([c.latent_dim, *dec_hidden, c.p], rng, dt)
        miss_dims = [c.p + c.missing_latent_dim]
        if c.missingness == "nonlinear":
            miss_dims.append(c.missingness_hidden or c.hidden)
        miss_dims.append(c.p)
        missingness = Mlp.init(miss_dims, rng, dt)
        raw_gamma = np.array(softplus_inverse(c.gamma_init), dtype=dt)
        return cls(c, encoder_z, encoder_zt, decoder, missingness, raw_gamma)

    @classmethod
    def zeros(cls, config: ModelConfig, gamma: float | None = None) -> "ModelParams":
        c = config
        enc_hidden = [c.hidden] * c.encoder_layers
        dec_hidden = [c.hidden] * c.decoder_layers
        miss_dims = [c.p + c.missing_latent_dim]
        if c.missingness == "nonlinear":
            miss_dims.append(c.missingness_hidden or c.hidden)
        miss_dims.append(c.p)
        dt = c.np_dtype
        return cls(
            c,
            Mlp.zeros([c.encoder_input_dim, *enc_hidden, 2 * c.latent_dim], dt),
            Mlp.zeros([c.encoder_input_dim, *enc_hidden, 2 * c.missing_latent_dim], dt)
            if c.missing_latent_dim else None,
            Mlp.zeros([c.latent_dim, *dec_hidden, c.p], dt),
            Mlp.zeros(miss_dims, dt),
            np.array(softplus_inverse(gamma if gamma is not None else c.gamma_init), dtype=dt),
        )

    @property
    def gamma(self) -> float:
        return float(positive_scale(self.raw_gamma, GAMMA_FLOOR)[0])

    def arrays(self) -> dict:
        """Name -> array view of every trainable parameter (mutable in place)."""
        out = {}
        out.update(self.encoder_z.named_arrays("phi.encoder_z"))
        if self.encoder_zt is not None:
            out.update(self.encoder_zt.named_arrays("lambda.encoder_zt"))
        out.update(self.decoder.named_arrays("theta.decoder"))
        out["theta.raw_gamma"] = self.raw_gamma
        out.update(self.missingness.named_arrays("psi.missingness"))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.encoder_z.copy(),
                           None if self.encoder_zt is None else self.encoder_zt.copy(),
                           self.decoder.copy(), self.missingness.copy(), self.raw_gamma.copy(),
                           self.trained_steps)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    # serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return {"format_version": CHECKPOINT_VERSION,
                "config": asdict(self.config),
                "trained_steps": int(self.trained_steps),
                "arrays": {k: np.asarray(a).tolist() for k, a in self.arrays().items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise SpecError(f"unsupported checkpoint version {d.get('format_version')!r}")
        params = cls.zeros(ModelConfig.from_dict(d["config"]))
        target = params.arrays()
        if set(target) != set(d["arrays"]):
            raise SpecError("checkpoint arrays do not match the configured architecture")
        for k, a in d["arrays"].items():
            a = np.asarray(a, dtype=target[k].dtype)
            if a.shape != target[k].shape:
                raise ShapeError(f"checkpoint array {k} has shape {a.shape}, expected {target[k].shape}")
            target[k][...] = a
        params.trained_steps = int(d.get("trained_steps", 0))
        return params


def save_checkpoint(path, params: ModelParams, extra: dict | None = None):
    payload = params.to_dict()
    if extra:
        payload["extra"] = extra
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path, with_extra=False):
    """Parameters stored by :func:`save_checkpoint`; with ``with_extra`` the
    pair ``(params, extra)``."""
    with open(path) as fh:
        payload = json.load(fh)
    params = ModelParams.from_dict(payload)
    if with_extra:
        return params, payload.get("extra", {})
    return params


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def _as_batch(x, mask, p):
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if x.ndim == 1:
        x, mask = x[None], mask[None]
    if x.shape != mask.shape or x.shape[-1] != p:
        raise ShapeError(f"data {x.shape} / mask {mask.shape} incompatible with p={p}")
    return x, mask


def zero_fill(x, mask):
    """Replace unobserved entries by 0 without ever reading them."""
    return np.where(mask > 0, np.nan_to_num(x, nan=0.0, posinf=0.0, neginf=0.0), 0.0)


def _encoder_input(config, x_filled, mask):
    if config.encode_mask:
        return np.concatenate([x_filled, mask], axis=-1)
    return x_filled


def encode(params: ModelParams, x_filled, mask):
    """Return ``(mu_z, sigma_z, mu_zt, sigma_zt)`` for zero-filled rows."""
    c = params.config
    x_filled, mask = _as_batch(x_filled, mask, c.p)
    if not np.all(np.isfinite(x_filled)):
        raise NumericError("encoder input contains non-finite values")
    inp = _encoder_input(c, x_filled, mask)
    hz = params.encoder_z.forward(inp)
    mu_z = hz[:, :c.latent_dim]
    sig_z = positive_scale(hz[:, c.latent_dim:])[0]
    if params.encoder_zt is None:
        empty = np.zeros((len(inp), 0))
        return mu_z, sig_z, empty, np.ones((len(inp), 0))
    ht = params.encoder_zt.forward(inp)
    k2 = c.missing_latent_dim
    return mu_z, sig_z, ht[:, :k2], positive_scale(ht[:, k2:])[0]


def decode_data(params: ModelParams, z):
    """Decoder mean ``mu_x`` for latent ``z`` and the shared variance gamma."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != params.config.latent_dim:
        raise ShapeError(f"latent has dim {z.shape[-1]}, expected {params.config.latent_dim}")
    return params.decoder.forward(z), params.gamma


def gaussian_log_density(x, mu, gamma, mask=None):
    """Sum over observed coordinates of ``log N(x_j | mu_j, gamma)``."""
    terms = -0.5 * (LOG_2PI + np.log(gamma)) - (x - mu) ** 2 / (2.0 * gamma)
    if mask is not None:
        terms = terms * mask
    return terms.sum(axis=-1)


def _missingness_weight(params):
    """First-layer weight as used in the forward pass (linear decoders drop the
    (j, j) data->indicator connections when enforcing no self-censoring)."""
    c = params.config
    w = params.missingness.weights[0]
    if c.missingness == "linear" and c.no_self_censoring:
        w = w.copy()
        w[np.arange(c.p), np.arange(c.p)] = 0.0
    return w


def _missingness_forward(params, xbar, zt):
    """Logits of ``p(r_j = 1 | x_bar_{-j}, zt)``, shape ``(..., p)``, plus cache."""
    c = params.config
    net = params.missingness
    p = c.p
    if c.missingness == "linear":
        inp = np.concatenate([xbar, zt], axis=-1)
        w = _missingness_weight(params)
        return inp @ w + net.biases[0], ("linear", inp, w)
    if not c.no_self_censoring:
        inp = np.concatenate([xbar, zt], axis=-1)
        out, acts = net.forward(inp, keep=True)
        return out, ("plain", inp.shape, acts)
    # Shared network evaluated once per indicator j with x_j re-masked to zero.
    lead = xbar.shape[:-1]
    keep = 1.0 - np.eye(p, dtype=xbar.dtype)
    x_rep = xbar[..., None, :] * keep                        # (..., p_j, p)
    z_rep = np.broadcast_to(zt[..., None, :], lead + (p, zt.shape[-1]))
    inp = np.concatenate([x_rep, z_rep], axis=-1)             # (..., p_j, p + k2)
    out, acts = net.forward(inp, keep=True)                   # (..., p_j, p)
    logits = np.diagonal(out, axis1=-2, axis2=-1).copy()
    return logits, ("remask", out.shape, acts)


def _missingness_backward(params, cache, dlogits):
    """Returns (dW list, db list, d_xbar, d_zt)."""
    c = params.config
    p = c.p
    net = params.missingness
    kind = cache[0]
    if kind == "linear":
        _, inp, w = cache
        flat_in = inp.reshape(-1, inp.shape[-1])
        flat_d = dlogits.reshape(-1, p)
        dW = flat_in.T @ flat_d
        if c.no_self_censoring:
            dW[np.arange(p), np.arange(p)] = 0.0
        db = flat_d.sum(axis=0)
        dinp = dlogits @ w.T
        return [dW], [db], dinp[..., :p], dinp[..., p:]
    if kind == "plain":
        _, _, acts = cache
        dW, db, dinp = net.backward(acts, dlogits)
        return dW, db, dinp[..., :p], dinp[..., p:]
    _, out_shape, acts = cache
    dout = np.zeros(out_shape, dtype=dlogits.dtype)
    idx = np.arange(p)
    dout[..., idx, idx] = dlogits
    dW, db, dinp = net.backward(acts, dout)                  # dinp: (..., p_j, p + k2)
    keep = 1.0 - np.eye(p, dtype=dinp.dtype)
    d_xbar = (dinp[..., :p] * keep).sum(axis=-2)
    d_zt = dinp[..., p:].sum(axis=-2)
    return dW, db, d_xbar, d_zt


def decode_missingness(params: ModelParams, xbar, zt):
    """Bernoulli means ``pi_j = P(R_j = 1 | x_bar, zt)``."""
    xbar = np.asarray(xbar, dtype=float)
    zt = np.asarray(zt, dtype=float)
    c = params.config
    if xbar.shape[-1] != c.p or zt.shape[-1] != c.missing_latent_dim:
        raise ShapeError("x_bar / zt dimensions do not match the model")
    logits, _ = _missingness_forward(params, xbar, zt)
    return expit(logits)


def bernoulli_log_mass(r, logits):
    """``sum_j log Bernoulli(r_j | sigmoid(logit_j))`` computed stably."""
    return (r * logits - np.logaddexp(0.0, logits)).sum(axis=-1)


def standard_normal_log_density(z):
    return (-0.5 * z * z).sum(axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


# --------------------------------------------------------------------------
# importance weights and the objective
# --------------------------------------------------------------------------

@dataclass
class ImportanceBatch:
    z: np.ndarray          # (b, K, k1)
    zt: np.ndarray         # (b, K, k2)
    x_hat: np.ndarray      # (b, K, p) decoder draws
    x_bar: np.ndarray      # (b, K, p) observed values with draws at the gaps
    log_w: np.ndarray      # (b, K)
    components: dict

    @property
    def n_samples(self) -> int:
        return self.log_w.shape[1]


@dataclass
class _Noise:
    eps_z: np.ndarray
    eps_t: np.ndarray
    eta: np.ndarray


def draw_noise(rng, b, K, config) -> _Noise:
    dt = config.np_dtype
    eps = rng.standard_normal((b, K, config.latent_dim + config.missing_latent_dim), dtype=dt)
    eta = rng.standard_normal((b, K, config.p), dtype=dt)
    return _Noise(eps[..., :config.latent_dim], eps[..., config.latent_dim:], eta)


def _forward(params, x, mask, noise, include_missingness=True, keep=False):
    c = params.config
    k1, k2 = c.latent_dim, c.missing_latent_dim
    dt = c.np_dtype
    mask = mask.astype(dt, copy=False)
    xt = zero_fill(x, mask).astype(dt, copy=False)
    inp = _encoder_input(c, xt, mask)
    hz, acts_z = params.encoder_z.forward(inp, keep=True)
    mu_z = hz[:, :k1]
    sig_z, dsig_z_draw = positive_scale(hz[:, k1:])
    if params.encoder_zt is not None:
        ht, acts_t = params.encoder_zt.forward(inp, keep=True)
        mu_t = ht[:, :k2]
        sig_t, dsig_t_draw = positive_scale(ht[:, k2:])
    else:
        acts_t = None
        mu_t = np.zeros((len(xt), 0), dtype=dt)
        sig_t = dsig_t_draw = np.ones((len(xt), 0), dtype=dt)

    z = mu_z[:, None] + sig_z[:, None] * noise.eps_z
    zt = mu_t[:, None] + sig_t[:, None] * noise.eps_t
    mux, acts_dec = params.decoder.forward(z, keep=True)
    gamma, dgamma_draw = positive_scale(params.raw_gamma, GAMMA_FLOOR)
    sg = np.sqrt(gamma)
    x_hat = mux + sg * noise.eta
    miss = 1.0 - mask
    x_bar = xt[:, None] + x_hat * miss[:, None]

    log_px = gaussian_log_density(xt[:, None], mux, gamma, mask[:, None])
    if include_missingness:
        logits, miss_cache = _missingness_forward(params, x_bar, zt)
        log_pr = bernoulli_log_mass(mask[:, None], logits)
    else:
        logits, miss_cache = None, None
        log_pr = np.zeros_like(log_px)
    log_prior = standard_normal_log_density(z) + standard_normal_log_density(zt)
    log_q = (standard_normal_log_density(noise.eps_z) - np.log(sig_z).sum(-1)[:, None]
             + standard_normal_log_density(noise.eps_t) - np.log(sig_t).sum(-1)[:, None])
    log_w = log_px + log_pr + log_prior - log_q
    state = dict(xt=xt, mask=mask, z=z, zt=zt, x_hat=x_hat, x_bar=x_bar, log_w=log_w,
                 components=dict(log_px=log_px, log_pr=log_pr, log_prior=log_prior, log_q=log_q))
    if keep:
        state.update(inp=inp, acts_z=acts_z, acts_t=acts_t, acts_dec=acts_dec, mux=mux,
                     sig_z=sig_z, sig_t=sig_t, dsig_z_draw=dsig_z_draw, dsig_t_draw=dsig_t_draw,
                     gamma=gamma, dgamma_draw=dgamma_draw, logits=logits, miss_cache=miss_cache,
                     noise=noise)
    return state


def _check_log_w(state):
    log_w = state["log_w"]
    if not np.all(np.isfinite(log_w)):
        bad = {k: int(np.sum(~np.isfinite(v))) for k, v in state["components"].items()}
        raise NumericError(f"non-finite log importance weights; non-finite counts per term: {bad}")


def importance_weights(params: ModelParams, x, mask, rng, K=None,
                       include_missingness=True) -> ImportanceBatch:
    """Draw ``K`` proposals per row and their log importance weights.

    ``include_missingness=False`` drops the ``p(r | x_bar, zt)`` factor,
    which gives the weights of the ignorable (MAR) posterior.
    """
    c = params.config
    K = c.n_importance if K is None else int(K)
    if K < 1:
        raise SpecError("K must be >= 1")
    x, mask = _as_batch(x, mask, c.p)
    noise = draw_noise(rng, len(x), K, c)
    state = _forward(params, x, mask, noise, include_missingness)
    _check_log_w(state)
    return ImportanceBatch(state["z"], state["zt"], state["x_hat"], state["x_bar"],
                           state["log_w"], state["components"])


def objective_lhat_k(batch_or_log_w):
    """Per-row ``log(mean_k w_k)`` computed in the log domain."""
    log_w = batch_or_log_w.log_w if isinstance(batch_or_log_w, ImportanceBatch) else np.asarray(batch_or_log_w)
    K = log_w.shape[-1]
    return logsumexp(log_w, axis=-1) - math.log(K)


def _backward(params, s, upstream):
    """Gradient of ``sum_i upstream_i * Lhat_i`` with respect to every array."""
    c = params.config
    mask = s["mask"]
    miss = 1.0 - mask
    log_w = s["log_w"]
    upstream = np.asarray(upstream, dtype=log_w.dtype)
    a = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True)) * upstream[:, None]  # (b, K)
    gamma = s["gamma"]
    mux = s["mux"]
    noise = s["noise"]
    grads = {}

    resid = (s["xt"][:, None] - mux) * mask[:, None]
    d_mux = a[..., None] * resid / gamma
    d_gamma = np.sum(a[..., None] * mask[:, None] * (-0.5 / gamma + resid ** 2 / (2 * gamma ** 2)))

    d_z = -a[..., None] * s["z"]
    d_zt = -a[..., None] * s["zt"]
    if s["logits"] is not None:
        dlogits = a[..., None] * (mask[:, None] - expit(s["logits"]))
        dW, db, d_xbar, d_zt_miss = _missingness_backward(params, s["miss_cache"], dlogits)
        grads.update(_pack("psi.missingness", dW, db))
        d_zt = d_zt + d_zt_miss
        d_xhat = d_xbar * miss[:, None]
        d_mux = d_mux + d_xhat
        d_gamma = d_gamma + np.sum(d_xhat * noise.eta) / (2.0 * np.sqrt(gamma))
    else:
        grads.update(_pack("psi.missingness",
                           [np.zeros_like(w) for w in params.missingness.weights],
                           [np.zeros_like(b) for b in params.missingness.biases]))

    dW, db, d_z_dec = params.decoder.backward(s["acts_dec"], d_mux)
    grads.update(_pack("theta.decoder", dW, db))
    grads["theta.raw_gamma"] = np.asarray(d_gamma * s["dgamma_draw"], dtype=params.raw_gamma.dtype)
    d_z = d_z + d_z_dec

    a_sum = a.sum(axis=1)[:, None]                     # from -log q through log sigma
    d_mu_z = d_z.sum(axis=1)
    d_sig_z = (d_z * noise.eps_z).sum(axis=1) + a_sum / s["sig_z"]
    d_hz = np.concatenate([d_mu_z, d_sig_z * s["dsig_z_draw"]], axis=1)
    dW, db, _ = params.encoder_z.backward(s["acts_z"], d_hz)
    grads.update(_pack("phi.encoder_z", dW, db))
    if params.encoder_zt is not None:
        d_mu_t = d_zt.sum(axis=1)
        d_sig_t = (d_zt * noise.eps_t).sum(axis=1) + a_sum / s["sig_t"]
        d_ht = np.concatenate([d_mu_t, d_sig_t * s["dsig_t_draw"]], axis=1)
        dW, db, _ = params.encoder_zt.backward(s["acts_t"], d_ht)
        grads.update(_pack("lambda.encoder_zt", dW, db))
    return grads


def _pack(prefix, dW, db):
    out = {}
    for l, (w, b) in enumerate(zip(dW, db)):
        out[f"{prefix}.W{l}"] = w
        out[f"{prefix}.b{l}"] = b
    return out


def lhat_and_grad(params: ModelParams, x, mask, rng=None, K=None, noise=None,
                  include_missingness=True):
    """Per-row ``Lhat_K`` and the gradient of its sum over rows.

    Either ``rng`` or pre-drawn ``noise`` (from :func:`draw_noise`) must be
    given; fixed noise makes the objective a deterministic function of the
    parameters, which is what finite-difference checks need.
    """
    c = params.config
    K = c.n_importance if K is None else int(K)
    x, mask = _as_batch(x, mask, c.p)
    if noise is None:
        noise = draw_noise(rng, len(x), K, c)
    s = _forward(params, x, mask, noise, include_missingness, keep=True)
    _check_log_w(s)
    lhat = objective_lhat_k(s["log_w"])
    grads = _backward(params, s, np.ones(len(x), dtype=c.np_dtype))
    return lhat, grads


def lhat_fixed_noise(params: ModelParams, x, mask, noise, include_missingness=True):
    x, mask = _as_batch(x, mask, params.config.p)
    s = _forward(params, x, mask, noise, include_missingness)
    return objective_lhat_k(s["log_w"])
