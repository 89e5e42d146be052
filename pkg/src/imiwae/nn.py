"""Dense tanh networks with hand-written reverse-mode gradients, Adam, and
seeded random streams.

Arrays are float64 unless a network is built with another dtype. Networks accept inputs of
shape ``(..., d_in)``; leading axes are flattened for the matrix products and
restored on output, so a single network can be applied to ``(batch, K, d)``
tensors without copies.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import DomainError, NumericError, ShapeError

SCALE_FLOOR = 1e-6


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------

def make_rng(seed, *keys) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and optional integer sub-keys.

    Distinct key tuples give statistically independent streams, which is how
    replications, rows and training phases get their own randomness.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed, *keys) -> int:
    """Deterministic 63-bit child seed (JSON friendly)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


def content_key(*arrays) -> int:
    """Stable 64-bit key from array contents, used for per-row substreams."""
    h = hashlib.blake2b(digest_size=8)
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(a.tobytes())
    return int.from_bytes(h.digest(), "little")


# --------------------------------------------------------------------------
# elementwise helpers
# --------------------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise DomainError("softplus inverse needs positive input")
    return y + np.log(-np.expm1(-y))


def positive_scale(raw, floor=SCALE_FLOOR):
    """softplus(raw) floored at ``floor``; returns (value, d value / d raw)."""
    sp = softplus(raw)
    value = np.maximum(sp, floor)
    grad = expit(raw) * (sp > floor)
    return value, grad


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

@dataclass
class Mlp:
    """Fully connected network, tanh on hidden layers, identity output.

    ``weights[l]`` has shape ``(layer_dims[l], layer_dims[l + 1])``.
    """

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {l}: weight {w.shape} incompatible with bias {b.shape}")
            if l and self.weights[l - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {l}: input width {w.shape[0]} != previous output "
                                 f"{self.weights[l - 1].shape[1]}")

    @classmethod
    def init(cls, layer_dims, rng: np.random.Generator, dtype=np.float64) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        _check_dims(layer_dims)
        weights, biases = [], []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / (d_in + d_out))
            weights.append(rng.uniform(-limit, limit, size=(d_in, d_out)).astype(dtype))
            biases.append(np.zeros(d_out, dtype=dtype))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, layer_dims, dtype=np.float64) -> "Mlp":
        _check_dims(layer_dims)
        return cls([np.zeros((a, b), dtype=dtype) for a, b in zip(layer_dims[:-1], layer_dims[1:])],
                   [np.zeros(b, dtype=dtype) for b in layer_dims[1:]])

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def layer_dims(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def named_arrays(self, prefix: str) -> dict:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{l}"] = w
            out[f"{prefix}.b{l}"] = b
        return out

    def forward(self, x, keep=False):
        """Evaluate the network on ``x`` of shape ``(..., n_in)``.

        With ``keep=True`` also return the per-layer activations needed by
        :meth:`backward`.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1:] != (self.n_in,):
            raise ShapeError(f"input has trailing dim {x.shape[-1:]} but network expects {self.n_in}")
        lead = x.shape[:-1]
        a = x.reshape(-1, self.n_in)
        acts = [a]
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w + b
            if l < last:
                a = np.tanh(a)
            acts.append(a)
        out = a.reshape(lead + (self.n_out,))
        if keep:
            return out, acts
        return out

    def backward(self, acts, dout):
        """Reverse pass.

        Returns ``(dW, db, dx)`` where ``dW``/``db`` are lists aligned with
        ``weights``/``biases`` and ``dx`` has the shape of the forward input.
        """
        dout = np.asarray(dout, dtype=self.dtype)
        if dout.shape[-1:] != (self.n_out,):
            raise ShapeError(f"output gradient trailing dim {dout.shape[-1:]} != {self.n_out}")
        lead = dout.shape[:-1]
        d = dout.reshape(-1, self.n_out)
        if d.shape[0] != acts[0].shape[0]:
            raise ShapeError("output gradient does not match the cached forward pass")
        n_layers = len(self.weights)
        dW = [None] * n_layers
        db = [None] * n_layers
        for l in range(n_layers - 1, -1, -1):
            a_in = acts[l]
            dW[l] = a_in.T @ d
            db[l] = np.add.reduce(d, axis=0)
            d = d @ self.weights[l].T
            if l > 0:
                d = d * (1.0 - a_in * a_in)
        return dW, db, d.reshape(lead + (self.n_in,))


def _check_dims(layer_dims):
    if len(layer_dims) < 2 or any(int(d) < 1 for d in layer_dims):
        raise ShapeError(f"invalid layer dims {layer_dims}")


def mlp_forward(net: Mlp, x):
    return net.forward(x)


def mlp_backward(net: Mlp, x, output_grad):
    """Parameter gradients and input gradient of ``<output_grad, net(x)>``."""
    _, acts = net.forward(x, keep=True)
    dW, db, dx = net.backward(acts, output_grad)
    return {"weights": dW, "biases": db, "input": dx}


# --------------------------------------------------------------------------
# optimisers
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step,
                "m": {k: np.asarray(a).tolist() for k, a in self.m.items()},
                "v": {k: np.asarray(a).tolist() for k, a in self.v.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"], step=d["step"],
                   m={k: np.asarray(a, dtype=float) for k, a in d["m"].items()},
                   v={k: np.asarray(a, dtype=float) for k, a in d["v"].items()})


def _check_finite_grads(params, grads):
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied in place to ``params``.

    Parameters are descended (``p -= ...``); pass gradients of the quantity
    being minimised.
    """
    _check_finite_grads(params, grads)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def sgd_step(params: dict, grads: dict, lr: float):
    _check_finite_grads(params, grads)
    for name, p in params.items():
        p -= lr * grads[name]
    return params


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def sample_gaussian_reparam(mean, scale, rng: np.random.Generator, size=None):
    """Draw ``mean + scale * eps`` and return ``(sample, eps)``.

    ``size`` prepends sample axes; ``eps`` is retained so gradients can be
    routed back to ``mean`` and ``scale``.
    """
    mean = np.asarray(mean, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if np.any(scale <= 0):
        raise DomainError("Gaussian scale must be strictly positive")
    shape = np.broadcast_shapes(mean.shape, scale.shape)
    if size is not None:
        shape = tuple(np.atleast_1d(size)) + shape
    eps = rng.standard_normal(shape)
    return mean + scale * eps, eps
