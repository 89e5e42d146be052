"""Minibatch maximisation of the importance-weighted objective.

Each epoch is one shuffled pass over the rows with ``ceil(n / batch_size)``
optimiser steps. Masked cells are zero-filled once, up front, so the values
stored there are never read.
"""
from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .datagen import DataTable
from .exceptions import DomainError, NumericError, ShapeError, SpecError, TrainingError
from .model import ModelConfig, ModelParams, lhat_and_grad, load_checkpoint, save_checkpoint
from .nn import AdamState, adam_step, make_rng, sgd_step


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    max_epochs: int = 10000
    K: int | None = None
    seed: int = 0
    window: int = 200
    tol: float = 1e-4
    early_stopping: bool = True
    optimizer: str = "adam"
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    progress_every: int = 0

    def __post_init__(self):
        problems = []
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.max_epochs < 1:
            problems.append("max_epochs must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.K is not None and self.K < 1:
            problems.append("K must be >= 1")
        if self.window < 2:
            problems.append("window must be >= 2")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"unknown optimizer {self.optimizer!r}")
        if self.checkpoint_every < 0:
            problems.append("checkpoint_every must be >= 0")
        if self.checkpoint_every and not self.checkpoint_path:
            problems.append("checkpoint_every needs checkpoint_path")
        if problems:
            raise SpecError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainTrace:
    """Per-epoch record of a training run.

    ``loss`` holds the mean of ``-Lhat_K`` over the rows of each epoch, each
    batch evaluated at the parameters before its update.
    """

    loss: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    param_norm: list = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def to_dict(self, include_time=True) -> dict:
        d = asdict(self)
        d["epochs"] = self.epochs
        if not include_time:
            d.pop("wall_time")
        return d

    def to_json(self, path, include_time=True):
        with open(path, "w") as fh:
            json.dump(self.to_dict(include_time), fh)


def early_stop(trace, window: int, tol: float) -> bool:
    """True when the mean loss of the last ``window`` epochs improves on the
    window before it by a relative amount strictly below ``tol``.

    ``trace`` is a :class:`TrainTrace` or a sequence of losses (lower is
    better). Fewer than ``2 * window`` epochs never trigger a stop.
    """
    if window < 2:
        raise SpecError("window must be >= 2")
    losses = trace.loss if isinstance(trace, TrainTrace) else list(trace)
    if len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window:-window]))
    cur = float(np.mean(losses[-window:]))
    improvement = (prev - cur) / max(abs(prev), 1e-12)
    return improvement < tol


def _rng_state(rng) -> dict:
    state = rng.bit_generator.state
    return {"bit_generator": state["bit_generator"],
            "state": {k: v.tolist() for k, v in state["state"].items()},
            "buffer": state["buffer"].tolist(), "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"], "uinteger": state["uinteger"]}


def _set_rng_state(rng, d: dict):
    state = dict(d)
    state["state"] = {k: np.asarray(v, dtype=np.uint64) for k, v in d["state"].items()}
    state["buffer"] = np.asarray(d["buffer"], dtype=np.uint64)
    rng.bit_generator.state = state


def _param_norm(params: ModelParams) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64)))
                               for a in params.arrays().values())))


def train(table: DataTable, model_config: ModelConfig, train_config: TrainConfig | None = None,
          init_params: ModelParams | None = None, resume_from=None):
    """Fit the model to ``table``.

    ``resume_from`` names a periodic checkpoint written by an earlier call
    with the same table and configs; training continues from the epoch it
    records, with the stored optimiser and random-stream states, and ends
    where the uninterrupted run would have.

    Returns
    -------
    params : ModelParams
    trace : TrainTrace

    Raises
    ------
    TrainingError
        When the objective or a gradient turns non-finite; carries the
        parameters from before the failing step and the trace so far.
    """
    tc = train_config or TrainConfig()
    mc = model_config
    if table.p != mc.p:
        raise ShapeError(f"table has {table.p} columns, model expects {mc.p}")
    if table.n < 1:
        raise DomainError("cannot train on an empty table")
    if np.any(table.fully_missing()):
        raise DomainError(f"{int(table.fully_missing().sum())} fully missing rows; drop them first")

    mask = table.mask.astype(mc.np_dtype)
    x = np.where(table.mask == 1, table.values, 0.0).astype(mc.np_dtype)
    params = init_params.copy() if init_params is not None else ModelParams.init(mc, make_rng(tc.seed, 0))
    shuffle_rng = make_rng(tc.seed, 1)
    noise_rng = make_rng(tc.seed, 2)
    adam = AdamState(lr=tc.lr)
    trace = TrainTrace()
    first_epoch = 0
    if resume_from is not None:
        params, extra = load_checkpoint(resume_from, with_extra=True)
        if "epoch" not in extra:
            raise SpecError(f"{resume_from} is not a periodic training checkpoint")
        trace = TrainTrace(**{k: v for k, v in extra["trace"].items() if k != "epochs"})
        first_epoch = int(extra["epoch"])
        if extra.get("optimizer"):
            adam = AdamState.from_dict(extra["optimizer"])
            dtypes = {k: a.dtype for k, a in params.arrays().items()}
            adam.m = {k: a.astype(dtypes[k]) for k, a in adam.m.items()}
            adam.v = {k: a.astype(dtypes[k]) for k, a in adam.v.items()}
        _set_rng_state(shuffle_rng, extra["rng"]["shuffle"])
        _set_rng_state(noise_rng, extra["rng"]["noise"])
    arrays = params.arrays()
    n, b = table.n, tc.batch_size

    for epoch in range(first_epoch, tc.max_epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, b):
            idx = order[start:start + b]
            last_good = params.copy()
            try:
                lhat, grads = lhat_and_grad(params, x[idx], mask[idx], rng=noise_rng, K=tc.K)
                if not np.all(np.isfinite(lhat)):
                    raise NumericError("non-finite objective")
                scale = -1.0 / len(idx)
                grads = {k: g * scale for k, g in grads.items()}
                if tc.optimizer == "adam":
                    adam_step(arrays, grads, adam)
                else:
                    sgd_step(arrays, grads, tc.lr)
                if not params.all_finite():
                    raise NumericError("non-finite parameters after update")
            except NumericError as exc:
                if tc.checkpoint_path:
                    save_checkpoint(tc.checkpoint_path, last_good,
                                    {"trace": trace.to_dict(), "failed_epoch": epoch})
                raise TrainingError(f"epoch {epoch + 1}, step {trace.steps + 1}: {exc}",
                                    last_good=last_good, trace=trace) from exc
            trace.steps += 1
            params.trained_steps += 1
            total += float(np.sum(lhat, dtype=np.float64))
        trace.loss.append(-total / n)
        trace.wall_time.append(time.perf_counter() - t0)
        trace.param_norm.append(_param_norm(params))

        done = epoch + 1
        if tc.progress_every and done % tc.progress_every == 0:
            print(f"epoch {done} steps {trace.steps} loss {trace.loss[-1]:.6f}", file=sys.stderr)
        if tc.checkpoint_every and done % tc.checkpoint_every == 0:
            save_checkpoint(tc.checkpoint_path, params, {
                "trace": trace.to_dict(), "epoch": done,
                "optimizer": adam.to_dict() if tc.optimizer == "adam" else None,
                "rng": {"shuffle": _rng_state(shuffle_rng), "noise": _rng_state(noise_rng)}})
        if tc.early_stopping and early_stop(trace, tc.window, tc.tol):
            trace.stopped_early = True
            break
    return params, trace
