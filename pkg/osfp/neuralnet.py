"""
Three-layer perceptron with tanh activations trained by online backpropagation with
momentum and an adaptive learning rate.

Every weight follows

    dw_t = lambda * delta_downstream * v_upstream + mu * dw_(t-1)

with biases treated as weights from an always-on input.
"""
import json
import logging
from dataclasses import dataclass, field, fields
from typing import List, NamedTuple, Optional

import numpy as np
from numba import jit
from tqdm.auto import trange

from osfp.exceptions import DatasetError, TrainingDivergedError
from osfp.seed import generation_rng


logger = logging.getLogger(__name__)

MODEL_VERSION = 1
ACTIVATION = "tanh"


@dataclass(frozen=True)
class Mlp:
    """
    Attributes:
        w1: hidden x input weights
        b1: hidden biases
        w2: output x hidden weights
        b2: output biases
        meta: training provenance written to the model file
    """
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n_hidden, n_in = self.w1.shape
        n_out, n_hidden2 = self.w2.shape
        if self.b1.shape != (n_hidden,) or self.b2.shape != (n_out,) or n_hidden2 != n_hidden:
            raise ValueError(f"inconsistent weight shapes {self.w1.shape}, {self.b1.shape}, {self.w2.shape}, {self.b2.shape}")

    @property
    def layer_sizes(self):
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in (self.w1, self.b1, self.w2, self.b2))


@dataclass(frozen=True)
class TrainState:
    """Previous weight updates (momentum memory) and the current learning rate."""
    dw1: np.ndarray
    db1: np.ndarray
    dw2: np.ndarray
    db2: np.ndarray
    lam: float
    mu_momentum: float = 0.5

    @classmethod
    def zeros(cls, net, lam, mu_momentum=0.5):
        if lam <= 0:
            raise ValueError(f"learning rate must be positive, got {lam}")
        if not 0.0 <= mu_momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {mu_momentum}")
        return cls(
            np.zeros_like(net.w1), np.zeros_like(net.b1), np.zeros_like(net.w2), np.zeros_like(net.b2),
            float(lam), float(mu_momentum),
        )


@dataclass(frozen=True)
class TrainConfig:
    max_generations: int = 600
    target_error: float = 0.002
    adaptive: bool = True
    lr_up: float = 1.05
    lr_down: float = 0.7
    lambda_init: float = 0.001
    mu_momentum: float = 0.5
    weight_init_scale: float = 0.1
    seed: int = 1000
    lambda_min: Optional[float] = None
    lambda_max: Optional[float] = None

    def __post_init__(self):
        if not self.lr_up > 1.0 > self.lr_down > 0.0:
            raise ValueError(f"need lr_up > 1 > lr_down > 0, got {self.lr_up}, {self.lr_down}")
        if self.target_error < 0:
            raise ValueError("target_error must be non-negative")
        if self.max_generations < 0:
            raise ValueError("max_generations must be non-negative")

    @classmethod
    def from_dict(cls, conf, seed=None):
        names = {f.name for f in fields(cls)}
        values = {k: v for k, v in (conf or {}).items() if k in names}
        if seed is not None:
            values["seed"] = int(seed)
        return cls(**values)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class TrainResult(NamedTuple):
    net: Mlp
    error_history: List[float]
    learning_rates: List[float]


def _check_input(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.layer_sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} values, net expects {net.layer_sizes[0]}")
    return x


def _activations(net, x):
    h = np.tanh(net.w1 @ x + net.b1)
    return h, np.tanh(net.w2 @ h + net.b2)


def forward(net, x):
    return _activations(net, _check_input(net, x))[1]


def predict_many(net, X):
    X = _check_input(net, np.atleast_2d(X))
    return np.tanh(np.tanh(X @ net.w1.T + net.b1) @ net.w2.T + net.b2)


def _deltas(net, x, y):
    h, o = _activations(net, x)
    d_out = (y - o) * (1.0 - o * o)
    d_hid = (net.w2.T @ d_out) * (1.0 - h * h)
    return h, d_hid, d_out


def gradients(net, x, y):
    """
    The delta * v terms of one sample, i.e. minus the gradient of sample_error.

    Returns:
        (g_w1, g_b1, g_w2, g_b2)
    """
    x = _check_input(net, x)
    y = np.asarray(y, dtype=np.float64)
    h, d_hid, d_out = _deltas(net, x, y)
    return np.outer(d_hid, x), d_hid, np.outer(d_out, h), d_out


def sample_error(net, x, y):
    """0.5 * sum((y - v)^2) for one sample."""
    return 0.5 * float(np.sum((np.asarray(y, dtype=np.float64) - forward(net, x)) ** 2))


def mean_quadratic_error(net, X, Y):
    """Mean over samples of sum((y - v)^2) / n_outputs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("dataset is empty")
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    return float(np.mean(np.sum((Y - predict_many(net, X)) ** 2, axis=1) / Y.shape[1]))


def backprop_step(net, state, x, y):
    """
    One online update.

    Returns:
        (updated Mlp, updated TrainState); the state holds the applied updates
    """
    x = _check_input(net, x)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (net.layer_sizes[2],):
        raise ValueError(f"target has shape {y.shape}, net has {net.layer_sizes[2]} outputs")
    g_w1, g_b1, g_w2, g_b2 = gradients(net, x, y)
    lam, mu = state.lam, state.mu_momentum
    dw1 = lam * g_w1 + mu * state.dw1
    db1 = lam * g_b1 + mu * state.db1
    dw2 = lam * g_w2 + mu * state.dw2
    db2 = lam * g_b2 + mu * state.db2
    updated = Mlp(net.w1 + dw1, net.b1 + db1, net.w2 + dw2, net.b2 + db2, net.meta)
    if not updated.is_finite():
        raise TrainingDivergedError("non-finite weights in backpropagation step")
    return updated, TrainState(dw1, db1, dw2, db2, lam, mu)


@jit(nopython=True)
def _generation_kernel(X, Y, order, w1, b1, w2, b2, dw1, db1, dw2, db2, lam, mu):
    n_hidden, n_in = w1.shape
    n_out = w2.shape[0]
    h = np.empty(n_hidden)
    o = np.empty(n_out)
    d_out = np.empty(n_out)
    d_hid = np.empty(n_hidden)
    for s in range(order.shape[0]):
        i = order[s]
        for j in range(n_hidden):
            acc = b1[j]
            for k in range(n_in):
                acc += w1[j, k] * X[i, k]
            h[j] = np.tanh(acc)
        for j in range(n_out):
            acc = b2[j]
            for k in range(n_hidden):
                acc += w2[j, k] * h[k]
            o[j] = np.tanh(acc)
        for j in range(n_out):
            d_out[j] = (Y[i, j] - o[j]) * (1.0 - o[j] * o[j])
        for k in range(n_hidden):
            acc = 0.0
            for j in range(n_out):
                acc += w2[j, k] * d_out[j]
            d_hid[k] = acc * (1.0 - h[k] * h[k])
        for j in range(n_out):
            for k in range(n_hidden):
                dw2[j, k] = lam * d_out[j] * h[k] + mu * dw2[j, k]
                w2[j, k] += dw2[j, k]
            db2[j] = lam * d_out[j] + mu * db2[j]
            b2[j] += db2[j]
        for j in range(n_hidden):
            for k in range(n_in):
                dw1[j, k] = lam * d_hid[j] * X[i, k] + mu * dw1[j, k]
                w1[j, k] += dw1[j, k]
            db1[j] = lam * d_hid[j] + mu * db1[j]
            b1[j] += db1[j]


def _default_order(seed):
    def order(generation, n):
        return generation_rng(seed, generation).permutation(n)
    return order


def train(net, X, Y, config, name="", shuffle_stream=None, progress=False):
    """
    Train by generations: reorder the samples, apply one online update per sample,
    then measure the mean quadratic error and adapt the learning rate.

    Args:
        net: initial Mlp, left untouched
        X: inputs, one row per sample
        Y: targets in [-1, 1], one row per sample
        config: TrainConfig
        name: net name used in logs and errors
        shuffle_stream: callable (generation, n) -> sample order; defaults to a
            permutation drawn from generation_rng(config.seed, generation)
        progress: show a tqdm bar
    Returns:
        TrainResult(net, error_history, learning_rates)
    """
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if X.shape[0] == 0:
        raise DatasetError(f"{name or 'net'}: empty training set")
    X = _check_input(net, X)
    Y = np.ascontiguousarray(np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1))
    if Y.shape[1] != net.layer_sizes[2]:
        raise ValueError(f"targets have {Y.shape[1]} columns, net has {net.layer_sizes[2]} outputs")
    if config.max_generations == 0:
        return TrainResult(net, [], [])
    order_for = shuffle_stream or _default_order(config.seed)
    w1, b1, w2, b2 = (np.array(a, dtype=np.float64, copy=True) for a in (net.w1, net.b1, net.w2, net.b2))
    state = TrainState.zeros(net, config.lambda_init, config.mu_momentum)
    dw1, db1, dw2, db2 = state.dw1, state.db1, state.dw2, state.db2
    lam = config.lambda_init
    history, rates = [], []
    bar = trange(config.max_generations, desc=name or "train", disable=not progress, leave=False)
    for generation in bar:
        order = np.asarray(order_for(generation, X.shape[0]), dtype=np.int64)
        rates.append(lam)
        _generation_kernel(X, Y, order, w1, b1, w2, b2, dw1, db1, dw2, db2, lam, config.mu_momentum)
        error = mean_quadratic_error(Mlp(w1, b1, w2, b2), X, Y)
        if not np.isfinite(error):
            raise TrainingDivergedError("mean quadratic error is not finite", history, name)
        if config.adaptive and history:
            if error < history[-1]:
                lam *= config.lr_up
            elif error > history[-1]:
                lam *= config.lr_down
            if config.lambda_max is not None:
                lam = min(lam, config.lambda_max)
            if config.lambda_min is not None:
                lam = max(lam, config.lambda_min)
        history.append(error)
        bar.set_postfix(error=f"{error:.5f}")
        logger.debug(f"{name} generation {generation}: error {error:.6g} learning rate {lam:.6g}")
        if error <= config.target_error:
            break
    logger.info(f"{name or 'net'} trained for {len(history)} generations, final error {history[-1]:.6g}")
    meta = {
        "training": config.to_dict(),
        "final_error": history[-1],
        "generations": len(history),
        "seed": config.seed,
        "final_learning_rate": lam,
    }
    return TrainResult(Mlp(w1, b1, w2, b2, meta), history, rates)


def init_weights(layer_sizes, scale=0.1, seed=1000):
    """Uniform weights in [-scale, scale] from a seeded stream; zero biases."""
    n_in, n_hidden, n_out = (int(n) for n in layer_sizes)
    if min(n_in, n_hidden, n_out) <= 0:
        raise ValueError(f"layer sizes must be positive, got {tuple(layer_sizes)}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    w1 = rng.uniform(-scale, scale, size=(n_hidden, n_in))
    w2 = rng.uniform(-scale, scale, size=(n_out, n_hidden))
    return Mlp(w1, np.zeros(n_hidden), w2, np.zeros(n_out))


def mlp_to_dict(net):
    return {
        "version": MODEL_VERSION,
        "activation": ACTIVATION,
        "layer_sizes": list(net.layer_sizes),
        "w1": net.w1.tolist(),
        "b1": net.b1.tolist(),
        "w2": net.w2.tolist(),
        "b2": net.b2.tolist(),
        "meta": net.meta,
    }


def mlp_from_dict(d):
    if d.get("version") != MODEL_VERSION or d.get("activation") != ACTIVATION:
        raise DatasetError(f"unsupported model file (version {d.get('version')}, activation {d.get('activation')})")
    n_in, n_hidden, n_out = d["layer_sizes"]
    return Mlp(
        np.asarray(d["w1"], dtype=np.float64).reshape(n_hidden, n_in),
        np.asarray(d["b1"], dtype=np.float64),
        np.asarray(d["w2"], dtype=np.float64).reshape(n_out, n_hidden),
        np.asarray(d["b2"], dtype=np.float64),
        d.get("meta", {}),
    )


def save_mlp(net, fn):
    with open(fn, "w") as fid:
        json.dump(mlp_to_dict(net), fid)


def load_mlp(fn):
    with open(fn) as fid:
        return mlp_from_dict(json.load(fid))
