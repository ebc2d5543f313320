"""Layers whose output is non-decreasing in their input.

Composing them (with non-negative time tangents at the input) yields networks
whose output is monotone in time, which is what the cumulative decoders need.
"""

from __future__ import annotations

import math

import numpy as np

from . import ad
from .errors import NumericalError, ShapeError

EPSILON = 1e-30
S_FLOOR = 1e-6


def _positive_uniform(rng, shape):
    fan_out, fan_in = shape
    return rng.uniform(0.0, math.sqrt(6.0 / (fan_in + fan_out)), size=shape)


def _s_param_init(rng, shape):
    # softplus(raw) == 1, i.e. the activation starts as the logistic sigmoid
    return np.full(shape, math.log(math.e - 1.0))


def positive_s(raw):
    """Map an unconstrained parameter to s > 0."""
    return ad.softplus(raw) + S_FLOOR


def gumbel(x, s):
    """Adaptive Gumbel activation 1 - (1 + s e^x)^(-1/s).

    Evaluated as -expm1(-softplus(x + log s) / s) so that large x cannot overflow.
    """
    return ad.negate(ad.expm1(ad.negate(gumbel_log_term(x, s))))


def gumbel_log_term(x, s):
    """log(1 + s e^x) / s, the parametric softplus paired with the Gumbel."""
    s = ad.as_node(s)
    return ad.div(ad.softplus(ad.add(x, ad.log(s))), s)


def gumbel_softplus(x, s):
    """gumbel(x) * (1 + log(1 + s e^x) / s); unbounded above, increasing."""
    term = gumbel_log_term(x, s)
    g = ad.negate(ad.expm1(ad.negate(term)))
    return ad.mul(g, ad.add(term, 1.0))


def gumbel_value(x, s):
    """Plain numpy Gumbel activation."""
    x = np.asarray(x, dtype=np.float64)
    return -np.expm1(-np.logaddexp(0.0, x + np.log(s)) / s)


def gumbel_derivative(x, s):
    """d gumbel / dx = e^x (1 + s e^x)^(-(s+1)/s), computed in log space."""
    x = np.asarray(x, dtype=np.float64)
    log_base = np.logaddexp(0.0, x + np.log(s))
    return np.exp(x - (s + 1.0) / s * log_base)


def gumbel_second_derivative(x, s):
    x = np.asarray(x, dtype=np.float64)
    log_base = np.logaddexp(0.0, x + np.log(s))
    return -np.expm1(x) * np.exp(x - (2.0 * s + 1.0) / s * log_base)


class PositiveLinear:
    """y = x max(V, eps)^T + b with a straight-through reverse rule on the clamp."""

    def __init__(self, store, name, in_dim, out_dim, eps=EPSILON, bias=True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.eps = eps
        self.raw_weight = store.create(f"{name}.V", (out_dim, in_dim), init=_positive_uniform)
        self.bias = store.create(f"{name}.b", (out_dim,), init="zeros") if bias else None

    def weight(self):
        return ad.clamp_min_st(self.raw_weight, self.eps)

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"PositiveLinear expects last dim {self.in_dim}, got {x.shape}")
        y = ad.matmul(x, self.weight().T)
        return y if self.bias is None else ad.add(y, self.bias)


class GumbelActivation:
    def __init__(self, store, name, dim):
        self.raw_s = store.create(f"{name}.s", (dim,), init=_s_param_init)

    def s(self):
        return positive_s(self.raw_s)

    def __call__(self, x):
        return gumbel(x, self.s())


class GumbelSoftplus:
    def __init__(self, store, name, dim):
        self.raw_s = store.create(f"{name}.s", (dim,), init=_s_param_init)

    def s(self):
        return positive_s(self.raw_s)

    def __call__(self, x):
        return gumbel_softplus(x, self.s())


class EmaLayerNorm:
    """Layer normalisation with frozen statistics.

    The forward pass standardises with running per-feature mean/std that are
    constants of the graph; in train mode they are refreshed from the batch
    *after* the output has been computed. With a gain clamped to >= eps the
    map is affine and non-decreasing in every coordinate.
    """

    def __init__(self, store, name, dim, rate=0.1, eps=EPSILON):
        self.dim = dim
        self.rate = rate
        self.eps = eps
        self.running_mean = np.zeros(dim)
        self.running_std = np.ones(dim)
        self.raw_gain = store.create(f"{name}.gain", value=np.ones(dim))
        self.offset = store.create(f"{name}.offset", (dim,), init="zeros")
        self.name = name

    def __call__(self, x, train=False):
        if np.any(self.running_std <= 0):
            raise NumericalError(f"{self.name}: running std must be positive")
        gain = ad.clamp_min_st(self.raw_gain, self.eps)
        y = ad.add(ad.mul(ad.mul(ad.sub(x, self.running_mean), 1.0 / self.running_std), gain),
                   self.offset)
        if train:
            self.update(x.value)
        return y

    def update(self, batch):
        flat = np.asarray(batch).reshape(-1, self.dim)
        r = self.rate
        self.running_mean = (1.0 - r) * self.running_mean + r * flat.mean(axis=0)
        self.running_std = (1.0 - r) * self.running_std + r * (flat.std(axis=0) + 1e-6)

    def state(self):
        return {"mean": self.running_mean.tolist(), "std": self.running_std.tolist()}

    def load_state(self, state):
        self.running_mean = np.asarray(state["mean"], dtype=np.float64)
        self.running_std = np.asarray(state["std"], dtype=np.float64)


class MonotonicMLP:
    """Positive-weight MLP with Gumbel hidden activations.

    ``final`` chooses the output activation: ``"gumbel_softplus"``,
    ``"gumbel"`` or ``None`` (affine output).
    """

    def __init__(self, store, name, dims, final="gumbel_softplus", eps=EPSILON):
        if len(dims) < 2:
            raise ValueError("MonotonicMLP needs at least input and output sizes")
        self.layers = [PositiveLinear(store, f"{name}.{i}", dims[i], dims[i + 1], eps=eps)
                       for i in range(len(dims) - 1)]
        self.hidden = [GumbelActivation(store, f"{name}.act{i}", dims[i + 1])
                       for i in range(len(dims) - 2)]
        if final == "gumbel_softplus":
            self.final = GumbelSoftplus(store, f"{name}.out", dims[-1])
        elif final == "gumbel":
            self.final = GumbelActivation(store, f"{name}.out", dims[-1])
        elif final is None:
            self.final = None
        else:
            raise ValueError(f"unknown final activation {final!r}")

    def __call__(self, x):
        for layer, act in zip(self.layers[:-1], self.hidden):
            x = act(layer(x))
        x = self.layers[-1](x)
        return x if self.final is None else self.final(x)


def ema_layer_norm_forward(ln, x, mode="eval"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return ln(x, train=mode == "train")
