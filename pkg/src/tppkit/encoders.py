"""History encoders: label embedding + temporal encoding, then GRU or self-attention.

Both encoders return representations ``Z`` of shape (B, N + 1, D) where
position 0 stands for the empty history (h_0 = 0 for the GRU, a learnable
vector for self-attention) and position j is the representation after the
j-th event.
"""

from __future__ import annotations

import math

import numpy as np

from . import ad
from .errors import ShapeError, ValidationError


def temporal_embedding(t, d_model, beta_hat=1.0):
    """Interleaved [sin(a_k t), cos(a_k t)] with a_k = 10000^(-2k/d) / beta_hat."""
    if d_model % 2:
        raise ShapeError(f"d_model must be even, got {d_model}")
    t = np.asarray(t, dtype=np.float64)
    rates = 10000.0 ** (-2.0 * np.arange(d_model // 2) / d_model) / beta_hat
    angles = t[..., None] * rates
    out = np.empty(t.shape + (d_model,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def estimate_beta(sequences):
    """Mean over sequences of window length / number of events."""
    if not sequences:
        raise ValidationError("cannot estimate beta from an empty training set")
    vals = []
    for i, s in enumerate(sequences):
        if len(s) == 0:
            raise ValidationError(f"sequence {i} has no events; beta is undefined")
        vals.append((s.window[1] - s.window[0]) / len(s))
    return float(np.mean(vals))


class LabelEmbedding:
    def __init__(self, store, name, num_marks, dim, pooling="mean"):
        if num_marks < 1:
            raise ValueError("need at least one mark")
        if pooling not in ("mean", "max"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.num_marks = num_marks
        self.dim = dim
        self.pooling = pooling
        self.table = store.create(f"{name}.table", (num_marks, dim))

    def __call__(self, labels):
        """``labels``: multi-hot array (..., M) -> pooled embeddings (..., D)."""
        labels = np.asarray(labels, dtype=np.float64)
        if self.pooling == "mean":
            count = np.maximum(labels.sum(axis=-1, keepdims=True), 1.0)
            return ad.matmul(ad.const(labels / count), self.table)
        rows = ad.broadcast_to(self.table, labels.shape + (self.dim,))
        mask = labels[..., None] > 0
        # padded events have no labels; let them pool over every row
        mask = mask | ~mask.any(axis=-2, keepdims=True)
        return ad.masked_max(rows, mask, axis=-2)


def embed_labels(emb, marks):
    marks = list(marks)
    if not marks:
        raise ValidationError("empty mark set")
    if any(m < 0 or m >= emb.num_marks for m in marks):
        raise ValidationError(f"mark id outside [0, {emb.num_marks})")
    hot = np.zeros(emb.num_marks)
    hot[marks] = 1.0
    return emb(hot[None]).value[0]


def temporal_encode(emb, d_model, beta_hat, labels, times):
    """x_i = v_i sqrt(d_model) + Temporal(t_i)."""
    if emb.dim != d_model:
        raise ShapeError(f"embedding size {emb.dim} != d_model {d_model}")
    v = emb(labels)
    return ad.add(ad.mul(v, math.sqrt(d_model)), temporal_embedding(times, d_model, beta_hat))


class Linear:
    def __init__(self, store, name, in_dim, out_dim, bias=True):
        self.in_dim = in_dim
        self.weight = store.create(f"{name}.W", (out_dim, in_dim))
        self.bias = store.create(f"{name}.b", (out_dim,), init="zeros") if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear expects last dim {self.in_dim}, got {x.shape}")
        y = ad.matmul(x, self.weight.T)
        return y if self.bias is None else ad.add(y, self.bias)


class LayerNorm:
    def __init__(self, store, name, dim, eps=1e-5):
        self.eps = eps
        self.gain = store.create(f"{name}.gain", value=np.ones(dim))
        self.offset = store.create(f"{name}.offset", (dim,), init="zeros")

    def __call__(self, x, train=False):
        centred = ad.sub(x, ad.mean(x, axis=-1, keepdims=True))
        var = ad.mean(ad.mul(centred, centred), axis=-1, keepdims=True)
        scaled = ad.mul(centred, ad.power(ad.add(var, self.eps), -0.5))
        return ad.add(ad.mul(scaled, self.gain), self.offset)


class GruEncoder:
    """h_i = (1 - z_i) n_i + z_i h_{i-1}, standard reset/update/new gates."""

    def __init__(self, store, name, in_dim, hidden):
        self.in_dim = in_dim
        self.hidden = hidden
        self.W = [store.create(f"{name}.W{k}", (hidden, in_dim if k % 2 else hidden))
                  for k in range(1, 7)]
        self.b = [store.create(f"{name}.b{k}", (hidden,), init="zeros") for k in range(1, 7)]

    def __call__(self, xs):
        """xs: (B, L, in_dim) -> Z: (B, L + 1, hidden) with Z[:, 0] = h_0 = 0."""
        if xs.shape[-1] != self.in_dim:
            raise ShapeError(f"GRU expects input size {self.in_dim}, got {xs.shape}")
        B, L, _ = xs.shape
        H = self.hidden
        w_in = ad.concat([self.W[0], self.W[2], self.W[4]], axis=0)
        b_in = ad.concat([self.b[0], self.b[2], self.b[4]], axis=0)
        w_h = ad.concat([self.W[1], self.W[3], self.W[5]], axis=0)
        b_h = ad.concat([self.b[1], self.b[3], self.b[5]], axis=0)
        gx_all = ad.add(ad.matmul(xs, w_in.T), b_in)
        h = ad.const(np.zeros((B, 1, H)))
        states = [h]
        for i in range(L):
            gx = gx_all[:, i:i + 1, :]
            gh = ad.add(ad.matmul(h, w_h.T), b_h)
            r = ad.sigmoid(ad.add(gx[..., :H], gh[..., :H]))
            z = ad.sigmoid(ad.add(gx[..., H:2 * H], gh[..., H:2 * H]))
            n = ad.tanh(ad.add(gx[..., 2 * H:], ad.mul(r, gh[..., 2 * H:])))
            h = ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))
            states.append(h)
        return ad.concat(states, axis=1)


def attention(q, k, v, activation="softmax", mask=None):
    """Scaled dot-product attention over the last two axes.

    Returns (outputs, coefficients). Masked keys get coefficient exactly 0.
    """
    dk = q.shape[-1]
    if k.shape[-1] != dk:
        raise ShapeError(f"query/key size mismatch: {q.shape} vs {k.shape}")
    logits = ad.mul(ad.matmul(q, ad.as_node(k).T), 1.0 / math.sqrt(dk))
    if activation == "softmax":
        coeff = ad.softmax(logits, axis=-1, mask=mask)
    elif activation == "sigmoid":
        coeff = ad.sigmoid(logits)
        if mask is not None:
            coeff = ad.mul(coeff, np.asarray(mask, dtype=np.float64))
    else:
        raise ValueError(f"unknown attention activation {activation!r}")
    return ad.matmul(coeff, v), coeff


class MultiHeadAttention:
    """Multi-head attention; ``monotone=True`` makes the output non-decreasing in the query.

    In monotone mode the query and output projections use clamped positive
    weights, keys and values pass through softplus (so every logit and every
    weighted value is non-decreasing in the query), and the activation is
    the sigmoid.
    """

    def __init__(self, store, name, d_model, heads=1, activation="softmax", monotone=False):
        if d_model % heads:
            raise ShapeError(f"d_model {d_model} not divisible by {heads} heads")
        from .monotonic import PositiveLinear

        self.heads = heads
        self.d_model = d_model
        self.activation = activation
        self.monotone = monotone
        proj = PositiveLinear if monotone else Linear
        self.q_proj = proj(store, f"{name}.q", d_model, d_model)
        self.k_proj = Linear(store, f"{name}.k", d_model, d_model)
        self.v_proj = Linear(store, f"{name}.v", d_model, d_model)
        self.o_proj = proj(store, f"{name}.o", d_model, d_model)

    def _split(self, x):
        B, N, D = x.shape
        return ad.transpose(ad.reshape(x, (B, N, self.heads, D // self.heads)), (0, 2, 1, 3))

    def __call__(self, queries, keys_values, mask=None):
        """queries (B, Nq, D), keys_values (B, Nk, D), mask broadcastable to (B, Nq, Nk)."""
        k = self.k_proj(keys_values)
        v = self.v_proj(keys_values)
        if self.monotone:
            k, v = ad.softplus(k), ad.softplus(v)
        q = self._split(self.q_proj(queries))
        k, v = self._split(k), self._split(v)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            mask = mask[:, None] if mask.ndim == 3 else mask
        out, coeff = attention(q, k, v, self.activation, mask)
        B, H, Nq, dv = out.shape
        merged = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, Nq, H * dv))
        return self.o_proj(merged), coeff.value


class SaEncoder:
    """Pre-LN self-attention stack; event i sees events strictly before it and itself."""

    def __init__(self, store, name, d_model, heads=1, layers=1):
        self.d_model = d_model
        self.bos = store.create(f"{name}.bos", (1, d_model))
        self.blocks = []
        for i in range(layers):
            self.blocks.append(dict(
                ln1=LayerNorm(store, f"{name}.{i}.ln1", d_model),
                mha=MultiHeadAttention(store, f"{name}.{i}.mha", d_model, heads),
                ln2=LayerNorm(store, f"{name}.{i}.ln2", d_model),
                ff1=Linear(store, f"{name}.{i}.ff1", d_model, d_model),
                ff2=Linear(store, f"{name}.{i}.ff2", d_model, d_model),
            ))

    @staticmethod
    def causal_mask(times, event_mask=None):
        """mask[b, i, j] = t_j < t_i or i == j (restricted to real events j)."""
        times = np.asarray(times, dtype=np.float64)
        if times.ndim == 1:
            times = times[None]
        L = times.shape[-1]
        mask = (times[:, None, :] < times[:, :, None]) | np.eye(L, dtype=bool)[None]
        if event_mask is not None:
            em = np.asarray(event_mask, dtype=bool).reshape(times.shape)
            mask &= em[:, None, :] | np.eye(L, dtype=bool)[None]
        return mask

    def __call__(self, xs, times, event_mask=None):
        """xs (B, L, D) -> (Z (B, L + 1, D), per-layer coefficients (B, H, L, L))."""
        B, L, D = xs.shape
        if np.shape(times) != (B, L):
            raise ShapeError(f"times shape {np.shape(times)} does not match inputs {xs.shape}")
        mask = self.causal_mask(times, event_mask)
        coeffs = []
        x = xs
        for blk in self.blocks:
            h = blk["ln1"](x)
            att, c = blk["mha"](h, h, mask)
            coeffs.append(c)
            x = ad.add(att, x)
            h = blk["ln2"](x)
            x = ad.add(blk["ff2"](ad.relu(blk["ff1"](h))), x)
        bos = ad.broadcast_to(ad.reshape(self.bos, (1, 1, D)), (B, 1, D))
        return ad.concat([bos, x], axis=1), coeffs


class EventEncoder:
    """Label embedding + temporal encoding feeding a GRU or SA encoder."""

    def __init__(self, store, kind, num_marks, d_model, beta_hat=1.0, heads=1, layers=1,
                 pooling="mean"):
        if kind not in ("gru", "sa"):
            raise ValueError(f"unknown encoder {kind!r}")
        self.kind = kind
        self.d_model = d_model
        self.beta_hat = beta_hat
        self.embedding = LabelEmbedding(store, "enc.emb", num_marks, d_model, pooling)
        if kind == "gru":
            if layers != 1:
                raise ValueError("the GRU encoder has a single layer")
            self.net = GruEncoder(store, "enc.gru", d_model, d_model)
        else:
            self.net = SaEncoder(store, "enc.sa", d_model, heads, layers)

    def __call__(self, batch):
        xs = temporal_encode(self.embedding, self.d_model, self.beta_hat, batch.labels, batch.times)
        if self.kind == "gru":
            return self.net(xs), []
        return self.net(xs, batch.times, batch.event_mask)
