"""Intensity decoders.

Every decoder maps history representations ``Z`` (B, J, D), query times ``t``
(B, J, Q) and interval starts ``t_prev`` (B, J) to a :class:`DecoderOutput`
whose arrays are (B, J, Q, M): the intensity at each query time and the
compensator accumulated from ``t_prev`` to it. Interval j uses Z[:, j], the
representation of the history up to and including event j.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ad
from .encoders import LayerNorm, Linear, MultiHeadAttention, temporal_embedding
from .errors import NumericalError, ShapeError
from .monotonic import (EmaLayerNorm, GumbelActivation, MonotonicMLP, PositiveLinear,
                        positive_s)

DECODERS = ("cp", "rmtpp", "lnm", "mlp-mc", "mlp-cm", "attn-mc", "attn-cm")
TANGENT_TOLERANCE = 1e-12
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class DecoderOutput:
    lam: ad.Node
    big_lam: ad.Node
    log_lam: ad.Node | None = None
    attention: np.ndarray | None = None


def _deltas(t, t_prev):
    t = np.asarray(t, dtype=np.float64)
    t_prev = np.asarray(t_prev, dtype=np.float64)
    if t.shape[:-1] != t_prev.shape:
        raise ShapeError(f"query times {t.shape} do not match interval starts {t_prev.shape}")
    delta = t - t_prev[..., None]
    if np.any(delta < 0):
        raise ValueError("query time precedes the interval start")
    return t, t_prev, delta


def _expand_queries(z, q):
    """Broadcast z (B, J, D) to (B, J, Q, D)."""
    B, J, D = z.shape
    return ad.broadcast_to(ad.reshape(z, (B, J, 1, D)), (B, J, q, D))


class MLP:
    """Linear -> relu -> Linear."""

    def __init__(self, store, name, in_dim, hidden, out_dim):
        self.l1 = Linear(store, f"{name}.l1", in_dim, hidden)
        self.l2 = Linear(store, f"{name}.l2", hidden, out_dim)

    def __call__(self, x):
        return self.l2(ad.relu(self.l1(x)))


class ScaledSoftplusOut:
    """Positive output activation s * softplus(x / s) with one learnable s per mark."""

    def __init__(self, store, name, dim):
        self.raw_s = store.create(f"{name}.s", value=np.full(dim, math.log(math.e - 1.0)))

    def __call__(self, x):
        return ad.scaled_softplus(x, positive_s(self.raw_s))


@dataclass
class McIntegrator:
    samples: int = 50
    jitter: bool = True

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("need at least one Monte Carlo sample")

    def points(self, t, t_prev, rng=None):
        """Stratified sample times, shape t.shape + (samples,)."""
        t = np.asarray(t, dtype=np.float64)
        delta = t - np.asarray(t_prev, dtype=np.float64)[..., None]
        k = np.arange(self.samples)
        if self.jitter:
            rng = rng if rng is not None else np.random.default_rng(0)
            u = rng.uniform(size=t.shape + (self.samples,))
        else:
            u = np.full(t.shape + (self.samples,), 0.5)
        return np.asarray(t_prev)[..., None, None] + delta[..., None] * (k + u) / self.samples


def mc_integrate(intensity, t, t_prev, integ, rng=None):
    """Monte Carlo estimate of the integral of ``intensity`` from t_prev to t.

    ``intensity`` maps an array of times (B, J, P) to a node (B, J, P, M);
    the sample times are constants of the graph.
    """
    t, t_prev, delta = _deltas(t, t_prev)
    pts = integ.points(t, t_prev, rng)
    B, J, Q, S = pts.shape
    lam = intensity(pts.reshape(B, J, Q * S))
    M = lam.shape[-1]
    lam = ad.reshape(lam, (B, J, Q, S, M))
    return ad.mul(ad.mean(lam, axis=3), delta[..., None])


class BaseIntensity:
    """lam_total = a1 mu + a2 lam, (a1, a2) = softmax(mix logits)."""

    def __init__(self, store, num_marks, rate=1.0):
        rate = max(float(rate), 1e-6)
        raw = math.log(math.expm1(rate)) if rate < 30 else rate
        self.raw_mu = store.create("base.mu", value=np.full(num_marks, raw))
        self.logits = store.create("base.a", value=np.array([3.0, 0.0]))

    def mu(self):
        return ad.softplus(self.raw_mu)

    def weights(self):
        return ad.softmax(self.logits)

    def mix(self, out, delta):
        alpha = self.weights()
        a1, a2 = alpha[0], alpha[1]
        base = ad.mul(a1, self.mu())
        if out.log_lam is not None:
            log_inner = ad.add(out.log_lam, ad.log(a2))
            log_base = ad.broadcast_to(ad.log(base), log_inner.shape)
            stacked = ad.concat([ad.reshape(log_base, log_base.shape + (1,)),
                                 ad.reshape(log_inner, log_inner.shape + (1,))], axis=-1)
            log_lam = ad.logsumexp(stacked, axis=-1)
            lam = ad.exp(log_lam)
        else:
            lam = ad.add(base, ad.mul(a2, out.lam))
            log_lam = None
        big = ad.add(ad.mul(base, np.asarray(delta)[..., None]), ad.mul(a2, out.big_lam))
        return DecoderOutput(lam, big, log_lam, out.attention)


class CPDecoder:
    """Constant intensity between events: lam = softplus_s(MLP(z))."""

    cumulative = False

    def __init__(self, store, num_marks, d_model, **_):
        self.mlp = MLP(store, "dec.cp", d_model, d_model, num_marks)
        self.out = ScaledSoftplusOut(store, "dec.cp.out", num_marks)

    def __call__(self, z, t, t_prev, **_):
        t, t_prev, delta = _deltas(t, t_prev)
        B, J, Q = t.shape
        lam = self.out(self.mlp(z))
        M = lam.shape[-1]
        lam = ad.broadcast_to(ad.reshape(lam, (B, J, 1, M)), (B, J, Q, M))
        return DecoderOutput(lam, ad.mul(lam, delta[..., None]))


class RMTPPDecoder:
    """lam = exp(c + w delta), c = W z + b, with the closed-form integral."""

    cumulative = False
    W_FLOOR = 1e-12

    def __init__(self, store, num_marks, d_model, **_):
        self.head = Linear(store, "dec.rmtpp.c", d_model, num_marks)
        self.w = store.create("dec.rmtpp.w", value=np.array(-0.1))

    def __call__(self, z, t, t_prev, **_):
        t, t_prev, delta = _deltas(t, t_prev)
        B, J, Q = t.shape
        c = self.head(z)
        M = c.shape[-1]
        c = ad.reshape(c, (B, J, 1, M))
        d = delta[..., None]
        wd = ad.mul(self.w, d)
        log_lam = ad.add(c, wd)
        lam = ad.exp(log_lam)
        if abs(float(self.w.value)) < self.W_FLOOR:
            big = ad.mul(ad.exp(c), d)
        else:
            # exp(c) (exp(w d) - 1) / w, via expm1 for small w d
            big = ad.div(ad.mul(ad.exp(c), ad.expm1(wd)), self.w)
            big = ad.broadcast_to(big, (B, J, Q, M))
        return DecoderOutput(lam, big, ad.broadcast_to(log_lam, (B, J, Q, M)))


class LNMDecoder:
    """Log-normal mixture for the waiting time, times mark probabilities.

    Expressed as an intensity: lam_m = rho_m * hazard, with the total
    compensator equal to -log survival, split across marks in proportion to rho.
    """

    cumulative = False
    DELTA_FLOOR = 1e-12

    def __init__(self, store, num_marks, d_model, components=4, multilabel=False, **_):
        self.multilabel = multilabel
        self.w_head = Linear(store, "dec.lnm.w", d_model, components)
        self.mu_head = Linear(store, "dec.lnm.mu", d_model, components)
        self.sigma_head = Linear(store, "dec.lnm.sigma", d_model, components)
        self.mark_head = Linear(store, "dec.lnm.rho", d_model, num_marks)

    def mixture(self, z):
        log_w = ad.sub(self.w_head(z), ad.logsumexp(self.w_head(z), axis=-1, keepdims=True))
        return log_w, self.mu_head(z), self.sigma_head(z)

    def log_density_and_survival(self, z, delta):
        """log p(delta) and log S(delta); z (B, J, D), delta (B, J, Q)."""
        B, J, Q = delta.shape
        log_w, mu, log_sigma = self.mixture(z)
        K = mu.shape[-1]
        shape4 = (B, J, 1, K)
        log_w, mu, log_sigma = (ad.reshape(x, shape4) for x in (log_w, mu, log_sigma))
        log_d = np.log(np.maximum(delta, self.DELTA_FLOOR))[..., None]
        std = ad.mul(ad.sub(log_d, mu), ad.exp(ad.negate(log_sigma)))
        comp = ad.sub(ad.sub(log_w, log_sigma), ad.mul(ad.mul(std, std), 0.5))
        log_p = ad.sub(ad.logsumexp(comp, axis=-1), log_d[..., 0] + _HALF_LOG_2PI)
        log_s = ad.logsumexp(ad.add(log_w, ad.log_ndtr(ad.negate(std))), axis=-1)
        return log_p, log_s

    def __call__(self, z, t, t_prev, **_):
        t, t_prev, delta = _deltas(t, t_prev)
        B, J, Q = t.shape
        log_p, log_s = self.log_density_and_survival(z, delta)
        logits = self.mark_head(z)
        M = logits.shape[-1]
        if self.multilabel:
            log_rho = ad.negate(ad.softplus(ad.negate(logits)))
            rho = ad.sigmoid(logits)
            share = ad.div(rho, ad.sum(rho, axis=-1, keepdims=True))
        else:
            log_rho = ad.sub(logits, ad.logsumexp(logits, axis=-1, keepdims=True))
            share = ad.exp(log_rho)
        log_rho = ad.reshape(log_rho, (B, J, 1, M))
        share = ad.reshape(share, (B, J, 1, M))
        log_hazard = ad.sub(log_p, log_s)
        log_lam = ad.add(log_rho, ad.reshape(log_hazard, (B, J, Q, 1)))
        big = ad.mul(share, ad.reshape(ad.negate(log_s), (B, J, Q, 1)))
        return DecoderOutput(ad.exp(log_lam), big, log_lam)


class MLPMCDecoder:
    """lam(t) = softplus_s(MLP([Temporal(t), z])), compensator by Monte Carlo."""

    cumulative = False

    def __init__(self, store, num_marks, d_model, beta_hat=1.0, query_time="absolute", **_):
        self.d_model = d_model
        self.beta_hat = beta_hat
        self.query_time = query_time
        self.mlp = MLP(store, "dec.mlpmc", 2 * d_model, d_model, num_marks)
        self.out = ScaledSoftplusOut(store, "dec.mlpmc.out", num_marks)

    def intensity(self, z, u, t_prev):
        u = u - t_prev[..., None] if self.query_time == "relative" else u
        q = temporal_embedding(u, self.d_model, self.beta_hat)
        x = ad.concat([ad.const(q), _expand_queries(z, u.shape[-1])], axis=-1)
        return self.out(self.mlp(x))

    def __call__(self, z, t, t_prev, integ=None, rng=None, with_big=True, **_):
        t, t_prev, _ = _deltas(t, t_prev)
        lam = self.intensity(z, t, t_prev)
        if not with_big:
            return DecoderOutput(lam, ad.mul(lam, 0.0))
        big = mc_integrate(lambda u: self.intensity(z, u, t_prev), t, t_prev,
                           integ or McIntegrator(), rng)
        return DecoderOutput(lam, big)


class _AttentionQueries:
    """Shared plumbing: a sentinel key replaces Z[:, 0]; queries in interval j see keys 0..j."""

    def _keys(self, z):
        B, J, D = z.shape
        bos = ad.broadcast_to(ad.reshape(self.bos, (1, 1, D)), (B, 1, D))
        return ad.concat([bos, z[:, 1:, :]], axis=1) if J > 1 else bos

    @staticmethod
    def _mask(J, P):
        owner = np.repeat(np.arange(J), P)
        return (np.arange(J)[None, :] <= owner[:, None])[None]


class AttnMCDecoder(_AttentionQueries):
    """Pre-LN cross-attention from Temporal(t) onto the history, softplus_s output."""

    cumulative = False

    def __init__(self, store, num_marks, d_model, beta_hat=1.0, heads=1,
                 query_time="absolute", **_):
        self.d_model = d_model
        self.beta_hat = beta_hat
        self.query_time = query_time
        self.bos = store.create("dec.attnmc.bos", (1, d_model))
        self.ln1 = LayerNorm(store, "dec.attnmc.ln1", d_model)
        self.mha = MultiHeadAttention(store, "dec.attnmc.mha", d_model, heads)
        self.ln2 = LayerNorm(store, "dec.attnmc.ln2", d_model)
        self.ff1 = Linear(store, "dec.attnmc.ff1", d_model, d_model)
        self.ff2 = Linear(store, "dec.attnmc.ff2", d_model, d_model)
        self.mlp = MLP(store, "dec.attnmc.mlp", d_model, d_model, num_marks)
        self.out = ScaledSoftplusOut(store, "dec.attnmc.out", num_marks)

    def intensity(self, z, u, t_prev, keep=None):
        B, J, P = u.shape
        u = u - t_prev[..., None] if self.query_time == "relative" else u
        q0 = ad.const(temporal_embedding(u, self.d_model, self.beta_hat).reshape(B, J * P, -1))
        h = self.ln1(q0)
        att, coeff = self.mha(h, self._keys(z), self._mask(J, P))
        if keep is not None:
            keep.append(coeff)
        x = ad.add(att, q0)
        x = ad.add(self.ff2(ad.relu(self.ff1(self.ln2(x)))), x)
        lam = self.out(self.mlp(x))
        return ad.reshape(lam, (B, J, P, lam.shape[-1]))

    def __call__(self, z, t, t_prev, integ=None, rng=None, with_big=True, **_):
        t, t_prev, _ = _deltas(t, t_prev)
        keep = []
        lam = self.intensity(z, t, t_prev, keep)
        if not with_big:
            return DecoderOutput(lam, ad.mul(lam, 0.0), attention=keep[0])
        big = mc_integrate(lambda u: self.intensity(z, u, t_prev), t, t_prev,
                           integ or McIntegrator(), rng)
        return DecoderOutput(lam, big, attention=keep[0])


class ParametricTemporal:
    """Monotone map from a scalar time to d_model features."""

    def __init__(self, store, name, d_model, beta_hat=1.0):
        self.beta_hat = beta_hat
        self.net = MonotonicMLP(store, name, [1, d_model, d_model], final=None)

    def __call__(self, tau):
        return self.net(ad.mul(ad.reshape(tau, tau.shape + (1,)), 1.0 / self.beta_hat))


class _Cumulative:
    """Lambda(t) = G(t) - G(t_prev); lam is the time tangent of G at t."""

    cumulative = True

    def _evaluate(self, z, t, t_prev, train):
        t, t_prev, _ = _deltas(t, t_prev)
        base = t_prev if self.query_time == "relative" else np.zeros_like(t_prev)
        tau = np.concatenate([t_prev[..., None], t], axis=-1) - base[..., None]
        tau = ad.seed_time_tangent(ad.const(tau))
        g, attn = self.cumulative_fn(z, tau, train)
        lam = ad.tangent_of(g)[:, :, 1:, :]
        if np.any(lam.value < -TANGENT_TOLERANCE):
            raise NumericalError(
                f"cumulative decoder produced a negative intensity ({lam.value.min():.3e})")
        big = ad.sub(g[:, :, 1:, :], g[:, :, :1, :])
        return DecoderOutput(lam, big, attention=attn)

    def __call__(self, z, t, t_prev, train=False, **_):
        return self._evaluate(z, t, t_prev, train)


class MLPCMDecoder(_Cumulative):
    def __init__(self, store, num_marks, d_model, beta_hat=1.0, query_time="absolute", **_):
        self.query_time = query_time
        self.temporal = ParametricTemporal(store, "dec.mlpcm.pt", d_model, beta_hat)
        self.net = MonotonicMLP(store, "dec.mlpcm.mlp", [2 * d_model, d_model, num_marks])

    def cumulative_fn(self, z, tau, train):
        q = self.temporal(tau)
        x = ad.concat([q, _expand_queries(z, tau.shape[-1])], axis=-1)
        return self.net(x), None


class AttnCMDecoder(_Cumulative, _AttentionQueries):
    """Cross-attention assembled from monotone pieces only."""

    def __init__(self, store, num_marks, d_model, beta_hat=1.0, heads=1,
                 query_time="absolute", **_):
        self.query_time = query_time
        self.bos = store.create("dec.attncm.bos", (1, d_model))
        self.temporal = ParametricTemporal(store, "dec.attncm.pt", d_model, beta_hat)
        self.ln1 = EmaLayerNorm(store, "dec.attncm.ln1", d_model)
        self.mha = MultiHeadAttention(store, "dec.attncm.mha", d_model, heads,
                                      activation="sigmoid", monotone=True)
        self.ln2 = EmaLayerNorm(store, "dec.attncm.ln2", d_model)
        self.ff1 = PositiveLinear(store, "dec.attncm.ff1", d_model, d_model)
        self.ff_act = GumbelActivation(store, "dec.attncm.ff_act", d_model)
        self.ff2 = PositiveLinear(store, "dec.attncm.ff2", d_model, d_model)
        self.net = MonotonicMLP(store, "dec.attncm.mlp", [d_model, d_model, num_marks])

    def layer_norms(self):
        return [self.ln1, self.ln2]

    def cumulative_fn(self, z, tau, train):
        B, J, P = tau.shape
        q0 = ad.reshape(self.temporal(tau), (B, J * P, -1))
        h = self.ln1(q0, train=train)
        att, coeff = self.mha(h, self._keys(z), self._mask(J, P))
        x = ad.add(att, q0)
        x = ad.add(self.ff2(self.ff_act(self.ff1(self.ln2(x, train=train)))), x)
        g = self.net(x)
        return ad.reshape(g, (B, J, P, g.shape[-1])), coeff


DECODER_CLASSES = {
    "cp": CPDecoder,
    "rmtpp": RMTPPDecoder,
    "lnm": LNMDecoder,
    "mlp-mc": MLPMCDecoder,
    "mlp-cm": MLPCMDecoder,
    "attn-mc": AttnMCDecoder,
    "attn-cm": AttnCMDecoder,
}
