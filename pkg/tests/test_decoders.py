import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import erf

from tppkit import ad
from tppkit.decoders import (AttnCMDecoder, AttnMCDecoder, BaseIntensity, CPDecoder,
                             DecoderOutput, LNMDecoder, McIntegrator, MLPCMDecoder,
                             MLPMCDecoder, RMTPPDecoder, mc_integrate)
from tppkit.encoders import temporal_embedding
from tppkit.hawkes import PRESETS, hawkes_compensator, hawkes_intensity, simulate_thinning

D, M = 8, 2


def randomize(store, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for name, p in store.items():
        p.value += rng.normal(0, scale, p.shape)
        if name.endswith((".V", ".gain")):
            p.value[...] = np.abs(p.value) + 1e-3


def history(seed=0, B=1, J=3):
    return ad.const(np.random.default_rng(seed).normal(size=(B, J, D)))


def test_cp_time_independent_and_linear():
    store = ad.ParamStore(seed=0)
    dec = CPDecoder(store, M, D)
    z = history()
    t_prev = np.array([[0.0, 1.0, 2.0]])
    t = t_prev[..., None] + np.array([0.0, 0.5, 3.0])
    out = dec(z, t, t_prev)
    lam, big = out.lam.value, out.big_lam.value
    assert np.array_equal(lam[:, :, 0], lam[:, :, 2])
    assert np.all(big[:, :, 0] == 0.0)
    assert np.allclose(big[:, :, 2], 3.0 * lam[:, :, 2])
    with pytest.raises(ValueError):
        dec(z, t_prev[..., None] - 1.0, t_prev)


def test_cp_constructed_rate():
    store = ad.ParamStore(seed=0)
    dec = CPDecoder(store, 1, D)
    for _, p in store.items():
        p.value[...] = 0.0
    s = 1.0 + 1e-6
    dec.mlp.l2.bias.value[...] = s * math.log(math.expm1(2.0 / s))
    dec.out.raw_s.value[...] = math.log(math.e - 1.0)
    out = dec(history(J=1), np.array([[[3.0]]]), np.array([[0.0]]))
    assert out.lam.value.item() == pytest.approx(2.0, rel=1e-12)
    assert out.big_lam.value.item() == pytest.approx(6.0, rel=1e-12)


def _rmtpp(c, w):
    store = ad.ParamStore()
    dec = RMTPPDecoder(store, 1, D)
    dec.head.weight.value[...] = 0.0
    dec.head.bias.value[...] = c
    dec.w.value[...] = w
    return dec


def test_rmtpp_closed_form():
    out = _rmtpp(0.0, 1.0)(history(J=1), np.array([[[1.0]]]), np.array([[0.0]]))
    assert out.lam.value.item() == pytest.approx(math.e)
    assert out.big_lam.value.item() == pytest.approx(math.e - 1)
    out = _rmtpp(0.0, 0.0)(history(J=1), np.array([[[2.0]]]), np.array([[0.0]]))
    assert out.big_lam.value.item() == pytest.approx(2.0)


@pytest.mark.parametrize("c,w", [(0.3, -0.7), (-1.0, 0.4), (0.5, 1e-9), (0.0, -3.0)])
def test_rmtpp_matches_quadrature(c, w):
    dec = _rmtpp(c, w)
    for delta in (0.1, 1.0, 4.0):
        out = dec(history(J=1), np.array([[[delta]]]), np.array([[0.0]]))
        ref, _ = quad(lambda u: math.exp(c + w * u), 0, delta, epsabs=0, epsrel=1e-13)
        assert out.big_lam.value.item() == pytest.approx(ref, rel=1e-8)


def _lnm(K=1, log_w=None, mu=None, log_sigma=None, rho=None, multilabel=False, marks=M):
    store = ad.ParamStore()
    dec = LNMDecoder(store, marks, D, components=K, multilabel=multilabel)
    for head, val in ((dec.w_head, log_w), (dec.mu_head, mu), (dec.sigma_head, log_sigma),
                      (dec.mark_head, rho)):
        head.weight.value[...] = 0.0
        head.bias.value[...] = 0.0 if val is None else val
    return dec


def test_lnm_standard_lognormal_density():
    dec = _lnm()
    log_p, log_s = dec.log_density_and_survival(history(J=1), np.array([[[1.0]]]))
    assert math.exp(log_p.value.item()) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)
    assert math.exp(log_s.value.item()) == pytest.approx(0.5, abs=1e-12)
    ref = lambda d: 1 / (d * math.sqrt(2 * math.pi)) * math.exp(-math.log(d) ** 2 / 2)
    for d in (0.3, 2.0):
        lp, ls = dec.log_density_and_survival(history(J=1), np.array([[[d]]]))
        assert math.exp(lp.value.item()) == pytest.approx(ref(d), rel=1e-12)
        assert math.exp(ls.value.item()) == pytest.approx(0.5 - 0.5 * erf(math.log(d) / math.sqrt(2)), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_lnm_density_integrates_to_one(seed):
    rng = np.random.default_rng(seed)
    dec = _lnm(3, rng.normal(size=3), rng.normal(size=3), rng.normal(0, 0.3, size=3))
    z = history(J=1)

    def dens(d):
        lp, _ = dec.log_density_and_survival(z, np.array([[[d]]]))
        return math.exp(lp.value.item())

    total = sum(quad(dens, a, b, limit=200)[0] for a, b in ((0, 1), (1, 10), (10, np.inf)))
    assert total == pytest.approx(1.0, abs=1e-6)


def test_lnm_uniform_marks_and_consistency():
    dec = _lnm(marks=4)
    z = history(J=1)
    out = dec(z, np.array([[[1.0]]]), np.array([[0.0]]))
    log_p, log_s = dec.log_density_and_survival(z, np.array([[[1.0]]]))
    lam, big = out.lam.value[0, 0, 0], out.big_lam.value[0, 0, 0]
    p_marks = lam * np.exp(-big.sum())
    assert np.allclose(p_marks, math.exp(log_p.value.item()) / 4, rtol=1e-12)
    assert big.sum() == pytest.approx(-log_s.value.item(), rel=1e-12)


def test_lnm_multilabel_uses_sigmoid():
    dec = _lnm(rho=np.array([0.0, 2.0]), multilabel=True)
    out = dec(history(J=1), np.array([[[1.0]]]), np.array([[0.0]]))
    lam = out.lam.value[0, 0, 0]
    sig = 1 / (1 + np.exp(-np.array([0.0, 2.0])))
    assert lam[1] / lam[0] == pytest.approx(sig[1] / sig[0])


def test_mc_integrate_examples():
    integ = McIntegrator(7)
    t_prev = np.array([[0.0]])
    const = lambda u: ad.const(np.full(u.shape + (1,), 2.0))
    res = mc_integrate(const, np.array([[[3.0]]]), t_prev, integ, np.random.default_rng(0))
    assert res.value.item() == pytest.approx(6.0, rel=1e-15)
    mid = McIntegrator(5, jitter=False)
    linear = lambda u: ad.const(u[..., None])
    for n in (1, 3, 11):
        res = mc_integrate(linear, np.array([[[2.0]]]), t_prev, McIntegrator(n, jitter=False))
        assert res.value.item() == pytest.approx(2.0, rel=1e-14)
    assert mid.points(np.array([[[1.0]]]), t_prev).ravel().tolist() == pytest.approx(
        [0.1, 0.3, 0.5, 0.7, 0.9])


def test_mc_integrate_hawkes_intensity():
    p = PRESETS["dependent"]
    seq = simulate_thinning(p, (0, 30), np.random.default_rng(1))
    marks = seq.first_labels()
    a, b = seq.times[-1], seq.times[-1] + 5.0

    def lam(u):
        vals = np.array([[hawkes_intensity(p, seq.times, marks, x) for x in row] for row in u[0]])
        return ad.const(vals[None])

    est = mc_integrate(lam, np.array([[[b]]]), np.array([[a]]), McIntegrator(10000),
                       np.random.default_rng(0)).value[0, 0, 0]
    ref = hawkes_compensator(p, seq.times, marks, a, b)
    assert np.all(np.abs(est - ref) / ref < 0.01)


def test_mlp_mc_positive_zero_start_and_monotone():
    store = ad.ParamStore(seed=1)
    dec = MLPMCDecoder(store, M, D)
    randomize(store, 1)
    rng = np.random.default_rng(0)
    z = history(B=4, J=5)
    t_prev = np.sort(rng.uniform(0, 10, size=(4, 5)), axis=1)
    t = t_prev[..., None] + rng.uniform(0, 3, size=(4, 5, 50))
    out = dec(z, t, t_prev, integ=McIntegrator(20), rng=rng)
    assert np.all(out.lam.value >= 0)
    zero = dec(z, t_prev[..., None], t_prev, integ=McIntegrator(20), rng=rng)
    assert np.all(zero.big_lam.value == 0.0)
    # monotone up to Monte Carlo noise, estimated from repeated draws
    t1, t2 = t_prev[..., None] + 1.0, t_prev[..., None] + 1.5
    draws = np.array([[dec(z, tt, t_prev, integ=McIntegrator(20),
                           rng=np.random.default_rng(k)).big_lam.value for tt in (t1, t2)]
                      for k in range(10)])
    stderr = draws.std(axis=0).max(axis=0) / math.sqrt(10)
    assert np.all(draws[:, 1].mean(0) >= draws[:, 0].mean(0) - 3 * stderr - 1e-12)


@pytest.mark.parametrize("cls", [MLPCMDecoder, AttnCMDecoder])
def test_cumulative_decoder_properties(cls):
    for seed in range(5):
        store = ad.ParamStore(seed=seed)
        dec = cls(store, M, D, beta_hat=2.0, heads=2) if cls is AttnCMDecoder else cls(store, M, D, beta_hat=2.0)
        randomize(store, seed)
        rng = np.random.default_rng(seed)
        z = history(seed, B=2, J=4)
        t_prev = np.sort(rng.uniform(0, 10, size=(2, 4)), axis=1)
        grid = t_prev[..., None] + np.linspace(0, 5, 30)
        out = dec(z, grid, t_prev)
        big, lam = out.big_lam.value, out.lam.value
        assert np.all(big[:, :, 0] == 0.0)
        assert np.all(np.diff(big, axis=2) >= 0)
        assert np.all(lam >= -1e-12)
        h = 1e-5
        tq = t_prev[..., None] + np.array([0.7, 2.2])
        up = dec(z, tq + h, t_prev).big_lam.value
        down = dec(z, tq - h, t_prev).big_lam.value
        fd = (up - down) / (2 * h)
        lam_q = dec(z, tq, t_prev).lam.value
        assert np.all(np.abs(lam_q - fd) <= 1e-5 * np.maximum(np.abs(fd), 1e-3))


def test_attention_decoder_masks_future_events():
    store = ad.ParamStore(seed=0)
    dec = AttnMCDecoder(store, M, D, heads=2)
    z = history(B=1, J=4)
    t_prev = np.array([[0.0, 1.0, 2.0, 3.0]])
    out = dec(z, t_prev[..., None] + 0.5, t_prev, integ=McIntegrator(3))
    c = out.attention[0]
    for j in range(4):
        assert np.all(c[:, j, j + 1:] == 0.0)
        assert np.allclose(c[:, j, :j + 1].sum(-1), 1.0)


def test_attn_mc_with_sentinel_only_matches_hand_rolled():
    store = ad.ParamStore(seed=4)
    dec = AttnMCDecoder(store, M, D, heads=1, beta_hat=1.5)
    randomize(store, 4)
    z = history(J=1)
    t = 0.8
    lam = dec(z, np.array([[[t]]]), np.array([[0.0]]), integ=McIntegrator(2)).lam.value[0, 0, 0]
    # a single visible key has softmax weight 1, so attention returns its value projection
    q0 = temporal_embedding(t, D, 1.5)
    def ln(x, mod):
        c = x - x.mean()
        return c / np.sqrt((c * c).mean() + mod.eps) * mod.gain.value + mod.offset.value
    v = dec.mha.v_proj.weight.value @ dec.bos.value[0] + dec.mha.v_proj.bias.value
    att = dec.mha.o_proj.weight.value @ v + dec.mha.o_proj.bias.value
    x = att + q0
    h = ln(x, dec.ln2)
    h = dec.ff2.weight.value @ np.maximum(dec.ff1.weight.value @ h + dec.ff1.bias.value, 0) + dec.ff2.bias.value
    x = x + h
    y = dec.mlp.l2.weight.value @ np.maximum(dec.mlp.l1.weight.value @ x + dec.mlp.l1.bias.value, 0) + dec.mlp.l2.bias.value
    s = np.logaddexp(0, dec.out.raw_s.value) + 1e-6
    assert np.allclose(lam, s * np.logaddexp(0, y / s), rtol=1e-12)


def test_base_intensity_mixture():
    store = ad.ParamStore()
    base = BaseIntensity(store, 2, rate=0.3)
    alpha = base.weights().value
    assert np.allclose(alpha, [0.952574126822433, 0.047425873177567], atol=1e-12)
    assert alpha.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(base.mu().value, 0.3)
    zero = DecoderOutput(ad.const(np.zeros((1, 1, 1, 2))), ad.const(np.zeros((1, 1, 1, 2))))
    out = base.mix(zero, np.array([[[4.0]]]))
    assert np.allclose(out.lam.value, alpha[0] * 0.3)
    assert np.allclose(out.big_lam.value, alpha[0] * 0.3 * 4.0)
    logged = DecoderOutput(ad.const(np.full((1, 1, 1, 2), 2.0)), ad.const(np.ones((1, 1, 1, 2))),
                           ad.const(np.full((1, 1, 1, 2), math.log(2.0))))
    out = base.mix(logged, np.array([[[1.0]]]))
    assert np.allclose(out.lam.value, alpha[0] * 0.3 + alpha[1] * 2.0, rtol=1e-14)
    assert np.allclose(np.exp(out.log_lam.value), out.lam.value, rtol=1e-14)


def test_decoder_outputs_only_depend_on_visible_history():
    store = ad.ParamStore(seed=2)
    dec = AttnCMDecoder(store, M, D, heads=2)
    randomize(store, 2)
    z = np.random.default_rng(0).normal(size=(1, 4, D))
    t_prev = np.array([[0.0, 1.0, 2.0, 3.0]])
    t = t_prev[..., None] + 0.5
    a = dec(ad.const(z), t, t_prev).big_lam.value
    z[0, 3] += 10.0
    b = dec(ad.const(z), t, t_prev).big_lam.value
    assert np.array_equal(a[:, :3], b[:, :3])
