import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from tppkit import ad
from tppkit.errors import NumericalError, ShapeError
from tppkit.monotonic import (EmaLayerNorm, GumbelActivation, MonotonicMLP, PositiveLinear,
                              ema_layer_norm_forward, gumbel, gumbel_derivative,
                              gumbel_second_derivative, gumbel_softplus, gumbel_value)


def test_positive_linear_clamps_negative_weight():
    store = ad.ParamStore()
    layer = PositiveLinear(store, "p", 2, 1)
    layer.raw_weight.value[...] = [[-5.0, 0.5]]
    y = layer(ad.const(np.array([[1.0, 2.0]])))
    assert y.value[0, 0] == pytest.approx(1.0 + 1e-30)
    with pytest.raises(ShapeError):
        layer(ad.const(np.ones((1, 3))))


def test_positive_linear_straight_through_gradient():
    store = ad.ParamStore()
    layer = PositiveLinear(store, "p", 2, 1)
    layer.raw_weight.value[...] = [[-5.0, 0.5]]
    x = np.array([[1.0, 2.0]])
    grads = ad.backward(ad.sum(ad.mul(layer(ad.const(x)), 3.0)))
    # adjoint of W is 3 * x for both entries, clamped or not
    assert np.allclose(grads["p.V"], [[3.0, 6.0]])


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-30, 30), d=st.floats(1e-3, 5))
def test_positive_linear_monotone(x, d):
    store = ad.ParamStore(seed=1)
    layer = PositiveLinear(store, "p", 3, 4)
    base = np.array([[x, 0.3, -0.2]])
    bumped = base.copy()
    bumped[0, 0] += d
    assert np.all(layer(ad.const(bumped)).value >= layer(ad.const(base)).value)


def test_gumbel_s1_is_logistic():
    x = np.linspace(-20, 20, 401)
    assert np.max(np.abs(gumbel_value(x, 1.0) - 1 / (1 + np.exp(-x)))) < 1e-12
    assert gumbel_value(0.0, 1.0) == pytest.approx(0.5)


def test_gumbel_node_matches_numpy_and_is_bounded():
    x = np.linspace(-50, 50, 101)
    for s in (1e-3, 0.1, 1.0, 10.0):
        g = gumbel(ad.const(x), np.array(s)).value
        assert np.allclose(g, gumbel_value(x, s), atol=1e-14)
        assert np.all((g >= 0) & (g <= 1))


def test_gumbel_derivative_matches_fd():
    x = np.linspace(-5, 5, 41)
    for s in (0.1, 1.0, 3.0):
        h = 1e-6
        fd = (gumbel_value(x + h, s) - gumbel_value(x - h, s)) / (2 * h)
        assert np.allclose(gumbel_derivative(x, s), fd, rtol=1e-6, atol=1e-10)
        fd2 = (gumbel_derivative(x + h, s) - gumbel_derivative(x - h, s)) / (2 * h)
        assert np.allclose(gumbel_second_derivative(x, s), fd2, rtol=1e-5, atol=1e-9)


def test_gumbel_second_derivative_sign_change():
    for s in (0.1, 1.0, 10.0):
        assert gumbel_second_derivative(-0.5, s) > 0
        assert gumbel_second_derivative(0.5, s) < 0


@pytest.mark.parametrize("s", [1e-3, 0.1, 1.0, 10.0])
def test_gumbel_derivative_supremum_below_inverse_e(s):
    x = np.linspace(-40, 40, 200001)
    assert gumbel_derivative(x, s).max() <= 1 / math.e + 1e-9


@pytest.mark.parametrize("s", [1e-3, 0.1, 0.5, 1.0, 10.0])
def test_gumbel_derivative_peak_location_and_height(s):
    # the derivative peaks at x = 0 with height (1 + s)^(-(s + 1)/s)
    res = minimize_scalar(lambda v: -gumbel_derivative(v, s), bounds=(-10, 10), method="bounded",
                          options={"xatol": 1e-10})
    assert abs(res.x) < 1e-4
    assert -res.fun == pytest.approx((1 + s) ** (-(s + 1) / s), abs=1e-9)


def test_gumbel_softplus_limits_and_value():
    s = np.array(1.0)
    assert gumbel_softplus(ad.const(np.array(-60.0)), s).value < 1e-25
    assert gumbel_softplus(ad.const(np.array(40.0)), s).value == pytest.approx(41.0, rel=1e-12)
    big = gumbel_softplus(ad.const(np.array(1e6)), s).value
    assert np.isfinite(big) and big > 1e6


@settings(max_examples=100, deadline=None)
@given(s=st.floats(1e-3, 10), x1=st.floats(-30, 30), d=st.floats(0, 10))
def test_gumbel_softplus_monotone(s, x1, d):
    lo = gumbel_softplus(ad.const(np.array(x1)), np.array(s)).value
    hi = gumbel_softplus(ad.const(np.array(x1 + d)), np.array(s)).value
    assert hi >= lo


def test_gumbel_activation_parameter_starts_at_one():
    store = ad.ParamStore()
    act = GumbelActivation(store, "g", 3)
    assert np.allclose(act.s().value, 1.0 + 1e-6)


def test_ema_layer_norm():
    store = ad.ParamStore()
    ln = EmaLayerNorm(store, "ln", 2)
    x = ad.const(np.array([[3.0, -1.0]]))
    assert np.array_equal(ema_layer_norm_forward(ln, x, "eval").value, x.value)
    a = ema_layer_norm_forward(ln, x, "eval").value
    b = ema_layer_norm_forward(ln, x, "eval").value
    assert np.array_equal(a, b)
    # output uses the stats from before the update
    out = ema_layer_norm_forward(ln, ad.const(np.full((4, 2), 10.0)), "train")
    assert np.allclose(out.value, 10.0)
    assert np.allclose(ln.running_mean, 1.0)
    with pytest.raises(ValueError):
        ema_layer_norm_forward(ln, x, "bogus")
    ln.running_std[0] = 0.0
    with pytest.raises(NumericalError):
        ln(x)


def test_ema_layer_norm_gain_clamped_monotone():
    store = ad.ParamStore()
    ln = EmaLayerNorm(store, "ln", 2)
    ln.raw_gain.value[...] = [-1.0, 2.0]
    lo = ln(ad.const(np.array([[0.0, 0.0]]))).value
    hi = ln(ad.const(np.array([[1.0, 1.0]]))).value
    assert np.all(hi >= lo)


def test_monotonic_mlp_tangent_nonnegative_and_matches_fd():
    rng = np.random.default_rng(0)
    for trial in range(20):
        store = ad.ParamStore(seed=trial)
        mlp = MonotonicMLP(store, "m", [1, 6, 6, 3])
        for _, p in store.items():
            p.value += rng.normal(0, 0.5, p.shape)
        t = rng.uniform(-3, 3, size=(50, 1))
        tn = ad.seed_time_tangent(ad.const(t))
        out = mlp(tn)
        tan = ad.tangent_of(out).value
        assert np.all(tan >= -1e-12)
        h = 1e-5
        fd = (mlp(ad.const(t + h)).value - mlp(ad.const(t - h)).value) / (2 * h)
        assert np.all(np.abs(tan - fd) <= 1e-5 * np.maximum(np.abs(fd), 1e-4))
        assert np.all(mlp(ad.const(t + 1.0)).value >= out.value)
