import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mialab.tensor_core import (
    LAYER_KINDS, Conv2d, Dense, Flatten, LayerNorm, MeanPool2d, Model, ModelSpec, NumericalError, ReLU,
    ShapeError, apply_layer, backprop, finite_diff_oracle, forward, relative_error, richardson_diff_oracle,
    run_backward, run_forward,
    softmax, softmax_cross_entropy,
)


def conv_reference(x, w, b, stride, pad):
    """Direct nested-loop convolution for one (C, H, W) input."""
    x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oc, _, k, _ = w.shape
    ho = (x.shape[1] - k) // stride + 1
    wo = (x.shape[2] - k) // stride + 1
    out = np.zeros((oc, ho, wo))
    for o in range(oc):
        for i in range(ho):
            for j in range(wo):
                patch = x[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def _model(layers, in_shape, classes, seed=0):
    spec = ModelSpec(tuple(layers), in_shape, classes)
    rng = np.random.default_rng(seed)
    params = {lid: l.init_params(spec.in_shape(k), rng) for k, (lid, l) in enumerate(spec.layers)}
    for p in params.values():
        for name in p:
            p[name] = p[name] + 0.1 * rng.standard_normal(p[name].shape)
    return Model(spec, params)


class TestLayers:
    def test_conv_all_ones_is_nine(self):
        layer = Conv2d(1, 1, 3)
        params = {"weight": np.ones((1, 1, 3, 3)), "bias": np.zeros(1)}
        out = apply_layer(layer, params, np.ones((1, 5, 5)))
        assert out.shape == (1, 3, 3)
        assert np.all(out == 9.0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv_matches_loops(self, stride, pad, rng):
        layer = Conv2d(2, 3, 3, stride, pad)
        params = layer.init_params((2, 7, 7), rng)
        params["bias"] = rng.standard_normal(3)
        x = rng.standard_normal((2, 7, 7))
        ref = conv_reference(x, params["weight"], params["bias"], stride, pad)
        np.testing.assert_allclose(apply_layer(layer, params, x), ref, rtol=1e-12, atol=1e-12)

    def test_dense_shape_error_names_layer(self):
        layer = Dense(3, 2)
        params = {"weight": np.zeros((2, 3)), "bias": np.zeros(2)}
        with pytest.raises(ShapeError, match="fc9"):
            apply_layer(layer, params, np.zeros(4), "fc9")

    def test_bad_param_shape(self):
        with pytest.raises(ShapeError):
            apply_layer(Dense(3, 2), {"weight": np.zeros((3, 2)), "bias": np.zeros(2)}, np.zeros(3))

    def test_meanpool_requires_divisible(self):
        with pytest.raises(ShapeError):
            MeanPool2d(2).out_shape((1, 5, 4))

    def test_meanpool_values(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        out = apply_layer(MeanPool2d(2), {}, x)
        np.testing.assert_array_equal(out[0], [[2.5, 4.5], [10.5, 12.5]])

    def test_layernorm_zero_mean_unit_var(self, rng):
        out = apply_layer(LayerNorm(6), {"gain": np.ones(6), "bias": np.zeros(6)}, rng.standard_normal(6) * 5)
        assert abs(out.mean()) < 1e-12
        assert abs(out.var() - 1) < 1e-5

    def test_tags_unique(self):
        assert sorted(LAYER_KINDS) == [0, 1, 2, 3, 4, 5]

    def test_relu_flatten(self):
        x = np.array([[[-1.0, 2.0], [3.0, -4.0]]])
        assert apply_layer(ReLU(), {}, x).min() == 0.0
        assert apply_layer(Flatten(), {}, x).shape == (4,)


class TestLosses:
    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(rng.standard_normal((5, 4)) * 50)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)

    def test_cross_entropy_gradient(self, rng):
        z = rng.standard_normal(5)
        loss, grad = softmax_cross_entropy(z[None], np.array([2]))
        fd = finite_diff_oracle(lambda v: softmax_cross_entropy(v[None], np.array([2]))[0][0], z)
        assert relative_error(grad[0], fd) < 1e-8
        assert loss[0] == pytest.approx(-np.log(softmax(z)[2]))

    def test_fd_oracle_on_quadratic(self):
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(finite_diff_oracle(lambda v: (v**2).sum(), x), 2 * x, atol=1e-8)

    def test_richardson_beats_plain_on_small_gradients(self):
        f = lambda v: float(np.cos(v[0]) + 1e-6 * v[1])
        x = np.array([0.0, 0.3])
        assert abs(richardson_diff_oracle(f, x)[1] - 1e-6) < 1e-6 * 1e-6
        assert abs(richardson_diff_oracle(lambda v: float(v[0] ** 3), np.array([2.0]))[0] - 12.0) < 1e-9

    def test_fd_oracle_reports_nonfinite(self):
        with pytest.raises(NumericalError, match="coordinate 0"):
            finite_diff_oracle(lambda v: np.sqrt(v[0]) if v[0] >= 0 else np.nan, np.array([0.0]))


class TestModelSpec:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec((("a", Dense(2, 2)), ("a", Dense(2, 2))), (2,), 2)

    def test_final_shape_must_be_classes(self):
        with pytest.raises(ShapeError):
            ModelSpec((("a", Dense(2, 3)),), (2,), 2)

    def test_identity_chain_trace(self):
        spec = ModelSpec((("l1", Dense(3, 3)), ("l2", Dense(3, 3))), (3,), 3)
        eye = {"weight": np.eye(3), "bias": np.zeros(3)}
        m = Model(spec, {"l1": dict(eye), "l2": dict(eye)})
        x = np.array([1.0, -2.0, 0.5])
        acts = run_forward(m, x[None])
        for a in acts:
            np.testing.assert_array_equal(a[0], x)

    def test_flat_params_round_trip(self):
        m = _model([("fc", Dense(4, 3))], (4,), 3)
        flat = m.flat_params()
        assert len(flat) == m.n_params == 15
        m2 = m.with_flat_params(flat * 2)
        np.testing.assert_array_equal(m2.flat_params(), flat * 2)


CASES = {
    "Dense": ([("l", Dense(5, 3))], (5,), 3),
    "Conv2d": ([("c", Conv2d(2, 2, 3, 2, 1)), ("f", Flatten()), ("d", Dense(8, 3))], (2, 4, 4), 3),
    "ReLU": ([("d0", Dense(4, 6)), ("r", ReLU()), ("d", Dense(6, 3))], (4,), 3),
    "Flatten": ([("f", Flatten()), ("d", Dense(12, 3))], (3, 2, 2), 3),
    "MeanPool2d": ([("p", MeanPool2d(2)), ("f", Flatten()), ("d", Dense(8, 3))], (2, 4, 4), 3),
    "LayerNorm": ([("n", LayerNorm(6)), ("d", Dense(6, 3))], (6,), 3),
}


class TestBackprop:
    @pytest.mark.parametrize("kind", sorted(CASES))
    def test_gradients_match_finite_differences(self, kind):
        layers, shape, classes = CASES[kind]
        for seed in range(3):
            m = _model(layers, shape, classes, seed)
            rng = np.random.default_rng(seed + 100)
            x = rng.standard_normal(shape)
            u = rng.standard_normal(classes)
            gx, gp = backprop(m, x, u)
            fd = finite_diff_oracle(lambda v: float(forward(m, v) @ u), x)
            assert relative_error(gx, fd) < 1e-6
            for lid, p in m.params.items():
                for name, arr in p.items():
                    def f(v, lid=lid, name=name):
                        m2 = m.copy()
                        m2.params[lid][name] = v
                        return float(forward(m2, x) @ u)
                    assert relative_error(gp[lid][name], finite_diff_oracle(f, arr)) < 1e-6

    def test_multiple_injections_add(self, rng):
        m = _model(CASES["ReLU"][0], (4,), 3)
        x = rng.standard_normal((2, 4))
        acts = run_forward(m, x)
        u0, u2 = rng.standard_normal((2, 6)), rng.standard_normal((2, 3))
        both, _ = run_backward(m, acts, {0: u0, 2: u2})
        a, _ = run_backward(m, acts, {0: u0})
        b, _ = run_backward(m, acts, {2: u2})
        np.testing.assert_allclose(both, a + b, rtol=1e-12)

    def test_nonfinite_gradient_names_layer(self, rng):
        m = _model([("l", Dense(2, 2))], (2,), 2)
        acts = run_forward(m, np.ones((1, 2)))
        with pytest.raises(NumericalError, match="'l'"):
            run_backward(m, acts, {0: np.array([[np.inf, 0.0]])})

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_batch_rows_independent(self, seed):
        m = _model(CASES["Conv2d"][0], (2, 4, 4), 3, seed % 7)
        x = np.random.default_rng(seed).standard_normal((3, 2, 4, 4))
        out = forward(m, x)
        for i in range(3):
            np.testing.assert_allclose(out[i], forward(m, x[i]), rtol=1e-12, atol=1e-12)
