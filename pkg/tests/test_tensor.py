"""Tensor core: op semantics against naive-loop oracles and finite differences."""

import numpy as np
import pytest

from pixelbolt import tensor as T


def naive_conv2d(x, k, stride, padding):
    (pt, pb), (pl, pr) = padding
    B, H, W, Ci = x.shape
    kh, kw, _, Co = k.shape
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    ho = (H + pt + pb - kh) // stride + 1
    wo = (W + pl + pr - kw) // stride + 1
    out = np.zeros((B, ho, wo, Co))
    for b in range(B):
        for i in range(ho):
            for j in range(wo):
                for o in range(Co):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(Ci):
                                acc += xp[b, i * stride + di, j * stride + dj, c] * k[di, dj, c, o]
                    out[b, i, j, o] = acc
    return out


class TestConv2d:
    def test_scalar_product(self):
        x = np.full((1, 1, 1, 1), 3.0)
        k = np.full((1, 1, 1, 1), 2.0)
        out = T.conv2d(T.as_tensor(x), T.as_tensor(k), stride=1)
        assert out.data.item() == 6.0

    def test_pooling_identity(self):
        x = np.ones((1, 4, 4, 1))
        k = np.ones((2, 2, 1, 1))
        out = T.conv2d(T.as_tensor(x), T.as_tensor(k), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 1), 4.0))

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 5, 5, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        out = T.conv2d(T.as_tensor(x), T.as_tensor(k), stride=1).data
        np.testing.assert_allclose(out, naive_conv2d(x, k, 1, ((0, 0), (0, 0))), atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, ((1, 0), (2, 0))), (2, ((1, 1), (0, 1)))])
    def test_strided_padded_naive(self, stride, padding):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 6, 5, 3))
        k = rng.standard_normal((2, 3, 3, 4))
        out = T.conv2d(T.as_tensor(x), T.as_tensor(k), stride=stride, padding=padding).data
        np.testing.assert_allclose(out, naive_conv2d(x, k, stride, padding), atol=1e-12)

    def test_shape_mismatch_rejected(self):
        x = np.zeros((1, 4, 4, 2))
        k = np.zeros((3, 3, 3, 1))
        with pytest.raises(ValueError, match="channels"):
            T.conv2d(T.as_tensor(x), T.as_tensor(k))


class TestTransposedConv2d:
    @pytest.mark.parametrize("stride,padding,hw", [
        (2, ((0, 0), (0, 0)), (4, 4)),
        (1, ((1, 0), (1, 1)), (5, 4)),
        (2, ((0, 1), (1, 0)), (7, 6)),
    ])
    def test_adjoint_identity(self, stride, padding, hw):
        rng = np.random.default_rng(3)
        H, W = hw
        k = rng.standard_normal((2, 2, 2, 3))
        u = rng.standard_normal((1, H, W, 2))
        cu = T.conv2d(T.as_tensor(u), T.as_tensor(k), stride, padding).data
        v = rng.standard_normal(cu.shape)
        tv = T.transposed_conv2d(T.as_tensor(v), T.as_tensor(k), stride, padding, (H, W)).data
        assert abs(np.vdot(cu, v) - np.vdot(u, tv)) < 1e-10

    def test_scalar(self):
        y = np.full((1, 1, 1, 1), 1.0)
        k = np.full((1, 1, 1, 1), 5.0)
        out = T.transposed_conv2d(T.as_tensor(y), T.as_tensor(k), 1, ((0, 0), (0, 0)), (1, 1))
        assert out.data.item() == 5.0

    def test_delta_kernel_round_trip(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 2, 1))
        delta = np.zeros((2, 2, 1, 1))
        delta[0, 0, 0, 0] = 1.0
        up = T.transposed_conv2d(T.as_tensor(x), T.as_tensor(delta), 2, ((0, 0), (0, 0)), (4, 4))
        down = T.conv2d(up, T.as_tensor(delta), 2)
        np.testing.assert_allclose(down.data, x, atol=1e-15)

    def test_geometry_mismatch_rejected(self):
        y = np.zeros((1, 3, 3, 1))
        k = np.zeros((2, 2, 1, 1))
        with pytest.raises(ValueError, match="geometry"):
            T.transposed_conv2d(T.as_tensor(y), T.as_tensor(k), 2, ((0, 0), (0, 0)), (4, 4))


class TestDense:
    def test_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        out = T.dense(T.as_tensor(x), T.as_tensor(np.eye(3)), T.as_tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_bias_only(self):
        x = np.ones((4, 3))
        b = np.array([1.0, -2.0])
        out = T.dense(T.as_tensor(x), T.as_tensor(np.zeros((3, 2))), T.as_tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (4, 1)))

    def test_naive_triple_loop(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 3))
        w = rng.standard_normal((3, 4))
        expected = np.zeros((2, 4))
        for i in range(2):
            for j in range(4):
                for k in range(3):
                    expected[i, j] += x[i, k] * w[k, j]
        out = T.dense(T.as_tensor(x), T.as_tensor(w)).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            T.dense(T.as_tensor(np.zeros((2, 3))), T.as_tensor(np.zeros((4, 2))))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(T.as_tensor(0.0)).data == 0.5

    def test_downshift_definition(self):
        x = np.arange(3.0).reshape(1, 3, 1, 1) + 1  # rows 1,2,3
        out = T.downshift(T.as_tensor(x)).data
        np.testing.assert_array_equal(out[0, :, 0, 0], [0.0, 1.0, 2.0])

    def test_rightshift_definition(self):
        x = np.arange(3.0).reshape(1, 1, 3, 1) + 1
        out = T.rightshift(T.as_tensor(x)).data
        np.testing.assert_array_equal(out[0, 0, :, 0], [0.0, 1.0, 2.0])

    def test_concat_shape_algebra(self):
        a = np.zeros((1, 2, 2, 3))
        b = np.zeros((1, 2, 2, 5))
        out = T.concat([T.as_tensor(a), T.as_tensor(b)], axis=-1)
        assert out.data.shape == (1, 2, 2, 8)

    def test_log_rejects_nonpositive_in_float64(self):
        with pytest.raises(ValueError, match="non-positive"):
            T.log(T.as_tensor(np.array([1.0, 0.0])))

    def test_tape_mismatch_rejected(self):
        t1, t2 = T.Tape(), T.Tape()
        a = t1.leaf([1.0])
        b = t2.leaf([2.0])
        with pytest.raises(ValueError, match="tapes"):
            T.add(a, b)


class TestLogSumExp:
    def test_ln2(self):
        out = T.log_sum_exp(T.as_tensor(np.array([0.0, 0.0])), axis=0)
        assert abs(out.data - np.log(2.0)) < 1e-15

    def test_no_overflow(self):
        out = T.log_sum_exp(T.as_tensor(np.array([1000.0, 1000.0])), axis=0)
        assert abs(out.data - (1000.0 + np.log(2.0))) < 1e-12

    def test_naive_oracle(self):
        rng = np.random.default_rng(17)
        x = rng.uniform(-3, 3, size=7)
        out = T.log_sum_exp(T.as_tensor(x), axis=0).data
        assert abs(out - np.log(np.exp(x).sum())) < 1e-12

    def test_all_neg_inf(self):
        x = np.full(4, -np.inf)
        out = T.log_sum_exp(T.as_tensor(x), axis=0).data
        assert out == -np.inf


class TestBackward:
    def test_product_rule(self):
        tape = T.Tape()
        x = tape.leaf(3.0)
        y = tape.leaf(4.0)
        z = T.mul(x, y)
        gm = T.backward(tape, z)
        assert gm[x.node].data == 4.0
        assert gm[y.node].data == 3.0

    def test_sigmoid_derivative(self):
        tape = T.Tape()
        x = tape.leaf(0.0)
        gm = T.backward(tape, T.sigmoid(x))
        assert abs(gm[x.node].data - 0.25) < 1e-15

    def test_untouched_leaf_zero(self):
        tape = T.Tape()
        x = tape.leaf(np.ones(3))
        y = tape.leaf(2.0)
        gm = T.backward(tape, T.sum_(T.mul(x, x)))
        np.testing.assert_array_equal(gm[y.node].data, 0.0)

    def test_reuse_accumulates(self):
        tape = T.Tape()
        x = tape.leaf(2.0)
        y = T.add(T.mul(x, x), x)  # x^2 + x -> 2x + 1 = 5
        gm = T.backward(tape, y)
        assert gm[x.node].data == 5.0

    def test_nonscalar_root_rejected(self):
        tape = T.Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            T.backward(tape, x)

    def test_replay_bit_identical(self):
        def run():
            rng = np.random.default_rng(23)
            tape = T.Tape()
            x = tape.leaf(rng.standard_normal((2, 4, 4, 3)))
            k = tape.leaf(rng.standard_normal((2, 2, 3, 5)))
            y = T.sum_(T.elu(T.conv2d(x, k, 2)))
            gm = T.backward(tape, y)
            return y.data.copy(), gm[k.node].data.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


def _scalar_chain(op_builder):
    """Wrap an op chain as f(params) for finite_diff_check."""

    def f(params):
        tape = T.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        out = op_builder(leaves)
        gm = T.backward(tape, out)
        return float(out.data), {k: gm[t.node].data for k, t in leaves.items()}

    return f


class TestFiniteDiff:
    def test_quadratic(self):
        f = _scalar_chain(lambda p: T.sum_(T.mul(p["w"], p["w"])))
        rng = np.random.default_rng(1)
        assert T.finite_diff_check(f, {"w": rng.standard_normal(5)}) < 1e-9

    def test_dense_sigmoid_chain(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 4))

        f = _scalar_chain(lambda p: T.sum_(T.sigmoid(T.dense(T.as_tensor(x), p["w"], p["b"]))))
        params = {"w": rng.standard_normal((4, 2)), "b": rng.standard_normal(2)}
        assert T.finite_diff_check(f, params) < 1e-6

    def test_conv_elu_chain(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 5, 5, 2))

        f = _scalar_chain(lambda p: T.sum_(T.elu(T.conv2d(T.as_tensor(x), p["k"], 2, ((1, 0), (1, 0))))))
        assert T.finite_diff_check(f, {"k": rng.standard_normal((2, 2, 2, 3))}) < 1e-5


OPS = {
    "sigmoid": lambda p: T.sum_(T.sigmoid(p["x"])),
    "tanh": lambda p: T.sum_(T.tanh(p["x"])),
    "elu": lambda p: T.sum_(T.elu(p["x"])),
    "exp": lambda p: T.sum_(T.exp(p["x"])),
    "softplus": lambda p: T.sum_(T.softplus(p["x"])),
    "sqrt_of_square": lambda p: T.sum_(T.sqrt(T.add(T.mul(p["x"], p["x"]), 1.0))),
    "log": lambda p: T.sum_(T.log(T.add(T.mul(p["x"], p["x"]), 0.5))),
    "mul_broadcast": lambda p: T.sum_(T.mul(T.reshape(p["x"], (4, 1)), p["y"])),
    "div": lambda p: T.sum_(T.div(p["x"], T.add(T.mul(p["y4"], p["y4"]), 1.0))),
    "concat": lambda p: T.sum_(T.mul(c := T.concat([p["x"], p["y4"]], 0), c)),
    "slice": lambda p: T.sum_(T.mul(p["x"][1:3], 2.0)),
    "downshift": lambda p: T.sum_(T.mul(T.downshift(T.reshape(p["x"], (1, 4, 1, 1))), 3.0)),
    "rightshift": lambda p: T.sum_(T.mul(T.rightshift(T.reshape(p["x"], (1, 1, 4, 1))), 3.0)),
    "pad": lambda p: T.sum_(T.mul(y := T.pad(T.reshape(p["x"], (2, 2)), ((1, 0), (0, 2))), y)),
    "log_sum_exp": lambda p: T.sum_(T.log_sum_exp(T.reshape(p["x"], (2, 2)), axis=1)),
    "pow": lambda p: T.sum_(T.pow_const(T.add(T.mul(p["x"], p["x"]), 1.0), 1.7)),
    "concat_elu": lambda p: T.sum_(T.relu_concat_elu(p["x"], axis=0)),
    "weight_norm": lambda p: T.sum_(T.normed_kernel(T.reshape(p["x"], (2, 2)), p["g2"])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_finite_diff(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    params = {
        "x": rng.uniform(0.2, 1.5, size=4),
        "y": rng.uniform(0.5, 1.5, size=(1, 4)),
        "y4": rng.uniform(0.2, 1.5, size=4),
        "g2": rng.uniform(0.5, 1.5, size=2),
    }
    f = _scalar_chain(OPS[name])
    assert T.finite_diff_check(f, params) < 1e-4


def test_matmul_and_conv_grads_finite_diff():
    rng = np.random.default_rng(31)
    x = rng.standard_normal((2, 6, 5, 2))

    def build(p):
        h = T.conv2d(T.as_tensor(x), p["k"], 2, ((1, 0), (1, 1)))
        h = T.transposed_conv2d(h, p["k2"], 2, ((1, 0), (0, 0)), (5, 6))
        return T.sum_(T.tanh(h))

    params = {"k": rng.standard_normal((2, 3, 2, 3)) * 0.4,
              "k2": rng.standard_normal((2, 2, 4, 3)) * 0.4}
    assert T.finite_diff_check(_scalar_chain(build), params) < 1e-5


def test_transposed_conv_input_grad():
    rng = np.random.default_rng(37)
    k = rng.standard_normal((2, 2, 3, 2))

    def build(p):
        y = T.reshape(p["y"], (1, 2, 2, 2))
        return T.sum_(T.mul(out := T.transposed_conv2d(y, T.as_tensor(k), 2, ((0, 0), (0, 0)), (4, 4)), out))

    assert T.finite_diff_check(_scalar_chain(build), {"y": rng.standard_normal(8)}) < 1e-6
