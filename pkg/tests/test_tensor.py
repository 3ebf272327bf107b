import numpy as np
import pytest

from satbev import tensor as T

from helpers import (
    bilinear_point_oracle,
    check_grads,
    conv2d_loop_oracle,
    gelu_scalar_oracle,
)


def rand(*shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.normal(scale=scale, size=shape)


# ---------------------------------------------------------------------------
# conv2d

def test_conv2d_identity_kernel():
    x = T.Tensor(rand(1, 5, 6, seed=1))
    w = T.Tensor(np.ones((1, 1, 1, 1)))
    b = T.Tensor(np.zeros(1))
    y = T.conv2d(x, w, b, stride=1, padding=0)
    assert np.array_equal(y.data, x.data)


def test_conv2d_ones_kernel_against_loop_oracle():
    x = T.Tensor(np.full((1, 3, 3), 2.0))
    w = T.Tensor(np.ones((1, 1, 3, 3)))
    b = T.Tensor(np.zeros(1))
    y = T.conv2d(x, w, b, stride=1, padding=1)
    assert y.data[0, 1, 1] == 18.0
    assert y.data[0, 0, 0] == 8.0
    expect = conv2d_loop_oracle(x.data, w.data, b.data, 1, 1)
    np.testing.assert_array_equal(y.data, expect)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 3)])
def test_conv2d_matches_loop_oracle_random(stride, padding):
    x = T.Tensor(rand(3, 9, 7, seed=2))
    w = T.Tensor(rand(4, 3, 3, 3, seed=3))
    b = T.Tensor(rand(4, seed=4))
    y = T.conv2d(x, w, b, stride=stride, padding=padding)
    expect = conv2d_loop_oracle(x.data, w.data, b.data, stride, padding)
    np.testing.assert_allclose(y.data, expect, rtol=1e-12, atol=1e-12)


def test_conv2d_gradients_vs_finite_differences():
    params = {
        "x": T.Tensor(rand(2, 4, 4, seed=5), requires_grad=True),
        "w": T.Tensor(rand(3, 2, 3, 3, seed=6), requires_grad=True),
        "b": T.Tensor(rand(3, seed=7), requires_grad=True),
    }

    def loss():
        return T.sum_all(T.gelu(T.conv2d(params["x"], params["w"], params["b"], 1, 1)))

    check_grads(loss, params, tol=1e-4)


def test_conv2d_strided_gradients():
    params = {
        "x": T.Tensor(rand(2, 7, 7, seed=8), requires_grad=True),
        "w": T.Tensor(rand(2, 2, 3, 3, seed=9), requires_grad=True),
        "b": T.Tensor(rand(2, seed=10), requires_grad=True),
    }

    def loss():
        y = T.conv2d(params["x"], params["w"], params["b"], stride=2, padding=1)
        return T.sum_all(T.mul(y, y))

    check_grads(loss, params, tol=1e-4)


def test_conv2d_shape_errors():
    x = T.Tensor(rand(2, 5, 5))
    with pytest.raises(ValueError):
        T.conv2d(x, T.Tensor(rand(1, 3, 3, 3)), T.Tensor(np.zeros(1)), 1, 0)
    with pytest.raises(ValueError):  # even kernel
        T.conv2d(x, T.Tensor(rand(1, 2, 2, 2)), T.Tensor(np.zeros(1)), 1, 0)
    with pytest.raises(ValueError):  # non-integral output extent
        T.conv2d(x, T.Tensor(rand(1, 2, 3, 3)), T.Tensor(np.zeros(1)), 3, 0)


# ---------------------------------------------------------------------------
# maxpool2d

def test_maxpool_constant_input_routes_to_first_cell():
    x = T.Tensor(np.ones((1, 4, 4)), requires_grad=True)
    with T.Tape() as tape:
        y = T.maxpool2d(x, 2, 2)
        tape.backward(T.sum_all(y))
    assert np.all(y.data == 1.0)
    expect = np.zeros((1, 4, 4))
    expect[0, 0::2, 0::2] = 1.0  # ties broken toward lowest row-major index
    np.testing.assert_array_equal(x.grad, expect)


def test_maxpool_2x2_enumeration():
    x = T.Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    y = T.maxpool2d(x, 2, 2)
    assert y.data.shape == (1, 1, 1)
    assert y.data[0, 0, 0] == 4.0


def test_maxpool_k1_identity():
    x = T.Tensor(rand(2, 3, 5, seed=11))
    y = T.maxpool2d(x, 1, 1)
    np.testing.assert_array_equal(y.data, x.data)


def test_maxpool_window_larger_than_input():
    with pytest.raises(ValueError):
        T.maxpool2d(T.Tensor(rand(1, 2, 2)), 3, 1)


def test_maxpool_gradient_away_from_ties():
    rng = np.random.default_rng(12)
    x = T.Tensor(rng.permutation(36).reshape(1, 6, 6).astype(float), requires_grad=True)
    params = {"x": x}

    def loss():
        return T.sum_all(T.maxpool2d(params["x"], 2, 2))

    check_grads(loss, params, tol=1e-4)


# ---------------------------------------------------------------------------
# bilinear_interp

def test_bilinear_identity():
    x = T.Tensor(rand(3, 5, 7, seed=13))
    y = T.bilinear_interp(x, 5, 7)
    np.testing.assert_array_equal(y.data, x.data)


def test_bilinear_single_source_is_constant_plane():
    x = T.Tensor(np.array([[[3.25]]]))
    y = T.bilinear_interp(x, 4, 4)
    np.testing.assert_array_equal(y.data, np.full((1, 4, 4), 3.25))


def test_bilinear_2x2_to_4x4_matches_point_oracle():
    x = T.Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    y = T.bilinear_interp(x, 4, 4)
    for i in range(4):
        for j in range(4):
            assert y.data[0, i, j] == pytest.approx(
                bilinear_point_oracle(x.data, 4, 4, 0, i, j), abs=1e-15
            )


def test_bilinear_arbitrary_resize_matches_point_oracle():
    x = T.Tensor(rand(2, 5, 3, seed=14))
    y = T.bilinear_interp(x, 7, 8)
    for c in range(2):
        for i in range(7):
            for j in range(8):
                assert y.data[c, i, j] == pytest.approx(
                    bilinear_point_oracle(x.data, 7, 8, c, i, j), abs=1e-14
                )


def test_bilinear_gradients():
    params = {"x": T.Tensor(rand(2, 3, 4, seed=15), requires_grad=True)}

    def loss():
        y = T.bilinear_interp(params["x"], 5, 6)
        return T.sum_all(T.mul(y, y))

    check_grads(loss, params, tol=1e-4)


def test_bilinear_zero_extent_rejected():
    with pytest.raises(ValueError):
        T.bilinear_interp(T.Tensor(rand(1, 2, 2)), 0, 4)


# ---------------------------------------------------------------------------
# linear / channel_project

def test_linear_identity_and_constant():
    x = T.Tensor(rand(4, 5, seed=16))
    eye = T.Tensor(np.eye(5))
    zero_b = T.Tensor(np.zeros(5))
    np.testing.assert_array_equal(T.linear(x, eye, zero_b).data, x.data)

    w0 = T.Tensor(np.zeros((3, 5)))
    b = T.Tensor(np.array([1.0, 2.0, 3.0]))
    y = T.linear(x, w0, b)
    np.testing.assert_array_equal(y.data, np.tile(b.data, (4, 1)))


def test_linear_gradients_5_to_7():
    params = {
        "x": T.Tensor(rand(3, 5, seed=17), requires_grad=True),
        "w": T.Tensor(rand(7, 5, seed=18), requires_grad=True),
        "b": T.Tensor(rand(7, seed=19), requires_grad=True),
    }

    def loss():
        return T.sum_all(T.gelu(T.linear(params["x"], params["w"], params["b"])))

    check_grads(loss, params, tol=1e-4)


def test_linear_dimension_mismatch():
    with pytest.raises(ValueError):
        T.linear(T.Tensor(rand(3, 4)), T.Tensor(rand(2, 5)), T.Tensor(np.zeros(2)))


def test_channel_project_matches_1x1_conv():
    x = T.Tensor(rand(4, 6, 5, seed=20))
    w = T.Tensor(rand(3, 4, seed=21))
    b = T.Tensor(rand(3, seed=22))
    y = T.channel_project(x, w, b)
    y_conv = T.conv2d(x, T.Tensor(w.data.reshape(3, 4, 1, 1)), b)
    np.testing.assert_allclose(y.data, y_conv.data, atol=1e-15)


def test_channel_project_gradients():
    params = {
        "x": T.Tensor(rand(3, 4, 2, seed=23), requires_grad=True),
        "w": T.Tensor(rand(5, 3, seed=24), requires_grad=True),
        "b": T.Tensor(rand(5, seed=25), requires_grad=True),
    }

    def loss():
        return T.sum_all(T.gelu(T.channel_project(params["x"], params["w"], params["b"])))

    check_grads(loss, params, tol=1e-4)


# ---------------------------------------------------------------------------
# gelu

def test_gelu_values():
    x = T.Tensor(np.array([0.0, 10.0, 1.0, -1.0]))
    y = T.gelu(x)
    assert y.data[0] == 0.0
    assert abs(y.data[1] - 10.0) < 1e-6
    assert y.data[2] == pytest.approx(0.8413447460685429, abs=1e-12)
    for i, v in enumerate(x.data):
        assert y.data[i] == pytest.approx(gelu_scalar_oracle(v), abs=1e-15)


def test_gelu_gradients():
    params = {"x": T.Tensor(rand(4, 4, seed=26), requires_grad=True)}

    def loss():
        return T.sum_all(T.gelu(params["x"]))

    check_grads(loss, params, tol=1e-4)


# ---------------------------------------------------------------------------
# concat / split

def test_split_concat_roundtrip_bitwise():
    a = T.Tensor(rand(2, 4, 4, seed=27))
    b = T.Tensor(rand(3, 4, 4, seed=28))
    cat = T.concat_channels(a, b)
    assert cat.shape == (5, 4, 4)
    ra, rb = T.split_channels(cat, [2, 3])
    np.testing.assert_array_equal(ra.data, a.data)
    np.testing.assert_array_equal(rb.data, b.data)


def test_concat_preserves_values():
    a = T.Tensor(rand(2, 4, 4, seed=29))
    b = T.Tensor(rand(3, 4, 4, seed=30))
    cat = T.concat_channels(a, b)
    np.testing.assert_array_equal(cat.data[:2], a.data)
    np.testing.assert_array_equal(cat.data[2:], b.data)


def test_concat_split_errors():
    with pytest.raises(ValueError):
        T.concat_channels(T.Tensor(rand(1, 3, 3)), T.Tensor(rand(1, 4, 3)))
    with pytest.raises(ValueError):
        T.split_channels(T.Tensor(rand(5, 3, 3)), [2, 2])


def test_split_gradient_routing():
    a = T.Tensor(rand(2, 3, 3, seed=31), requires_grad=True)
    b = T.Tensor(rand(2, 3, 3, seed=32), requires_grad=True)
    with T.Tape() as tape:
        cat = T.concat_channels(a, b)
        first, _second = T.split_channels(cat, [2, 2])
        tape.backward(T.sum_all(first))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3, 3)))
    assert b.grad is None or np.all(b.grad == 0.0)

    params = {"a": a, "b": b}

    def loss():
        cat = T.concat_channels(params["a"], params["b"])
        lo, hi = T.split_channels(cat, [3, 1])
        return T.sum_all(T.mul(lo, lo)) + T.sum_all(hi)

    check_grads(loss, params, tol=1e-4)


# ---------------------------------------------------------------------------
# elementwise

def test_elementwise_identities():
    x = T.Tensor(rand(3, 3, seed=33))
    np.testing.assert_array_equal(T.add(x, T.Tensor(np.zeros((3, 3)))).data, x.data)
    np.testing.assert_array_equal(T.mul(x, T.Tensor(np.ones((3, 3)))).data, x.data)
    two = T.add(T.Tensor(np.ones((2, 2))), T.Tensor(np.ones((2, 2))))
    np.testing.assert_array_equal(two.data, np.full((2, 2), 2.0))


def test_mul_gradient_is_other_factor():
    a = T.Tensor(rand(3, 2, seed=34), requires_grad=True)
    b = T.Tensor(rand(3, 2, seed=35), requires_grad=True)
    params = {"a": a, "b": b}

    def loss():
        return T.sum_all(T.mul(params["a"], params["b"]))

    check_grads(loss, params, tol=1e-4)
    np.testing.assert_allclose(a.grad, b.data, atol=1e-15)


def test_elementwise_shape_mismatch():
    with pytest.raises(ValueError):
        T.add(T.Tensor(rand(2, 2)), T.Tensor(rand(2, 3)))


# ---------------------------------------------------------------------------
# attention primitives

def test_softmax_constant_row_uniform():
    x = T.Tensor(np.full((3, 5), 2.7))
    y = T.softmax_lastdim(x)
    np.testing.assert_allclose(y.data, np.full((3, 5), 0.2), atol=1e-15)
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-9)


def test_softmax_closed_form():
    y = T.softmax_lastdim(T.Tensor(np.array([[0.0, np.log(3.0)]])))
    np.testing.assert_allclose(y.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_rows_sum_to_one_large_logits():
    x = T.Tensor(rand(4, 6, seed=36, scale=300.0))
    y = T.softmax_lastdim(x)
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-9)


def test_matmul_identity_and_gradients():
    a = T.Tensor(rand(4, 4, seed=37))
    np.testing.assert_allclose(T.matmul(T.Tensor(np.eye(4)), a).data, a.data, atol=1e-15)

    params = {
        "a": T.Tensor(rand(3, 4, seed=38), requires_grad=True),
        "b": T.Tensor(rand(4, 2, seed=39), requires_grad=True),
    }

    def loss():
        sm = T.softmax_lastdim(T.matmul(params["a"], params["b"]))
        return T.sum_all(T.mul(sm, sm))

    check_grads(loss, params, tol=1e-4)


def test_matmul_transpose_b():
    a = T.Tensor(rand(3, 4, seed=40))
    b = T.Tensor(rand(5, 4, seed=41))
    np.testing.assert_allclose(T.matmul(a, b, transpose_b=True).data, a.data @ b.data.T, atol=1e-14)


def test_softmax_channels_gradients():
    params = {"x": T.Tensor(rand(3, 2, 2, seed=42), requires_grad=True)}

    def loss():
        y = T.softmax_channels(params["x"])
        return T.sum_all(T.mul(y, y))

    check_grads(loss, params, tol=1e-4)


# ---------------------------------------------------------------------------
# patches

def test_patch_roundtrip_bitwise():
    x = T.Tensor(rand(3, 6, 4, seed=43))
    tok = T.extract_patches(x, 2)
    assert tok.shape == (6, 12)
    back = T.fold_patches(tok, 3, 6, 4, 2)
    np.testing.assert_array_equal(back.data, x.data)


def test_patch_gradients():
    params = {"x": T.Tensor(rand(2, 4, 4, seed=44), requires_grad=True)}

    def loss():
        tok = T.extract_patches(params["x"], 2)
        return T.sum_all(T.mul(tok, tok))

    check_grads(loss, params, tol=1e-4)


# ---------------------------------------------------------------------------
# tape semantics

def test_backward_sum_gives_ones():
    x = T.Tensor(rand(3, 4, seed=45), requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_sum_of_squares():
    x = T.Tensor(rand(3, 4, seed=46), requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2.0 * x.data, atol=1e-15)


def test_backward_consumed_tape_rejected():
    x = T.Tensor(rand(2, 2, seed=47), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="consumed"):
            tape.backward(loss)


def test_backward_non_scalar_rejected():
    x = T.Tensor(rand(2, 2, seed=48), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)


def test_gradients_accumulate_across_tapes():
    x = T.Tensor(rand(2, 2, seed=49), requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.sum_all(x))
    with T.Tape() as tape:
        tape.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_no_tape_means_no_recording():
    x = T.Tensor(rand(2, 2, seed=50), requires_grad=True)
    y = T.mul(x, x)
    assert y._tape is None
    with pytest.raises(RuntimeError):
        y.backward()


def test_intermediate_grads_released():
    x = T.Tensor(rand(2, 2, seed=51), requires_grad=True)
    with T.Tape() as tape:
        mid = T.mul(x, x)
        tape.backward(T.sum_all(mid))
    assert mid.grad is None  # non-leaf intermediates do not hold gradients
    assert x.grad is not None


def test_nonfinite_forward_aborts_with_op_name():
    x = T.Tensor(np.array([0.0, 1.0]))
    with pytest.raises(FloatingPointError, match="log"):
        T.log(x)


def test_forward_determinism_bitwise():
    def run():
        x = T.Tensor(rand(3, 17, 17, seed=52), requires_grad=True)
        w = T.Tensor(rand(4, 3, 3, 3, seed=53), requires_grad=True)
        b = T.Tensor(rand(4, seed=54), requires_grad=True)
        with T.Tape() as tape:
            y = T.gelu(T.conv2d(x, w, b, 2, 1))
            loss = T.sum_all(T.mul(y, y))
            tape.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)


def test_randomized_finite_difference_sweep():
    # one randomized shape per differentiable op, seeds fixed
    rng = np.random.default_rng(55)
    for trial in range(3):
        c, h, w = [int(v) for v in rng.integers(2, 5, size=3)]
        params = {
            "x": T.Tensor(rng.normal(size=(c, h + 2, w + 2)), requires_grad=True),
            "w": T.Tensor(rng.normal(size=(3, c, 3, 3)), requires_grad=True),
            "b": T.Tensor(rng.normal(size=3), requires_grad=True),
        }

        def loss():
            y = T.conv2d(params["x"], params["w"], params["b"], 1, 1)
            y = T.gelu(y)
            y = T.bilinear_interp(y, h + 3, w + 1)
            return T.sum_all(T.mul(y, y))

        check_grads(loss, params, tol=1e-4)
