import math

import numpy as np
import pytest

import vit2img.tensor as T
from conftest import check_gradients
from vit2img.errors import ContractError, DimensionError
from vit2img.tensor import Tensor


# --- independent oracles -----------------------------------------------------

def conv2d_oracle(x, w, b, stride, padding):
    """Naive quadruple-loop cross-correlation, NHWC / [K,K,Cin,Cout]."""
    n, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    if padding == "same":
        ho, wo = math.ceil(h / stride), math.ceil(wd / stride)
        tot_h = max((ho - 1) * stride + k - h, 0)
        tot_w = max((wo - 1) * stride + k - wd, 0)
        pt, pl = tot_h // 2, tot_w // 2
    else:
        ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
        pt = pl = 0
    out = np.zeros((n, ho, wo, cout))
    for b_ in range(n):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    acc = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            yi, xj = i * stride + ki - pt, j * stride + kj - pl
                            if 0 <= yi < h and 0 <= xj < wd:
                                for ci in range(cin):
                                    acc += x[b_, yi, xj, ci] * w[ki, kj, ci, co]
                    out[b_, i, j, co] = acc + (b[co] if b is not None else 0.0)
    return out


def conv2d_transpose_oracle(x, w, b, stride):
    """Naive scatter-accumulate transposed conv, kernel [K,K,Cout,Cin]."""
    n, h, wd, cin = x.shape
    k, _, cout, _ = w.shape
    ho, wo = h * stride, wd * stride
    tot = k - stride
    pt = max((math.ceil(ho / stride) - 1) * stride + k - ho, 0) // 2
    pl = pt
    opad = np.zeros((n, ho + tot, wo + tot, cout))
    for b_ in range(n):
        for i in range(h):
            for j in range(wd):
                for ki in range(k):
                    for kj in range(k):
                        for co in range(cout):
                            for ci in range(cin):
                                opad[b_, i * stride + ki, j * stride + kj, co] += \
                                    x[b_, i, j, ci] * w[ki, kj, co, ci]
    out = opad[:, pt:pt + ho, pl:pl + wo, :]
    if b is not None:
        out = out + b
    return out


# --- matmul -------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_by_hand():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradient(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    check_gradients(T.matmul, [a, b], rtol=1e-6)


def test_matmul_batched_gradient(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    check_gradients(T.matmul, [a, b], rtol=1e-6)


# --- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_large_inputs_stabilized():
    out = T.softmax(Tensor([1000.0, 1000.0]))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_oracle_values():
    # Frozen from a 60-digit evaluation of exp(x_i)/sum(exp(x)).
    expected = [0.0900305731703804579980221,
                0.2447284710547976524729596,
                0.6652409557748218895290183]
    out = T.softmax(Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out.data, expected, rtol=1e-15)
    # direct exp/sum oracle on random input
    x = np.random.default_rng(7).normal(size=(4, 5))
    direct = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(T.softmax(Tensor(x), axis=1).data, direct, atol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    x = rng.normal(scale=10, size=(6, 9))
    out = T.softmax(Tensor(x), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), rtol=0, atol=1e-12)
    assert (out.data > 0).all()


def test_softmax_gradient(rng):
    check_gradients(lambda x: T.softmax(x, axis=-1), [rng.normal(size=(3, 4))], rtol=1e-5)


# --- layer norm -----------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, np.zeros((1, 3)), atol=1e-12)


def test_layer_norm_symmetric_pair():
    out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_array_equal(out.data, [-1.0, 1.0])


def test_layer_norm_gradients(rng):
    x = rng.normal(size=(2, 5))
    gamma = rng.normal(size=5)
    beta = rng.normal(size=5)
    check_gradients(T.layer_norm, [x, gamma, beta], rtol=1e-5)


def test_layer_norm_shape_error():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# --- batch norm -----------------------------------------------------------------

def test_batch_norm_normalizes_batch_stats(rng):
    x = rng.normal(loc=7.0, scale=2.0, size=(8, 4, 4, 3))
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, "train")
    np.testing.assert_allclose(out.data.mean(axis=(0, 1, 2)), np.zeros(3), atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=(0, 1, 2)), np.ones(3), rtol=1e-3)


def test_batch_norm_affine_on_normalized_input(rng):
    x = rng.normal(size=(16, 2, 2, 2))
    x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
    rm, rv = np.zeros(2), np.ones(2)
    out = T.batch_norm(Tensor(x), Tensor(2 * np.ones(2)), Tensor(np.ones(2)), rm, rv, "train")
    xhat = (x - x.mean(axis=(0, 1, 2))) / np.sqrt(x.var(axis=(0, 1, 2)) + 1e-5)
    np.testing.assert_allclose(out.data, 2 * xhat + 1, atol=1e-12)


def test_batch_norm_running_stats_ema(rng):
    # Hand-tracked EMA over two batches, momentum 0.99.
    b1 = rng.normal(loc=1.0, size=(4, 2, 2, 3))
    b2 = rng.normal(loc=-2.0, size=(4, 2, 2, 3))
    rm, rv = np.zeros(3), np.ones(3)
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    T.batch_norm(Tensor(b1), g, b, rm, rv, "train")
    T.batch_norm(Tensor(b2), g, b, rm, rv, "train")
    em, ev = np.zeros(3), np.ones(3)
    for batch in (b1, b2):
        em = 0.99 * em + 0.01 * batch.mean(axis=(0, 1, 2))
        ev = 0.99 * ev + 0.01 * batch.var(axis=(0, 1, 2))
    np.testing.assert_allclose(rm, em, rtol=0, atol=1e-12)
    np.testing.assert_allclose(rv, ev, rtol=0, atol=1e-12)


def test_batch_norm_eval_uses_running_stats(rng):
    x = rng.normal(size=(2, 2, 2, 3))
    rm = np.array([1.0, 2.0, 3.0])
    rv = np.array([4.0, 4.0, 4.0])
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, "eval")
    np.testing.assert_allclose(out.data, (x - rm) / np.sqrt(rv + 1e-5), atol=1e-14)


def test_batch_norm_train_gradient(rng):
    x = rng.normal(size=(3, 2, 2, 2))
    gamma = rng.normal(size=2)
    beta = rng.normal(size=2)

    def op(xt, gt, bt):
        return T.batch_norm(xt, gt, bt, np.zeros(2), np.ones(2), "train")

    check_gradients(op, [x, gamma, beta], rtol=1e-4)


# --- conv2d ---------------------------------------------------------------------

def test_conv2d_1x1_identity(rng):
    x = rng.normal(size=(1, 4, 4, 1))
    w = np.ones((1, 1, 1, 1))
    out = T.conv2d(Tensor(x), Tensor(w), None, 1, "same")
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_box_kernel_interior():
    c = 3.7
    x = np.full((1, 5, 5, 1), c)
    w = np.ones((3, 3, 1, 1))
    out = T.conv2d(Tensor(x), Tensor(w), None, 1, "same")
    np.testing.assert_allclose(out.data[0, 2, 2, 0], 9 * c, rtol=1e-15)


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
def test_conv2d_matches_naive_oracle(rng, stride, padding):
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, conv2d_oracle(x, w, b, stride, padding), atol=1e-12)


def test_conv2d_same_output_size_is_ceil():
    x = Tensor(np.zeros((1, 7, 7, 1)))
    w = Tensor(np.zeros((3, 3, 1, 2)))
    assert T.conv2d(x, w, None, 2, "same").shape == (1, 4, 4, 2)


def test_conv2d_kernel_larger_than_input_valid():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((5, 5, 1, 1))), None, 1, "valid")


def test_conv2d_gradients(rng):
    x = rng.normal(size=(2, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    check_gradients(lambda xt, wt, bt: T.conv2d(xt, wt, bt, 2, "same"), [x, w, b])


# --- conv2d_transpose -------------------------------------------------------------

def test_conv2d_transpose_single_pixel_scatter():
    v = 2.5
    x = np.full((1, 1, 1, 1), v)
    k = np.arange(4.0).reshape(2, 2, 1, 1)
    out = T.conv2d_transpose(Tensor(x), Tensor(k), None, 2, "same")
    np.testing.assert_allclose(out.data[0, :, :, 0], v * k[:, :, 0, 0], rtol=1e-15)


def test_conv2d_transpose_doubles_spatial(rng):
    x = rng.normal(size=(1, 8, 8, 3))
    w = rng.normal(size=(4, 4, 5, 3))
    assert T.conv2d_transpose(Tensor(x), Tensor(w), None, 2).shape == (1, 16, 16, 5)


@pytest.mark.parametrize("k,h", [(4, 3), (3, 4), (2, 5)])
def test_conv2d_transpose_matches_scatter_oracle(rng, k, h):
    x = rng.normal(size=(2, h, h, 2))
    w = rng.normal(size=(k, k, 3, 2))
    b = rng.normal(size=3)
    out = T.conv2d_transpose(Tensor(x), Tensor(w), Tensor(b), 2, "same")
    np.testing.assert_allclose(out.data, conv2d_transpose_oracle(x, w, b, 2), atol=1e-12)


def test_conv2d_transpose_gradients(rng):
    x = rng.normal(size=(1, 3, 3, 2))
    w = rng.normal(size=(4, 4, 3, 2))
    b = rng.normal(size=3)
    check_gradients(lambda xt, wt, bt: T.conv2d_transpose(xt, wt, bt, 2), [x, w, b])


# --- bilinear upsample -------------------------------------------------------------

def test_bilinear_constant_image_exact():
    x = np.full((1, 3, 3, 2), 0.7311)
    out = T.bilinear_upsample(Tensor(x), 7, 9)
    assert out.shape == (1, 7, 9, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 7, 9, 2), 0.7311))


def test_bilinear_single_pixel_broadcasts():
    x = np.array([[[[3.25]]]])
    out = T.bilinear_upsample(Tensor(x), 5, 4)
    np.testing.assert_array_equal(out.data, np.full((1, 5, 4, 1), 3.25))


def test_bilinear_2x2_to_4x4_hand_weights(rng):
    x = rng.normal(size=(1, 2, 2, 1))
    out = T.bilinear_upsample(Tensor(x), 4, 4)
    # independent per-pixel evaluation of align-corners-false interpolation
    expected = np.zeros((4, 4))
    for oy in range(4):
        for ox in range(4):
            sy = max((oy + 0.5) * 0.5 - 0.5, 0.0)
            sx = max((ox + 0.5) * 0.5 - 0.5, 0.0)
            y0, x0 = min(int(sy), 1), min(int(sx), 1)
            y1, x1 = min(y0 + 1, 1), min(x0 + 1, 1)
            fy, fx = sy - y0, sx - x0
            top = x[0, y0, x0, 0] * (1 - fx) + x[0, y0, x1, 0] * fx
            bot = x[0, y1, x0, 0] * (1 - fx) + x[0, y1, x1, 0] * fx
            expected[oy, ox] = top * (1 - fy) + bot * fy
    np.testing.assert_allclose(out.data[0, :, :, 0], expected, atol=1e-14)


def test_bilinear_rejects_downsample_and_zero():
    with pytest.raises(DimensionError):
        T.bilinear_upsample(Tensor(np.zeros((1, 4, 4, 1))), 2, 8)
    with pytest.raises(DimensionError):
        T.bilinear_upsample(Tensor(np.zeros((1, 4, 4, 1))), 0, 8)


def test_bilinear_gradient(rng):
    x = rng.normal(size=(1, 3, 4, 2))
    check_gradients(lambda xt: T.bilinear_upsample(xt, 6, 5), [x], rtol=1e-6)


# --- activations ---------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_leaky_relu_values():
    np.testing.assert_allclose(T.leaky_relu(Tensor([-1.0]), 0.2).data, [-0.2], rtol=1e-15)


def test_tanh_zero():
    assert T.tanh(Tensor([0.0])).data[0] == 0.0


def test_activation_gradients(rng):
    x = rng.normal(size=(4, 3)) + 0.05  # keep away from relu kink
    check_gradients(T.relu, [x])
    check_gradients(lambda t: T.leaky_relu(t, 0.2), [x])
    check_gradients(T.tanh, [x], rtol=1e-6)


# --- concat ----------------------------------------------------------------------

def test_concat_single_tensor():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.concat([Tensor(x)], axis=0).data, x)


def test_concat_last_axis():
    out = T.concat([Tensor([1.0, 2.0]), Tensor([3.0])], axis=-1)
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])


def test_concat_mismatch_error():
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_concat_gradient_splits(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 2))
    check_gradients(lambda x, y: T.concat([x, y], axis=1), [a, b], rtol=1e-6)


# --- backward / tape ---------------------------------------------------------------

def test_backward_identity():
    x = Tensor(np.array(3.0), requires_grad=True)
    T.backward(x)
    np.testing.assert_array_equal(x.grad, np.array(1.0))


def test_backward_sum_of_scaled():
    x = Tensor(np.arange(4.0), requires_grad=True)
    loss = T.sum_(T.mul(x, 2.0))
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(4))


def test_backward_accumulates_without_reset():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_(T.mul(x, x))
    T.backward(loss)
    first = x.grad.copy()
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_backward_shared_subexpression(rng):
    # x used on two paths; adjoints must add, not overwrite.
    x = rng.normal(size=(3,))

    def op(t):
        return T.add(T.mul(t, t), T.mul(t, 3.0))

    check_gradients(op, [x], rtol=1e-6)


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert y._parents == ()


def test_forward_determinism(rng):
    x = rng.normal(size=(2, 8, 8, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    a = T.conv2d(Tensor(x), Tensor(w), None, 1, "same").data
    b = T.conv2d(Tensor(x), Tensor(w), None, 1, "same").data
    assert a.tobytes() == b.tobytes()


def test_debug_checks_flag_nan():
    T.debug_checks = True
    try:
        with np.errstate(invalid="ignore"):
            with pytest.raises(T.NumericDebugError):
                T.log(Tensor([-1.0]))
        T.relu(Tensor([1.0, -3.0]))  # finite results pass
    finally:
        T.debug_checks = False


def test_div_and_power_gradients(rng):
    a = rng.normal(size=(3,)) + 3.0
    b = rng.normal(size=(3,)) + 3.0
    check_gradients(T.div, [a, b], rtol=1e-6)
    check_gradients(lambda t: T.power(t, -0.5), [a], rtol=1e-6)
    check_gradients(T.sqrt, [a], rtol=1e-6)
    check_gradients(T.exp, [rng.normal(size=(3,))], rtol=1e-6)
    check_gradients(T.log, [a], rtol=1e-6)
    check_gradients(T.absolute, [a], rtol=1e-6)


def test_mean_sum_gradients(rng):
    x = rng.normal(size=(3, 4))
    check_gradients(lambda t: T.mean(t, axis=1), [x], rtol=1e-6)
    check_gradients(lambda t: T.sum_(t, axis=0, keepdims=True), [x], rtol=1e-6)
    check_gradients(lambda t: T.mean(t), [x], rtol=1e-6)


def test_logsumexp_matches_direct(rng):
    x = rng.normal(scale=5, size=(4, 6))
    direct = np.log(np.exp(x).sum(axis=-1))
    np.testing.assert_allclose(T.logsumexp(Tensor(x), axis=-1).data, direct, atol=1e-12)
    check_gradients(lambda t: T.logsumexp(t, axis=-1), [x], rtol=1e-5)


def test_transpose_reshape_gradients(rng):
    x = rng.normal(size=(2, 3, 4))
    check_gradients(lambda t: T.transpose(t, (2, 0, 1)), [x], rtol=1e-6)
    check_gradients(lambda t: T.reshape(t, (6, 4)), [x], rtol=1e-6)
