import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsta import tensor as T
from lsta.gradcheck import check_gradients
from lsta.rng import Rng
from probes import probe_rng, tensor_op_probes


# --- independent oracles ----------------------------------------------------

def matmul_loops(a, b):
    m, p = a.shape
    p2, q = b.shape
    out = np.zeros((m, q), dtype=np.float64)
    for i in range(m):
        for j in range(q):
            acc = 0.0
            for k in range(p):
                acc += float(a[i, k]) * float(b[k, j])
            out[i, j] = acc
    return out


def conv2d_loops(x, kernel, stride, pad):
    h, w, cin = x.shape
    k = kernel.shape[0]
    cout = kernel.shape[3]
    xp = np.zeros((h + 2 * pad, w + 2 * pad, cin), dtype=np.float64)
    xp[pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, cout), dtype=np.float64)
    for oy in range(ho):
        for ox in range(wo):
            for co in range(cout):
                acc = 0.0
                for ky in range(k):
                    for kx in range(k):
                        for ci in range(cin):
                            acc += float(xp[oy * stride + ky, ox * stride + kx, ci]) * float(kernel[ky, kx, ci, co])
                out[oy, ox, co] = acc
    return out


def bilinear_loops(x, f):
    h, w, c = x.shape
    out = np.zeros((h * f, w * f, c), dtype=np.float64)
    for oy in range(h * f):
        for ox in range(w * f):
            sy = (oy + 0.5) / f - 0.5
            sx = (ox + 0.5) / f - 0.5
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            fy, fx = sy - y0, sx - x0
            y1, x1 = min(max(y0 + 1, 0), h - 1), min(max(x0 + 1, 0), w - 1)
            y0, x0 = min(max(y0, 0), h - 1), min(max(x0, 0), w - 1)
            out[oy, ox] = ((1 - fy) * (1 - fx) * x[y0, x0] + (1 - fy) * fx * x[y0, x1]
                           + fy * (1 - fx) * x[y1, x0] + fy * fx * x[y1, x1])
    return out


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    eye = T.Tensor(np.eye(2))
    b = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(eye, b).data, b.data)


def test_matmul_hand():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_vs_loop_oracle():
    rng = Rng(101)
    a = (rng.uniform((5, 7)) * 2 - 1).astype(np.float32)
    b = (rng.uniform((7, 3)) * 2 - 1).astype(np.float32)
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    want = matmul_loops(a, b)
    assert np.abs(got - want).max() < 1e-6


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))


def test_bmm_matches_per_slice_matmul():
    rng = Rng(55)
    a = (rng.uniform((3, 4, 5)) * 2 - 1).astype(np.float32)
    b = (rng.uniform((3, 5, 2)) * 2 - 1).astype(np.float32)
    got = T.bmm(T.Tensor(a), T.Tensor(b)).data
    for i in range(3):
        want = matmul_loops(a[i], b[i])
        assert np.abs(got[i] - want).max() < 1e-6


# --- softmax ----------------------------------------------------------------

def test_softmax_uniform_row():
    out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, 1 / 3, atol=1e-7)


def test_softmax_large_magnitude_is_finite():
    out = T.softmax_rows(T.Tensor([[1000.0, 0.0]]))
    assert np.isfinite(out.data).all()
    assert out.data[0, 0] > 0.999999
    assert abs(out.data.sum() - 1.0) < 1e-6


@settings(max_examples=60, derandomize=True)
@given(st.integers(0, 2**32 - 1), st.floats(min_value=0.1, max_value=1e4))
def test_softmax_rows_sum_to_one(seed, scale):
    x = (Rng(seed).uniform((4, 6)) * 2 - 1) * scale
    out = T.softmax_rows(T.Tensor(x))
    sums = out.data.sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-6
    # float32 underflows the losing entries to 0 at extreme magnitudes
    assert (out.data >= 0).all() and (out.data <= 1.0).all()


# --- layer norm -------------------------------------------------------------

def test_layer_norm_constant_input_is_zero():
    out = T.layer_norm(T.Tensor(np.full((2, 2, 5), 3.7)))
    assert np.abs(out.data).max() == 0.0


def test_layer_norm_already_normalized_pair():
    out = T.layer_norm(T.Tensor(np.array([[[1.0, -1.0]]])))
    assert np.allclose(out.data, [[[1.0, -1.0]]], atol=1e-4)


def test_layer_norm_zero_mean_unit_var():
    x = Rng(3).uniform((4, 5, 8)) * 6 - 3
    out = T.layer_norm(T.Tensor(x)).data.astype(np.float64)
    assert np.abs(out.mean(axis=-1)).max() < 1e-5
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-3


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        T.layer_norm(T.Tensor(np.zeros((1, 1, 2))), eps=0.0)


# --- conv2d -----------------------------------------------------------------

def test_conv1x1_is_channel_matmul():
    rng = Rng(5)
    x = (rng.uniform((4, 5, 3)) * 2 - 1).astype(np.float32)
    k = (rng.uniform((1, 1, 3, 2)) * 2 - 1).astype(np.float32)
    got = T.conv2d(T.Tensor(x), T.Tensor(k)).data
    want = x.reshape(-1, 3).astype(np.float64) @ k.reshape(3, 2).astype(np.float64)
    assert np.abs(got - want.reshape(4, 5, 2)).max() < 1e-6


def test_conv_ones_center_window_sum():
    x = T.Tensor(np.ones((3, 3, 1)))
    k = T.Tensor(np.ones((3, 3, 1, 1)))
    out = T.conv2d(x, k, stride=1, pad=1)
    assert out.data[1, 1, 0] == 9.0


@pytest.mark.parametrize("h,w,cin,cout,k,stride,pad", [
    (6, 6, 3, 2, 3, 1, 1),
    (7, 5, 2, 4, 3, 2, 1),
    (5, 5, 1, 1, 5, 1, 0),
    (8, 8, 4, 3, 1, 1, 0),
])
def test_conv_vs_loop_oracle(h, w, cin, cout, k, stride, pad):
    rng = Rng(h * 100 + w)
    x = (rng.uniform((h, w, cin)) * 2 - 1).astype(np.float32)
    kern = (rng.uniform((k, k, cin, cout)) * 2 - 1).astype(np.float32)
    got = T.conv2d(T.Tensor(x), T.Tensor(kern), stride=stride, pad=pad).data
    want = conv2d_loops(x, kern, stride, pad)
    assert got.shape == want.shape
    assert np.abs(got - want).max() < 1e-5


def test_conv_kernel_too_large():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.zeros((3, 3, 1))), T.Tensor(np.zeros((5, 5, 1, 1))))


# --- bilinear upsample ------------------------------------------------------

def test_upsample_factor_one_is_identity():
    x = T.Tensor(Rng(1).uniform((3, 4, 2)))
    assert np.array_equal(T.bilinear_upsample(x, 1).data, x.data)


def test_upsample_single_pixel_is_constant():
    out = T.bilinear_upsample(T.Tensor(np.full((1, 1, 1), 2.5)), 4)
    assert out.data.shape == (4, 4, 1)
    assert np.allclose(out.data, 2.5)


def test_upsample_hand_oracle_2x2():
    x = T.Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1))
    out = T.bilinear_upsample(x, 2).data[:, :, 0]
    # worked by hand from the half-pixel mapping (i+0.5)/2 - 0.5 with edge clamp
    want = np.array([
        [0.0, 0.25, 0.75, 1.0],
        [0.5, 0.75, 1.25, 1.5],
        [1.5, 1.75, 2.25, 2.5],
        [2.0, 2.25, 2.75, 3.0],
    ])
    assert np.abs(out - want).max() < 1e-6


@pytest.mark.parametrize("h,w,c,f", [(2, 3, 2, 2), (3, 3, 1, 3), (4, 2, 3, 4)])
def test_upsample_vs_loop_oracle(h, w, c, f):
    x = (Rng(f * 17).uniform((h, w, c)) * 2 - 1).astype(np.float32)
    got = T.bilinear_upsample(T.Tensor(x), f).data
    want = bilinear_loops(x, f)
    assert np.abs(got - want).max() < 1e-5


# --- autodiff engine --------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = T.Tensor(Rng(2).uniform((3, 4)), requires_grad=True)
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4), dtype=np.float32))


def test_backward_requires_scalar():
    x = T.Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(T.ContractError):
        T.backward(T.mul(x, 2.0))


def test_matmul_gradients_match_finite_differences():
    rng = probe_rng("matmul-e2e")
    a = T.Tensor(rng.uniform((4, 3)) * 2 - 1, requires_grad=True)
    b = T.Tensor(rng.uniform((3, 5)) * 2 - 1, requires_grad=True)
    check_gradients(lambda: T.mul(T.tsum(T.matmul(a, b)), 1.0 / 20), [a, b], step=1e-3, rtol=1e-4)


def test_diamond_graph_accumulates_both_paths():
    x = T.Tensor([[2.0]], requires_grad=True)
    y = T.add(T.mul(x, 3.0), T.mul(x, x))  # 3x + x^2
    T.backward(T.tsum(y))
    assert np.allclose(x.grad, [[3.0 + 2.0 * 2.0]])


def test_gradients_accumulate_across_backward_calls():
    x = T.Tensor([[1.0]], requires_grad=True)
    T.backward(T.tsum(T.mul(x, 2.0)))
    T.backward(T.tsum(T.mul(x, 3.0)))
    assert np.allclose(x.grad, [[5.0]])
    T.zero_grads([x])
    assert x.grad is None


@pytest.mark.parametrize("name,build", tensor_op_probes())
def test_op_gradients_match_finite_differences(name, build):
    fn, leaves = build(probe_rng(name))
    check_gradients(fn, leaves, step=1e-3, rtol=1e-4)


def test_ops_without_grad_build_no_graph():
    a = T.Tensor(np.ones((2, 2)))
    out = T.matmul(a, a)
    assert out._parents == () and out._backward is None and not out.requires_grad


def test_forward_is_deterministic():
    def run():
        rng = Rng(77)
        x = T.Tensor(rng.uniform((6, 6, 3)) * 2 - 1)
        k = T.Tensor(rng.uniform((3, 3, 3, 4)) * 2 - 1)
        y = T.layer_norm(T.conv2d(x, k, stride=2, pad=1))
        return T.softmax_rows(T.reshape(y, (9, 4))).data

    assert np.array_equal(run(), run())


# --- serialization ----------------------------------------------------------

@pytest.mark.parametrize("shape", [(), (1,), (3,), (2, 3), (2, 3, 4), (2, 1, 2, 2)])
def test_tensor_roundtrip(shape):
    arr = (Rng(123).uniform(shape if shape else (1,)) * 2 - 1).astype(np.float32)
    arr = arr.reshape(shape)
    buf = io.BytesIO()
    T.save_tensor(buf, arr)
    buf.seek(0)
    back = T.load_tensor(buf)
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_two_records_in_one_stream():
    buf = io.BytesIO()
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.ones((4,), dtype=np.float32)
    T.save_tensor(buf, a)
    T.save_tensor(buf, b)
    buf.seek(0)
    assert np.array_equal(T.load_tensor(buf), a)
    assert np.array_equal(T.load_tensor(buf), b)


def test_bad_magic_rejected_with_offset():
    buf = io.BytesIO(b"NOPE" + bytes(20))
    with pytest.raises(T.TensorFormatError, match="byte 0"):
        T.load_tensor(buf)


def test_truncated_payload_rejected():
    buf = io.BytesIO()
    T.save_tensor(buf, np.ones((4, 4), dtype=np.float32))
    raw = buf.getvalue()[:-8]
    with pytest.raises(T.TensorFormatError, match="truncated"):
        T.load_tensor(io.BytesIO(raw))


def test_bad_version_rejected():
    buf = io.BytesIO()
    T.save_tensor(buf, np.ones((2,), dtype=np.float32))
    raw = bytearray(buf.getvalue())
    raw[4] = 99
    with pytest.raises(T.TensorFormatError, match="version"):
        T.load_tensor(io.BytesIO(bytes(raw)))
