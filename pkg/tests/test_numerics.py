import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msaff.errors import ConfigError, NumericalError, ParseError, ShapeError, UsageError
from msaff.numerics import (
    DIFFERENTIABLE_OPS,
    Tensor,
    backward,
    concat,
    conv1d,
    conv2d,
    global_avg,
    global_max,
    kernels,
    leaky_relu,
    matmul,
    max_pool2d,
    same_padding,
    sigmoid,
    slice_,
    softmax,
    sum_,
    temporal_conv,
)
from msaff.numerics.checkpoint import load_checkpoint, save_checkpoint
from msaff.numerics.gradcheck import gradcheck
from msaff.numerics.opcases import make_case


def naive_conv2d(x, w, stride, padding):
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for b in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(Ci):
                        for u in range(kh):
                            for v in range(kw):
                                r, s = i * stride + u - padding, j * stride + v - padding
                                if 0 <= r < H and 0 <= s < W:
                                    acc += x[b, c, r, s] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def naive_conv1d(x, w, padding):
    B, Ci, L = x.shape
    Co, _, k = w.shape
    Lo = L + 2 * padding - k + 1
    out = np.zeros((B, Co, Lo))
    for b in range(B):
        for o in range(Co):
            for i in range(Lo):
                for c in range(Ci):
                    for t in range(k):
                        s = i + t - padding
                        if 0 <= s < L:
                            out[b, o, i] += x[b, c, s] * w[o, c, t]
    return out


def naive_temporal_conv(x, w, padding):
    B, N, C, M = x.shape
    _, Co, _, k = w.shape
    out = np.zeros((B, N + 2 * padding - k + 1, Co, M))
    for b in range(B):
        for n in range(out.shape[1]):
            for o in range(Co):
                for m in range(M):
                    for c in range(C):
                        for t in range(k):
                            s = n + t - padding
                            if 0 <= s < N:
                                out[b, n, o, m] += w[m, o, c, t] * x[b, s, c, m]
    return out


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    monkeypatch.setattr(kernels, "backend", kernels.available_backends()[request.param])
    return request.param


class TestConv:
    def test_conv2d_sum_of_ones(self, backend):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_conv2d_identity_kernel(self, backend):
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_conv2d_matches_naive_loops(self, backend, stride, padding):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 8, 8))
        w = rng.normal(size=(8, 4, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, stride, padding), atol=1e-6, rtol=0)

    def test_conv2d_output_size(self):
        out = conv2d(Tensor(np.zeros((1, 2, 9, 7))), Tensor(np.zeros((3, 2, 3, 2))), stride=2, padding=1)
        assert out.shape == (1, 3, (9 + 2 - 3) // 2 + 1, (7 + 2 - 2) // 2 + 1)

    def test_conv2d_channel_mismatch_names_axes(self):
        with pytest.raises(ShapeError, match="axis 1"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_conv1d_identity_kernel(self, backend):
        x = np.random.default_rng(2).normal(size=(1, 1, 6))
        np.testing.assert_array_equal(conv1d(Tensor(x), Tensor(np.ones((1, 1, 1)))).data, x)

    def test_conv1d_box_filter(self, backend):
        out = conv1d(Tensor([[[1.0, 2.0, 3.0]]]), Tensor(np.ones((1, 1, 3))), padding=1)
        np.testing.assert_array_equal(out.data, [[[3.0, 6.0, 5.0]]])

    def test_conv1d_matches_naive_loops(self, backend):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 4, 9))
        w = rng.normal(size=(5, 4, 3))
        np.testing.assert_allclose(conv1d(Tensor(x), Tensor(w), padding=1).data, naive_conv1d(x, w, 1), atol=1e-6)

    def test_same_padding_rejects_even_kernel(self):
        assert same_padding(3) == 1
        with pytest.raises(ConfigError):
            same_padding(4)

    def test_temporal_conv_matches_naive_loops(self, backend):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 6, 3, 4))
        w = rng.normal(size=(4, 5, 3, 3))
        out = temporal_conv(Tensor(x), Tensor(w), padding=1)
        np.testing.assert_allclose(out.data, naive_temporal_conv(x, w, 1), atol=1e-6)

    # channel counts on both sides of the compiled GEMM threshold (Ci*k*k < 64 uses direct loops)
    @pytest.mark.parametrize("ci,stride,padding", [(3, 2, 1), (3, 1, 0), (8, 1, 1), (8, 2, 0)])
    def test_backends_agree_conv2d(self, ci, stride, padding):
        backends = kernels.available_backends()
        if len(backends) < 2:
            pytest.skip("compiled kernels not built")
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(2, ci, 9, 7)), rng.normal(size=(4, ci, 3, 3))
        py, cy = backends["python"], backends["cython"]
        y = py.conv2d_forward(x, w, stride, padding)
        gy = rng.normal(size=y.shape)
        np.testing.assert_allclose(y, cy.conv2d_forward(x, w, stride, padding), atol=1e-12)
        np.testing.assert_allclose(y, naive_conv2d(x, w, stride, padding), atol=1e-12)
        for a, b in zip(py.conv2d_backward(x, w, gy, stride, padding), cy.conv2d_backward(x, w, gy, stride, padding)):
            np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("ci,padding", [(3, 1), (3, 0), (24, 1), (24, 0)])
    def test_backends_agree_temporal(self, ci, padding):
        backends = kernels.available_backends()
        if len(backends) < 2:
            pytest.skip("compiled kernels not built")
        rng = np.random.default_rng(6)
        x, w = rng.normal(size=(2, 6, ci, 4)), rng.normal(size=(4, 5, ci, 3))
        py, cy = backends["python"], backends["cython"]
        y = py.temporal_conv_forward(x, w, padding)
        gy = rng.normal(size=y.shape)
        np.testing.assert_allclose(y, cy.temporal_conv_forward(x, w, padding), atol=1e-12)
        np.testing.assert_allclose(y, naive_temporal_conv(x, w, padding), atol=1e-12)
        for a, b in zip(py.temporal_conv_backward(x, w, gy, padding), cy.temporal_conv_backward(x, w, gy, padding)):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_max_pool_halves(self):
        x = np.arange(2 * 3 * 8 * 6, dtype=float).reshape(2, 3, 8, 6)
        out = max_pool2d(Tensor(x), 2)
        assert out.shape == (2, 3, 4, 3)
        np.testing.assert_array_equal(out.data, x[:, :, 1::2, 1::2])


class TestElementwise:
    def test_softmax_uniform(self):
        out = softmax(Tensor(np.full((2, 5), 3.7)), axis=1)
        np.testing.assert_allclose(out.data, 0.2, atol=1e-15)

    def test_sigmoid_zero(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_gap_plus_gmp_constant(self):
        x = Tensor(np.full((2, 3, 4, 5), 1.5))
        out = global_avg(x, (2, 3)) + global_max(x, (2, 3))
        np.testing.assert_allclose(out.data, 3.0)

    def test_leaky_relu_default_slope(self):
        np.testing.assert_allclose(leaky_relu(Tensor([-2.0, 3.0])).data, [-0.02, 3.0])

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((2, 2))), axis=2)

    def test_ragged_concat(self):
        with pytest.raises(ShapeError, match="ragged"):
            concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)

    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_non_finite_is_an_error(self):
        with pytest.raises(NumericalError):
            Tensor([1.0, np.nan])
        with np.errstate(over="ignore"), pytest.raises(NumericalError):
            Tensor([1000.0]) * Tensor([1e308])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        grads = backward(sum_(x))
        np.testing.assert_array_equal(grads[x], np.ones((3, 4)))

    def test_sigmoid_slope_at_zero(self):
        x = Tensor(np.zeros(5), requires_grad=True)
        backward(sum_(sigmoid(x)))
        np.testing.assert_array_equal(x.grad, 0.25)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            backward(sigmoid(x))

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        backward(sum_(y + y))
        np.testing.assert_allclose(x.grad, [8.0])

    def test_each_node_visited_once(self):
        # a diamond repeated 200 times; revisiting would blow up exponentially
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(200):
            y = (y + y) * 0.5
        backward(sum_(y))
        np.testing.assert_allclose(x.grad, [1.0])


@pytest.mark.parametrize("op", DIFFERENTIABLE_OPS)
def test_gradcheck_50_trials(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    for trial in range(50):
        fn, params = make_case(op, rng)
        res = gradcheck(fn, params, name=op)
        assert res.passed, f"{op} trial {trial}: abs={res.max_abs_err:.3g} rel={res.max_rel_err:.3g}"


def test_gradcheck_catches_a_wrong_gradient():
    fn, params = make_case("mul", np.random.default_rng(0))
    assert not gradcheck(fn, params, corrupt=0.5).passed


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite), st.integers(0, 1))
def test_softmax_is_a_distribution(x, axis):
    out = softmax(Tensor(x), axis=axis).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_concat_then_slice_is_identity(rows, wa, wb, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(rows, wa)), rng.normal(size=(rows, wb))
    cat = concat([Tensor(a), Tensor(b)], axis=1)
    np.testing.assert_array_equal(slice_(cat, 1, 0, wa).data, a)
    np.testing.assert_array_equal(slice_(cat, 1, wa, wa + wb).data, b)


def test_forward_is_bit_identical():
    rng = np.random.default_rng(9)
    x, w = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3))

    def run():
        return softmax(leaky_relu(conv2d(Tensor(x), Tensor(w), padding=1)), axis=1).data

    assert run().tobytes() == run().tobytes()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a.w": rng.normal(size=(3, 2)), "b": rng.normal(size=(4,)), "s": np.array(2.5)}
        save_checkpoint(tmp_path / "p.bin", params, meta={"step": 3})
        loaded, meta = load_checkpoint(tmp_path / "p.bin")
        assert meta == {"step": 3}
        for k, v in params.items():
            np.testing.assert_array_equal(loaded[k], v)

    def test_layout_is_header_then_le_float64(self, tmp_path):
        save_checkpoint(tmp_path / "p.bin", {"x": np.array([1.0, -2.0]), "y": np.array([[3.0]])})
        raw = (tmp_path / "p.bin").read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + n])
        assert header["params"]["x"] == {"shape": [2], "offset": 0}
        assert header["params"]["y"] == {"shape": [1, 1], "offset": 16}
        assert struct.unpack("<3d", raw[8 + n:]) == (1.0, -2.0, 3.0)

    def test_truncated_file(self, tmp_path):
        save_checkpoint(tmp_path / "p.bin", {"x": np.ones(4)})
        path = tmp_path / "p.bin"
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ParseError, match="offset"):
            load_checkpoint(path)
