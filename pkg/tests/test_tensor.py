import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irformer.core import SGD, Parameter, Tensor, load_checkpoint, no_grad, ops, save_checkpoint
from irformer.errors import ContractError, DimensionError, NumericalError

from conftest import gradcheck


# ---------------------------------------------------------------------------
# independent loop oracles
# ---------------------------------------------------------------------------

def matmul_loops(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def conv_loops(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    s = b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                r, q = i * stride + u - pad, j * stride + v - pad
                                if 0 <= r < H and 0 <= q < W:
                                    s += x[n, c, r, q] * w[o, c, u, v]
                    out[n, o, i, j] = s
    return out


def softmax_loops(x):
    out = np.zeros_like(x)
    for i, row in enumerate(x):
        m = max(row)
        e = [math.exp(v - m) for v in row]
        total = sum(e)
        out[i] = [v / total for v in e]
    return out


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

class TestMatmul:
    def test_identity(self):
        out = ops.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_dot(self):
        out = Tensor([[1, 2]]) @ Tensor([[3], [4]])
        np.testing.assert_array_equal(out.data, [[11]])

    def test_random_vs_triple_loop(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b),
                                   rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast_gradient(self, rng):
        a, b = rng.uniform(-2, 2, (2, 3, 4, 5)), rng.uniform(-2, 2, (3, 5, 2))
        assert gradcheck(ops.matmul, [a, b]) <= 1e-4


# ---------------------------------------------------------------------------
# softmax / layer norm
# ---------------------------------------------------------------------------

class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ops.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_large_values_stable(self):
        np.testing.assert_allclose(ops.softmax_rows(Tensor([[1000.0, 1000.0, 1000.0]])).data,
                                   [[1 / 3] * 3], atol=1e-15)

    def test_log3(self):
        np.testing.assert_allclose(ops.softmax_rows(Tensor([[0.0, math.log(3)]])).data,
                                   [[0.25, 0.75]], atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2 ** 31 - 1),
           st.floats(-50, 50))
    def test_rows_sum_to_one_and_shift_invariant(self, r, c, seed, shift):
        x = np.random.default_rng(seed).uniform(-20, 20, (r, c))
        y = ops.softmax_rows(Tensor(x)).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
        shifted = ops.softmax_rows(Tensor(x + shift)).data
        np.testing.assert_allclose(shifted, y, atol=1e-9)

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(5, 7)) * 3
        np.testing.assert_allclose(ops.softmax_rows(Tensor(x)).data, softmax_loops(x), atol=1e-12)


class TestLayerNorm:
    def test_constant_row(self):
        out = ops.layer_norm(Tensor([[5.0, 5, 5, 5]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, [[0, 0, 0, 0]])

    def test_two_values(self):
        g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
        np.testing.assert_allclose(ops.layer_norm(Tensor([[1.0, 3.0]]), g, b, eps=0.0).data,
                                   [[-1.0, 1.0]], atol=1e-15)
        # default eps perturbs the unit std by ~eps/2
        np.testing.assert_allclose(ops.layer_norm(Tensor([[1.0, 3.0]]), g, b).data,
                                   [[-1.0, 1.0]], atol=1e-5)

    def test_affine_collapse(self, rng):
        out = ops.layer_norm(Tensor(rng.normal(size=(3, 6))), Tensor(np.zeros(6)),
                             Tensor(np.full(6, 7.0)))
        np.testing.assert_array_equal(out.data, np.full((3, 6), 7.0))

    def test_zero_mean_unit_variance(self, rng):
        x = rng.normal(3.0, 5.0, size=(10, 16))
        y = ops.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-6)


def test_group_norm_matches_loop_oracle(rng):
    x = rng.normal(2.0, 3.0, size=(2, 6, 4, 5))
    gain, bias = rng.normal(size=6), rng.normal(size=6)
    out = ops.group_norm(Tensor(x), Tensor(gain), Tensor(bias), groups=3).data
    ref = np.empty_like(x)
    for b in range(2):
        for g in range(3):
            block = x[b, 2 * g:2 * g + 2]
            z = (block - block.mean()) / np.sqrt(block.var() + 1e-5)
            for c in range(2):
                ch = 2 * g + c
                ref[b, ch] = z[c] * gain[ch] + bias[ch]
    np.testing.assert_allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_sum_of_ones(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_impulse_response(self, rng):
        x = np.zeros((1, 1, 7, 7))
        x[0, 0, 3, 2] = 1.0
        k = rng.normal(size=(1, 1, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(k), padding=1).data[0, 0]
        # cross-correlation stamps the kernel flipped around the impulse
        np.testing.assert_array_equal(out[2:5, 1:4], k[0, 0, ::-1, ::-1])
        assert np.count_nonzero(out) == 9

    def test_random_vs_loops(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
            out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
            np.testing.assert_allclose(out, conv_loops(x, w, b, stride, pad), rtol=0, atol=1e-12)

    def test_output_size(self):
        out = ops.conv2d(Tensor(np.ones((1, 2, 9, 7))), Tensor(np.ones((3, 2, 3, 3))),
                         stride=2, padding=1)
        assert out.shape == (1, 3, 5, 4)

    @pytest.mark.parametrize("stride,pad", [(0, 0), (1, -1)])
    def test_invalid_stride_padding(self, stride, pad):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))),
                       stride=stride, padding=pad)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# ---------------------------------------------------------------------------
# elementwise / shape suite
# ---------------------------------------------------------------------------

class TestElementwise:
    def test_sigmoid_zero(self):
        assert ops.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_open_interval(self):
        y = ops.sigmoid(Tensor(np.linspace(-30, 30, 61))).data
        assert np.all((y > 0) & (y < 1))

    def test_upsample(self):
        out = ops.upsample_nearest(Tensor([[1.0, 2.0], [3.0, 4.0]]), 2).data
        np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_concat_rows(self):
        a, b = np.arange(6.0).reshape(2, 3), np.array([[9.0, 8, 7]])
        out = ops.concat([Tensor(a), Tensor(b)], axis=0).data
        np.testing.assert_array_equal(out, np.vstack([a, b]))

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            ops.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2)))], axis=0)

    def test_reshape_round_trip(self, rng):
        x = rng.normal(size=(2, 3, 4))
        t = Tensor(x).reshape(6, 4).reshape(2, 3, 4)
        np.testing.assert_array_equal(t.data, x)
        with pytest.raises(DimensionError):
            Tensor(x).reshape(5, 5)

    def test_transpose_involution(self, rng):
        x = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(Tensor(x).transpose().transpose().data, x)

    def test_maxpool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(ops.maxpool2d(Tensor(x), 2).data, [[[[5, 7], [13, 15]]]])

    def test_global_mean(self):
        x = np.arange(8.0).reshape(1, 2, 2, 2)
        np.testing.assert_array_equal(ops.global_mean(Tensor(x)).data, [[1.5, 5.5]])

    def test_add_broadcast_shape_error(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    def test_nan_fails_fast(self):
        with pytest.raises(NumericalError):
            Tensor([0.0]) / Tensor([0.0])
        with pytest.raises(NumericalError):
            Tensor([np.nan])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _u(rng, *shape):
    """Uniform in [-2, 2] but bounded away from 0 so ReLU kinks are not probed."""
    x = rng.uniform(0.1, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


class TestBackward:
    def test_quadratic(self):
        w = Parameter([1.0, 2.0], "w")
        (w * w).sum().backward()
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_sigmoid_at_zero(self):
        w = Parameter(0.0, "w")
        ops.sigmoid(w).backward()
        assert w.grad == pytest.approx(0.25, abs=0)

    def test_accumulates(self):
        w = Parameter([1.0, 2.0], "w")
        (w * w).sum().backward()
        (w * w).sum().backward()
        np.testing.assert_array_equal(w.grad, [4.0, 8.0])

    def test_non_scalar_rejected(self):
        w = Parameter([1.0, 2.0], "w")
        with pytest.raises(ContractError):
            (w * w).backward()

    def test_graph_freed(self):
        w = Parameter([1.0, 2.0], "w")
        y = (w * w).sum()
        y.backward()
        assert y._parents == () and y._backward is None

    def test_no_grad(self):
        w = Parameter([1.0], "w")
        with no_grad():
            y = w * w
        assert not y.requires_grad

    def test_shared_subexpression(self):
        w = Parameter(3.0, "w")
        a = w * w
        (a + a * w).backward()        # d/dw (w^2 + w^3) = 2w + 3w^2
        assert w.grad == pytest.approx(6 + 27, abs=1e-12)


GRAD_CASES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)]),
    "div": (lambda a, b: a / b, [(3, 4), (3, 4)]),
    "scale": (lambda a: ops.scale(a, -1.7), [(2, 5)]),
    "relu": (ops.relu, [(4, 5)]),
    "sigmoid": (ops.sigmoid, [(4, 5)]),
    "sum_axis": (lambda a: ops.sum(a, axis=1), [(3, 4, 2)]),
    "mean_all": (lambda a: ops.mean(a), [(3, 4)]),
    "reshape": (lambda a: ops.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), [(2, 3, 2), (2, 1, 2)]),
    "matmul": (ops.matmul, [(4, 5), (5, 3)]),
    "softmax": (ops.softmax_rows, [(3, 6)]),
    "layer_norm": (lambda x, g, b: ops.layer_norm(x, g, b), [(4, 6), (6,), (6,)]),
    "group_norm": (lambda x, g, b: ops.group_norm(x, g, b, 2), [(2, 4, 3, 3), (4,), (4,)]),
    "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
               [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_stride2": (lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
                       [(1, 2, 6, 6), (2, 2, 3, 3), (2,)]),
    "upsample": (lambda a: ops.upsample_nearest(a, 2), [(1, 2, 3, 3)]),
    "maxpool": (lambda a: ops.maxpool2d(a, 2), [(1, 2, 4, 4)]),
    "global_mean": (ops.global_mean, [(2, 3, 4, 4)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradient_matches_finite_differences(name):
    op, shapes = GRAD_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [_u(rng, *s) for s in shapes]
    assert gradcheck(op, arrays, h=1e-5) <= 1e-4


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class TestSgd:
    def _step(self, w0, g, lr, mu, wd, steps=1):
        p = Parameter(w0, "w")
        opt = SGD([p], lr=lr, momentum=mu, weight_decay=wd)
        for _ in range(steps):
            p.grad = np.array(g, dtype=float)
            opt.step()
        return p.data

    def test_plain_step(self):
        assert self._step(1.0, 1.0, 0.1, 0.0, 0.0) == pytest.approx(0.9, abs=1e-15)

    def test_momentum_two_steps(self):
        assert self._step(0.0, 1.0, 0.1, 0.9, 0.0, steps=2) == pytest.approx(-0.29, abs=1e-15)

    def test_decay_only(self):
        assert self._step(1.0, 0.0, 0.01, 0.0, 1e-4) == pytest.approx(1 - 1e-6, abs=1e-15)

    def test_plain_step_exact(self, rng):
        w, g = rng.normal(size=5), rng.normal(size=5)
        np.testing.assert_array_equal(self._step(w, g, 0.03, 0.0, 0.0), w - 0.03 * g)

    def test_missing_grad(self):
        opt = SGD([Parameter(1.0, "w")])
        with pytest.raises(ContractError):
            opt.step()

    def test_duplicate_names_rejected(self):
        with pytest.raises(ContractError):
            SGD([Parameter(1.0, "w"), Parameter(2.0, "w")])


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(2, 3)), "b.c": rng.normal(size=(4,)), "s": np.array(2.5)}
    save_checkpoint(tmp_path / "x.bin", tensors, {"k": 1})
    loaded, meta = load_checkpoint(tmp_path / "x.bin")
    assert meta == {"k": 1}
    assert list(loaded) == ["a", "b.c", "s"]
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])
    save_checkpoint(tmp_path / "y.bin", tensors, {"k": 1})
    assert (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "bad.bin")
