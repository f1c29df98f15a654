import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from swinvfi import tensor as T
from swinvfi.tensor import ConfigurationError, ShapeError, Tensor

from gradcases import CASES, run_case
from oracles import conv3d_direct


@pytest.mark.parametrize("index", range(len(CASES)), ids=[c.name for c in CASES])
def test_gradient_matches_central_differences(index):
    assert run_case(CASES[index], seed=100 + index) < 1e-2


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[2.0, 3.0], [4.0, 5.0]])
    np.testing.assert_array_equal((eye @ b).data, b.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_grad_of_sum_matmul_is_b_transposed_broadcast():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    b = np.random.default_rng(1).normal(size=(4, 5)).astype(np.float32)
    T.tensor_sum(a @ Tensor(b)).backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.sum(axis=1), (3, 4)), rtol=1e-6)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], rtol=1e-6)


def test_softmax_mask_zeroes_blocked_entries():
    mask = np.array([0.0, -np.inf, 0.0])
    out = T.softmax(Tensor([1.0, 5.0, 1.0]), mask=mask).data
    np.testing.assert_allclose(out, [0.5, 0.0, 0.5])


def test_conv_examples():
    x = np.random.default_rng(2).normal(size=(3, 4, 5, 1)).astype(np.float32)
    ident = T.conv3d_cl(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))))
    np.testing.assert_array_equal(ident.data, x)

    c = 0.7
    out = T.conv3d_cl(Tensor(np.full((5, 5, 5, 1), c)), Tensor(np.ones((3, 3, 3, 1, 1))), padding=1).data
    np.testing.assert_allclose(out[1:-1, 1:-1, 1:-1], 27 * c, rtol=1e-6)

    out = T.conv3d_cl(Tensor(np.ones((8, 8, 8, 1))), Tensor(np.ones((2, 2, 2, 1, 1))), stride=2)
    assert out.shape == (4, 4, 4, 1)


def test_conv_non_positive_extent_is_configuration_error():
    with pytest.raises(ConfigurationError):
        T.conv3d_cl(Tensor(np.ones((2, 2, 2, 1))), Tensor(np.ones((3, 3, 3, 1, 1))))


@pytest.mark.parametrize("stride,padding", [((1, 1, 1), (1, 1, 1)), ((1, 2, 2), (0, 1, 1)), ((2, 1, 3), (0, 0, 1))])
def test_conv_matches_direct_loops(stride, padding):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 5, 6, 2))
    w = rng.normal(size=(2, 3, 3, 2, 3))
    out = T.conv3d_cl(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    np.testing.assert_allclose(out, conv3d_direct(x, w, stride, padding), rtol=1e-10, atol=1e-12)


def test_transposed_conv_is_the_adjoint_of_conv():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6, 6, 3))
    w = rng.normal(size=(1, 2, 2, 3, 5))  # maps 3 -> 5 channels
    y = rng.normal(size=(2, 3, 3, 5))
    fwd = T.conv3d_cl(Tensor(x), Tensor(w), stride=(1, 2, 2)).data
    adj = T.conv_transpose3d_cl(Tensor(y), Tensor(w), stride=(1, 2, 2)).data
    assert adj.shape == x.shape
    np.testing.assert_allclose(np.sum(fwd * y), np.sum(x * adj), rtol=1e-10)


@pytest.mark.parametrize("extents", [(2, 2, 2), (2, 4, 4), (3, 5, 6)])
def test_depthwise_conv_matches_per_channel_full_conv(extents):
    rng = np.random.default_rng(5)
    c = 3
    x = rng.normal(size=(2, *extents, c))
    w = rng.normal(size=(3, 3, 3, c))
    b = rng.normal(size=c)
    out = T.depthwise_conv3d_cl(Tensor(x), Tensor(w), Tensor(b)).data
    for n in range(2):
        for ch in range(c):
            full = np.zeros((3, 3, 3, 1, 1))
            full[..., 0, 0] = w[..., ch]
            ref = conv3d_direct(x[n, ..., ch:ch + 1], full, padding=(1, 1, 1))[..., 0] + b[ch]
            np.testing.assert_allclose(out[n, ..., ch], ref, rtol=1e-10, atol=1e-12)


def test_layer_norm_examples():
    np.testing.assert_array_equal(T.layer_norm(Tensor([[2.0, 2.0, 2.0]])).data, [[0.0, 0.0, 0.0]])
    np.testing.assert_allclose(T.layer_norm(Tensor([1.0, 3.0])).data, [-1.0, 1.0], atol=1e-5)


def test_gelu_examples():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert T.gelu(Tensor([3.0])).data[0] == pytest.approx(2.9964, abs=1e-4)


def test_backward_examples():
    w = Tensor(np.array([1.0, -2.0, 5.0]), requires_grad=True)
    T.tensor_sum(w).backward()
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])
    w = Tensor(np.array([3.0]), requires_grad=True)
    T.tensor_sum(T.square(w)).backward()
    np.testing.assert_array_equal(w.grad, [6.0])


def test_backward_on_non_scalar_is_an_error():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(RuntimeError, match="scalar"):
        (w * 2).backward()


def test_leaf_gradients_accumulate_across_backward_calls():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.tensor_sum(w * 3.0).backward()
    T.tensor_sum(w * 3.0).backward()
    np.testing.assert_array_equal(w.grad, [6.0, 6.0])


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = w * 2
    assert y._node is None and not y.requires_grad


def test_float32_is_the_default_and_float64_is_preserved():
    assert Tensor([1, 2]).dtype == np.float32
    x = Tensor(np.ones(3, dtype=np.float64))
    assert (x * 2 + 1).dtype == np.float64


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_serialization_round_trips_bit_exactly(arr):
    buf = T.tensor_to_bytes(arr)
    back, end = T.tensor_from_bytes(buf)
    assert end == len(buf)
    assert back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_serialization_layout():
    buf = T.tensor_to_bytes(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert buf[:8] == (2).to_bytes(8, "little")
    assert buf[8:24] == (1).to_bytes(8, "little") + (3).to_bytes(8, "little")
    assert np.frombuffer(buf[24:], "<f4").tolist() == [1.0, 2.0, 3.0]


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)))
def test_permute_then_inverse_is_identity(axes):
    x = Tensor(np.arange(120, dtype=np.float32).reshape(2, 3, 4, 5))
    back = x.permute(*axes).permute(*np.argsort(axes))
    np.testing.assert_array_equal(back.data, x.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(-7, 7), st.integers(-7, 7))
def test_roll_gradient_is_the_inverse_roll(s0, s1):
    x = Tensor(np.zeros((3, 4)), requires_grad=True)
    g = np.arange(12, dtype=np.float32).reshape(3, 4)
    T.roll(x, (s0, s1), (0, 1)).backward(g)
    np.testing.assert_array_equal(x.grad, np.roll(g, (-s0, -s1), (0, 1)))
