import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from barl import diffcore as dc
from barl import gradcheck as gc


def conv3d_loops(x, k, b, stride, pad):
    """Six-nested-loop cross-correlation (plus channel loops)."""
    n, cin, d, h, w = x.shape
    cout, _, ks, _, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    do, ho, wo = ((e + 2 * pad - ks) // stride + 1 for e in (d, h, w))
    out = np.zeros((n, cout, do, ho, wo))
    for bi in range(n):
        for o in range(cout):
            for z in range(do):
                for y in range(ho):
                    for xx in range(wo):
                        acc = b[o]
                        for c in range(cin):
                            for a in range(ks):
                                for bb in range(ks):
                                    for cc in range(ks):
                                        acc += k[o, c, a, bb, cc] * xp[bi, c, z * stride + a, y * stride + bb, xx * stride + cc]
                        out[bi, o, z, y, xx] = acc
    return out


def test_conv3d_scalar_kernel_scales():
    x = dc.tensor(np.ones((1, 1, 3, 3, 3)))
    k = dc.tensor(np.full((1, 1, 1, 1, 1), 2.0))
    out = dc.conv3d(x, k, dc.tensor(np.zeros(1)))
    assert np.all(out.data == 2.0)


def test_conv3d_impulse_response_is_flipped_kernel():
    rng = np.random.default_rng(0)
    x = np.zeros((1, 1, 5, 5, 5))
    x[0, 0, 2, 2, 2] = 1.0
    k = rng.standard_normal((1, 1, 3, 3, 3))
    out = dc.conv3d(dc.tensor(x), dc.tensor(k), padding="same").data[0, 0]
    np.testing.assert_array_equal(out[1:4, 1:4, 1:4], k[0, 0, ::-1, ::-1, ::-1])


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
def test_conv3d_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    got = dc.conv3d(dc.tensor(x), dc.tensor(k), dc.tensor(b), stride=stride, padding=padding).data
    want = conv3d_loops(x, k, b, stride, 1 if padding == "same" else 0)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


def test_conv3d_output_extent_formula():
    x = dc.tensor(np.zeros((1, 1, 7, 7, 7)))
    k = dc.tensor(np.zeros((1, 1, 3, 3, 3)))
    assert dc.conv3d(x, k, stride=2, padding="same").shape[2:] == (4, 4, 4)  # floor((7+2-3)/2)+1
    assert dc.conv3d(x, k, stride=2, padding="valid").shape[2:] == (3, 3, 3)


def test_conv3d_shape_errors_name_axes():
    x = dc.tensor(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(dc.DimensionError, match="axis 1"):
        dc.conv3d(x, dc.tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(dc.DimensionError, match="odd"):
        dc.conv3d(x, dc.tensor(np.zeros((1, 2, 2, 2, 2))))
    with pytest.raises(dc.DimensionError, match="smaller than kernel"):
        dc.conv3d(dc.tensor(np.zeros((1, 2, 2, 4, 4))), dc.tensor(np.zeros((1, 2, 3, 3, 3))), padding="valid")


def test_upsample_replicates_blocks():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    vol = np.stack([x, x])[None, None]  # [1,1,2,2,2]
    up = dc.upsample_nearest(dc.tensor(vol)).data[0, 0]
    for i in range(2):
        for j in range(2):
            assert np.all(up[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2] == x[i, j])


def test_upsample_backward_sums_blocks():
    x = dc.parameter(np.random.default_rng(0).standard_normal((1, 2, 2, 2, 2)))
    dc.backward(dc.sum_(dc.upsample_nearest(x)))
    assert np.all(x.grad == 8.0)


def test_downsample_inverts_upsample():
    x = np.random.default_rng(2).standard_normal((2, 3, 4, 4, 4))
    back = dc.downsample_nearest(dc.upsample_nearest(dc.tensor(x)))
    np.testing.assert_array_equal(back.data, x)


def test_softmax_closed_forms():
    z = np.zeros((1, 2, 1, 1, 1))
    np.testing.assert_allclose(dc.softmax_channels(dc.tensor(z)).data.ravel(), [0.5, 0.5])
    z[0, 0] = np.log(3.0)
    np.testing.assert_allclose(dc.softmax_channels(dc.tensor(z)).data.ravel(), [0.75, 0.25], atol=1e-15)


def test_softmax_sums_to_one_and_is_stable():
    z = np.random.default_rng(3).standard_normal((2, 4, 3, 3, 3)) * 300
    s = dc.softmax_channels(dc.tensor(z)).data
    assert np.all(s > 0) or np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_rejects_non_finite():
    z = np.zeros((1, 2, 1, 1, 1))
    z[0, 0] = np.inf
    with pytest.raises(dc.NonFiniteError):
        dc.softmax_channels(dc.tensor(z))


def test_relu_values():
    out = dc.relu(dc.tensor(np.array([-1.0, 0.0, 2.0]))).data
    np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])


def test_relu_subgradient_zero_at_zero():
    x = dc.parameter(np.array([0.0, 1.0]))
    dc.backward(dc.sum_(dc.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_group_norm_constant_input_is_zero():
    x = dc.tensor(np.full((2, 4, 2, 2, 2), 3.7))
    out = dc.group_norm(x, 2, dc.tensor(np.ones(4)), dc.tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_binary_ops_reject_mismatched_shapes():
    a, b = dc.tensor(np.zeros((2, 3))), dc.tensor(np.zeros((3, 2)))
    for op in (dc.add, dc.sub, dc.mul, dc.div):
        with pytest.raises(dc.DimensionError):
            op(a, b)


def test_scalar_broadcast_only():
    a = dc.tensor(np.ones((2, 3)))
    assert dc.mul(a, 2.0).shape == (2, 3)
    with pytest.raises(dc.DimensionError):
        dc.add(a, dc.tensor(np.ones(3)))


def test_log_safe_rejects_bad_eps():
    with pytest.raises(ValueError):
        dc.log_safe(dc.tensor(np.ones(2)), 0.0)


def test_reduce_mean_and_sum_backward():
    assert dc.mean(dc.tensor(np.array([1.0, 2.0, 3.0]))).item() == 2.0
    x = dc.parameter(np.arange(6.0).reshape(2, 3))
    dc.backward(dc.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_reduce_mixed_axes_matches_loops():
    x = np.random.default_rng(4).standard_normal((3, 4, 5))
    got = dc.reduce(dc.tensor(x), "mean", (0, 2)).data
    want = np.zeros(4)
    for j in range(4):
        acc = 0.0
        for i in range(3):
            for k in range(5):
                acc += x[i, j, k]
        want[j] = acc / 15
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_reduce_rejects_empty_axis_set():
    with pytest.raises(ValueError):
        dc.reduce(dc.tensor(np.ones((2, 2))), "sum", ())


def test_backward_simple_identities():
    x = dc.parameter(np.random.default_rng(5).standard_normal((3, 4)))
    dc.backward(dc.sum_(dc.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)


def test_backward_requires_scalar_root():
    x = dc.parameter(np.ones(3))
    with pytest.raises(dc.DimensionError):
        dc.backward(dc.mul(x, 2.0))


def test_repeated_backward_without_reset_raises():
    x = dc.parameter(np.ones(3))
    dc.backward(dc.sum_(x))
    with pytest.raises(dc.GradientAccumulationError):
        dc.backward(dc.sum_(dc.square(x)))
    x.zero_grad()
    dc.backward(dc.sum_(dc.square(x)))
    np.testing.assert_array_equal(x.grad, 2.0)


def test_tape_is_topological():
    x = dc.parameter(np.ones((1, 2, 2, 2, 2)))
    y = dc.relu(dc.add(x, dc.upsample_nearest(dc.downsample_nearest(x))))
    tape = dc.backward(dc.sum_(y))
    pos = {n._id: i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[p._id] < pos[n._id]
    assert len({n._id for n in tape.nodes}) == len(tape)


def test_no_grad_records_nothing():
    x = dc.parameter(np.ones(2))
    with dc.no_grad():
        y = dc.square(x)
    assert not y.requires_grad and y.is_leaf


def test_non_finite_output_is_surfaced():
    with pytest.raises(dc.NonFiniteError), np.errstate(divide="ignore"):
        dc.div(dc.tensor(np.ones(2)), dc.tensor(np.zeros(2)))


@pytest.mark.parametrize("name", sorted(gc.OP_CASES))
def test_op_gradients_match_finite_differences(name):
    res = gc.run_case(name, seed=0, max_coords=None)
    assert res.max_rel_err < 1e-4, res


def test_backward_is_linear():
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((1, 2, 4, 4, 4))
    k0 = rng.standard_normal((2, 2, 3, 3, 3))

    def losses(x, k):
        y = dc.conv3d(x, k)
        return dc.sum_(dc.square(y)), dc.mean(dc.relu(y))

    grads = []
    for pick in ("l1", "l2", "mix"):
        x, k = dc.parameter(x0), dc.parameter(k0)
        l1, l2 = losses(x, k)
        root = {"l1": l1, "l2": l2, "mix": dc.add(dc.scalar_mul(l1, 0.3), dc.scalar_mul(l2, -2.5))}[pick]
        dc.backward(root)
        grads.append((x.grad, k.grad))
    for i in range(2):
        np.testing.assert_allclose(grads[2][i], 0.3 * grads[0][i] - 2.5 * grads[1][i], atol=1e-12, rtol=0)


def test_deterministic_bitwise():
    def run():
        rng = np.random.default_rng(7)
        x = dc.parameter(rng.standard_normal((2, 2, 4, 4, 4)))
        k = dc.parameter(rng.standard_normal((3, 2, 3, 3, 3)))
        g = dc.parameter(np.ones(3))
        b = dc.parameter(np.zeros(3))
        y = dc.softmax_channels(dc.group_norm(dc.conv3d(x, k, stride=2), 3, g, b))
        loss = dc.sum_(dc.square(y))
        dc.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()

    assert run() == run()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([2, 4]), st.integers(0, 2 ** 31 - 1))
def test_conv3d_gradient_property(cin, cout, size, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, cin, size, size, size))
    k = rng.standard_normal((cout, cin, 3, 3, 3))
    w = rng.standard_normal((1, cout, size, size, size))
    res = gc.check_function(lambda t: dc.sum_(dc.mul(dc.conv3d(t[0], t[1]), dc.tensor(w))),
                            [x, k], rng, max_coords=16)
    assert res.max_rel_err < 1e-4
