import math

import numpy as np
import pytest

from fdcheck import check_grads, max_rel_err, numeric_gradient
from rmiseg import tensor as T
from rmiseg.tensor import ContractError, DomainError, NonFiniteError, ShapeError, Tensor


def test_tensor_shape_matches_data():
    t = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert t.shape == (2, 3)
    assert t.size == 6
    assert t.data.dtype == np.float64


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_tensor_copies_its_input():
    src = np.array([1.0, 2.0])
    t = Tensor(src)
    src[0] = 99.0
    assert t.data[0] == 1.0


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    left = Tensor(np.eye(2))
    right = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(left, right).data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_zero():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]]))
    assert np.array_equal(out.data, [[0.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_vs_finite_differences(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    worst = check_grads(lambda ps: T.sum_all(T.matmul(ps[0], ps[1])), [a, b], rel_tol=1e-6)
    assert worst < 1e-6


def test_matvec_gradient(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    v = Tensor(rng.standard_normal(4), requires_grad=True)
    out = T.matmul(a, v)
    assert out.shape == (3,)
    check_grads(lambda ps: T.sum_all(T.matmul(ps[0], ps[1])), [a, v])


# ---------------------------------------------------------------------------
# elementwise


def test_sigmoid_at_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_tanh_at_zero():
    assert T.tanh(Tensor(0.0)).item() == 0.0


def test_sigmoid_stable_in_tails():
    out = T.sigmoid(Tensor([-1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(0.0, abs=1e-12)
    assert out.data[1] == pytest.approx(1.0, abs=1e-12)


def test_softplus_stable_and_correct():
    out = T.softplus(Tensor([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[1] == pytest.approx(math.log(2.0), abs=1e-15)
    assert out.data[2] == pytest.approx(1000.0, abs=1e-12)


def test_mul_example_and_backward():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    b = Tensor([4.0, 5.0, 6.0])
    with T.Tape() as tape:
        out = T.mul(a, b)
        loss = T.sum_all(out)
    assert np.array_equal(out.data, [4.0, 10.0, 18.0])
    grads = tape.backward(loss, wrt=[a])
    assert np.array_equal(grads[a], [4.0, 5.0, 6.0])


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]))


def test_binary_shape_errors():
    a, b = Tensor(np.ones(3)), Tensor(np.ones(4))
    for op in (T.add, T.sub, T.mul):
        with pytest.raises(ShapeError):
            op(a, b)


@pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.relu, T.softplus, T.neg])
def test_unary_gradients(op, rng):
    x = Tensor(rng.standard_normal(7) * 2.0 + 0.1, requires_grad=True)
    check_grads(lambda ps: T.sum_all(T.mul(op(ps[0]), ps[0])), [x])


def test_log_gradient(rng):
    x = Tensor(rng.uniform(0.1, 3.0, size=6), requires_grad=True)
    check_grads(lambda ps: T.sum_all(T.log(ps[0])), [x])


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
def test_binary_gradients(op, rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    check_grads(lambda ps: T.sum_all(op(ps[0], ps[1])), [a, b])


# ---------------------------------------------------------------------------
# concat / slice / reshape


def test_concat_juxtaposes():
    out = T.concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
    assert np.array_equal(out.data, [[1.0, 3.0], [2.0, 4.0]])


def test_concat_single_argument_is_identity():
    x = Tensor([1.0, 2.0])
    assert T.concat([x]) is x


def test_concat_shape_error():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)


def test_concat_backward_splits(rng):
    a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    weights = Tensor(rng.standard_normal((2, 5)))
    check_grads(lambda ps: T.sum_all(T.mul(T.concat([ps[0], ps[1]], axis=1), weights)), [a, b])


def test_slice_axis_values_and_gradient(rng):
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    out = T.slice_axis(x, 1, 1, 3)
    assert np.array_equal(out.data, x.data[:, 1:3])
    check_grads(lambda ps: T.sum_all(T.mul(T.slice_axis(ps[0], 0, 1, 4), T.slice_axis(ps[0], 0, 0, 3))), [x])
    with pytest.raises(ShapeError):
        T.slice_axis(x, 0, 3, 3)


def test_reshape_roundtrip_and_gradient(rng):
    x = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    assert T.reshape(x, (3, 4)).shape == (3, 4)
    with pytest.raises(ShapeError):
        T.reshape(x, (5, 5))
    w = Tensor(rng.standard_normal((3, 4)))
    check_grads(lambda ps: T.sum_all(T.mul(T.reshape(ps[0], (3, 4)), w)), [x])


def test_tile_to_grid(rng):
    v = Tensor([1.0, 2.0], requires_grad=True)
    out = T.tile_to_grid(v, 3, 4)
    assert out.shape == (3, 4, 2)
    assert np.all(out.data[..., 0] == 1.0) and np.all(out.data[..., 1] == 2.0)
    w = Tensor(rng.standard_normal((3, 4, 2)))
    check_grads(lambda ps: T.sum_all(T.mul(T.tile_to_grid(ps[0], 3, 4), w)), [v])


def test_channel_mean(rng):
    x = Tensor(rng.standard_normal((2, 2, 5)), requires_grad=True)
    assert np.allclose(T.channel_mean(x).data, x.data.mean(axis=-1))
    w = Tensor(rng.standard_normal((2, 2)))
    check_grads(lambda ps: T.sum_all(T.mul(T.channel_mean(ps[0]), w)), [x])


# ---------------------------------------------------------------------------
# conv1x1


def test_conv1x1_identity_kernel(rng):
    fmap = Tensor(rng.standard_normal((3, 4, 5)))
    out = T.conv1x1(fmap, Tensor(np.eye(5)), Tensor(np.zeros(5)))
    assert np.array_equal(out.data, fmap.data)


def test_conv1x1_spatially_invariant(rng):
    # constant-channel input -> constant-channel output at every location
    vec = rng.standard_normal(4)
    fmap = Tensor(np.broadcast_to(vec, (5, 6, 4)).copy())
    k = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal(3))
    out = T.conv1x1(fmap, k, b).data
    assert np.allclose(out, out[0, 0])


def test_conv1x1_equals_per_location_matmul(rng):
    fmap = Tensor(rng.standard_normal((4, 5, 6)))
    k = Tensor(rng.standard_normal((3, 6)))
    b = Tensor(rng.standard_normal(3))
    out = T.conv1x1(fmap, k, b).data
    for i in range(4):
        for j in range(5):
            ref = k.data @ fmap.data[i, j] + b.data
            assert np.max(np.abs(out[i, j] - ref)) < 1e-12


def test_conv1x1_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv1x1(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        T.conv1x1(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((4, 3))), Tensor(np.ones(5)))


def test_conv1x1_gradients(rng):
    fmap = Tensor(rng.standard_normal((3, 3, 4)), requires_grad=True)
    k = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 3, 2)))
    check_grads(lambda ps: T.sum_all(T.mul(T.conv1x1(ps[0], ps[1], ps[2]), w)), [fmap, k, b])


# ---------------------------------------------------------------------------
# strided patches / conv2d


def test_extract_patches_values():
    x = Tensor(np.arange(16.0).reshape(4, 4, 1))
    out = T.extract_patches(x, ksize=3, stride=2, pad=1)
    assert out.shape == (2, 2, 9)
    # top-left patch of a pad-1 image: first row and column are zero padding
    assert np.array_equal(out.data[0, 0], [0, 0, 0, 0, 0.0, 1.0, 0, 4.0, 5.0])
    # interior-aligned patch centred at (2, 2)
    assert np.array_equal(out.data[1, 1], [5.0, 6.0, 7.0, 9.0, 10.0, 11.0, 13.0, 14.0, 15.0])


def test_extract_patches_gradient(rng):
    x = Tensor(rng.standard_normal((4, 6, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 18)))
    check_grads(
        lambda ps: T.sum_all(T.mul(T.extract_patches(ps[0], ksize=3, stride=2, pad=1), w)), [x]
    )


def test_conv2d_halves_even_extents(rng):
    x = Tensor(rng.standard_normal((8, 6, 3)))
    k = Tensor(rng.standard_normal((5, 27)))
    out = T.conv2d(x, k, Tensor(np.zeros(5)), ksize=3, stride=2, pad=1)
    assert out.shape == (4, 3, 5)


def test_conv2d_gradients(rng):
    x = Tensor(rng.standard_normal((4, 4, 2)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 18)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    check_grads(lambda ps: T.sum_all(T.conv2d(ps[0], ps[1], ps[2], ksize=3, stride=2, pad=1)), [x, k, b])


# ---------------------------------------------------------------------------
# bilinear resize


def _interp_scalar(grid, height, width, i, j):
    # Independent scalar oracle: half-pixel centers, clamped, one pixel at a time.
    h, w = len(grid), len(grid[0])
    sy = min(max((i + 0.5) * (h / height) - 0.5, 0.0), h - 1.0)
    sx = min(max((j + 0.5) * (w / width) - 0.5, 0.0), w - 1.0)
    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    wy, wx = sy - y0, sx - x0
    top = grid[y0][x0] * (1 - wx) + grid[y0][x1] * wx
    bot = grid[y1][x0] * (1 - wx) + grid[y1][x1] * wx
    return top * (1 - wy) + bot * wy


def test_bilinear_constant_map_exact():
    fmap = Tensor(np.full((3, 5, 2), 0.77))
    out = T.bilinear_resize(fmap, 24, 40)
    assert np.all(out.data == 0.77)


def test_bilinear_same_size_is_identity(rng):
    fmap = Tensor(rng.standard_normal((5, 7, 3)))
    out = T.bilinear_resize(fmap, 5, 7)
    assert np.array_equal(out.data, fmap.data)


def test_bilinear_2x2_to_4x4_frozen():
    # Frozen values computed with the scalar oracle above.
    expected = np.array(
        [
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ]
    )
    fmap = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1))
    out = T.bilinear_resize(fmap, 4, 4).data[..., 0]
    assert np.max(np.abs(out - expected)) < 1e-14


def test_bilinear_matches_scalar_oracle(rng):
    grid = rng.standard_normal((3, 4))
    out = T.bilinear_resize(Tensor(grid.reshape(3, 4, 1)), 7, 9).data[..., 0]
    for i in range(7):
        for j in range(9):
            assert out[i, j] == pytest.approx(_interp_scalar(grid.tolist(), 7, 9, i, j), abs=1e-12)


def test_bilinear_gradient(rng):
    x = Tensor(rng.standard_normal((2, 3, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 4, 2)))
    check_grads(lambda ps: T.sum_all(T.mul(T.bilinear_resize(ps[0], 5, 4), w)), [x])


def test_bilinear_rejects_bad_extents():
    with pytest.raises(ShapeError):
        T.bilinear_resize(Tensor(np.ones((2, 2, 1))), 0, 4)


# ---------------------------------------------------------------------------
# backward contract


def test_backward_of_sum_is_all_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(x)
    grads = tape.backward(loss, wrt=[x])
    assert np.array_equal(grads[x], np.ones((3, 4)))


def test_unused_parameter_gets_zero_gradient(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    unused = Tensor(rng.standard_normal(5), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
    grads = tape.backward(loss, wrt=[x, unused])
    assert np.array_equal(grads[unused], np.zeros(5))


def test_non_scalar_loss_rejected(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_without_tape_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_all(x)  # no tape active: nothing recorded
    with pytest.raises(ContractError):
        T.backward(loss)


def test_gradients_accumulate_over_consumers(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.add(T.mul(x, x), T.mul(x, x)))
    grads = tape.backward(loss, wrt=[x])
    assert np.allclose(grads[x], 4.0 * x.data, atol=1e-14)


def test_path_additivity_exact(rng):
    # grad through (f + g) equals grad(f) + grad(g), down to 1e-12
    x_data = rng.standard_normal(5)

    def paths(ps):
        return T.sum_all(T.sigmoid(ps[0])), T.sum_all(T.mul(ps[0], ps[0]))

    x = Tensor(x_data, requires_grad=True)
    with T.Tape() as tape:
        f, g = paths([x])
        total = T.add(f, g)
    joint = tape.backward(total, wrt=[x])[x]

    x1 = Tensor(x_data, requires_grad=True)
    with T.Tape() as tape1:
        f, _ = paths([x1])
    gf = tape1.backward(f, wrt=[x1])[x1]
    x2 = Tensor(x_data, requires_grad=True)
    with T.Tape() as tape2:
        _, g = paths([x2])
    gg = tape2.backward(g, wrt=[x2])[x2]
    assert np.max(np.abs(joint - (gf + gg))) < 1e-12


def test_backward_default_leaf_map(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    const = Tensor(np.ones(3))
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(x, const))
    grads = tape.backward(loss)
    assert x in grads and const not in grads


def test_independent_tapes_do_not_interfere(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with T.Tape() as outer:
        a = T.mul(x, x)
        with T.Tape() as inner:
            b = T.sum_all(T.mul(x, x))
        outer_loss = T.sum_all(a)
    assert np.allclose(inner.backward(b, wrt=[x])[x], 2.0 * x.data)
    assert np.allclose(outer.backward(outer_loss, wrt=[x])[x], 2.0 * x.data)


def test_debug_checks_flag_nonfinite():
    big = Tensor([1e308])
    with np.errstate(over="ignore"):
        T.set_debug_checks(True)
        with pytest.raises(NonFiniteError):
            T.add(big, big)
        T.set_debug_checks(False)
        out = T.add(big, big)  # silent without debug mode
    assert np.isinf(out.data[0])


# ---------------------------------------------------------------------------
# randomized property: every differentiable op passes FD checks


def _random_cases(seed):
    r = np.random.default_rng(seed)
    mk = lambda *s: Tensor(r.standard_normal(s), requires_grad=True)
    w23 = Tensor(r.standard_normal((2, 3)))
    w234 = Tensor(r.standard_normal((2, 3, 4)))
    w232 = Tensor(r.standard_normal((2, 3, 2)))
    w552 = Tensor(r.standard_normal((5, 5, 2)))
    return [
        (lambda ps: T.sum_all(T.matmul(ps[0], ps[1])), [mk(2, 3), mk(3, 2)]),
        (lambda ps: T.sum_all(T.matmul(ps[0], ps[1])), [mk(2, 3), mk(3)]),
        (lambda ps: T.sum_all(T.mul(T.add(ps[0], ps[1]), T.sub(ps[0], ps[1]))), [mk(2, 3), mk(2, 3)]),
        (lambda ps: T.sum_all(T.mul(T.sigmoid(ps[0]), T.tanh(ps[0]))), [mk(4)]),
        (lambda ps: T.mean_all(T.softplus(ps[0])), [mk(3, 2)]),
        (lambda ps: T.sum_all(T.mul(T.relu(ps[0]), ps[0])), [mk(5)]),
        (lambda ps: T.sum_all(T.log(T.sigmoid(ps[0]))), [mk(4)]),
        (lambda ps: T.sum_all(T.mul(T.concat([ps[0], ps[1]], axis=0), T.concat([ps[1], ps[0]], axis=0))), [mk(2, 2), mk(2, 2)]),
        (lambda ps: T.sum_all(T.mul(T.slice_axis(ps[0], 1, 0, 3), w23)), [mk(2, 5)]),
        (lambda ps: T.sum_all(T.mul(T.tile_to_grid(ps[0], 2, 3), w234)), [mk(4)]),
        (lambda ps: T.sum_all(T.mul(T.conv1x1(ps[0], ps[1], ps[2]), w232)), [mk(2, 3, 3), mk(2, 3), mk(2)]),
        (lambda ps: T.sum_all(T.conv2d(ps[0], ps[1], ps[2], ksize=3, stride=2, pad=1)), [mk(4, 4, 2), mk(2, 18), mk(2)]),
        (lambda ps: T.sum_all(T.mul(T.bilinear_resize(ps[0], 5, 5), w552)), [mk(3, 3, 2)]),
        (lambda ps: T.mean_all(T.channel_mean(ps[0])), [mk(2, 2, 3)]),
        (lambda ps: T.sum_all(T.neg(T.reshape(ps[0], (6,)))), [mk(2, 3)]),
    ]


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_all_ops_pass_gradient_checks(seed):
    for build, params in _random_cases(seed):
        check_grads(build, params)
