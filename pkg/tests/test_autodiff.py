import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from modelbridge import autodiff as ad
from modelbridge.autodiff import Parameter, ShapeError, Tape, Tensor, backward, grad_check

TOL = 1e-4


def rand_param(rng, *shape, scale=1.0, name=None):
    return Parameter(scale * rng.standard_normal(shape), name=name)


def weighted_sum(out, rng_seed=99):
    """Scalar readout with fixed random weights so every output entry matters."""
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return ad.sum(out * w)


# ------------------------------------------------------------- forward values


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert_array_equal((a @ np.eye(2)).data, [[1, 2], [3, 4]])


def test_mean_pool_axis0():
    assert_array_equal(ad.mean(Tensor([[2.0, 4.0], [4.0, 8.0]]), axis=0).data, [3, 6])


def test_conv1d_valid_length_and_sliding_window_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 8, 1))
    w = rng.standard_normal((3, 1, 1))
    out = ad.conv1d(x, w)
    assert out.shape == (1, 6, 1)
    expected = [sum(x[0, t + k, 0] * w[k, 0, 0] for k in range(3)) for t in range(6)]
    assert_allclose(out.data[0, :, 0], expected, rtol=1e-12)


def test_conv1d_stride_padding_multichannel_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 9, 3))
    w = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(5)
    out = ad.conv1d(x, w, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    n_out = (9 + 2 - 4) // 2 + 1
    ref = np.zeros((2, n_out, 5))
    for i in range(2):
        for t in range(n_out):
            ref[i, t] = np.einsum("kc,kco->o", xp[i, 2 * t : 2 * t + 4], w) + b
    assert out.shape == (2, n_out, 5)
    assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_softmax_rows_sum_to_one_and_log_softmax_consistent():
    x = Tensor(np.random.default_rng(2).standard_normal((4, 5)) * 30)
    s = ad.softmax(x).data
    assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-12)
    assert_allclose(np.exp(ad.log_softmax(x).data), s, rtol=1e-10, atol=1e-300)


def test_layer_norm_output_is_standardized():
    x = Tensor(np.random.default_rng(3).standard_normal((3, 7)) * 5 + 2)
    out = ad.layer_norm(x, np.ones(7), np.zeros(7)).data
    assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    assert_allclose(out.var(axis=-1), 1.0, rtol=1e-4)


def test_attention_matches_reference():
    rng = np.random.default_rng(4)
    q, k, v = (rng.standard_normal((2, 5, 4)) for _ in range(3))
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(4)
    p = np.exp(scores - scores.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    assert_allclose(ad.attention(q, k, v).data, p @ v, rtol=1e-12)


# ------------------------------------------------------------- shape errors


@pytest.mark.parametrize(
    "call",
    [
        lambda: ad.matmul(np.ones((2, 3)), np.ones((2, 3))),
        lambda: ad.add(np.ones((2, 3)), np.ones((4,))),
        lambda: ad.conv1d(np.ones((1, 8, 2)), np.ones((3, 3, 1))),
        lambda: ad.conv1d(np.ones((1, 2, 1)), np.ones((3, 1, 1))),
        lambda: ad.layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(4)),
        lambda: ad.reshape(np.ones(6), (4,)),
        lambda: ad.attention(np.ones((1, 3, 4)), np.ones((1, 3, 5)), np.ones((1, 3, 4))),
    ],
)
def test_shape_mismatch_raises_shape_error(call):
    with pytest.raises(ShapeError) as info:
        call()
    assert info.value.primitive


def test_shape_error_names_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ------------------------------------------------------------- finite-difference checks

UNARY = {
    "neg": ad.neg,
    "exp": ad.exp,
    "log": lambda a: ad.log(ad.exp(a) + 1.0),
    "sqrt": lambda a: ad.sqrt(a * a + 1.0),
    "abs": ad.abs,
    "relu": ad.relu,
    "gelu": ad.gelu,
    "sum_axis": lambda a: ad.sum(a, axis=1, keepdims=True),
    "mean_axis": lambda a: ad.mean(a, axis=0),
    "max": lambda a: ad.max(a, axis=-1),
    "reshape": lambda a: ad.reshape(a, (2, 2, 3)),
    "transpose": ad.transpose,
    "softmax": ad.softmax,
    "log_softmax": ad.log_softmax,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    # keep values away from the kinks of abs / relu / max
    x = Parameter(rng.uniform(0.2, 1.5, (4, 3)) * rng.choice([-1, 1], (4, 3)), name="x")
    assert grad_check(lambda: weighted_sum(UNARY[name](x)), [x]) < TOL


BINARY = {
    "add": (ad.add, (3, 4), (4,)),
    "sub": (ad.sub, (3, 4), (3, 1)),
    "mul": (ad.mul, (3, 4), (3, 4)),
    "div": (lambda a, b: ad.div(a, b * b + 1.0), (3, 4), (4,)),
    "matmul": (ad.matmul, (3, 4), (4, 2)),
    "matmul_batched": (ad.matmul, (2, 3, 4), (4, 5)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    fn, sa, sb = BINARY[name]
    rng = np.random.default_rng(len(name))
    a, b = rand_param(rng, *sa, name="a"), rand_param(rng, *sb, name="b")
    assert grad_check(lambda: weighted_sum(fn(a, b)), [a, b]) < TOL


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 2), (3, 0)])
def test_conv1d_gradients(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rand_param(rng, 2, 10, 3, name="x")
    w = rand_param(rng, 3, 3, 4, scale=0.5, name="w")
    b = rand_param(rng, 4, name="b")
    assert grad_check(lambda: weighted_sum(ad.conv1d(x, w, b, stride, padding)), [x, w, b]) < TOL


def test_layer_norm_gradients():
    rng = np.random.default_rng(5)
    x = rand_param(rng, 2, 3, 6, name="x")
    g = Parameter(1 + 0.1 * rng.standard_normal(6), name="g")
    b = rand_param(rng, 6, name="b")
    assert grad_check(lambda: weighted_sum(ad.layer_norm(x, g, b)), [x, g, b]) < TOL


def test_attention_gradients():
    rng = np.random.default_rng(6)
    q, k, v = (rand_param(rng, 2, 4, 3, name=n) for n in "qkv")
    assert grad_check(lambda: weighted_sum(ad.attention(q, k, v)), [q, k, v]) < TOL


def test_random_three_layer_chain_gradient():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((5, 4))
    ws = [rand_param(rng, 4, 6, name="w1"), rand_param(rng, 6, 6, name="w2"), rand_param(rng, 6, 2, name="w3")]

    def f():
        h = ad.gelu(x @ ws[0])
        h = ad.layer_norm(ad.relu(h @ ws[1] + 0.1), np.ones(6), np.zeros(6))
        return ad.mean(ad.log_softmax(h @ ws[2]))

    assert grad_check(f, ws) < TOL


# ------------------------------------------------------------- backward semantics


def test_linear_map_gradient_is_input_broadcast():
    x = np.array([[1.0], [-2.0], [0.5]])
    w = Parameter(np.random.default_rng(8).standard_normal((4, 3)))
    with Tape() as tape:
        loss = ad.sum(w @ x)
    grads = backward(tape, loss)
    assert_allclose(grads[w], np.tile(x.T, (4, 1)))


def test_disconnected_parameter_gets_zero_gradient():
    w = Parameter(np.ones(3))
    unused = Parameter(np.ones(2))
    with Tape() as tape:
        loss = ad.sum(w * 2.0)
    grads = backward(tape, loss, [w, unused])
    assert_array_equal(grads[unused], np.zeros(2))
    assert_array_equal(grads[w], 2 * np.ones(3))


def test_non_scalar_loss_rejected():
    w = Parameter(np.ones(3))
    with Tape() as tape:
        out = w * 2.0
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, out)


def test_frozen_parameter_passes_gradient_through_but_gets_none():
    rng = np.random.default_rng(9)
    frozen = Parameter(rng.standard_normal((3, 3)), trainable=False)
    w = Parameter(rng.standard_normal((2, 3)))
    with Tape() as tape:
        loss = ad.sum(ad.gelu(w @ frozen))
    grads = backward(tape, loss)
    assert w in grads and frozen not in grads
    assert np.abs(grads[w]).sum() > 0


def test_no_recording_without_tape_or_trainable_inputs():
    frozen = Parameter(np.ones((2, 2)), trainable=False)
    with Tape() as tape:
        ad.sum(frozen @ np.ones((2, 1)))
    assert len(tape) == 0
    w = Parameter(np.ones((2, 2)))
    ad.sum(w @ np.ones((2, 1)))  # no active tape
    with Tape() as tape:
        ad.sum(w @ np.ones((2, 1)))
    assert len(tape) == 2 and tape.check_order()


def test_tape_begin_end_explicit():
    w = Parameter(np.array([2.0]))
    tape = Tape().begin()
    loss = ad.sum(w * w)
    tape.end()
    assert_allclose(backward(tape, loss)[w], [4.0])
    with pytest.raises(RuntimeError):
        tape.end()


def test_repeated_graph_is_bit_identical():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((3, 8, 2))
    w = rand_param(rng, 3, 2, 4)

    def run():
        with Tape() as tape:
            loss = ad.mean(ad.gelu(ad.conv1d(x, w)))
        return loss.data.copy(), backward(tape, loss)[w].copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_from_finite_input_raises():
    with pytest.raises(FloatingPointError):
        ad.exp(Tensor([1000.0]))


# ------------------------------------------------------------- grad_check contract


def test_grad_check_square():
    w = Parameter(np.array([3.0]))
    assert grad_check(lambda: ad.sum(w * w), [w], eps=1e-5) < 1e-8


def test_grad_check_constant_is_zero():
    w = Parameter(np.array([3.0, 1.0]))
    assert grad_check(lambda: ad.sum(Tensor(np.ones(2))) + 0.0 * ad.sum(w), [w]) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_non_finite_probe_raises():
    w = Parameter(np.array([5e-6]))
    with pytest.raises(FloatingPointError):
        grad_check(lambda: ad.sum(ad.log(w)), [w], eps=1e-5)


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda: Tensor(0.0), [], eps=0)
