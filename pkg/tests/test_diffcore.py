import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fimaq import ops
from fimaq.autodiff import ShapeError, Tape, Tensor, TapeError, finite_diff_grad, finite_diff_hessian
from fimaq.layers import BlockSpec, forward_block, init_block_weights


def grad_of(fn, *arrays):
    tape = Tape()
    xs = [tape.variable(a) for a in arrays]
    out = fn(*xs)
    g = tape.backward(out, np.ones_like(out.data))
    return [g[x] for x in xs]


def assert_fd_close(analytic, numeric, rel=1e-4, abs_=1e-6):
    err = np.abs(analytic - numeric)
    tol = np.maximum(abs_, rel * np.abs(numeric))
    assert np.all(err <= tol), f"max err {err.max():.3e}"


# -- sub-op examples ---------------------------------------------------------

def test_layer_norm_of_constant_row_is_zero():
    out = ops.layer_norm(np.ones((1, 4)), np.ones(4), np.zeros(4))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_softmax_symmetric_logits():
    np.testing.assert_allclose(ops.softmax(np.zeros(2)).data, [0.5, 0.5])


def test_gelu_at_zero():
    assert ops.gelu(np.array(0.0)).data == 0.0


def test_linear_op_gradient():
    tape = Tape()
    x = tape.variable(np.array(3.0))
    y = ops.mul(x, 2.0)
    assert tape.backward(y, np.array(1.0))[x] == 2.0


# -- KL head -----------------------------------------------------------------

def test_kl_identical_logits_is_zero():
    assert ops.kl_divergence(np.array([3.0, -1.0]), np.array([3.0, -1.0])).data == 0.0


def test_kl_onehot_vs_uniform_is_ln2():
    val = float(ops.kl_divergence(np.array([20.0, -20.0]), np.zeros(2)).data)
    # direct evaluation of sum p log(p/q)
    p1 = 1.0 / (1.0 + math.exp(-40.0))
    p2 = math.exp(-40.0) / (1.0 + math.exp(-40.0))
    expected = p1 * math.log(p1 / 0.5) + p2 * math.log(p2 / 0.5)
    assert val == pytest.approx(expected, rel=1e-12)
    assert val == pytest.approx(math.log(2.0), abs=1e-15 + 1e-6)


def test_kl_small_shift_matches_fim_quadratic():
    eps = 0.01
    val = float(ops.kl_divergence(np.zeros(2), np.array([eps, -eps])).data)
    # F = diag(p) - pp^T at p = [.5, .5]; dz^T F dz = eps^2 for dz = [eps, -eps]
    assert val == pytest.approx(0.5 * eps**2, rel=1e-3)


def test_kl_needs_two_classes():
    with pytest.raises(ValueError):
        ops.kl_divergence(np.zeros(1), np.zeros(1))


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    p, q = rng.normal(size=8), rng.normal(size=8)
    gp, gq = grad_of(ops.kl_divergence, p, q)
    fq = finite_diff_grad(lambda v: float(ops.kl_divergence(p, v).data), q, 1e-5)
    fp = finite_diff_grad(lambda v: float(ops.kl_divergence(v, q).data), p, 1e-5)
    np.testing.assert_allclose(gq, fq, rtol=1e-5, atol=1e-10)
    np.testing.assert_allclose(gp, fp, rtol=1e-5, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 5, elements=st.floats(-8, 8)),
    arrays(np.float64, 5, elements=st.floats(-8, 8)),
    st.floats(-50, 50),
)
def test_kl_nonnegative_and_shift_invariant(p, q, c):
    assert ops.kl_divergence(p, q).data >= 0.0
    assert float(ops.kl_divergence(p, p + c).data) == pytest.approx(0.0, abs=1e-12)


# -- Hessian oracle ----------------------------------------------------------

def test_fd_hessian_of_quadratic():
    h = finite_diff_hessian(lambda x: float(x @ x), np.array([0.3, -1.2]), 1e-4)
    np.testing.assert_allclose(h, 2 * np.eye(2), atol=1e-6)


def test_fd_hessian_of_log_softmax_component():
    fn = lambda z: float(ops.log_softmax(z).data[0])
    h = finite_diff_hessian(fn, np.zeros(2), 1e-4)
    np.testing.assert_allclose(h, [[-0.25, 0.25], [0.25, -0.25]], atol=1e-5)


def test_fd_hessian_constant_is_zero():
    np.testing.assert_array_equal(finite_diff_hessian(lambda z: 4.2, np.ones(3), 1e-3), np.zeros((3, 3)))


def test_fd_hessian_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        finite_diff_hessian(lambda z: float("nan"), np.ones(2), 1e-3)


# -- primitive gradients on seeded inputs ------------------------------------

PRIMITIVES = {
    "add": (lambda a, b: ops.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ops.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: ops.mul(a, b), [(3, 4), (3, 4)]),
    "square": (ops.square, [(5,)]),
    "matmul": (ops.matmul, [(2, 3, 4), (4, 5)]),
    "linear": (ops.linear, [(2, 3, 4), (5, 4), (5,)]),
    "layer_norm": (ops.layer_norm, [(3, 6), (6,), (6,)]),
    "gelu": (ops.gelu, [(7,)]),
    "softmax": (ops.softmax, [(3, 5)]),
    "log_softmax": (ops.log_softmax, [(3, 5)]),
    "kl": (ops.kl_divergence, [(3, 5), (3, 5)]),
    "sum_axis": (lambda a: ops.sum(a, axis=1), [(3, 4)]),
    "mean": (ops.mean, [(3, 4)]),
    "reshape": (lambda a: ops.reshape(a, (4, 3)), [(3, 4)]),
    "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "take": (lambda a: ops.take(a, 1, axis=1), [(2, 3, 4)]),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), [(2, 1, 3), (2, 2, 3)]),
    "cross_entropy": (lambda a: ops.cross_entropy(a, np.array([0, 2, 1])), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shapes = PRIMITIVES[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        inputs = [rng.normal(size=s) for s in shapes]
        weights = rng.normal(size=np.shape(fn(*inputs).data))
        analytic = grad_of(lambda *xs: ops.sum(ops.mul(fn(*xs), weights)), *inputs)
        for i, a in enumerate(analytic):
            def scalar(v, i=i):
                args = list(inputs)
                args[i] = v
                return float(np.sum(fn(*args).data * weights))

            assert_fd_close(a, finite_diff_grad(scalar, inputs[i], 1e-5))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    y = ops.softmax(rng.normal(scale=10, size=(50, 7))).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_standardizes_rows():
    rng = np.random.default_rng(4)
    # eps = 1e-5 biases the variance by eps/var; rows with var >= 10 stay within 1e-6
    x = rng.normal(scale=10.0, size=(40, 32)) + rng.normal(size=(40, 1))
    y = ops.layer_norm(x, np.ones(32), np.zeros(32)).data
    assert np.abs(y.mean(axis=-1)).max() <= 1e-10
    assert np.abs(y.var(axis=-1) - 1.0).max() <= 1e-6


# -- tape semantics ----------------------------------------------------------

def test_tape_is_single_use():
    tape = Tape()
    x = tape.variable(np.ones(2))
    y = ops.square(x)
    tape.backward(y, np.ones(2))
    with pytest.raises(TapeError):
        tape.backward(y, np.ones(2))


def test_backward_rejects_wrong_seed_shape():
    tape = Tape()
    x = tape.variable(np.ones(2))
    with pytest.raises(ShapeError):
        tape.backward(ops.square(x), np.ones(3))


def test_constant_receives_zero_gradient():
    tape = Tape()
    x = tape.variable(np.ones(3))
    c = Tensor(np.full(3, 2.0))
    g = tape.backward(ops.sum(ops.mul(x, c)))
    np.testing.assert_array_equal(g[c], np.zeros(3))
    np.testing.assert_array_equal(g[x], np.full(3, 2.0))


def test_diamond_graph_accumulates_in_reverse_order():
    # y = (x*x) * (x + 1); dy/dx = 3x^2 + 2x
    tape = Tape()
    x = tape.variable(np.array([1.5, -2.0]))
    y = ops.mul(ops.square(x), ops.add(x, 1.0))
    g = tape.backward(y, np.ones(2))[x]
    np.testing.assert_allclose(g, 3 * x.data**2 + 2 * x.data)


def test_mixing_tapes_is_an_error():
    a, b = Tape().variable(1.0), Tape().variable(2.0)
    with pytest.raises(TapeError):
        ops.add(a, b)


# -- transformer block -------------------------------------------------------

def small_block(seed=0):
    spec = BlockSpec(tokens=3, dim=8, heads=2, mlp_ratio=2.0)
    rng = np.random.default_rng(seed)
    w = init_block_weights(spec, rng)
    for k in w:
        w[k] = w[k] + 0.1 * rng.normal(size=w[k].shape)
    return spec, w, rng.normal(size=(2, 3, 8))


def test_block_shape_error():
    spec, w, x = small_block()
    with pytest.raises(ShapeError):
        forward_block(spec, w, np.zeros((2, 4, 8)))
    bad = dict(w, fc1_w=np.zeros((3, 8)))
    with pytest.raises(ShapeError):
        forward_block(spec, bad, x)


def test_block_accepts_unbatched_input():
    spec, w, x = small_block()
    np.testing.assert_allclose(forward_block(spec, w, x[0]).data, forward_block(spec, w, x).data[0], atol=1e-14)


def test_block_gradient_matches_finite_differences():
    spec, w, x = small_block(0)
    probe = np.random.default_rng(9).normal(size=x.shape)
    names = sorted(w)

    tape = Tape()
    xt = tape.variable(x)
    wt = {k: tape.variable(v) for k, v in w.items()}
    out = forward_block(spec, wt, xt)
    g = tape.backward(ops.sum(ops.mul(out, probe)))

    def loss(xv, wv):
        return float(np.sum(forward_block(spec, wv, xv).data * probe))

    assert_fd_close(g[xt], finite_diff_grad(lambda v: loss(v, w), x))
    for k in names:
        fd = finite_diff_grad(lambda v, k=k: loss(x, dict(w, **{k: v})), w[k])
        assert_fd_close(g[wt[k]], fd)


def test_forward_backward_is_bitwise_deterministic():
    def run():
        spec, w, x = small_block(5)
        tape = Tape()
        xt = tape.variable(x)
        out = forward_block(spec, w, xt)
        return tape.backward(ops.sum(ops.square(out)))[xt]

    assert run().tobytes() == run().tobytes()


def test_block_spec_requires_divisible_heads():
    with pytest.raises(ValueError):
        BlockSpec(tokens=3, dim=10, heads=3)
    assert BlockSpec(tokens=9, dim=32, heads=4).flat_size == 288
