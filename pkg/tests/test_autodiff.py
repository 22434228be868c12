import numpy as np
import pytest

import masakit.autodiff as ad
from masakit.autodiff import GradientTape, leaf


def _numeric_grad(build, param, eps=1e-6):
    """Central differences of the scalar produced by build() wrt param.value."""
    g = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = build()
        flat[i] = orig - eps
        down = build()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


def _check(build_loss, params, tol=1e-7):
    tape = GradientTape()
    loss = build_loss(tape)
    for p in params:
        p.grad = np.zeros_like(p.value)
    ad.backward(tape, loss)
    for p in params:
        numeric = _numeric_grad(lambda: float(build_loss(GradientTape()).value), p)
        scale = max(1.0, float(np.max(np.abs(numeric))))
        assert np.max(np.abs(p.grad - numeric)) / scale < tol, p.name


def test_matmul_add_scale_transpose():
    rng = np.random.default_rng(0)
    a = leaf(rng.normal(size=(3, 4)), "a")
    b = leaf(rng.normal(size=(4, 2)), "b")
    c = leaf(rng.normal(size=(3, 2)), "c")

    def loss(tape):
        y = ad.add(tape, ad.scale(tape, ad.matmul(tape, a, b), 0.7), c)
        return ad.sumsq(tape, ad.transpose(tape, y))

    _check(loss, [a, b, c])


def test_add_broadcast_bias():
    rng = np.random.default_rng(1)
    x = leaf(rng.normal(size=(3, 5)), "x")
    bias = leaf(rng.normal(size=5), "bias")

    def loss(tape):
        return ad.sumsq(tape, ad.add(tape, x, bias))

    _check(loss, [x, bias])


def test_slicing_and_stacking():
    rng = np.random.default_rng(2)
    x = leaf(rng.normal(size=(4, 6)), "x")

    def loss(tape):
        left = ad.cols(tape, x, 0, 3)
        right = ad.cols(tape, x, 3, 6)
        both = ad.hstack(tape, [ad.rows(tape, left, 0, 4), right])
        col = ad.column(tape, both, 1)
        return ad.add(tape, ad.sumsq(tape, both), ad.sumsq(tape, ad.flatten(tape, x)))

    _check(loss, [x])


def test_gelu_layernorm():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(3, 6)), "x")
    gain = leaf(rng.normal(size=6) + 1.0, "gain")
    bias = leaf(rng.normal(size=6), "bias")

    def loss(tape):
        return ad.sumsq(tape, ad.gelu(tape, ad.layernorm(tape, x, gain, bias)))

    _check(loss, [x, gain, bias], tol=1e-6)


def test_softmax_rows_sum_to_one_and_grad():
    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(4, 4)), "x")
    mask = np.triu(np.ones((4, 4), dtype=bool), k=1)

    tape = GradientTape()
    p = ad.softmax_rows(tape, x, mask)
    assert np.max(np.abs(p.value.sum(axis=1) - 1.0)) < 1e-9
    assert np.all(p.value[mask] == 0.0)

    target = rng.normal(size=(4, 4))

    def loss(tape):
        y = ad.softmax_rows(tape, x, mask)
        diff = ad.add(tape, y, leaf(-target))
        return ad.sumsq(tape, diff)

    _check(loss, [x], tol=1e-6)


def test_embed_scatter():
    rng = np.random.default_rng(5)
    table = leaf(rng.normal(size=(7, 3)), "table")
    ids = np.array([1, 1, 4, 0])

    def loss(tape):
        return ad.sumsq(tape, ad.embed(tape, table, ids))

    _check(loss, [table])


def test_cross_entropy_matches_manual():
    rng = np.random.default_rng(6)
    x = leaf(rng.normal(size=(5, 4)), "logits")
    targets = np.array([0, 3, 1, 1, 2])

    tape = GradientTape()
    loss = ad.cross_entropy_mean(tape, x, targets)
    # manual log-softmax NLL
    z = x.value - x.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    manual = -logp[np.arange(5), targets].mean()
    assert abs(float(loss.value) - manual) < 1e-12

    def build(tape):
        return ad.cross_entropy_mean(tape, x, targets)

    _check(build, [x], tol=1e-6)


def test_dict_combine_chain_rule_identities():
    rng = np.random.default_rng(7)
    atoms = leaf(rng.normal(size=(3, 4, 5)), "atoms")
    coeffs = leaf(rng.normal(size=3), "coeffs")

    tape = GradientTape()
    w = ad.dict_combine(tape, atoms, coeffs)
    loss = ad.scale(tape, ad.sumsq(tape, w), 0.5)  # half squared Frobenius norm
    atoms.grad = np.zeros_like(atoms.value)
    coeffs.grad = np.zeros_like(coeffs.value)
    ad.backward(tape, loss)

    # d/dc_s of 0.5 ||W||^2 is <W, D_s>_F; d/dD_s is c_s * W
    for s in range(3):
        expect_c = float(np.sum(w.value * atoms.value[s]))
        assert abs(coeffs.grad[s] - expect_c) < 1e-10
        assert np.max(np.abs(atoms.grad[s] - coeffs.value[s] * w.value)) < 1e-10


def test_single_atom_matches_dense_gradient():
    rng = np.random.default_rng(8)
    w0 = rng.normal(size=(4, 4))
    x = rng.normal(size=(2, 4))

    dense = leaf(w0.copy(), "dense")
    tape = GradientTape()
    dense.grad = np.zeros_like(dense.value)
    ad.backward(tape, ad.sumsq(tape, ad.matmul(tape, leaf(x), dense)))

    atoms = leaf(w0[None, :, :].copy(), "atoms")
    coeffs = leaf(np.ones(1), "coeffs")
    tape = GradientTape()
    atoms.grad = np.zeros_like(atoms.value)
    coeffs.grad = np.zeros_like(coeffs.value)
    w = ad.dict_combine(tape, atoms, coeffs)
    ad.backward(tape, ad.sumsq(tape, ad.matmul(tape, leaf(x), w)))

    assert np.array_equal(atoms.grad[0], dense.grad)


def test_node_reuse_accumulates():
    x = leaf(np.array([[2.0]]), "x")
    tape = GradientTape()
    y = ad.add(tape, x, x)  # y = 2x
    loss = ad.sumsq(tape, y)  # (2x)^2 -> dloss/dx = 8x
    x.grad = np.zeros_like(x.value)
    ad.backward(tape, loss)
    assert np.allclose(x.grad, 8.0 * x.value)


def test_backward_visits_each_node_once():
    calls = []
    x = leaf(np.ones((2, 2)), "x")
    tape = GradientTape()
    y = ad.scale(tape, x, 2.0)
    z = ad.sumsq(tape, y)
    orig = y.backward_fn

    def spy(g):
        calls.append(1)
        orig(g)

    y.backward_fn = spy
    x.grad = np.zeros_like(x.value)
    ad.backward(tape, z)
    assert len(calls) == 1


def test_mean_stack():
    rng = np.random.default_rng(9)
    xs = [leaf(rng.normal(size=(2, 2)), f"x{i}") for i in range(3)]

    def loss(tape):
        return ad.mean_stack(tape, [ad.sumsq(tape, x) for x in xs])

    _check(loss, xs)


def test_unused_branch_gets_zero_gradient():
    x = leaf(np.ones((2, 2)), "x")
    y = leaf(np.ones((2, 2)), "y")
    tape = GradientTape()
    side = ad.scale(tape, y, 3.0)  # recorded but never reaches the loss
    loss = ad.sumsq(tape, x)
    x.grad = np.zeros_like(x.value)
    y.grad = np.zeros_like(y.value)
    ad.backward(tape, loss)
    assert np.all(y.grad == 0.0)
