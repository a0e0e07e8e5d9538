import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localbif.data import Example, linear_teacher, two_gaussians
from localbif.errors import (
    DimensionError,
    HessianCapError,
    NumericalOverflowError,
    UnsupportedDecompositionError,
    ValidationError,
)
from localbif.models import (
    ModelSpec,
    batch_grads,
    component_losses,
    grad,
    hessian,
    hvp,
    init_params,
    loss,
    per_example_hessians,
)

SPECS = [
    ModelSpec("linear-regression", (3, 1)),
    ModelSpec("linear-regression", (2, 3), bias=False),
    ModelSpec("logistic-regression", (3, 1)),
    ModelSpec("logistic-regression", (2, 4)),
    ModelSpec("mlp", (2, 3, 1), "tanh"),
    ModelSpec("mlp", (2, 3, 2, 2), "tanh"),
    ModelSpec("mlp", (3, 4, 3), "tanh", loss="nll"),
    ModelSpec("mlp", (2, 3, 1), "identity"),
]


def random_example(spec, rng):
    x = rng.standard_normal(spec.input_dim)
    if spec.loss == "squared":
        return Example(x, rng.standard_normal(spec.output_dim))
    n_classes = 2 if spec.output_dim == 1 else spec.output_dim
    return Example(x, int(rng.integers(n_classes)))


def fd_grad(spec, w, ex, h=1e-5):
    g = np.zeros_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        g[k] = (loss(spec, w + e, ex) - loss(spec, w - e, ex)) / (2 * h)
    return g


def fd_hessian(spec, w, exs, h=1e-4):
    H = np.zeros((w.size, w.size))
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        gp = sum(grad(spec, w + e, ex) for ex in exs)
        gm = sum(grad(spec, w - e, ex) for ex in exs)
        H[:, k] = (gp - gm) / (2 * h)
    return H


def test_spec_parameter_counts():
    assert ModelSpec("linear-regression", (1, 1), bias=False).d == 1
    assert ModelSpec("mlp", (1, 2, 1), "tanh").d == 7
    assert ModelSpec("mlp", (2, 3, 1), "tanh", bias=False).d == 9


@pytest.mark.parametrize("kwargs", [
    dict(kind="cnn", widths=(1, 1)),
    dict(kind="mlp", widths=(2, 1)),
    dict(kind="mlp", widths=(2, 0, 1)),
    dict(kind="linear-regression", widths=(2, 1), activation="tanh"),
    dict(kind="logistic-regression", widths=(2, 1), loss="squared"),
])
def test_spec_rejects_invalid(kwargs):
    with pytest.raises(ValidationError):
        ModelSpec(**kwargs)


def test_linear_regression_loss_zero_at_fit():
    spec = ModelSpec("linear-regression", (1, 1), bias=False)
    assert loss(spec, [2.0], Example([1.0], [2.0])) == 0.0


def test_logistic_zero_weights_is_ln2():
    spec = ModelSpec("logistic-regression", (4, 1))
    for y in (0, 1):
        assert loss(spec, np.zeros(spec.d), Example([0.3, -1, 2, 5], y)) == pytest.approx(math.log(2), abs=1e-15)
    spec2 = ModelSpec("logistic-regression", (4, 2))
    assert loss(spec2, np.zeros(spec2.d), Example([1, 2, 3, 4], 1)) == pytest.approx(math.log(2), abs=1e-15)


def test_mlp_forward_matches_straight_line_oracle():
    # tanh(0.1), tanh(-0.2) hidden units; frozen from a scalar-math scratch computation
    spec = ModelSpec("mlp", (1, 2, 1), "tanh")
    w = [0.1, -0.2, 0.05, -0.1, 0.3, -0.4, 0.2]
    assert loss(spec, w, Example([0.5], [1.0])) == pytest.approx(0.23884379737525013, rel=1e-14)


def test_linear_grad_closed_form():
    spec = ModelSpec("linear-regression", (1, 1), bias=False)
    np.testing.assert_allclose(grad(spec, [3.0], Example([1.0], [2.0])), [1.0])


def test_grad_zero_at_interpolating_optimum():
    spec = ModelSpec("linear-regression", (2, 1))
    w = np.array([1.5, -0.5, 0.25])
    ex = Example([2.0, 1.0], [1.5 * 2 - 0.5 + 0.25])
    np.testing.assert_array_equal(grad(spec, w, ex), np.zeros(3))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}{s.widths}{s.loss}")
def test_gradient_check(spec):
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = init_params(spec, rng) + 0.1 * rng.standard_normal(spec.d)
        ex = random_example(spec, rng)
        g = grad(spec, w, ex)
        g_fd = fd_grad(spec, w, ex)
        np.testing.assert_allclose(g, g_fd, rtol=1e-6, atol=1e-8)


def test_mlp_gradient_seed0_example():
    spec = ModelSpec("mlp", (2, 3, 1), "tanh")
    rng = np.random.default_rng(0)
    w = init_params(spec, rng)
    ex = Example([0.3, -0.7], [0.5])
    np.testing.assert_allclose(grad(spec, w, ex), fd_grad(spec, w, ex), rtol=1e-6, atol=1e-8)


def test_hessian_linear_sum_of_squares():
    spec = ModelSpec("linear-regression", (1, 1), bias=False)
    H = hessian(spec, [0.7], [Example([1.0], [3.0]), Example([2.0], [-1.0])])
    np.testing.assert_array_equal(H, [[5.0]])


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}{s.widths}{s.loss}")
def test_hessian_check_and_symmetry(spec):
    rng = np.random.default_rng(1)
    for _ in range(10):
        w = init_params(spec, rng) + 0.1 * rng.standard_normal(spec.d)
        exs = [random_example(spec, rng) for _ in range(3)]
        H = hessian(spec, w, exs)
        assert np.max(np.abs(H - H.T)) == 0.0
        np.testing.assert_allclose(H, fd_hessian(spec, w, exs), rtol=1e-5, atol=1e-7)


def test_mlp_hessian_seed0_three_examples():
    spec = ModelSpec("mlp", (1, 2, 1), "tanh")
    w = init_params(spec, np.random.default_rng(0))
    exs = [Example([0.5], [1.0]), Example([-1.0], [0.2]), Example([2.0], [-0.3])]
    np.testing.assert_allclose(hessian(spec, w, exs), fd_hessian(spec, w, exs), rtol=1e-5, atol=1e-8)


def test_single_layer_closed_form_agrees_with_r_operator():
    # the single-layer Hessian is closed form; the R-operator path must agree
    rng = np.random.default_rng(2)
    for spec in SPECS[:4]:
        w = init_params(spec, rng)
        exs = [random_example(spec, rng) for _ in range(4)]
        H = hessian(spec, w, exs)
        H_r = np.stack([hvp(spec, w, exs, e) for e in np.eye(spec.d)], axis=1)
        np.testing.assert_allclose(H, H_r, rtol=1e-12, atol=1e-12)


def test_per_example_hessians_sum_to_total():
    spec = ModelSpec("mlp", (2, 3, 1), "tanh")
    rng = np.random.default_rng(3)
    w = init_params(spec, rng)
    exs = [random_example(spec, rng) for _ in range(4)]
    np.testing.assert_allclose(per_example_hessians(spec, w, exs).sum(0), hessian(spec, w, exs), atol=1e-12)


def test_hessian_cap():
    spec = ModelSpec("mlp", (10, 50, 1), "tanh")
    with pytest.raises(HessianCapError) as info:
        hessian(spec, np.zeros(spec.d), [Example(np.zeros(10), [0.0])], cap=100)
    assert info.value.d == spec.d and info.value.cap == 100


def test_component_losses_perfect_fit():
    spec = ModelSpec("linear-regression", (2, 2), bias=False)
    w = np.array([1.0, 0.0, 0.0, 1.0])
    np.testing.assert_array_equal(component_losses(spec, w, Example([3.0, -2.0], [3.0, -2.0], 2)), [0.0, 0.0])


def test_component_losses_sum_identity():
    rng = np.random.default_rng(4)
    for _ in range(50):
        S = int(rng.integers(1, 4))
        spec = ModelSpec("mlp", (2, 3, 2 * S), "tanh")
        w = init_params(spec, rng)
        ex = Example(rng.standard_normal(2), rng.standard_normal(2 * S), S)
        c = component_losses(spec, w, ex)
        assert c.shape == (S,)
        assert c.sum() == pytest.approx(loss(spec, w, ex), rel=1e-12)


def test_component_losses_compose_from_single_outputs():
    rng = np.random.default_rng(5)
    spec2 = ModelSpec("linear-regression", (3, 2))
    w = rng.standard_normal(spec2.d)
    x, y = rng.standard_normal(3), rng.standard_normal(2)
    spec1 = ModelSpec("linear-regression", (3, 1))
    # row o of W and bias o form a one-output regression
    w_out = [np.concatenate([w[3 * o:3 * o + 3], w[6 + o:7 + o]]) for o in range(2)]
    expected = [loss(spec1, w_out[o], Example(x, [y[o]])) for o in range(2)]
    np.testing.assert_allclose(component_losses(spec2, w, Example(x, y, 2)), expected, rtol=1e-14)


def test_component_losses_require_components():
    spec = ModelSpec("linear-regression", (2, 2))
    with pytest.raises(UnsupportedDecompositionError):
        component_losses(spec, np.zeros(spec.d), Example([1, 2], [0, 0]))


def test_dimension_errors():
    spec = ModelSpec("linear-regression", (2, 1))
    with pytest.raises(DimensionError) as info:
        loss(spec, np.zeros(3), Example([1, 2, 3], [0.0]))
    assert "input" in str(info.value)
    with pytest.raises(DimensionError):
        loss(spec, np.zeros(4), Example([1, 2], [0.0]))


def test_overflow_is_reported():
    spec = ModelSpec("linear-regression", (1, 1), bias=False)
    with pytest.raises(NumericalOverflowError):
        loss(spec, [1e200], Example([1e200], [0.0]))


def test_nll_is_stable_for_large_logits():
    spec = ModelSpec("logistic-regression", (1, 3))
    w = np.array([1000.0, -1000.0, 0.0, 0, 0, 0])
    assert loss(spec, w, Example([1.0], 0)) == pytest.approx(0.0, abs=1e-300)
    assert loss(spec, w, Example([1.0], 1)) == pytest.approx(2000.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    for spec in SPECS:
        w = init_params(spec, rng) + rng.standard_normal(spec.d)
        assert loss(spec, w, random_example(spec, rng)) >= 0


def test_squared_loss_zero_iff_prediction_equals_target():
    spec = ModelSpec("linear-regression", (2, 1))
    w = np.array([0.5, -1.0, 0.25])
    x = np.array([1.0, 2.0])
    pred = 0.5 - 2.0 + 0.25
    assert loss(spec, w, Example(x, [pred])) == 0.0
    assert loss(spec, w, Example(x, [pred + 1e-6])) > 0.0


def test_determinism_bitwise():
    spec = ModelSpec("mlp", (2, 3, 1), "tanh")
    w = init_params(spec, np.random.default_rng(0))
    ex = Example([0.1, 0.2], [0.3])
    assert loss(spec, w, ex) == loss(spec, w, ex)
    assert np.array_equal(grad(spec, w, ex), grad(spec, w, ex))
    assert np.array_equal(hessian(spec, w, [ex]), hessian(spec, w, [ex]))


def test_batch_grads_match_single():
    spec = ModelSpec("mlp", (2, 3, 1), "tanh")
    rng = np.random.default_rng(6)
    w = init_params(spec, rng)
    exs = [random_example(spec, rng) for _ in range(5)]
    G = batch_grads(spec, w, exs)
    for k, ex in enumerate(exs):
        np.testing.assert_allclose(G[k], grad(spec, w, ex), atol=1e-14)


def test_generators_seeded():
    a, b = two_gaussians(20, 5, seed=3), two_gaussians(20, 5, seed=3)
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != two_gaussians(20, 5, seed=4).content_hash()
    lt = linear_teacher(10, 3, dim=4, out_dim=2, components=True)
    assert lt.train[0].components == 2 and lt.n == 10 and lt.q == 3
