import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_batch, random_mlp
from sharpness_lab.errors import ConfigError, DivergenceError
from sharpness_lab.experiments import toy_loss_and_grad
from sharpness_lab.models import (
    ModelSpec,
    ParameterLayout,
    ParameterVector,
    apply_node_scaling,
    build_model,
    loss_and_grad,
    model_objective,
)
from sharpness_lab.normops import PerturbationConfig
from sharpness_lab.optim import (
    asam_ascent,
    base_step,
    init_state,
    learning_rate,
    m_sharpness_grad,
    plain_update,
    sam_ascent,
    sharpness_aware_grad,
    two_step_update,
)

ADAPTIVE = dict(scheme="elementwise", eta=0.0, bias_normalized=True)


def flat(values):
    values = np.asarray(values, dtype=np.float64)
    return ParameterVector(values, ParameterLayout.flat(values.size))


def node_diagonal(w, node, c):
    a = np.ones(w.layout.k)
    info = w.layout.nodes[node]
    a[info.incoming] *= c
    a[info.bias] *= c
    a[info.outgoing] /= c
    return a


# ascent directions


def test_sam_ascent_axis_aligned():
    np.testing.assert_array_equal(sam_ascent([1.0, 0.0], 0.05), [0.05, 0.0])


def test_sam_ascent_three_four_five():
    np.testing.assert_allclose(sam_ascent([3.0, 4.0], 1.0), [0.6, 0.8], rtol=0, atol=1e-15)


def test_sam_ascent_zero_gradient():
    np.testing.assert_array_equal(sam_ascent([0.0, 0.0], 0.05), [0.0, 0.0])
    np.testing.assert_array_equal(sam_ascent([1e-13, 0.0], 0.05), [0.0, 0.0])


def test_identity_asam_equals_sam():
    cfg = PerturbationConfig(rho=1.0, p=2, scheme="identity")
    eps = asam_ascent(flat([7.0, -2.0]), [3.0, 4.0], cfg)
    np.testing.assert_array_equal(eps, sam_ascent([3.0, 4.0], 1.0))
    np.testing.assert_allclose(eps, [0.6, 0.8], atol=1e-15)


def test_asam_toy_example_p2():
    w = flat([0.2, 0.05])
    _, g = toy_loss_and_grad(w.values)
    eps = asam_ascent(w, g, PerturbationConfig(rho=0.05, p=2, scheme="elementwise", eta=0.0))
    # Tg = (-0.01, -0.01), |Tg| = 0.01*sqrt(2); eps = rho * T^2 g / |Tg|
    expected = 0.05 * np.array([0.04 * -0.05, 0.0025 * -0.2]) / (0.01 * math.sqrt(2))
    np.testing.assert_allclose(eps, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(eps, [-0.0070711, -0.0017678], atol=1e-7)


def test_asam_pinf_example():
    eps = asam_ascent(flat([2.0, 0.5]), [-1.0, 3.0], PerturbationConfig(rho=0.1, p="inf", scheme="elementwise", eta=0.0))
    # rho * T * sign(g) = 0.1 * (2 * -1, 0.5 * +1); the gradient magnitude plays no part
    np.testing.assert_allclose(eps, [-0.2, 0.05], rtol=0, atol=1e-16)


def test_asam_pinf_sign_of_zero():
    eps = asam_ascent(flat([2.0, 0.5]), [0.0, -3.0], PerturbationConfig(rho=0.1, p="inf", eta=0.0))
    np.testing.assert_array_equal(eps, [0.0, -0.05])


def test_asam_p2_zero_gradient():
    eps = asam_ascent(flat([2.0, 0.5]), [0.0, 0.0], PerturbationConfig(rho=0.1, eta=0.0))
    np.testing.assert_array_equal(eps, [0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2.0, math.inf]))
def test_asam_perturbation_lies_on_ball_boundary(seed, p):
    rng = np.random.default_rng(seed)
    w = flat(rng.standard_normal(10))
    g = rng.standard_normal(10)
    cfg = PerturbationConfig(rho=0.3, p=p, eta=0.01)
    eps = asam_ascent(w, g, cfg)
    u = eps / (np.abs(w.values) + 0.01)
    norm = np.max(np.abs(u)) if math.isinf(p) else np.linalg.norm(u)
    assert norm == pytest.approx(0.3, rel=1e-12)


# base optimizers


def test_init_state_validation():
    with pytest.raises(ConfigError):
        init_state("rmsprop", 3, 0.1)
    with pytest.raises(ConfigError):
        init_state("sgd", 3, 0.0)
    with pytest.raises(ConfigError):
        init_state("sgd", 3, 0.1, schedule="cosine")


def test_cosine_schedule_endpoints():
    state = init_state("sgd", 1, 0.2, schedule="cosine", total_steps=10)
    assert learning_rate(state) == 0.2
    _, state5 = base_step(np.zeros(1), np.zeros(1), state)
    for _ in range(4):
        _, state5 = base_step(np.zeros(1), np.zeros(1), state5)
    assert learning_rate(state5) == pytest.approx(0.1, abs=1e-15)


def test_sgd_step_folds_weight_decay_before_momentum():
    state = init_state("sgd", 2, 0.1, momentum=0.9, weight_decay=0.5)
    w = np.array([1.0, -2.0])
    g = np.array([0.5, 0.5])
    w1, state = base_step(w, g, state)
    eff0 = g + 0.5 * w
    np.testing.assert_allclose(w1, w - 0.1 * eff0, atol=1e-16)
    w2, state = base_step(w1, g, state)
    buf = 0.9 * eff0 + (g + 0.5 * w1)
    np.testing.assert_allclose(w2, w1 - 0.1 * buf, atol=1e-16)
    assert state.t == 2


def test_adam_first_step_is_signed_lr():
    state = init_state("adam", 3, 0.01)
    w, state = base_step(np.zeros(3), np.array([2.0, -0.5, 0.0]), state)
    # bias-corrected moments give g / (|g| + eps)
    np.testing.assert_allclose(w, [-0.01, 0.01, 0.0], rtol=1e-7)
    assert state.t == 1
    assert (state.beta1, state.beta2) == (0.9, 0.98)


def test_base_step_length_mismatch():
    with pytest.raises(ValueError):
        base_step(np.zeros(3), np.zeros(3), init_state("sgd", 2, 0.1))


# two-step update


def test_scalar_sam_step_by_hand():
    def objective(v):
        return 0.5 * float(v[0] ** 2), np.array([v[0]])

    state = init_state("sgd", 1, 0.1)
    w, _ = two_step_update(flat([1.0]), state, objective, PerturbationConfig.sam(0.05), use_asam=False)
    assert w.values[0] == pytest.approx(1.0 - 0.1 * (1.0 + 0.05), abs=1e-15)


@pytest.mark.parametrize("use_asam", [False, True])
@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_rho_zero_is_base_optimizer(use_asam, kind, rng):
    spec = ModelSpec.mlp(3, 5, 2)
    w0 = build_model(spec, 0)
    batch = random_batch(rng, spec, 12)
    obj = model_objective(spec, w0.layout, batch)
    cfg = PerturbationConfig(rho=0.0)
    a, sa = w0, init_state(kind, w0.layout.k, 0.05, momentum=0.9, weight_decay=1e-3)
    b, sb = w0, sa
    for _ in range(10):
        a, sa = two_step_update(a, sa, obj, cfg, use_asam=use_asam)
        b, sb = plain_update(b, sb, obj)
    assert np.max(np.abs(a.values - b.values)) <= 1e-12


def test_degenerates_to_gradient_descent(rng):
    spec = ModelSpec.mlp(3, 4, 2)
    w = build_model(spec, 1)
    obj = model_objective(spec, w.layout, random_batch(rng, spec, 8))
    state = init_state("sgd", w.layout.k, 0.1)
    _, g = obj(w.values)
    new, _ = two_step_update(w, state, obj, PerturbationConfig(rho=0.0))
    np.testing.assert_array_equal(new.values, w.values - 0.1 * g)


def test_identity_asam_tracks_sam_on_toy():
    sam_cfg = PerturbationConfig.sam(0.05)
    id_cfg = PerturbationConfig(rho=0.05, scheme="identity", eta=0.01)
    a = b = flat([0.2, 0.05])
    sa = sb = init_state("sgd", 2, 0.01)
    worst = 0.0
    for _ in range(100):
        a, sa = two_step_update(a, sa, toy_loss_and_grad, sam_cfg, use_asam=False)
        b, sb = two_step_update(b, sb, toy_loss_and_grad, id_cfg, use_asam=True)
        worst = max(worst, float(np.max(np.abs(a.values - b.values))))
    assert worst < 1e-12


def test_update_never_persists_perturbation():
    w = flat([0.2, 0.05])
    state = init_state("sgd", 2, 0.01)
    cfg = PerturbationConfig(rho=0.5, eta=0.0)
    _, eps, pgrad = sharpness_aware_grad(w, toy_loss_and_grad, cfg)
    new, state = two_step_update(w, state, toy_loss_and_grad, cfg)
    np.testing.assert_array_equal(new.values, w.values - 0.01 * pgrad)
    assert np.any(eps != 0)
    assert state.last_loss == toy_loss_and_grad(w.values)[0]


def test_non_finite_loss_raises_divergence_with_step():
    def objective(v):
        return math.nan, np.zeros_like(v)

    state = init_state("sgd", 2, 0.1)
    state = state.__class__(**{**state.__dict__, "t": 7})
    with pytest.raises(DivergenceError) as err:
        two_step_update(flat([1.0, 1.0]), state, objective, PerturbationConfig())
    assert err.value.step == 7


def test_non_finite_perturbed_loss_raises():
    def objective(v):
        if v[0] != 1.0:
            return math.inf, np.zeros_like(v)
        return 1.0, np.array([1.0, 0.0])

    with pytest.raises(DivergenceError):
        two_step_update(flat([1.0, 1.0]), init_state("sgd", 2, 0.1), objective, PerturbationConfig())


# scale equivariance


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0), st.sampled_from([2.0, math.inf]))
def test_asam_perturbation_is_scale_equivariant(seed, c, p):
    rng = np.random.default_rng(seed)
    spec, w = random_mlp(rng)
    batch = random_batch(rng, spec)
    node = int(rng.integers(len(w.layout.nodes)))
    aw = apply_node_scaling(w, node, c)
    a = node_diagonal(w, node, c)
    cfg = PerturbationConfig(rho=0.5 if p == 2 else 0.05, p=p, **ADAPTIVE)
    _, g = loss_and_grad(w, spec, batch)
    _, g_a = loss_and_grad(aw, spec, batch)
    eps = asam_ascent(w, g, cfg)
    eps_a = asam_ascent(aw, g_a, cfg)
    assert np.max(np.abs(eps_a - a * eps)) < 1e-10
    lw = loss_and_grad(w.with_values(w.values + eps), spec, batch)[0]
    law = loss_and_grad(aw.with_values(aw.values + eps_a), spec, batch)[0]
    assert abs(lw - law) < 1e-9


def test_sam_is_not_scale_invariant_on_toy():
    w = flat([1.0, 1.0])
    aw = flat([3.0, 1.0 / 3.0])
    assert toy_loss_and_grad(w.values)[0] == pytest.approx(toy_loss_and_grad(aw.values)[0], abs=1e-15)

    def perturbed(v, cfg, use_asam):
        _, g = toy_loss_and_grad(v.values)
        eps = asam_ascent(v, g, cfg) if use_asam else sam_ascent(g, cfg.rho)
        return toy_loss_and_grad(v.values + eps)[0]

    sam = PerturbationConfig.sam(0.05)
    assert abs(perturbed(w, sam, False) - perturbed(aw, sam, False)) > 1e-4
    asam = PerturbationConfig(rho=0.05, eta=0.0)
    assert abs(perturbed(w, asam, True) - perturbed(aw, asam, True)) < 1e-12


# m-sharpness


def _model_setup(rng, n=8):
    spec = ModelSpec.mlp(3, 6, 2)
    w = build_model(spec, 9)
    return spec, w, random_batch(rng, spec, n)


def test_m_equal_to_batch_is_single_chunk(rng):
    spec, w, batch = _model_setup(rng)
    cfg = PerturbationConfig(rho=0.5)
    _, grad = m_sharpness_grad(w, spec, batch, 8, cfg)
    _, _, pgrad = sharpness_aware_grad(w, model_objective(spec, w.layout, batch), cfg)
    np.testing.assert_array_equal(grad, pgrad)


@pytest.mark.parametrize("m", [1, 2, 3, 8])
def test_identical_samples_any_m(m, rng):
    spec, w, (x, y) = _model_setup(rng, 1)
    cfg = PerturbationConfig(rho=0.5)
    batch = (np.repeat(x, 8, axis=0), np.repeat(y, 8))
    _, grad = m_sharpness_grad(w, spec, batch, m, cfg)
    _, _, single = sharpness_aware_grad(w, model_objective(spec, w.layout, (x, y)), cfg)
    np.testing.assert_allclose(grad, single, rtol=0, atol=1e-14)


def test_two_chunk_oracle(rng):
    spec, w, (x, y) = _model_setup(rng)
    cfg = PerturbationConfig(rho=0.5, p="inf", eta=0.01)
    _, grad = m_sharpness_grad(w, spec, (x, y), 4, cfg)
    chunk_grads = []
    for lo in (0, 4):
        part = (x[lo : lo + 4], y[lo : lo + 4])
        _, g = loss_and_grad(w, spec, part)
        scales = np.abs(w.values) + 0.01
        scales[w.layout.bias_mask] = 1.0
        eps = 0.5 * scales * np.sign(g)
        chunk_grads.append(loss_and_grad(w.with_values(w.values + eps), spec, part)[1])
    np.testing.assert_allclose(grad, 0.5 * (chunk_grads[0] + chunk_grads[1]), rtol=0, atol=1e-15)


def test_m_must_be_positive(rng):
    spec, w, batch = _model_setup(rng)
    with pytest.raises(ValueError):
        m_sharpness_grad(w, spec, batch, 0, PerturbationConfig())
