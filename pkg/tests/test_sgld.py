import numpy as np
import pytest

from localbif.data import DatasetSplit, Example, linear_teacher
from localbif.errors import DivergenceError, UnsupportedDecompositionError, ValidationError
from localbif.models import ModelSpec, batch_losses, component_losses
from localbif.sgld import (
    ChainTrace,
    RmspropState,
    SgldConfig,
    chain_rng,
    observable_set_from_queries,
    run_chains,
    sgld_step,
)

SCALAR = ModelSpec("linear-regression", (1, 1), bias=False)


def scalar_problem():
    # one example x=1, y=0: loss = w^2 / 2, curvature h = 1, minimum at 0
    return DatasetSplit([Example([1.0], [0.0])], [Example([1.0], [0.0])])


def ar1_stationary_variance(eps, precision):
    a = 1.0 - 0.5 * eps * precision
    return eps / (1.0 - a * a)


def test_config_defaults_match_retraining_row():
    cfg = SgldConfig()
    assert (cfg.batch_size, cfg.chains, cfg.draws_per_chain, cfg.burn_in) == (1024, 4, 100, 0)
    assert (cfg.epsilon, cfg.n_beta, cfg.gamma) == (1e-5, 200.0, 10000.0)


@pytest.mark.parametrize("kwargs", [
    dict(epsilon=0.0), dict(epsilon=-1.0), dict(n_beta=0.0), dict(gamma=-1.0),
    dict(batch_size=0), dict(chains=0), dict(draws_per_chain=1), dict(burn_in=-1),
    dict(seed=-1), dict(preconditioner="adam"), dict(weight_mask=(False, False)),
    dict(rmsprop_decay=1.0),
])
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        SgldConfig(**kwargs)


def test_step_at_rest_is_fixed_point():
    cfg = SgldConfig(epsilon=0.1, gamma=2.0, n_beta=5.0, batch_size=1, zero_noise=True)
    w = sgld_step(SCALAR, [0.0], [0.0], [Example([1.0], [0.0])], cfg, chain_rng(0, 0))
    np.testing.assert_array_equal(w, [0.0])


def test_step_localization_pull():
    # y = w x makes the loss zero for x = 0, so only the pull acts
    cfg = SgldConfig(epsilon=0.1, gamma=2.0, batch_size=1, zero_noise=True)
    w = sgld_step(SCALAR, [1.0], [0.0], [Example([0.0], [0.0])], cfg, chain_rng(0, 0))
    np.testing.assert_allclose(w, [0.9], rtol=1e-15)


def test_step_matches_update_rule_with_noise():
    spec = ModelSpec("linear-regression", (2, 1))
    rng = np.random.default_rng(0)
    w, w_star = rng.standard_normal(3), rng.standard_normal(3)
    batch = [Example(rng.standard_normal(2), rng.standard_normal(1)) for _ in range(4)]
    cfg = SgldConfig(epsilon=1e-2, n_beta=30.0, gamma=7.0, batch_size=4)
    got = sgld_step(spec, w, w_star, batch, cfg, chain_rng(3, 1))
    noise = chain_rng(3, 1).standard_normal(3)
    g = sum((np.dot(w[:2], ex.features) + w[2] - ex.target[0]) * np.append(ex.features, 1.0) for ex in batch)
    expected = w - 0.005 * ((30.0 / 4) * g + 7.0 * (w - w_star)) + np.sqrt(1e-2) * noise
    np.testing.assert_allclose(got, expected, rtol=1e-13)


def test_step_mask_freezes_coordinates():
    spec = ModelSpec("linear-regression", (2, 1))
    cfg = SgldConfig(epsilon=0.1, gamma=1.0, batch_size=1, weight_mask=(True, False, True))
    w0 = np.array([0.3, -0.4, 0.5])
    w = sgld_step(spec, w0, np.zeros(3), [Example([1.0, 2.0], [0.0])], cfg, chain_rng(0, 0))
    assert w[1] == w0[1]
    assert w[0] != w0[0] and w[2] != w0[2]


def test_rmsprop_step_first_update():
    # bias-corrected second moment equals drift^2 on the first step
    cfg = SgldConfig(epsilon=1e-2, gamma=4.0, batch_size=1, preconditioner="rmsprop", zero_noise=True)
    state = RmspropState.zeros(1)
    w = sgld_step(SCALAR, [1.0], [0.0], [Example([0.0], [0.0])], cfg, chain_rng(0, 0), precond=state)
    drift = 4.0
    np.testing.assert_allclose(w, [1.0 - 0.5 * 1e-2 * drift / (abs(drift) + 1e-8)], rtol=1e-14)
    assert state.steps == 1


def test_divergence_error_carries_step():
    cfg = SgldConfig(epsilon=1.0, n_beta=1e13, gamma=0.0, batch_size=1, zero_noise=True)
    with pytest.raises(DivergenceError) as info:
        sgld_step(SCALAR, [1.0], [0.0], [Example([1.0], [0.0])], cfg, chain_rng(0, 0), step_index=7)
    assert info.value.step == 7 and info.value.max_abs > 1e12


def test_run_chains_divergence_is_annotated_with_chain():
    cfg = SgldConfig(epsilon=1.0, n_beta=100.0, gamma=0.0, batch_size=1, chains=2, draws_per_chain=50)
    data = scalar_problem()
    with pytest.raises(DivergenceError) as info:
        run_chains(SCALAR, [1.0], data, observable_set_from_queries(data), cfg)
    assert info.value.chain == 0


def test_trace_bookkeeping():
    data = linear_teacher(6, 3, dim=2, seed=0)
    spec = ModelSpec("linear-regression", (2, 1))
    cfg = SgldConfig(epsilon=1e-3, n_beta=6, gamma=10, batch_size=2, chains=2, draws_per_chain=3, burn_in=1)
    tr = run_chains(spec, np.zeros(3), data, observable_set_from_queries(data), cfg)
    assert tr.train_losses.shape == (6, 6)
    assert tr.observables.shape == (3, 6)
    assert tr.draw_count == 6 and tr.chain_boundaries == (0, 3, 6)
    assert tr.row_labels[0] == "train/0" and tr.col_labels[2] == "query/2"


def test_burn_in_draws_are_discarded():
    data = linear_teacher(6, 3, dim=2, seed=0)
    spec = ModelSpec("linear-regression", (2, 1))
    base = dict(epsilon=1e-2, n_beta=6, gamma=10, batch_size=2, chains=1, seed=5)
    full = run_chains(spec, np.zeros(3), data, observable_set_from_queries(data),
                      SgldConfig(draws_per_chain=5, burn_in=0, **base))
    burned = run_chains(spec, np.zeros(3), data, observable_set_from_queries(data),
                        SgldConfig(draws_per_chain=3, burn_in=2, **base))
    np.testing.assert_array_equal(burned.train_losses, full.train_losses[:, 2:])


def test_first_column_is_checkpoint_and_tiny_steps_do_not_move():
    data = linear_teacher(8, 2, dim=3, seed=1)
    spec = ModelSpec("linear-regression", (3, 1))
    w_star = np.array([0.1, 0.2, -0.3, 0.05])
    cfg = SgldConfig(epsilon=1e-30, n_beta=8, gamma=1, batch_size=4, chains=2, draws_per_chain=4, zero_noise=True)
    tr = run_chains(spec, w_star, data, observable_set_from_queries(data), cfg)
    expected = batch_losses(spec, w_star, data.train)
    for col in tr.train_losses.T:
        np.testing.assert_array_equal(col, expected)


def test_same_seed_bit_identical_and_worker_independent():
    data = linear_teacher(10, 4, dim=3, seed=2)
    spec = ModelSpec("mlp", (3, 4, 1), "tanh")
    w_star = np.random.default_rng(0).standard_normal(spec.d) * 0.3
    cfg = SgldConfig(epsilon=1e-3, n_beta=10, gamma=50, batch_size=5, chains=3, draws_per_chain=40, seed=11)
    obs = observable_set_from_queries(data)
    a = run_chains(spec, w_star, data, obs, cfg)
    b = run_chains(spec, w_star, data, obs, cfg)
    c = run_chains(spec, w_star, data, obs, cfg, workers=3)
    for other in (b, c):
        assert a.train_losses.tobytes() == other.train_losses.tobytes()
        assert a.observables.tobytes() == other.observables.tobytes()
    d = run_chains(spec, w_star, data, obs, SgldConfig(**{**cfg.__dict__, "seed": 12}))
    assert a.train_losses.tobytes() != d.train_losses.tobytes()


def test_chains_use_distinct_streams():
    data = scalar_problem()
    cfg = SgldConfig(epsilon=1e-2, n_beta=1, gamma=1, batch_size=1, chains=2, draws_per_chain=20)
    tr = run_chains(SCALAR, [0.0], data, observable_set_from_queries(data), cfg)
    assert not np.array_equal(tr.train_losses[:, :20], tr.train_losses[:, 20:])


def test_masked_coordinates_stay_at_checkpoint():
    spec = ModelSpec("linear-regression", (2, 1), bias=False)
    # the query loss depends only on the masked coordinate
    data = DatasetSplit([Example([1.0, 1.0], [0.3]), Example([1.0, -1.0], [0.1])], [Example([0.0, 1.0], [0.0])])
    w_star = np.array([0.2, 0.1])
    cfg = SgldConfig(epsilon=1e-2, n_beta=2, gamma=1, batch_size=1, chains=2, draws_per_chain=50,
                     weight_mask=(True, False))
    tr = run_chains(spec, w_star, data, observable_set_from_queries(data), cfg)
    assert np.all(tr.observables == 0.5 * 0.1 ** 2)


def test_observable_sets():
    data = linear_teacher(4, 3, dim=2, seed=0)
    assert len(observable_set_from_queries(data)) == 3
    comp = linear_teacher(4, 2, dim=2, out_dim=4, seed=0, components=True)
    obs = observable_set_from_queries(comp, per_component=True)
    assert len(obs) == 8
    assert obs.labels[:5] == ("query/0/0", "query/0/1", "query/0/2", "query/0/3", "query/1/0")
    spec = ModelSpec("linear-regression", (2, 4))
    w = np.random.default_rng(1).standard_normal(spec.d)
    expected = np.concatenate([component_losses(spec, w, ex) for ex in comp.query])
    np.testing.assert_allclose(obs.evaluate(spec, w), expected, rtol=1e-15)
    plain = observable_set_from_queries(data)
    spec1 = ModelSpec("linear-regression", (2, 1))
    w1 = np.ones(3)
    np.testing.assert_array_equal(plain.evaluate(spec1, w1), batch_losses(spec1, w1, data.query))
    with pytest.raises(UnsupportedDecompositionError):
        observable_set_from_queries(data, per_component=True)


def test_per_component_train_rows():
    comp = linear_teacher(4, 2, dim=2, out_dim=2, seed=0, components=True)
    spec = ModelSpec("linear-regression", (2, 2))
    cfg = SgldConfig(epsilon=1e-3, n_beta=4, gamma=10, batch_size=2, chains=1, draws_per_chain=5)
    tr = run_chains(spec, np.zeros(spec.d), comp, observable_set_from_queries(comp, True), cfg,
                    per_component_train=True)
    assert tr.train_losses.shape == (8, 5) and tr.observables.shape == (4, 5)
    assert tr.row_labels[1] == "train/0/1"


def test_batch_size_larger_than_n_rejected():
    data = scalar_problem()
    with pytest.raises(ValidationError):
        run_chains(SCALAR, [0.0], data, observable_set_from_queries(data), SgldConfig())


def test_trace_rejects_non_finite():
    with pytest.raises(ValidationError):
        ChainTrace(np.array([[1.0, np.nan]]), np.zeros((1, 2)), (0, 2), ("a",), ("b",))


def _empirical_variance(gamma, draws, seed=0, n_beta=10.0, eps=1e-3):
    data = scalar_problem()
    chains = 4
    cfg = SgldConfig(epsilon=eps, n_beta=n_beta, gamma=gamma, batch_size=1, chains=chains,
                     draws_per_chain=draws // chains, burn_in=500, seed=seed)
    tr = run_chains(SCALAR, [0.0], data, observable_set_from_queries(data), cfg)
    w = np.sqrt(2 * tr.train_losses[0])  # |w|; the law is centered at w* = 0
    return np.mean(w * w)


def test_localization_monotonicity():
    variances = [_empirical_variance(g, 50_000) for g in (10.0, 100.0, 1000.0)]
    for a, b in zip(variances, variances[1:]):
        assert b <= a * 1.05
    for v, g in zip(variances, (10.0, 100.0, 1000.0)):
        assert v == pytest.approx(ar1_stationary_variance(1e-3, 10.0 + g), rel=0.1)
