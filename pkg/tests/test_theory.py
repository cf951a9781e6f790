import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trireweight import datasim as ds
from trireweight import models as M
from trireweight import theory as th
from trireweight import trainer as tr

CFG = M.ModelConfig()
GEO = ds.cluster_geometry(ds.SimConfig())


def uniform_theta(seed=0):
    theta, _ = M.init_params(CFG, seed)
    return {**theta, "W2": np.zeros_like(theta["W2"]), "b2": np.zeros_like(theta["b2"])}


@pytest.mark.parametrize("op,target,tol,value,expected", [
    ("<=", 1.0, 0.0, 1.0, True), ("<=", 1.0, 0.0, 1.1, False),
    (">=", 1.0, 0.0, 0.9, False), ("<", 0.0, 0.0, 0.0, False),
    (">", 0.5, 0.0, 0.51, True), ("abs<=", 0.0, 0.1, -0.05, True),
    ("abs<=", 0.0, 0.1, 0.2, False)])
def test_condition_comparisons(op, target, tol, value, expected):
    assert th.Condition("x", op, target, tol).holds({"x": value}) is expected


def test_report_json_round_trip_and_verdicts():
    rep = th.VerificationReport("demo", {"a": 1}, {"x": 0.25, "per": [{"s": 1}]},
                                [th.Condition("x", "<=", 0.5)], stderr=0.01, samples=10)
    doc = json.loads(rep.to_json())
    for key in ("check", "inputs", "measured", "target", "tolerance", "pass", "stderr",
                "samples", "verdict"):
        assert key in doc
    assert doc["pass"] is True and doc["verdict"] == "pass"
    back = th.VerificationReport.from_dict(doc)
    assert back.to_json() == rep.to_json()
    na = th.VerificationReport("demo", {}, {}, [], applicable=False)
    assert na.verdict == "not-applicable" and not na.passed
    with pytest.raises(ValueError):
        th.VerificationReport("demo", {}, {"x": math.nan}, [])


def test_decomposition_zero_gamma_is_exact():
    theta, _ = M.init_params(CFG, 1)
    rep = th.verify_risk_decomposition(0.0, 5, 10_000, theta, CFG, GEO)
    assert rep.measured["difference"] == 0.0 and rep.passed


@pytest.mark.parametrize("gamma", [0.1, 0.5, 1.0])
def test_decomposition_uniform_predictor_gives_log_c_on_both_sides(gamma):
    rep = th.verify_risk_decomposition(gamma, 5, 10_000, uniform_theta(), CFG, GEO)
    assert rep.measured["direct"] == pytest.approx(math.log(5), rel=1e-12)
    assert rep.measured["decomposed"] == pytest.approx(math.log(5), rel=1e-12)
    assert rep.passed


def test_decomposition_agrees_for_a_random_classifier():
    theta, _ = M.init_params(CFG, 2)
    rep = th.verify_risk_decomposition(0.3, 5, 20_000, theta, CFG, GEO, seed=3)
    assert rep.passed and rep.stderr > 0


def test_decomposition_input_validation():
    theta, _ = M.init_params(CFG, 0)
    with pytest.raises(ds.ConfigError):
        th.verify_risk_decomposition(1.5, 5, 10_000, theta, CFG, GEO)
    with pytest.raises(ds.ConfigError):
        th.verify_risk_decomposition(0.1, 5, 100, theta, CFG, GEO)
    with pytest.raises(ds.ConfigError):
        th.verify_risk_decomposition(0.1, 4, 10_000, theta, CFG, GEO)


def test_uniform_on_noise_probabilities_are_distributions():
    X = np.vstack([GEO.class_means, GEO.extra_mean[None]])
    p = th.bayes_uniform_on_noise_probs(X, GEO, 0.3)
    np.testing.assert_allclose(p.sum(1), 1.0, rtol=1e-12)
    # at the extra-cluster centre the prediction is close to uniform
    np.testing.assert_allclose(p[-1], 0.2, atol=0.05)
    assert np.all(np.argmax(p[:5], 1) == np.arange(5))


def test_noise_risk_bound_zero_gamma_has_no_gap():
    rep = th.verify_noise_risk_bound(ds.SimConfig(gamma=0.0), n_eval=20_000)
    assert rep.measured["gap"] == 0.0 and rep.passed


def test_fit_full_batch_separates_training_data():
    data = ds.make_original(ds.SimConfig(n_per_class=10))
    theta, steps = th.fit_full_batch(data.X, data.y, CFG, steps=500)
    assert 0 < steps <= 500
    assert tr.evaluate(theta, data, CFG)["accuracy"] == 1.0


# --- orderings ---

def _small_paired(seed, T=20):
    data = tr.TrainData.simulate(ds.SimConfig(n_per_class=6, n_test_per_class=10, seed=seed))
    return th.run_paired(data, tr.TrainerConfig(T=T, eval_every=10, seed=seed))


def test_orderings_report_and_representability():
    rep = th.verify_supervision_orderings([_small_paired(0), _small_paired(1)])
    assert rep.measured["representability_mismatches"] == 0
    assert rep.measured["seeds"] == 2


def test_orderings_refuse_mismatched_seeds():
    a, b = _small_paired(0), _small_paired(1)
    mixed = th.PairedRuns(a.originals, a.trireweight, b.sl, a.nsl, a.zero_weight, a.model)
    with pytest.raises(ds.ConfigError):
        th.verify_supervision_orderings([mixed])
    with pytest.raises(ds.ConfigError):
        th.verify_supervision_orderings([])


# --- monotone descent ---

SMALL = ds.SimConfig(n_per_class=8, n_test_per_class=10)


def test_monotone_descent_refuses_stochastic_metrics():
    res = tr.train_trireweight(tr.TrainData.simulate(SMALL), tr.TrainerConfig(T=10))
    with pytest.raises(ds.ConfigError):
        th.verify_monotone_descent(res.metrics)
    rep = th.verify_monotone_descent(res.metrics, relaxed=True)
    assert set(rep.target) == {"fraction_nonincreasing", "final_minus_initial"}


def test_monotone_descent_plain_gradient_descent_without_generated_data():
    data = tr.TrainData.simulate(SMALL)
    res = tr.train_baseline_sl(data.originals, tr.TrainerConfig(T=100, eta_theta=0.01,
                                                                full_batch=True))
    assert max(res.metrics.trace_grad_alpha_norm) == 0.0
    rep = th.verify_monotone_descent(res.metrics)
    assert rep.passed, rep.measured


def test_monotone_descent_stationary_when_inner_rate_is_zero():
    # theta never moves, so the outer loss is flat and its meta-gradient is exactly zero
    res = tr.train_trireweight(tr.TrainData.simulate(SMALL),
                               tr.TrainerConfig(T=20, eta_theta=0.0, full_batch=True))
    rep = th.verify_monotone_descent(res.metrics)
    assert rep.passed and rep.measured["flat_steps"] == 20


def test_monotone_descent_full_batch_with_generated_data():
    res = tr.train_trireweight(tr.TrainData.simulate(SMALL),
                               tr.TrainerConfig(T=100, eta_theta=0.01, full_batch=True))
    rep = th.verify_monotone_descent(res.metrics)
    assert rep.passed, rep.measured


def test_monotone_descent_flags_an_increase():
    m = tr.RunMetrics(full_batch=True)
    m.trace_t, m.trace_outer_before, m.trace_outer_after = [0, 1], [1.0, 0.9], [0.9, 0.95]
    m.trace_grad_alpha_norm = [1.0, 1.0]
    rep = th.verify_monotone_descent(m)
    assert not rep.passed and rep.measured["violations"] == 1


# --- generalization trend ---

@pytest.mark.parametrize("n_values", [[50, 100, 200], [50, 200, 100, 400], [50, 100, 200, 401]])
def test_trend_rejects_bad_n_values(n_values):
    with pytest.raises(ds.ConfigError):
        th.verify_generalization_trend(n_values, ds.SimConfig(), tr.TrainerConfig(T=1), [0])


# --- weight separation ---

def test_constant_weights_are_uninformative():
    noisy = np.array([True, False] * 50)
    rep = th.weight_noise_separation(np.full(100, 0.3), noisy)
    assert rep.measured["ranking_quality"] == 0.5 and not rep.passed


def test_oracle_weights_separate_perfectly():
    noisy = np.random.default_rng(0).random(200) < 0.3
    rep = th.weight_noise_separation((~noisy).astype(float), noisy, min_ranking_quality=0.8)
    assert rep.measured["ranking_quality"] == 1.0 and rep.passed


def test_all_clean_pool_is_not_applicable():
    rep = th.weight_noise_separation(np.linspace(0, 1, 10), np.zeros(10, bool))
    assert rep.verdict == "not-applicable"


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 0.9))
def test_separation_is_invariant_to_monotone_transforms(seed, frac):
    rng = np.random.default_rng(seed)
    noisy = rng.random(100) < frac
    if noisy.all() or not noisy.any():
        return
    w = rng.random(100) + (~noisy) * 0.3
    a = th.weight_noise_separation(w, noisy)
    b = th.weight_noise_separation(np.exp(3 * w), noisy)
    assert a.measured["ranking_quality"] == b.measured["ranking_quality"]
    assert a.measured["quintile_clean_fraction"] == b.measured["quintile_clean_fraction"]
