import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bellman_calib.calibration import fitted_q_calibration
from bellman_calib.estimators import (
    InfluenceValues,
    PreconditionError,
    bootstrap_calibration_ci,
    bootstrap_calibration_estimates,
    contrast,
    drl_model_robust,
    drl_nonparametric,
    drl_semiparametric,
    eif_variance,
    empirical_occupancy_ratio,
    plugin_calibrated,
    wald_interval,
)
from bellman_calib.fqi import FQIConfig, cell_features, cross_fit_fqi
from bellman_calib.functionals import custom_linear, policy_value
from bellman_calib.mdp import Policy, TabularMDP, TabularQ, population_pseudo_data, tabular_occupancy_ratio, tabular_q_solve
from bellman_calib.regression import RegressorSpec
from bellman_calib.riesz import (
    RieszWeights,
    estimate_representer_dimreduced,
    estimate_representer_linear,
    one_hot_cells,
    second_stage_regression,
    tabular_weights,
)
from bellman_calib.simulation import (
    SimConfig,
    analytic_mdp,
    ate_functional,
    baseline_dist,
    generate_dataset,
    oracle_truth,
    stay_policy,
)

PI = stay_policy()
FN = ate_functional()
TAB = RegressorSpec("tabular-mean")


def tabular_base(data, gamma, folds=1):
    return cross_fit_fqi(data, PI, FQIConfig(gamma, TAB, cell_features(2)), folds, seed=0)


@pytest.fixture(scope="module")
def calibrated():
    data = generate_dataset(SimConfig(1500, 0.5, 0.3, seed=21))
    base = tabular_base(data, 0.5, folds=5)
    qstar, _ = fitted_q_calibration(data, PI, base, 0.5)
    return data, base, qstar


def ate_start_measure():
    """Signed measure the ATE functional puts on (s, a) cells."""
    base = baseline_dist().reshape(-1)
    start = np.zeros((162, 2))
    start[81:, 1] = base
    start[:81, 0] = -base
    return start


# -- functional --------------------------------------------------------------


@given(st.floats(-5, 5), st.floats(-5, 5))
@settings(max_examples=25, deadline=None)
def test_functional_linear_in_q(alpha, beta):
    rng = np.random.default_rng(0)
    q1, q2 = TabularQ(rng.normal(size=(162, 2))), TabularQ(rng.normal(size=(162, 2)))
    mix = TabularQ(alpha * q1.table + beta * q2.table)
    s = np.arange(162)
    a = s // 81
    assert np.allclose(FN(s, a, mix), alpha * FN(s, a, q1) + beta * FN(s, a, q2), atol=1e-12)


# -- calibrated plug-in ------------------------------------------------------


def test_plugin_is_mean_of_levels(calibrated):
    data, _, qstar = calibrated
    identity = custom_linear(lambda s, a, q: q(a, s))
    rep = plugin_calibrated(data, PI, identity, qstar, 0.5)
    v = qstar(data.a0, data.s0)
    levels, counts = np.unique(v, return_counts=True)
    assert rep.estimate == pytest.approx(np.dot(levels, counts) / data.n, abs=1e-12)


def test_plugin_requires_certificate(calibrated):
    data, base, _ = calibrated
    with pytest.raises(PreconditionError, match="residual"):
        plugin_calibrated(data, PI, FN, base, 0.5)


def test_correction_vanishes_for_calibrated_q(calibrated):
    data, _, qstar = calibrated
    plug = plugin_calibrated(data, PI, FN, qstar, 0.5)
    rw = estimate_representer_dimreduced(data, PI, FN, qstar, 0.5)
    drl = drl_semiparametric(data, PI, FN, qstar, rw, 0.5)
    assert abs(drl.diagnostics["correction"]) <= 1e-10
    assert drl.estimate == pytest.approx(plug.estimate, abs=1e-10)
    assert plug.se > 0 and plug.ci[0] <= plug.estimate <= plug.ci[1]


def test_influence_values_centred(calibrated):
    data, _, qstar = calibrated
    rep = plugin_calibrated(data, PI, FN, qstar, 0.5)
    assert abs(np.mean(rep.influence.values)) <= 1e-10
    assert rep.se == pytest.approx(np.sqrt(eif_variance(rep.influence)))


def test_plugin_linear_in_functional(calibrated):
    data, _, qstar = calibrated
    arm1, arm0 = FN.arms
    total = plugin_calibrated(data, PI, arm1 + arm0.scaled(2.0), qstar, 0.5).estimate
    parts = (plugin_calibrated(data, PI, arm1, qstar, 0.5).estimate
             + 2.0 * plugin_calibrated(data, PI, arm0, qstar, 0.5).estimate)
    assert total == pytest.approx(parts, abs=1e-10)


def test_ate_equals_difference_of_arms(calibrated):
    data, _, qstar = calibrated
    arm1, arm0 = FN.arms
    r1 = plugin_calibrated(data, PI, arm1, qstar, 0.5)
    r0 = plugin_calibrated(data, PI, arm0, qstar, 0.5)
    ate = plugin_calibrated(data, PI, FN, qstar, 0.5)
    diff = contrast(r1, r0)
    assert diff.estimate == pytest.approx(ate.estimate, abs=1e-12)
    assert diff.se == pytest.approx(ate.se, abs=1e-12)


# -- semiparametric / model-robust DRL ---------------------------------------


def test_drl_zero_weights_is_plugin(calibrated):
    data, base, _ = calibrated
    zero = RieszWeights(lambda a, s: np.zeros(np.shape(s)), None)
    rep = drl_semiparametric(data, PI, FN, base, zero, 0.5)
    assert rep.estimate == pytest.approx(np.mean(FN.values(data, base)), abs=1e-14)


def test_drl_oracle_q_zero_correction_on_population():
    cfg = SimConfig(1, 0.8, 0.3)
    mdp = analytic_mdp(cfg)
    data = population_pseudo_data(mdp, PI)
    q = tabular_q_solve(mdp, PI)
    weights = tabular_weights(tabular_occupancy_ratio(mdp, PI, PI, np.inf, start=ate_start_measure()))
    rep = drl_semiparametric(data, PI, FN, q, weights, 0.8)
    assert abs(rep.diagnostics["correction"]) <= 1e-12
    assert rep.estimate == pytest.approx(oracle_truth(cfg).true_ate, abs=1e-10)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 0.8])
def test_double_robustness_on_population(gamma):
    cfg = SimConfig(1, gamma, 0.6)
    mdp = analytic_mdp(cfg)
    data = population_pseudo_data(mdp, PI)
    truth = oracle_truth(cfg).true_ate
    exact_w = tabular_weights(tabular_occupancy_ratio(mdp, PI, PI, np.inf, start=ate_start_measure()))
    zero_q = TabularQ(np.zeros((162, 2)))
    assert drl_semiparametric(data, PI, FN, zero_q, exact_w, gamma).estimate == pytest.approx(truth, abs=1e-8)
    zero_w = RieszWeights(lambda a, s: np.zeros(np.shape(s)), None)
    exact_q = tabular_q_solve(mdp, PI)
    assert drl_semiparametric(data, PI, FN, exact_q, zero_w, gamma).estimate == pytest.approx(truth, abs=1e-8)


def test_robust_equals_semi_when_reward_tied(calibrated):
    data, base, _ = calibrated
    rw = estimate_representer_linear(data, PI, FN, one_hot_cells(162, 2), 0.5)
    t_q = second_stage_regression(data, PI, base, cell_features(2), TAB, 0.5)
    semi = drl_semiparametric(data, PI, FN, base, rw, 0.5)
    robust = drl_model_robust(data, PI, FN, base, rw, t_q, t_q, 0.5)
    assert robust.estimate == semi.estimate and robust.se == semi.se
    assert robust.ci == semi.ci


def test_robust_correction_small_for_saturated_class():
    cfg = SimConfig(1, 0.5, 0.3)
    mdp = analytic_mdp(cfg)
    data = population_pseudo_data(mdp, PI)
    q = tabular_q_solve(mdp, PI)
    cells = cell_features(2)
    rw = estimate_representer_linear(data, PI, FN, one_hot_cells(162, 2), 0.5, lam=1e-10)
    t_q = second_stage_regression(data, PI, q, cells, TAB, 0.5)
    r_hat = lambda a, s: mdp.reward_mean[np.asarray(s), np.asarray(a)]
    rep = drl_model_robust(data, PI, FN, q, rw, r_hat, t_q, 0.5)
    assert abs(rep.diagnostics["robust_correction"]) <= 1e-8


def test_robust_gamma_zero_independent_formula():
    data = generate_dataset(SimConfig(1200, 0.0, 0.0, seed=5))
    q = tabular_base(data, 0.0)
    rw = estimate_representer_linear(data, PI, FN, one_hot_cells(162, 2), 0.0)
    r_hat = lambda a, s: 0.9 * np.asarray(q(a, s)) + 0.05
    rep = drl_model_robust(data, PI, FN, q, rw, r_hat, q, 0.0)
    alpha = rw.alpha(data.a0, data.s0)
    qv = q(data.a0, data.s0)
    m = FN.values(data, q)
    # at gamma = 0 the weighting function is alpha itself, so the projection term is zero
    direct = np.mean(m + alpha * (data.y0 - qv))
    assert rep.estimate == pytest.approx(direct, abs=1e-10)


def test_drl_non_finite_weight_reports_record(calibrated):
    data, base, _ = calibrated
    bad = RieszWeights(lambda a, s: np.where(np.arange(np.shape(s)[0]) == 7, np.inf, 1.0), None)
    with pytest.raises(ValueError, match="record 7"):
        drl_semiparametric(data, PI, FN, base, bad, 0.5)


def test_drl_linear_in_functional(calibrated):
    data, base, _ = calibrated
    feats = one_hot_cells(162, 2)
    arm1, arm0 = FN.arms
    est = {}
    for name, fn in (("a", arm1), ("b", arm0), ("ab", arm1 + arm0)):
        rw = estimate_representer_linear(data, PI, fn, feats, 0.5)
        est[name] = drl_semiparametric(data, PI, fn, base, rw, 0.5).estimate
    assert est["ab"] == pytest.approx(est["a"] + est["b"], abs=1e-10)


# -- nonparametric -----------------------------------------------------------


def test_nonparametric_gamma_zero_is_aipw():
    data = generate_dataset(SimConfig(30000, 0.0, 0.0, seed=14))
    assert np.unique(data.s0).size == 162
    q = tabular_base(data, 0.0)
    rep = drl_nonparametric(data, PI, FN, q, None, 0.0)
    # textbook AIPW with per-stratum propensity e(s~) = P_n(Z = 1 | s~)
    z = data.a0
    s_tilde = data.s0 % 81
    e = np.bincount(s_tilde, weights=z, minlength=81) / np.bincount(s_tilde, minlength=81)
    mu1 = q(np.ones(data.n, dtype=int), s_tilde + 81)
    mu0 = q(np.zeros(data.n, dtype=int), s_tilde)
    ehat = e[s_tilde]
    aipw = np.mean(mu1 - mu0 + z * (data.y0 - mu1) / ehat - (1 - z) * (data.y0 - mu0) / (1 - ehat))
    assert rep.estimate == pytest.approx(aipw, abs=1e-8)


def test_nonparametric_stationary_weights():
    rng = np.random.default_rng(2)
    P = rng.dirichlet(np.ones(4), size=(4, 1))
    vals, vecs = np.linalg.eig(P[:, 0, :].T)
    stat = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
    mdp = TabularMDP(P, rng.normal(size=(4, 1)), stat / stat.sum(), 0.7)
    pi = Policy.uniform(4, 1)
    data = population_pseudo_data(mdp, pi)
    table, diag = empirical_occupancy_ratio(data, pi, policy_value(pi), 0.7)
    assert np.allclose(table, 1 / 0.3, atol=1e-8)
    assert diag["clipped_fraction"] == 0.0
    q = tabular_q_solve(mdp, pi)
    rep = drl_nonparametric(data, pi, policy_value(pi), q, table, 0.7)
    assert rep.estimate == pytest.approx(float(mdp.init_dist @ q.table[:, 0]), abs=1e-10)


def test_nonparametric_reports_clipping():
    data = generate_dataset(SimConfig(500, 0.8, 0.6, seed=3))
    q = tabular_base(data, 0.8)
    rep = drl_nonparametric(data, PI, FN, q, None, 0.8, truncation=2.0)
    assert 0.0 < rep.diagnostics["clipped_fraction"] <= 1.0


# -- variance ----------------------------------------------------------------


def test_eif_variance_examples(rng):
    assert eif_variance(np.full(10, 3.3)) == 0.0
    assert eif_variance(np.array([-1.0, 1.0])) == pytest.approx(1.0)
    v = rng.normal(size=257)
    two_pass = np.sum((v - v.mean()) ** 2) / (v.size - 1) / v.size
    assert eif_variance(v) == pytest.approx(two_pass, abs=1e-12)
    with pytest.raises(ValueError):
        eif_variance(np.array([1.0]))


def test_eif_variance_integer_weights_match_replication(rng):
    v = rng.normal(size=30)
    k = np.ones(30)
    assert eif_variance(InfluenceValues(v, k)) == pytest.approx(eif_variance(v), abs=1e-15)


def test_wald_interval_symmetric():
    lo, hi = wald_interval(1.0, 0.5)
    assert lo == pytest.approx(1.0 - 1.959964 * 0.5, abs=1e-6) and hi - 1.0 == pytest.approx(1.0 - lo)


# -- bootstrap ---------------------------------------------------------------


def test_bootstrap_identical_resamples_zero_width(calibrated):
    data, base, qstar = calibrated
    ones = lambda rng, d: np.ones(d.n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lo, hi = bootstrap_calibration_ci(data, PI, FN, base, 0.5, B=2, resampler=ones)
    assert lo == hi
    assert lo == pytest.approx(plugin_calibrated(data, PI, FN, qstar, 0.5).estimate, abs=1e-10)


def test_bootstrap_small_b_warns(calibrated):
    data, base, _ = calibrated
    with pytest.warns(RuntimeWarning, match="B=5"):
        bootstrap_calibration_ci(data, PI, FN, base, 0.5, B=5)


def test_bootstrap_percentile_close_to_normal(calibrated):
    data, base, _ = calibrated
    est = bootstrap_calibration_estimates(data, PI, FN, base, 0.5, 400, seed=3)
    lo, hi = bootstrap_calibration_ci(data, PI, FN, base, 0.5, 400, seed=3)
    half = 1.959964 * np.std(est, ddof=1)
    assert (hi - lo) / 2 == pytest.approx(half, rel=0.10)
    assert (lo + hi) / 2 == pytest.approx(np.mean(est), abs=0.1 * half)


def test_bootstrap_deterministic_and_validated(calibrated):
    data, base, _ = calibrated
    a = bootstrap_calibration_estimates(data, PI, FN, base, 0.5, 5, seed=9)
    b = bootstrap_calibration_estimates(data, PI, FN, base, 0.5, 5, seed=9)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        bootstrap_calibration_estimates(data, PI, FN, base, 0.5, 2, resampler=lambda r, d: -np.ones(d.n))
    with pytest.raises(ValueError):
        bootstrap_calibration_estimates(data, PI, FN, base, 0.5, 0)


def test_bootstrap_single_level_resample():
    data = generate_dataset(SimConfig(200, 0.5, 0.0, seed=1))
    const = TabularQ(np.zeros((162, 2)))
    est = bootstrap_calibration_estimates(data, PI, FN, const, 0.5, 3, seed=0)
    # one level for both arms: the ATE plug-in is identically zero
    assert np.allclose(est, 0.0)


def test_report_json_roundtrip(calibrated):
    data, _, qstar = calibrated
    obj = plugin_calibrated(data, PI, FN, qstar, 0.5).to_json()
    assert obj["method"] == "plugin-calibrated" and len(obj["ci"]) == 2
    assert isinstance(obj["diagnostics"]["n_levels"], int)


def test_drl_reports_nuisance_norms(calibrated):
    data, base, _ = calibrated
    rw = estimate_representer_linear(data, PI, FN, one_hot_cells(162, 2), 0.5)
    diag = drl_semiparametric(data, PI, FN, base, rw, 0.5).diagnostics
    wt = rw.weight(data.a0, data.s0)
    assert diag["weight_rms"] == pytest.approx(np.sqrt(np.mean(wt**2)))
    assert diag["nuisance_norm_product"] == pytest.approx(diag["weight_rms"] * diag["td_rms"])
