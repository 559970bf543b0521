import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from dtrweights import Clause, FeatureSpec, Panel, Regime, fit_logistic, fit_q_functions, predict_propensity
from dtrweights.glm import P_CLAMP, _deviance, _irls, default_outcome_spec, default_propensity_spec
from dtrweights.simgen import DgpSpec, generate, simulate, tau


def test_intercept_only_balanced_response():
    y = np.array([0, 1] * 50)
    fit = fit_logistic(np.ones((100, 1)), y)
    assert fit.converged
    assert abs(fit.coef[0]) < 1e-8


def test_recovers_stage_one_propensity_model():
    spec = DgpSpec("sim1")
    panel = generate(spec, 100_000, 7)
    X = np.column_stack([np.ones(panel.n), panel.X[0][:, 0]])
    fit = fit_logistic(X, panel.A[:, 0])
    p = expit(X @ fit.coef)
    cov = np.linalg.inv(X.T @ (X * (p * (1 - p))[:, None]))
    se = np.sqrt(np.diag(cov))
    assert abs(fit.coef[0] - 2.0) < 3 * se[0]
    assert abs(fit.coef[1] + 0.006) < 3 * se[1]


def test_constant_response_flags_separation():
    with pytest.warns(RuntimeWarning):
        fit = fit_logistic(np.column_stack([np.ones(20), np.arange(20.0)]), np.ones(20))
    assert fit.separation
    assert np.all(np.isfinite(fit.coef))


def test_perfect_separation_uses_ridge_fallback():
    x = np.arange(-10.0, 10.0)
    with pytest.warns(RuntimeWarning):
        fit = fit_logistic(np.column_stack([np.ones(20), x]), (x > 0).astype(int))
    assert fit.separation and fit.ridge > 0
    assert np.all(np.isfinite(fit.coef))


def test_predict_propensity_examples():
    assert predict_propensity([0.0, 0.0], [[1.0, 3.0]])[0] == 0.5
    assert predict_propensity([2.0, -0.006], [[1.0, 450.0]])[0] == pytest.approx(0.33181, abs=5e-6)
    counter = []
    assert predict_propensity([50.0], [[1.0]], counter=counter)[0] == 1 - P_CLAMP
    assert counter == [1]


@given(st.lists(st.floats(-60, 60), min_size=1, max_size=20))
def test_predicted_propensity_within_clamp(eta):
    p = predict_propensity([1.0], np.array(eta).reshape(-1, 1))
    assert np.all(p >= P_CLAMP) and np.all(p <= 1 - P_CLAMP)


def test_irls_deviance_never_increases(rng):
    X = np.column_stack([np.ones(300), rng.normal(size=300), rng.normal(size=300)])
    y = (rng.random(300) < expit(X @ [0.3, 1.5, -2.0])).astype(float)
    trace = []
    _irls(X, y, np.zeros(3), 100, 1e-10, trace=trace)
    assert len(trace) >= 2
    assert all(b <= a * (1 + 1e-12) for a, b in zip(trace, trace[1:]))


def _panel_t1(y, x=None):
    n = len(y)
    x = np.linspace(0, 1, n) if x is None else x
    return Panel(X=(x.reshape(-1, 1),), A=(np.arange(n) % 2).reshape(-1, 1), Y=y)


def test_q_intercept_only_is_mean():
    y = np.array([1.0, 2.0, 6.0, 7.0])
    _, Q = fit_q_functions(_panel_t1(y), Regime(((Clause(0, 0.5),),)), [FeatureSpec(("1",))])
    assert np.allclose(Q[:, 0], y.mean())
    assert Q.shape == (4, 2)
    assert np.array_equal(Q[:, 1], y)


def test_q_constant_outcome_propagates():
    spec = DgpSpec("sim1")
    p = generate(spec, 300, 1)
    p = Panel(X=p.X, A=p.A, Y=np.full(p.n, 5.5))
    _, Q = fit_q_functions(p, spec.regime(350, 450))
    assert np.allclose(Q, 5.5, atol=1e-9)


def test_ols_residuals_orthogonal_to_design():
    spec = DgpSpec("sim1")
    p = generate(spec, 500, 2)
    regime = spec.regime(350, 450)
    coefs, Q = fit_q_functions(p, regime)
    D = default_outcome_spec(p, 1).design(p.X, p.A)
    resid = p.Y - D @ coefs[1]
    assert np.max(np.abs(D.T @ resid)) <= 1e-8 * np.max(np.abs(D)) * np.max(np.abs(p.Y)) * p.n


def test_rank_deficient_design_drops_column_with_warning():
    y = np.array([1.0, 2.0, 3.0, 5.0])
    x = np.linspace(0, 1, 4)
    dup = Panel(X=(np.column_stack([x, 2 * x]),), A=(np.arange(4) % 2).reshape(-1, 1), Y=y)
    with pytest.warns(RuntimeWarning):
        _, Q = fit_q_functions(dup, Regime(((Clause(0, 0.5),),)), [FeatureSpec(("1", "x1_1", "x1_2"))])
    assert np.all(np.isfinite(Q))


def test_feature_spec_rejects_duplicates():
    with pytest.raises(ValueError):
        FeatureSpec(("1", "a1*x1_1", "x1_1*a1"))
    with pytest.raises(ValueError):
        FeatureSpec(("1", "z3"))


def test_default_specs_shape():
    p = generate(DgpSpec("sim1"), 20, 0)
    assert default_propensity_spec(p, 1).terms == ("1", "x2_1", "a1")
    assert default_propensity_spec(p, 0).width == 2
    assert "a2*x2_1" in default_outcome_spec(p, 1).terms


def test_sim2_q_function_tracks_true_conditional_mean():
    spec = DgpSpec("sim2")
    panel = generate(spec, 100_000, 5)
    regime = spec.regime(430.0, 80.0)
    _, Q = fit_q_functions(panel, regime, spec.outcome_specs(panel))
    x = panel.X[0]
    d = regime.actions(0, x)
    truth = x[:, 0] + 2 * x[:, 1] + tau(spec, x[:, 0]) * d
    assert np.corrcoef(Q[:, 0], truth)[0, 1] > 0.95
