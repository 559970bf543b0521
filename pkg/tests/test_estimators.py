import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtrweights import (
    Clause,
    EstimatorTag,
    NoAdherersError,
    Panel,
    Regime,
    analytical_variance_augmented,
    analytical_variance_plain,
    bias_bound,
    ipw_weights,
    value_augmented,
    value_plain,
)
from dtrweights.estimators import ESTIMATOR_NAMES, augmented_influence
from dtrweights.glm import Nuisance
from dtrweights.simgen import DgpSpec, generate, oracle_value, true_propensities
from dtrweights.surface import estimate_value
from dtrweights import GawConfig, BawConfig


def test_tag_parsing_covers_all_twelve():
    tags = {EstimatorTag.parse(n) for n in ESTIMATOR_NAMES}
    assert len(tags) == 12
    assert EstimatorTag.parse("NAGAW") == EstimatorTag("GAW", True, True)
    assert EstimatorTag.parse("baw") == EstimatorTag("BAW", False, False)
    assert all(EstimatorTag.parse(n).name == n for n in ESTIMATOR_NAMES)
    with pytest.raises(ValueError):
        EstimatorTag.parse("xipw")


def test_plain_examples():
    Y = np.array([10.0, 99.0, 4.0])
    w = np.array([2.0, 0.0, 1.0])
    assert value_plain(Y, w, True) == pytest.approx(8.0)
    assert value_plain(Y, w, False) == pytest.approx(8.0)
    assert value_plain(Y, np.ones(3)) == pytest.approx(Y.mean())
    assert value_plain(Y, np.ones(3), False) == pytest.approx(Y.mean())
    assert value_plain(Y, [0.0, 3.0, 0.0]) == 99.0
    with pytest.raises(NoAdherersError):
        value_plain(Y, np.zeros(3))


def test_augmented_reduces_to_plain_when_q_zero(rng):
    n, T = 30, 2
    W = np.cumprod(rng.uniform(0, 3, size=(n, T)), axis=1)
    Y = rng.normal(size=n)
    Q = np.zeros((n, T + 1))
    Q[:, T] = Y
    assert value_augmented(Q, W, False) == pytest.approx(value_plain(Y, W[:, -1], False), rel=1e-12)


def test_augmented_zero_weights_is_g_computation(rng):
    Q = rng.normal(size=(20, 3))
    W = np.zeros((20, 2))
    assert value_augmented(Q, W, False) == pytest.approx(Q[:, 0].mean(), rel=1e-14)


def test_augmented_normalized_names_the_empty_stage(rng):
    Q = rng.normal(size=(5, 3))
    W = np.ones((5, 2))
    W[:, 1] = 0.0
    with pytest.raises(NoAdherersError, match="stage 2"):
        value_augmented(Q, W, True)


def test_plain_variance_examples(rng):
    Y = rng.normal(size=50)
    v = value_plain(Y, np.ones(50))
    assert analytical_variance_plain(Y, np.ones(50), v) == pytest.approx(Y.var(ddof=0) / 50, rel=1e-12)
    assert analytical_variance_plain(np.full(10, 3.0), rng.uniform(0, 2, 10), 3.0) == 0.0
    with pytest.raises(NoAdherersError):
        analytical_variance_plain(Y, np.zeros(50), v)


def test_augmented_variance_reductions(rng):
    n = 40
    q0 = rng.normal(5.0, 2.0, size=n)
    Q = np.column_stack([q0, q0, q0])  # no stage increments
    W = rng.uniform(0.5, 2.0, size=(n, 2))
    v = q0.mean()
    var = analytical_variance_augmented(Q, W, v)
    assert var == pytest.approx(np.sum((q0 - v) ** 2) / n**2, rel=1e-12)
    Q2 = np.full((n, 3), 2.0)
    assert analytical_variance_augmented(Q2, W, 2.0) == 0.0
    with pytest.raises(NoAdherersError):
        augmented_influence(Q, np.zeros((n, 2)), v)


def test_bias_bound_examples():
    assert bias_bound(np.ones(5), 100.0) == 0.0
    assert bias_bound(np.full(5, 0.95**2), 100.0) == pytest.approx(9.75)
    assert bias_bound(np.array([1.0, 0.9, 0.99]), 10.0) == pytest.approx(1.0)


weights = st.lists(st.floats(0, 100), min_size=3, max_size=30)


@given(weights, st.floats(0.01, 1e3), st.integers(0, 2**31))
def test_normalized_scale_invariance(w, scale, seed):
    w = np.array(w)
    if w.sum() <= 0:
        return
    Y = np.random.default_rng(seed).normal(size=w.size)
    assert value_plain(Y, w * scale) == pytest.approx(value_plain(Y, w), rel=1e-9, abs=1e-9)
    assert value_plain(Y, w * scale, False) == pytest.approx(scale * value_plain(Y, w, False), rel=1e-9, abs=1e-9)


@given(weights, st.floats(-1e3, 1e3), st.integers(0, 2**31))
def test_location_equivariance_plain(w, a, seed):
    w = np.array(w)
    if w.sum() <= 0:
        return
    Y = np.random.default_rng(seed).normal(size=w.size)
    assert value_plain(Y + a, w) == pytest.approx(value_plain(Y, w) + a, rel=1e-9, abs=1e-7)
    shift = a * w.sum() / w.size
    assert value_plain(Y + a, w, False) == pytest.approx(value_plain(Y, w, False) + shift, rel=1e-9, abs=1e-7)


def test_location_equivariance_augmented_with_refit_q():
    spec = DgpSpec("sim1")
    panel = generate(spec, 400, 8)
    shifted = Panel(X=panel.X, A=panel.A, Y=panel.Y + 250.0)
    reg = spec.regime(350, 450)
    for name in ("aipw", "naipw", "nagaw"):
        a = estimate_value(panel, reg, name, gaw=GawConfig(0.18, 0.5)).value
        b = estimate_value(shifted, reg, name, gaw=GawConfig(0.18, 0.5)).value
        assert b - a == pytest.approx(250.0, rel=1e-9)


def test_toy_enumeration_oracle():
    # T=1, binary X and A: every (x, a) stratum enumerated by hand
    strata = list(itertools.product([0.0, 1.0], [0, 1]))
    counts = {(0.0, 0): 3, (0.0, 1): 2, (1.0, 0): 1, (1.0, 1): 4}
    ys = {(0.0, 0): [1.0, 2.0, 3.0], (0.0, 1): [5.0, 7.0], (1.0, 0): [4.0], (1.0, 1): [9.0, 8.0, 6.0, 10.0]}
    prop = {0.0: 0.4, 1.0: 0.7}
    X, A, Y = [], [], []
    for s in strata:
        for y in ys[s]:
            X.append([s[0]])
            A.append([s[1]])
            Y.append(y)
    panel = Panel(X=(np.array(X),), A=np.array(A), Y=np.array(Y))
    reg = Regime(((Clause(0, 0.5),),))  # treat when x = 0
    p = np.array([[prop[x[0]]] for x in X])
    got = value_plain(panel.Y, ipw_weights(panel, reg, p).terminal)
    # adherent strata: (x=0, a=1) weight 1/0.4, (x=1, a=0) weight 1/0.3
    num = sum(ys[(0.0, 1)]) / 0.4 + sum(ys[(1.0, 0)]) / 0.3
    den = counts[(0.0, 1)] / 0.4 + counts[(1.0, 0)] / 0.3
    assert got == pytest.approx(num / den, rel=1e-12)


@pytest.mark.slow
def test_consistency_with_true_propensities():
    spec = DgpSpec("sim1")
    reg = spec.regime(350, 450)
    truth, _ = oracle_value(spec, reg, 200_000, 99)
    gaw = GawConfig(0.18, 0.5)
    baw = BawConfig(((0.0, 5.0, 10.0), (0.0, 5.0, 10.0)), B=50)
    med = {}
    for n in (500, 2000):
        errs = {"nipw": [], "ngaw": [], "nbaw": []}
        for r in range(50):
            panel = generate(spec, n, np.random.SeedSequence([4242, n, r]))
            nu = Nuisance.from_probabilities(panel, true_propensities(spec, panel), fit_q=False)
            for name in errs:
                v = estimate_value(panel, reg, name, nu, gaw, baw, seed=r).value
                errs[name].append(abs(v - truth))
        med[n] = {k: np.median(v) for k, v in errs.items()}
    for name in ("nipw", "ngaw", "nbaw"):
        assert med[2000][name] < med[500][name]
