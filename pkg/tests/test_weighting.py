import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtrweights import (
    Clause,
    GawConfig,
    NoAdherersError,
    Panel,
    Regime,
    WindowSpec,
    baw_weights,
    ess,
    gamma_from_constraint,
    gaw_stage_weight,
    gaw_weights,
    ipw_weights,
    smd,
    weight_spread,
)
from dtrweights.simgen import DgpSpec, generate, true_propensities
from dtrweights.weighting import window_compatible, windowed_compatibility

from .conftest import random_panel, random_regime

probs = st.floats(1e-4, 1 - 1e-4)
epss = st.floats(1e-4, 0.999)


def test_gamma_examples():
    assert gamma_from_constraint(0.1, 0.5) == pytest.approx(1 / 9, rel=1e-15)
    assert gamma_from_constraint(0.0, 0.3) == 0.0
    assert gamma_from_constraint(0.05, 0.2) == pytest.approx(0.01 / 0.76, rel=1e-15)
    with pytest.raises(ValueError):
        gamma_from_constraint(0.1, 1.0)


def test_gamma_cap():
    assert gamma_from_constraint(0.9, 0.9) == pytest.approx(1 - 1e-9)
    assert gamma_from_constraint(0.9, 0.9, cap=None) == pytest.approx(81.0)


def test_gaw_stage_weight_examples():
    g = gamma_from_constraint(0.1, 0.5)
    assert gaw_stage_weight(True, 0.5, g) == pytest.approx(1.8, rel=1e-14)
    assert gaw_stage_weight(False, 0.5, g) == pytest.approx(0.2, rel=1e-14)
    assert gaw_stage_weight(True, 0.25, 0.0) == 4.0


@given(probs, epss)
def test_eq1_identities(p, eps):
    g = gamma_from_constraint(eps, p, cap=None)
    D = p + g * (1 - p)
    assert D == pytest.approx(p / (1 - eps), rel=1e-12)
    w1, w0 = gaw_stage_weight(True, p, g), gaw_stage_weight(False, p, g)
    assert w1 == pytest.approx((1 - eps) / p, rel=1e-12)
    assert w0 == pytest.approx(eps / (1 - p), rel=1e-12)
    assert w1 * p + w0 * (1 - p) == pytest.approx(1.0, rel=1e-12)


def _two_stage(a1, a2, p1, p2):
    X = (np.array([[0.0]]), np.array([[0.0]]))
    reg = Regime(((Clause(0, 1.0),), (Clause(0, 1.0),)))
    return Panel(X=X, A=[[a1, a2]], Y=[1.0]), reg, np.array([[p1, p2]])


def test_ipw_examples():
    panel, reg, p = _two_stage(1, 1, 0.5, 0.25)
    assert ipw_weights(panel, reg, p).terminal[0] == 8.0
    panel, reg, p = _two_stage(1, 0, 0.5, 0.25)
    assert ipw_weights(panel, reg, p).terminal[0] == 0.0
    one = Panel(X=([[0.0]],), A=[[1]], Y=[1.0])
    assert ipw_weights(one, Regime(((Clause(0, 1.0),),)), np.array([[0.5]])).terminal[0] == 2.0


def test_gaw_theta_constant_under_eq1():
    spec = DgpSpec("sim1")
    panel = generate(spec, 200, 3)
    p = np.random.default_rng(0).uniform(0.1, 0.9, size=(200, 2))
    cfg = GawConfig(0.1 * np.sqrt(200), 0.5)  # eps_n = 0.1
    _, q, capped = gaw_weights(panel, spec.regime(350, 450), p, cfg)
    assert capped == 0
    assert np.allclose(q.theta, 0.9025, rtol=1e-12)


def test_gaw_zero_eps_is_bitwise_ipw(rng):
    for _ in range(20):
        panel = random_panel(rng)
        reg = random_regime(rng)
        p = rng.uniform(0.1, 0.9, size=(panel.n, panel.T))
        a = ipw_weights(panel, reg, p)
        b, _, _ = gaw_weights(panel, reg, p, GawConfig(0.0, 0.5))
        assert np.array_equal(a.w, b.w) and np.array_equal(a.cum, b.cum)


def test_gaw_mean_terminal_weight_is_one():
    spec = DgpSpec("sim1")
    panel = generate(spec, 2000, 17)
    ws, _, _ = gaw_weights(panel, spec.regime(350, 450), true_propensities(spec, panel), GawConfig(0.18, 0.5))
    w = ws.terminal
    assert abs(w.mean() - 1.0) < 3 * w.std(ddof=1) / np.sqrt(len(w))


def test_theta_bound_holds(rng):
    panel = random_panel(rng, n=100)
    reg = random_regime(rng)
    p = rng.uniform(0.05, 0.95, size=(panel.n, panel.T))
    cfg = GawConfig(0.05 * 10, 0.5)
    _, q, capped = gaw_weights(panel, reg, p, cfg)
    eps_n = cfg.eps_n(panel.n)
    assert capped == 0
    assert np.all(1 - q.theta <= eps_n + 1e-12)
    assert np.all(q.ratio > 1 - eps_n / panel.T - 1e-12) and np.all(q.ratio <= 1 + 1e-15)


def test_window_examples():
    reg = Regime(((Clause(0, 350.0),),))
    w = WindowSpec((((10.0, 10.0),),))
    assert window_compatible(reg, w, 0, np.array([[355.0]]), np.array([1]))[0]
    assert window_compatible(reg, w, 0, np.array([[355.0]]), np.array([0]))[0]
    assert not window_compatible(reg, w, 0, np.array([[361.0]]), np.array([1]))[0]
    assert not window_compatible(reg, w, 0, np.array([[339.0]]), np.array([0]))[0]


def test_window_ge_clause_mirrors_le():
    reg = Regime(((Clause(0, 350.0, ">="),),))
    w = WindowSpec((((10.0, 10.0),),))
    assert window_compatible(reg, w, 0, np.array([[345.0]]), np.array([1]))[0]
    assert not window_compatible(reg, w, 0, np.array([[339.0]]), np.array([1]))[0]
    assert window_compatible(reg, w, 0, np.array([[355.0]]), np.array([0]))[0]
    assert not window_compatible(reg, w, 0, np.array([[361.0]]), np.array([0]))[0]


def test_baw_in_band_recovers_weight():
    reg = Regime(((Clause(0, 350.0),),))
    panel = Panel(X=([[355.0], [400.0]],), A=[[1], [1]], Y=[1.0, 2.0])
    p = np.array([[0.4], [0.4]])
    w = baw_weights(panel, reg, WindowSpec((((10.0, 10.0),),)), p)
    assert w.terminal[0] == pytest.approx(2.5)
    assert w.terminal[1] == 0.0
    assert ipw_weights(panel, reg, p).terminal[0] == 0.0


def test_zero_window_is_ipw(rng):
    for _ in range(20):
        panel = random_panel(rng)
        reg = random_regime(rng)
        p = rng.uniform(0.1, 0.9, size=(panel.n, panel.T))
        assert np.array_equal(baw_weights(panel, reg, WindowSpec.zeros(reg), p).cum, ipw_weights(panel, reg, p).cum)


@given(st.floats(-3, 3), st.integers(0, 1), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_window_monotone_in_delta(x, a, lo, hi, dlo, dhi):
    reg = Regime(((Clause(0, 0.3),),))
    small = WindowSpec((((lo, hi),),))
    big = WindowSpec((((lo + dlo, hi + dhi),),))
    xa, aa = np.array([[x]]), np.array([a])
    if window_compatible(reg, small, 0, xa, aa)[0]:
        assert window_compatible(reg, big, 0, xa, aa)[0]


def test_windowed_compatibility_single_entry():
    reg = Regime(((Clause(0, 350.0),),))
    panel = Panel(X=([[355.0]],), A=[[0]], Y=[1.0])
    assert windowed_compatibility(reg, WindowSpec((((10.0, 10.0),),)), panel, 0, 0)
    below = Panel(X=([[345.0]],), A=[[0]], Y=[1.0])
    assert windowed_compatibility(reg, WindowSpec((((10.0, 0.0),),)), below, 0, 0)
    assert not windowed_compatibility(reg, WindowSpec((((0.0, 10.0),),)), below, 0, 0)


def test_ess_examples():
    assert ess(np.full(7, 2.5)) == pytest.approx(7.0)
    assert ess([1.0, 0.0, 0.0]) == 1.0
    assert ess([3.0, 1.0]) == pytest.approx(1.6)
    with pytest.raises(NoAdherersError):
        ess([0.0, 0.0])


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=50).filter(lambda w: sum(w) > 0))
def test_ess_bounds(w):
    e = ess(w)
    assert 1 - 1e-9 <= e <= len(w) + 1e-9


def test_weight_spread_examples():
    assert weight_spread(np.full(10, 3.0)) == 0.0
    assert weight_spread(np.arange(101.0), 1, 99) == pytest.approx(98.0)
    with pytest.raises(ValueError):
        weight_spread([1.0, 2.0], 90, 10)


def test_smd_examples(rng):
    x = rng.normal(size=4000)
    g = np.repeat([0, 1], 2000)
    assert abs(smd(x, g)) < 0.1
    y = np.concatenate([rng.normal(0, 1, 200_000), rng.normal(1, 1, 200_000)])
    assert smd(y, np.repeat([0, 1], 200_000)) == pytest.approx(1.0, abs=0.02)


def test_smd_balancing_weights_give_zero():
    # binary covariate with different prevalence in each group
    cov = np.array([1, 1, 1, 0, 1, 0, 0, 0, 0, 0], dtype=float)
    grp = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    w = np.empty(10)
    for gval in (0, 1):
        for c in (0.0, 1.0):
            m = (grp == gval) & (cov == c)
            w[m] = 1.0 / m.sum()
    assert abs(smd(cov, grp, w)) < 1e-10
