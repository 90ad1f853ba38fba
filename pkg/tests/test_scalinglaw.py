import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medtimeline import scalinglaw as S

BUDGETS = [1e15, 1e16, 1e17, 1e18]


def test_plan_examples():
    assert S.plan_isoflop_sweep(6e12, [1e6]) == [(1e6, 1000000)]
    pairs = S.plan_isoflop_sweep(6e15, [1e5, 1e6, 1e7])
    assert len(pairs) == 3
    assert [d for _, d in pairs] == sorted((d for _, d in pairs), reverse=True)
    for n, d in pairs:
        assert abs(6 * n * d / 6e15 - 1) < 0.01
    with pytest.raises(ValueError, match="compute budget too small"):
        S.plan_isoflop_sweep(6e3, [1e6], context_len=256)
    with pytest.raises(ValueError):
        S.plan_isoflop_sweep(1e12, [1e6, 1e6])
    assert S.plan_isoflop_sweep(6e9, [1e3, 1e7], context_len=256) == [(1e3, 1000000)]


def test_parabola_exact_and_degenerate():
    xs = np.linspace(4, 8, 7)
    fit = S.fit_parabola([(x, (x - 6) ** 2 + 2) for x in xs])
    assert fit.opt == pytest.approx(1e6, rel=1e-9)
    assert fit.min_loss == pytest.approx(2.0, abs=1e-12)
    assert fit.rms < 1e-12 and not fit.extrapolated
    with pytest.raises(ValueError, match="no interior minimum"):
        S.fit_parabola([(x, 3 - 0.5 * x) for x in xs])
    with pytest.raises(ValueError, match="no interior minimum"):
        S.fit_parabola([(x, -(x - 6) ** 2) for x in xs])
    with pytest.raises(ValueError):
        S.fit_parabola([(1, 1), (1, 2), (2, 2)])


def test_parabola_flags_extrapolation():
    fit = S.fit_parabola([(x, (x - 10) ** 2) for x in (4, 5, 6)])
    assert fit.extrapolated


def test_parabola_noise_vertex():
    xs = np.linspace(5, 7, 7)
    misses = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        ys = (xs - 6) ** 2 + 2 + rng.normal(0, 0.01, xs.size)
        if abs(S.fit_parabola(list(zip(xs, ys))).x_opt - 6) > 0.05:
            misses += 1
    assert misses == 0


def test_power_law_exact():
    pts = [(c, 2 * c ** 0.5) for c in BUDGETS]
    fit = S.fit_power_law(pts)
    assert fit.prefactor == pytest.approx(2.0, rel=1e-9)
    assert fit.exponent == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        S.fit_power_law([(1e15, 1.0), (1e16, -1.0)])
    with pytest.raises(ValueError):
        S.fit_power_law([(1e15, 1.0)])


@given(st.floats(0.1, 1000), st.floats(0.1, 1.0), st.floats(1e-3, 1e3))
def test_power_law_scale_equivariance(A, alpha, k):
    pts = [(c, A * c ** alpha) for c in BUDGETS]
    base = S.fit_power_law(pts)
    scaled = S.fit_power_law([(k * c, v) for c, v in pts])
    assert abs(scaled.exponent - base.exponent) < 1e-9
    assert scaled.prefactor == pytest.approx(base.prefactor * k ** (-base.exponent), rel=1e-7)


def test_surface_closed_form():
    s = S.LossSurface(E=1.7, A=400.0, a=0.5, B=400.0, b=0.5)
    assert s.alpha == 0.5 and s.beta == 0.5
    # analytic optimum really minimizes along the isoFLOP line
    C = 1e17
    grid = 10 ** np.linspace(6, 9, 20001)
    best = grid[np.argmin(s(grid, C / (6 * grid)))]
    assert best == pytest.approx(s.n_opt(C), rel=1e-3)


def test_symmetric_surface_recovers_half():
    s = S.LossSurface(E=1.7, A=400.0, a=0.5, B=400.0, b=0.5)
    fit = S.fit_sweep(S.recentred_sweep(s, BUDGETS))
    assert abs(fit.n_law.exponent - 0.5) <= 0.03
    assert abs(fit.d_law_parabola.exponent - 0.5) <= 0.03
    assert abs(fit.d_law_implied.exponent - 0.5) <= 0.03


def test_asymmetric_surface_and_monotone_frontier():
    s = S.LossSurface(E=1.69, A=406.4, a=0.34, B=410.7, b=0.28)
    assert s.alpha == pytest.approx(0.28 / 0.62)
    fit = S.fit_sweep(S.recentred_sweep(s, BUDGETS))
    assert abs(fit.n_law.exponent - s.alpha) <= 0.02
    mins = [f.by_size.min_loss for f in fit.budgets]
    assert mins == sorted(mins, reverse=True)


def test_isoflop_points_respect_budget():
    s = S.LossSurface(E=1.7, A=400.0, a=0.4, B=400.0, b=0.3)
    for p in S.synthetic_surface_sweep(s, BUDGETS):
        assert abs(6 * p.N * p.D / p.C - 1) < 0.01


def test_surface_validation():
    with pytest.raises(ValueError):
        S.LossSurface(E=1, A=1, a=0.0, B=1, b=0.5)


def test_points_and_fit_io(tmp_path):
    s = S.LossSurface(E=1.7, A=400.0, a=0.4, B=400.0, b=0.3)
    pts = S.synthetic_surface_sweep(s, BUDGETS)
    S.write_points(tmp_path / "p.csv", pts)
    assert S.read_points(tmp_path / "p.csv") == pts
    fit = S.fit_sweep(pts)
    S.write_fit(tmp_path / "f.csv", tmp_path / "r.txt", fit)
    report = (tmp_path / "r.txt").read_text()
    assert "N_opt" in report and "0.520" in report
    assert len((tmp_path / "f.csv").read_text().splitlines()) == 1 + len(BUDGETS)
