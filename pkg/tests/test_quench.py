import math

import numpy as np
import pytest
from scipy.optimize import brentq

from wfquench.core import GhostSeries, scale_series
from wfquench.errors import GridOutOfRange, StageFailed
from wfquench.matching import SolveConfig
from wfquench.quench import (QuenchConfig, deviation, deviation_of_samples, fit_scaling, generalized_quench,
                             gradient, objective, quench, solve_stage)
from wfquench.verify import boost_orbit, solve_lightcone


def test_deviation_identity_and_constant_shift():
    t = np.linspace(-3, 7, 64)
    assert deviation_of_samples(t, t) == 0.0
    assert deviation_of_samples(t + 0.25, t) == pytest.approx(0.25, rel=1e-14)
    with pytest.raises(GridOutOfRange):
        deviation_of_samples(t, t[:-1])


def test_deviation_invariant_under_common_translation():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=64), rng.normal(size=64)
    assert deviation_of_samples(a + 5.0, b + 5.0) == pytest.approx(deviation_of_samples(a, b), rel=1e-13)


def test_unconverged_series_has_large_mismatch():
    cfg = SolveConfig(r_c=4.7)
    assert objective(GhostSeries(()), cfg) > 0.1


def test_out_of_domain_objective_is_inf():
    assert objective(GhostSeries((30.0,)), SolveConfig(r_c=20.0)) == math.inf


def test_quench_config_validation():
    for bad in ({"grid_size": 4}, {"grid_span": 0.0}, {"direction": "newton"}, {"shrink": 1.5}):
        with pytest.raises(ValueError):
            QuenchConfig(**bad)


def test_cold_start_low_energy(orbit20):
    assert orbit20.deviation < 1e-6
    assert orbit20.quench.status == "converged"
    # F(r) ~ 1 - k1/r: the first term dominates at the turning distance
    k = np.asarray(orbit20.F_a.coeffs)
    terms = np.abs(k / 20.0 ** np.arange(1, k.size + 1))
    assert terms[0] > 10 * terms[1:].sum()


def test_accepted_steps_strictly_decrease(orbit20):
    A = [row[1] for row in orbit20.quench.history]
    assert len(A) >= 2
    assert all(b < a for a, b in zip(A, A[1:]))


def test_converged_seed_returns_immediately(orbit20, cfg20):
    again = quench(orbit20.series, cfg20)
    assert again.quench.iterations == 1
    assert again.quench.status == "converged"
    assert again.deviation <= QuenchConfig().A_tol


def test_squared_deviation_is_stationary_at_minimum(orbit20, cfg20):
    # the rms norm A keeps a finite slope at a nonzero minimum; A**2 is the
    # smooth functional whose gradient 2 A dA/dk must vanish there
    g2 = 2 * orbit20.deviation * gradient(orbit20.series, cfg20)
    scale = np.abs(gradient(orbit20.series.with_coeffs([0.8 * k for k in orbit20.series.coeffs]), cfg20))
    assert np.all(np.abs(g2) < 1e-6 * scale.max())


def test_gradient_matches_secant_in_one_coefficient():
    cfg = SolveConfig(r_c=20.0)
    s = GhostSeries((0.8,))
    g = gradient(s, cfg)[0]
    h = 10 * QuenchConfig().fd_step
    sec = (objective(s.with_coeffs([0.8 + h]), cfg) - objective(s.with_coeffs([0.8 - h]), cfg)) / (2 * h)
    assert g == pytest.approx(sec, rel=1e-2)


def test_deterministic_and_thread_independent():
    cfg = SolveConfig(r_c=20.0)
    seed = GhostSeries((0.5, 0.0))
    one = quench(seed, cfg, QuenchConfig(max_iters=2, threads=1))
    two = quench(seed, cfg, QuenchConfig(max_iters=2, threads=2))
    assert one.series == two.series
    assert one.deviation == two.deviation


def test_stage_failure_is_reported():
    cfg = SolveConfig(r_c=4.7)
    with pytest.raises(StageFailed) as info:
        solve_stage(GhostSeries((0.0,)), cfg, QuenchConfig(max_iters=1, max_coeffs=1))
    assert info.value.best_A > QuenchConfig().A_accept


def test_generalized_symmetric_fixed_point(orbit20):
    orbit, rep = generalized_quench(orbit20.series, orbit20.series, 20.0, 20.0)
    assert orbit.quench.iterations == 1
    assert rep.lam == pytest.approx(1.0, abs=1e-6)
    assert rep.residual < 1e-8


def _rest_frame_start(orbit, w):
    """(r_a0, r_b0) at the instant particle 1 of the boosted orbit is at rest."""
    b = boost_orbit(orbit, w)
    t_star = brentq(b.p1.velocity, -10 * orbit.r_c, 10 * orbit.r_c)
    r, q = solve_lightcone(b.p1, b.p2a, t_star)
    r_b, _ = solve_lightcone(b.p1, b.p2b, t_star)
    return q, r_b


def test_boosted_seed_needs_no_quench(orbit20):
    w = 0.05
    ra0, rb0 = _rest_frame_start(orbit20, w)
    lam = math.sqrt((1 - w) / (1 + w))
    seed_a = scale_series(orbit20.F_a.with_r_min(None), lam)
    seed_b = scale_series(orbit20.F_a.with_r_min(None), 1 / lam)
    orbit, rep = generalized_quench(seed_a, seed_b, ra0, rb0, prescale=False)
    assert orbit.quench.iterations == 1
    assert orbit.deviation <= QuenchConfig().A_tol
    assert rep.lam == pytest.approx(lam, rel=1e-6)


def test_fit_scaling_recovers_lambda():
    F = GhostSeries((1.0, 1.4, 0.5))
    rep = fit_scaling(scale_series(F, 0.9), scale_series(F, 1 / 0.9), 10.0, 400.0)
    assert rep.lam == pytest.approx(0.9, rel=1e-9)
    assert rep.residual < 1e-9


def test_deviation_matches_quench_record(orbit20):
    assert deviation(orbit20) == pytest.approx(orbit20.deviation, rel=1e-12)
