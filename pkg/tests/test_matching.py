import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wfquench.core import GhostSeries, MatchingState
from wfquench.errors import DomainError, NonPositiveRadius
from wfquench.matching import (SolveConfig, extrapolate_rapidity, integrate_orbit, integrate_trajectory,
                               minimal_lightcone_distance, reconstruct_derivatives, rhs, s_values,
                               step_diagnostics, time_reversal_defect)

RC = 20.0
F09 = GhostSeries((0.1 * RC,))  # F(r_c) = 0.9


def test_rhs_unit_F_at_turning_point():
    d = rhs(MatchingState(0.0, RC, RC, 0.0), GhostSeries(()))
    assert d.r_a == 0.0 and d.r_b == 0.0
    assert d.phi == pytest.approx(1 / RC ** 2, rel=1e-15)
    assert (d.t1, d.x1) == (1.0, 0.0)


def test_rhs_at_F_point_nine():
    d = rhs(MatchingState(0.0, RC, RC, 0.0), F09)
    expected = -0.5 * (1 - 1 / 0.81)
    assert d.r_a == pytest.approx(expected, rel=1e-13)
    assert expected == pytest.approx(0.11728, abs=1e-5)
    assert d.r_b == pytest.approx(-expected, rel=1e-13)
    assert d.phi == pytest.approx(1 / (RC ** 2 * 0.81), rel=1e-13)


def test_rhs_decays_at_large_distance():
    d = rhs(MatchingState(0.0, 1e6, 1e6, 0.3), F09)
    assert abs(d.phi) < 1e-11


def test_rhs_domain_errors():
    with pytest.raises(NonPositiveRadius):
        MatchingState(0.0, -1.0, RC, 0.0)
    with pytest.raises(DomainError):
        rhs(MatchingState(0.0, 1.0, 1.0, 0.0), GhostSeries((2.0,)))


def test_s_values_examples():
    assert s_values(MatchingState(0.0, RC, RC, 0.0), GhostSeries(())) == (0.0, 0.0)
    sa, sb = s_values(MatchingState(0.0, RC, RC, 0.0), F09)
    assert sa == pytest.approx(math.log(0.9)) and sb == pytest.approx(math.log(0.9))


@given(st.floats(2.0, 200.0), st.floats(2.0, 200.0), st.floats(-3.0, 3.0),
       st.floats(-0.9, 0.9), st.floats(-0.5, 0.5))
def test_parallelism_and_proper_time(ra, rb, phi, k1, k2):
    F = GhostSeries((k1, k2))
    st_ = MatchingState(0.0, ra, rb, phi)
    sa, sb = s_values(st_, F)
    assert math.exp(sa + sb) == pytest.approx(F(ra) * F(rb), rel=1e-12)
    d = reconstruct_derivatives(st_, s_values(st_, F), F)
    assert d.t1 ** 2 - d.x1 ** 2 == pytest.approx(1.0, rel=1e-12)
    assert d.t1 == pytest.approx(math.cosh(phi), rel=1e-12)
    assert d.x1 == pytest.approx(math.sinh(phi), rel=1e-12, abs=1e-14)
    assert d.t1b == pytest.approx(d.t1, rel=1e-12)


def test_unit_F_orbit_shape():
    cfg = SolveConfig(r_c=10.0, tau_max=2000.0)
    traj = integrate_trajectory(cfg, GhostSeries(()))
    tau = np.linspace(0, 2000.0, 4001)
    y = traj(tau)
    assert np.all(np.diff(y[2]) > 0)
    rb = traj(np.linspace(-2000.0, 2000.0, 8001))[1]
    i = int(np.argmin(rb))
    assert 0 < i < rb.size - 1 and rb[i] > 0
    assert np.all(np.diff(rb[:i + 1]) <= 0) and np.all(np.diff(rb[i:]) >= 0)


def test_unit_F_minimal_distance_is_r_c():
    cfg = SolveConfig(r_c=10.0)
    orbit = integrate_orbit(cfg, GhostSeries(()))
    r_o, r_s0 = minimal_lightcone_distance(orbit)
    assert r_s0 == pytest.approx(10.0, rel=1e-9)


def test_time_reversal_and_step_identities():
    cfg = SolveConfig(r_c=10.0, tau_max=2000.0)
    F = GhostSeries((0.8, 0.5))
    assert time_reversal_defect(cfg, F) < 10 * cfg.rel_tol
    diag = step_diagnostics(integrate_trajectory(cfg, F))
    assert diag.parallelism < 1e-13
    assert diag.normalization < 10 * cfg.rel_tol
    assert diag.foliation < 10 * cfg.rel_tol


def test_constant_rapidity_extrapolation():
    tau = np.geomspace(10, 1000, 50)
    phi_inf, a, res = extrapolate_rapidity(tau, np.full_like(tau, 0.4))
    assert math.tanh(phi_inf) == pytest.approx(math.tanh(0.4), rel=1e-14)
    assert abs(a) < 1e-12 and res < 1e-14


def test_solve_config_validation():
    cfg = SolveConfig(r_c=4.0)
    assert cfg.tau_max == 4000.0 and cfg.r_b0 == 4.0
    for bad in ({"r_c": 0.0}, {"r_c": 1.0, "rel_tol": 0.1}, {"r_c": 1.0, "mode": "x"},
                {"r_c": 1.0, "max_step": 0.0}):
        with pytest.raises(ValueError):
            SolveConfig(**bad)


def test_orbit_is_subluminal_and_anchored():
    cfg = SolveConfig(r_c=10.0)
    orbit = integrate_orbit(cfg, GhostSeries((0.8,)))
    for wl in (orbit.p1, orbit.p2a, orbit.p2b):
        assert wl.subluminal
    assert orbit.p1.position(0.0) == pytest.approx(5.0, abs=1e-12)
    assert orbit.p1.velocity(0.0) == pytest.approx(0.0, abs=1e-12)
    assert 0 < orbit.v_inf < 1
