import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wfquench.core import GhostSeries
from wfquench.errors import DegenerateSystem, NegativeDiscriminant, SingularDenominator
from wfquench.matching import SolveConfig, integrate_orbit
from wfquench.potentials import (F_profile, PotentialPoint, branch_energies, build_potentials,
                                 check_branch_identities, hamiltonian_value, momentum_from_energy,
                                 momentum_roots, phi_V, relative_momentum, rescale_point, s_table,
                                 solve_alpha_beta, two_term_fit)


@pytest.fixture(scope="module")
def table(orbit20):
    return s_table(orbit20)


@pytest.fixture(scope="module")
def pot(table, orbit20):
    return build_potentials(table, orbit20.F_a)


def test_energy_momentum_relation():
    assert momentum_from_energy(2.0, 1.0, 0.5) == -2.0


def test_zero_s_row(table, pot):
    assert table.r[0] == table.r_o and table.s[0] == 0.0
    assert pot.phi[0] == 0.0 and pot.V[0] == 0.0
    # rows within 1e-6 of r_o are excluded, all others are regular
    assert np.array_equal(pot.regular, pot.r - pot.r_o > 1e-6)
    assert pot.regular.sum() > 0.95 * len(pot)


def test_table_is_monotone_on_low_energy_orbit(table):
    assert table.monotone
    assert table.r_o < 20.0


def test_unit_F_table_is_minus_twice_rapidity():
    orbit = integrate_orbit(SolveConfig(r_c=10.0), GhostSeries(()))
    tab = s_table(orbit, n=50)
    assert tab.r_o == pytest.approx(10.0, rel=1e-12)
    phi = orbit.trajectory(tab.tau)[2]
    assert np.allclose(tab.s[1:], -2 * phi[1:], rtol=0, atol=1e-15)


def test_parallelism_consistency(table, orbit20):
    # on the incoming stretch r_a sits on the d branch and r_b on the t branch
    traj, F = orbit20.trajectory, orbit20.F_a
    tau = np.linspace(-300.0, -25.0, 40)
    y = traj(tau)
    lhs = np.exp(table.value(y[0], "d")) * np.exp(table.value(y[1], "t"))
    assert np.allclose(lhs, F(y[0]) * F(y[1]), rtol=1e-4)


def test_all_identities_below_tolerance(pot, table, orbit20):
    rep = check_branch_identities(pot, table, orbit20.F_a)
    assert rep.rows == int(pot.regular.sum())
    assert rep.linear < 1e-12
    assert rep.passed(1e-10), rep.to_text()


def test_branch_energies_match_input(pot):
    Ea, Eb = branch_energies(pot)
    ok = pot.regular
    assert np.allclose(Ea[ok], pot.E, rtol=1e-12) and np.allclose(Eb[ok], pot.E, rtol=1e-12)


def test_alpha_perturbation_is_detected(pot):
    # the two momentum roots merge at r_o, so stay clear of it
    bad = replace(pot, alpha=np.where(pot.r > pot.r_o + 0.5, pot.alpha + 1e-3, np.nan))
    rep = check_branch_identities(bad)
    assert 1e-4 < rep.xi1 < 1e-1


def test_degenerate_system():
    with pytest.raises(DegenerateSystem):
        solve_alpha_beta(np.array([0.0, 0.1]), np.array([0.9, 0.9]), 2.0, -1.0, np.array([5.0, 6.0]))


def _point(r=10.0, s=0.3, F=0.95, E=2.0, P=None):
    phi, V = phi_V(s, F)
    P = -E * F - 1.0 / r if P is None else P
    a, b = solve_alpha_beta(np.array([s]), np.array([F]), E, P, np.array([r]))
    return PotentialPoint(r, s, F, float(phi), float(V), float(a[0]), float(b[0])), P


@given(st.floats(-2.0, 2.0), st.floats(1.0, 3.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(-3, 0))
def test_vieta_sum(phi, E, a, b, P):
    pot = PotentialPoint(10.0, 0.2, 0.9, phi, 0.1, a, b)
    try:
        hi, lo = momentum_roots(E, P, 10.0, pot)
    except NegativeDiscriminant:
        return
    eps = E + phi
    delta = 0.25 * ((1 + b) ** 2 - (1 + a) ** 2)
    assert hi + lo == pytest.approx(2 * delta / eps, rel=1e-9, abs=1e-9)


@given(st.floats(-1.0, 1.0))
def test_gauge_shift(c0):
    pot, P = _point()
    shifted = pot._replace(phi=pot.phi + c0)
    E = 2.0
    for br in ("d", "t"):
        assert relative_momentum(E - c0, P, pot.r, shifted, br) == pytest.approx(
            relative_momentum(E, P, pot.r, pot, br), rel=1e-12, abs=1e-13)


def test_branch_point_zero_momentum():
    # alpha = beta gives Delta = 0; S = 0 makes the square root vanish
    pot = PotentialPoint(10.0, 0.0, 1.0, 0.2, 0.3, 0.1, 0.1)
    P = -pot.V - 1.0 / pot.r
    hi, lo = momentum_roots(2.0, P, pot.r, pot)
    assert abs(hi) < 1e-12 and abs(lo) < 1e-12


def test_errors():
    pot = PotentialPoint(10.0, 0.0, 1.0, -2.0, 0.0, 0.0, 0.0)
    with pytest.raises(SingularDenominator):
        momentum_roots(2.0, -1.0, 10.0, pot)
    # alpha = beta = 0: Q = 1/2, Delta = 0; S = -Q/eps leaves -Q^2/eps^2 under the root
    free = PotentialPoint(10.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    with pytest.raises(NegativeDiscriminant):
        momentum_roots(2.0, -0.25 - 0.1, 10.0, free)
    with pytest.raises(SingularDenominator):
        hamiltonian_value(-0.05, 1.0, PotentialPoint(10.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0), 10.0)


def test_dp_dP_matches_definition(pot):
    for i in (100, 200, 300):
        pt = pot.at(i)
        h = 1e-6
        dp = (relative_momentum(pot.E, pot.P + h, pt.r, pt) - relative_momentum(pot.E, pot.P - h, pt.r, pt)) / (2 * h)
        assert dp == pytest.approx(-math.cosh(pt.s) / math.sinh(pt.s), rel=1e-6)


def test_on_branch_hamiltonian_equals_energy(pot):
    for i in (3, 40, 300):
        pt = pot.at(i)
        for br in ("d", "t"):
            p = relative_momentum(pot.E, pot.P, pt.r, pt, br)
            H = hamiltonian_value(0.5 * (pot.P + p), 0.5 * (pot.P - p), pt, pt.r)
            assert H == pytest.approx(pot.E, rel=1e-10)


def test_free_particle_limit():
    pot = PotentialPoint(1e15, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    assert hamiltonian_value(0.7, 0.7, pot, 1e15) == pytest.approx(-1 / (2 * 0.7), rel=1e-12)


@given(st.floats(0.3, 3.0))
def test_canonical_rescaling(lam):
    pt, P = _point()
    p1, p2 = -1.3, -0.4
    H = hamiltonian_value(p1, p2, pt, pt.r)
    bar = rescale_point(pt, lam)
    plain = hamiltonian_value(lam * p1, lam * p2, bar, pt.r / lam)
    assert plain == pytest.approx(H / lam, rel=1e-14)
    assert hamiltonian_value(lam * p1, lam * p2, bar, pt.r / lam, lam=lam) == pytest.approx(H, rel=1e-14)


def test_case_b_on_branch(pot):
    pt = pot.at(30)
    Ea, Eb = branch_energies(pot)
    assert Eb[30] == pytest.approx(pot.E, rel=1e-12)
    with pytest.raises(ValueError):
        hamiltonian_value(0.1, 0.1, pt, pt.r, case="c")


def test_csv_export(tmp_path, pot):
    pot.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].startswith("# E = 2, P = ")
    assert lines[1] == "r,phi,V,alpha,beta"
    assert len(lines) == len(pot) + 2


def test_F_profile_is_nearly_linear(orbit20):
    x, F = F_profile(orbit20.F_a, orbit20.r_o)
    assert x[0] > 0 and x[-1] == 1.0
    fit = two_term_fit(x, F, orbit20.r_o)
    assert fit.max_rel < 0.02
