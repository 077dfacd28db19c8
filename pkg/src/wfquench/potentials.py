"""The simplest analytical branch of the ghost potentials.

Given the d-branch table s(r) of a solved orbit, its ghost function F(r) and
an energy E, the four potentials follow in closed form:

    phi = sinh(s/2) / sqrt(F)          V = sqrt(F) sinh(s/2)
    alpha e^{s/2} - beta e^{-s/2} = 2 E sqrt(F)
    alpha e^{-s/2} - beta e^{s/2} = -2 (P + 1/r) / sqrt(F)

with P fixed by E through the degenerate row at r_o (s = 0).  This branch
is algebraically self-consistent but is not the branch of the repulsive
low-energy orbits, so only identities are checked here, never conservation
along the numerical orbit.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import brentq

from .core import GhostSeries, OrbitSolution, fmt
from .errors import DegenerateSystem, NegativeDiscriminant, SingularDenominator

POTENTIAL_HEADER = ("r", "phi", "V", "alpha", "beta")
DEFAULT_ENERGY = 2.0


# ---------------------------------------------------------------------------
# s table


@dataclass(frozen=True)
class STable:
    """s(r) on the direct (d) branch, r ascending from r_o.

    The first row is (r_o, 0) exactly.  The turning (t) branch carries -s.
    """

    r: np.ndarray
    s: np.ndarray
    tau: np.ndarray
    r_o: float

    def value(self, r, branch: str = "d"):
        out = np.interp(r, self.r, self.s)
        if branch == "t":
            return -out
        if branch != "d":
            raise ValueError("branch must be 't' or 'd'")
        return out

    @property
    def monotone(self) -> bool:
        ds = np.diff(self.s)
        return bool(np.all(ds > 0) or np.all(ds < 0))


def s_table(orbit: OrbitSolution, r_max: Optional[float] = None, n: int = 400) -> STable:
    """Tabulate s_a = ln F(r_a) - 2 Phi along the incoming branch of r_a.

    r_a decreases to its minimum r_o exactly where s_a = 0 (dr_a/dtau
    vanishes with s_a), and the stretch before that minimum has no turning
    point of particle 1: that is the d branch.
    """
    traj = orbit.trajectory
    F = orbit.F_a
    r_max = 20.0 * orbit.r_c if r_max is None else float(r_max)

    def s_at(tau):
        y = traj(tau)
        return math.log(F(y[0])) - 2 * y[2]

    lo = traj.tau_lo
    a = -orbit.r_c
    while s_at(a) <= 0:
        a *= 2
        if a < lo:
            raise ValueError("s_a does not change sign on the integrated range")
    s0 = s_at(0.0)
    if s0 > 0:
        raise ValueError("s_a is positive at the turning point")
    tau_o = 0.0 if s0 == 0 else brentq(s_at, a, 0.0, xtol=1e-14, rtol=1e-15)
    r_o = float(traj(tau_o)[0])
    # walk backwards in tau until r_a passes r_max
    b = tau_o - orbit.r_c
    while traj(b)[0] < r_max:
        b = tau_o - 2 * (tau_o - b)
        if b < lo:
            b = lo
            break
    taus = tau_o - (tau_o - b) * np.linspace(0.0, 1.0, n) ** 2
    y = traj(taus)
    r = y[0].copy()
    s = np.log(F(r)) - 2 * y[2]
    r[0], s[0] = r_o, 0.0
    keep = r <= r_max
    keep[0] = True
    return STable(r[keep], s[keep], taus[keep], r_o)


# ---------------------------------------------------------------------------
# potentials


class PotentialPoint(NamedTuple):
    r: float
    s: float
    F: float
    phi: float
    V: float
    alpha: float
    beta: float


@dataclass(frozen=True)
class PotentialSet:
    r: np.ndarray
    s: np.ndarray
    F: np.ndarray
    phi: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    E: float
    P: float
    r_o: float

    def __len__(self):
        return self.r.size

    def at(self, i: int) -> PotentialPoint:
        return PotentialPoint(*(float(getattr(self, k)[i]) for k in PotentialPoint._fields))

    @property
    def regular(self) -> np.ndarray:
        """Rows where alpha and beta are defined."""
        return np.isfinite(self.alpha) & np.isfinite(self.beta)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# E = {fmt(self.E)}, P = {fmt(self.P)}, r_o = {fmt(self.r_o)}\n")
            w = csv.writer(fh)
            w.writerow(POTENTIAL_HEADER)
            for row in zip(self.r, self.phi, self.V, self.alpha, self.beta):
                w.writerow([fmt(v) for v in row])


def momentum_from_energy(E: float, r_o: float, F_o: float) -> float:
    """P from the degenerate row at r_o: E = -(P + 1/r_o) / F(r_o)."""
    return -E * F_o - 1.0 / r_o


def phi_V(s, F):
    """phi_d and V_d for given s and F."""
    sh = np.sinh(0.5 * np.asarray(s, dtype=float))
    rt = np.sqrt(np.asarray(F, dtype=float))
    return sh / rt, rt * sh


def solve_alpha_beta(s, F, E: float, P: float, r):
    """alpha_d, beta_d from the 2x2 linear system; DegenerateSystem at s = 0."""
    s = np.asarray(s, dtype=float)
    F = np.asarray(F, dtype=float)
    r = np.asarray(r, dtype=float)
    sh = np.sinh(s)
    if np.any(sh == 0):
        raise DegenerateSystem("the alpha/beta system is singular where s = 0")
    den = np.sqrt(F) * sh
    G = P + 1.0 / r
    alpha = (E * F * np.exp(0.5 * s) + G * np.exp(-0.5 * s)) / den
    beta = (E * F * np.exp(-0.5 * s) + G * np.exp(0.5 * s)) / den
    return alpha, beta


def _series_increment(series: GhostSeries, r: np.ndarray, r_o: float) -> np.ndarray:
    """F(r) - F(r_o) without cancellation: u^n - u_o^n = du * sum_j u^j u_o^(n-1-j)."""
    u = 1.0 / r
    uo = 1.0 / r_o
    du = (r_o - r) / (r * r_o)
    out = np.zeros_like(r)
    geo = np.zeros_like(r)       # sum_{j<n} u^j uo^(n-1-j)
    for n, k in enumerate(series.coeffs, start=1):
        geo = geo * uo + u ** (n - 1)
        out -= k * du * geo
    return out


def _alpha_beta_near(s, F, dF, du, E, F_o):
    """alpha, beta with P + 1/r = -E F_o + du folded in analytically.

    E F e^{s/2} + (P + 1/r) e^{-s/2} = E (dF e^{s/2} + 2 F_o sinh(s/2)) + du e^{-s/2}
    E F e^{-s/2} + (P + 1/r) e^{s/2} = E (dF e^{-s/2} - 2 F_o sinh(s/2)) + du e^{s/2}
    where dF = F - F_o and du = 1/r - 1/r_o.
    """
    sh = np.sinh(s)
    if np.any(sh == 0):
        raise DegenerateSystem("the alpha/beta system is singular where s = 0")
    ep, em, sh2 = np.exp(0.5 * s), np.exp(-0.5 * s), np.sinh(0.5 * s)
    den = np.sqrt(F) * sh
    alpha = (E * (dF * ep + 2 * F_o * sh2) + du * em) / den
    beta = (E * (dF * em - 2 * F_o * sh2) + du * ep) / den
    return alpha, beta


def build_potentials(table: STable, series: GhostSeries, E: float = DEFAULT_ENERGY,
                     exclude: float = 1e-6) -> PotentialSet:
    """Potentials on the table's radii.

    alpha and beta are NaN on rows within ``exclude`` of r_o, where the
    linear system degenerates.  Near r_o both numerators of the solved
    system are O(s); they are assembled from F - F(r_o) and 1/r - 1/r_o so
    that the cancellation happens analytically.
    """
    r = np.asarray(table.r, dtype=float)
    s = np.asarray(table.s, dtype=float)
    F = np.asarray(series(r), dtype=float)
    F_o = float(series(table.r_o))
    P = momentum_from_energy(E, table.r_o, F_o)
    phi, V = phi_V(s, F)
    alpha = np.full(r.shape, np.nan)
    beta = np.full(r.shape, np.nan)
    ok = (r - table.r_o > exclude) & (s != 0)
    dF = _series_increment(series, r[ok], table.r_o)
    du = (table.r_o - r[ok]) / (r[ok] * table.r_o)
    alpha[ok], beta[ok] = _alpha_beta_near(s[ok], F[ok], dF, du, E, F_o)
    return PotentialSet(r, s, F, phi, V, alpha, beta, float(E), float(P), float(table.r_o))


# ---------------------------------------------------------------------------
# momenta and Hamiltonians


def _d_root(pot: PotentialPoint) -> float:
    """Relative momentum on the d branch from the square roots of the xi equations."""
    rt = math.sqrt(pot.F)
    return -0.5 * rt * ((1 + pot.alpha) * math.exp(-0.5 * pot.s) + (1 + pot.beta) * math.exp(0.5 * pot.s))


def momentum_roots(E: float, P: float, r: float, pot: PotentialPoint) -> tuple[float, float]:
    """Both roots of the quadratic H_a(P, p) = E for the relative momentum p.

    With eps = E + phi, S = P + V + 1/r, Q = (M1^2 + M2^2)/4 and
    Delta = (M2^2 - M1^2)/4 (M1 = 1 + alpha, M2 = 1 + beta):
    p = Delta/eps +- sqrt((S + Q/eps)^2 + (Delta^2 - Q^2)/eps^2),
    so the two roots sum to 2 Delta / eps.
    """
    eps = E + pot.phi
    if eps == 0:
        raise SingularDenominator("E + phi vanishes")
    M1, M2 = 1 + pot.alpha, 1 + pot.beta
    Q = 0.25 * (M1 * M1 + M2 * M2)
    D = 0.25 * (M2 * M2 - M1 * M1)
    S = P + pot.V + 1.0 / r
    disc = (S + Q / eps) ** 2 + (D * D - Q * Q) / eps ** 2
    if disc < 0:
        scale = (S + Q / eps) ** 2 + Q * Q / eps ** 2
        if disc < -1e-13 * scale:
            raise NegativeDiscriminant(f"discriminant {disc:.3e} < 0 at r = {r:g}")
        disc = 0.0
    root = math.sqrt(disc)
    return D / eps + root, D / eps - root


def relative_momentum(E: float, P: float, r: float, pot: PotentialPoint, branch: str = "d") -> float:
    """Relative momentum p = p1 - p2 on the d or t branch.

    The d branch is the root that coincides with the square roots taken in
    the xi equations of motion; the t branch is the other root.
    """
    if branch not in ("d", "t"):
        raise ValueError("branch must be 'd' or 't'")
    hi, lo = momentum_roots(E, P, r, pot)
    pd = _d_root(pot)
    d_is_hi = abs(hi - pd) <= abs(lo - pd)
    if branch == "d":
        return hi if d_is_hi else lo
    return lo if d_is_hi else hi


def hamiltonian_value(p1: float, p2: float, pot: PotentialPoint, r: float, case: str = "a",
                      lam: float = 1.0) -> float:
    """lam * H for foliation a or b.

    H_a = -1/4 [M1^2 / (p1 + V/2 + 1/(2r)) + M2^2 / (p2 + V/2 + 1/(2r))] - phi
    with M1 = 1 + alpha, M2 = 1 + beta; case b flips the signs of V, phi,
    alpha and beta.  |xi1 - xi2| = 2r.  The prefactor lam is the one carried
    by the Hamiltonian after the canonical rescaling xi -> xi/lam,
    p -> lam p.
    """
    if case == "a":
        sv, M1, M2 = 1.0, 1 + pot.alpha, 1 + pot.beta
    elif case == "b":
        sv, M1, M2 = -1.0, 1 - pot.alpha, 1 - pot.beta
    else:
        raise ValueError("case must be 'a' or 'b'")
    base = 0.5 * sv * pot.V + 0.5 / r
    d1, d2 = p1 + base, p2 + base
    for d, p in ((d1, p1), (d2, p2)):
        if abs(d) <= 1e-15 * (abs(p) + abs(base)):
            raise SingularDenominator(f"momentum denominator vanishes at r = {r:g}")
    H = -0.25 * (M1 * M1 / d1 + M2 * M2 / d2) - sv * pot.phi
    return lam * H


def rescale_point(pot: PotentialPoint, lam: float) -> PotentialPoint:
    """Potentials seen after xi -> xi/lam: r -> r/lam, V -> lam V, phi -> phi/lam."""
    return pot._replace(r=pot.r / lam, V=lam * pot.V, phi=pot.phi / lam)


def branch_energies(pot: PotentialSet) -> tuple[np.ndarray, np.ndarray]:
    """E_a and E_b from the square-root forms of the two Hamiltonians on the d branch."""
    rt = np.sqrt(pot.F)
    ep, em = np.exp(0.5 * pot.s), np.exp(-0.5 * pot.s)
    Ea = -pot.phi + ((1 + pot.alpha) * ep - (1 + pot.beta) * em) / (2 * rt)
    Eb = pot.phi - ((1 - pot.alpha) * ep - (1 - pot.beta) * em) / (2 * rt)
    return Ea, Eb


# ---------------------------------------------------------------------------
# identity checks


@dataclass(frozen=True)
class BranchReport:
    eq_a: float          # P + V + 1/r against its (E + phi) form
    eq_b: float          # P - V + 1/r against its (E - phi) form
    xi1: float           # e^s / F against (1 + alpha)^2 / (4 D1^2)
    xi2: float           # e^-s / F against (1 + beta)^2 / (4 D2^2)
    linear: float        # residual of the alpha/beta system
    energy: float        # max |E_a - E|, |E_b - E|
    rows: int

    @property
    def worst(self) -> float:
        return max(self.eq_a, self.eq_b, self.xi1, self.xi2, self.linear, self.energy)

    def passed(self, tol: float = 1e-10) -> bool:
        return self.worst < tol

    def to_text(self) -> str:
        return "\n".join(f"{k} = {getattr(self, k):.3e}" for k in
                         ("eq_a", "eq_b", "xi1", "xi2", "linear", "energy")) + f"\nrows = {self.rows}\n"


def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def check_branch_identities(pot: PotentialSet, table: Optional[STable] = None,
                            series: Optional[GhostSeries] = None) -> BranchReport:
    """Evaluate both sides of every branch identity on the regular rows.

    Defects are relative: |lhs - rhs| / max(1, |lhs|, |rhs|).  When a table or
    series is given, the potentials' s and F columns are first checked
    against them.
    """
    if table is not None and not np.allclose(np.interp(pot.r, table.r, table.s), pot.s, rtol=0, atol=1e-12):
        raise ValueError("potential set was not built from this s table")
    if series is not None and not np.allclose(series(pot.r), pot.F, rtol=1e-13, atol=0):
        raise ValueError("potential set was not built from this series")
    ok = pot.regular
    r, s, F = pot.r[ok], pot.s[ok], pot.F[ok]
    phi, V, al, be = pot.phi[ok], pot.V[ok], pot.alpha[ok], pot.beta[ok]
    E, P = pot.E, pot.P
    ch = np.cosh(s)
    lhs_a = P + V + 1.0 / r
    rhs_a = (2 * (1 + al) * (1 + be) * ch - (1 + al) ** 2 - (1 + be) ** 2) / (4 * (E + phi))
    lhs_b = P - V + 1.0 / r
    rhs_b = (2 * (1 - al) * (1 - be) * ch - (1 - al) ** 2 - (1 - be) ** 2) / (4 * (E - phi))
    xi1 = np.empty(r.size)
    xi2 = np.empty(r.size)
    idx = np.flatnonzero(ok)
    for j, i in enumerate(idx):
        pt = pot.at(i)
        p = relative_momentum(E, P, pt.r, pt, "d")
        p1, p2 = 0.5 * (P + p), 0.5 * (P - p)
        D1 = p1 + 0.5 * pt.V + 0.5 / pt.r
        D2 = p2 + 0.5 * pt.V + 0.5 / pt.r
        xi1[j] = _rel(math.exp(pt.s) / pt.F, (1 + pt.alpha) ** 2 / (4 * D1 * D1))
        xi2[j] = _rel(math.exp(-pt.s) / pt.F, (1 + pt.beta) ** 2 / (4 * D2 * D2))
    ep, em = np.exp(0.5 * s), np.exp(-0.5 * s)
    rt = np.sqrt(F)
    lin = np.maximum(_rel(al * ep - be * em, 2 * E * rt), _rel(al * em - be * ep, -2 * (P + 1 / r) / rt))
    Ea, Eb = branch_energies(pot)
    en = np.maximum(_rel(Ea[ok], E), _rel(Eb[ok], E))

    def mx(a):
        return float(np.max(a)) if a.size else 0.0

    return BranchReport(mx(_rel(lhs_a, rhs_a)), mx(_rel(lhs_b, rhs_b)), mx(xi1), mx(xi2),
                        mx(lin), mx(en), int(ok.sum()))


# ---------------------------------------------------------------------------
# F(r) presentation


class TwoTermFit(NamedTuple):
    k1: float
    max_rel: float


def F_profile(series: GhostSeries, r_o: float, n: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """(r_o / r, F(r)) on n points with r_o / r evenly spaced in (0, 1]."""
    x = np.linspace(1.0, 0.0, n, endpoint=False)[::-1]
    return x, np.asarray(series(r_o / x), dtype=float)


def two_term_fit(ro_over_r, F, r_o: float) -> TwoTermFit:
    """Least-squares k1 for F ~ 1 - k1 / r and the worst relative misfit."""
    x = np.asarray(ro_over_r, dtype=float)
    F = np.asarray(F, dtype=float)
    u = x / r_o                     # 1/r
    k1 = float(np.dot(u, 1 - F) / np.dot(u, u))
    fit = 1 - k1 * u
    return TwoTermFit(k1, float(np.max(np.abs(F - fit) / F)))
