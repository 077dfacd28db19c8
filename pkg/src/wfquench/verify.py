"""Independent checks of a converged orbit.

Nothing here uses the ghost function to judge the orbit except the
covariance check, which by design tests how the matching system transforms.
The delay equation residual and the monotonicity test work on worldlines
only, so they also accept data read back from CSV.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .core import OrbitSolution, Worldline, fmt, scale_series
from .errors import LagOutOfSpan, NoBracket
from .matching import rhs as matching_rhs
from .core import MatchingState

RESIDUAL_HEADER = ("t", "lhs", "rhs", "defect")


# ---------------------------------------------------------------------------
# light cones


def _lags(p1: Worldline, p2: Worldline, t: np.ndarray, sign: float, tol: float = 1e-12,
          max_iter: int = 200) -> np.ndarray:
    """Vectorised solve of L = x1(t) - x2(t + sign * L) for L > 0.

    sign = -1 gives the retarded delay r, sign = +1 the advanced lag q.  The
    function g(L) = L - x1(t) + x2(t + sign L) has slope 1 + sign v2 > 0, so a
    sign change brackets the unique root.  Bisection to tol, then one Newton
    step on the dense output.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo2, hi2 = p2.span
    lo1, hi1 = p1.span
    if np.any(t < lo1) or np.any(t > hi1):
        raise LagOutOfSpan("time outside the worldline of particle 1")
    x1 = p1.position(t)
    x1 = np.atleast_1d(x1)
    room = (t - lo2) if sign < 0 else (hi2 - t)
    if np.any(room < 0):
        raise LagOutOfSpan("time outside the worldline of particle 2")

    def g(L):
        return L - x1 + np.atleast_1d(p2.position(t + sign * L))

    a = np.zeros_like(t)
    ga = g(a)
    if np.any(~(ga < 0)):
        raise NoBracket("particles are not separated (x1 <= x2) at some sample time")
    b = np.minimum(np.maximum(2.0 * (x1 - np.atleast_1d(p2.position(t))), 1e-300), room)
    gb = g(b)
    for _ in range(200):
        need = gb < 0
        if not np.any(need):
            break
        if np.any(need & (b >= room)):
            raise LagOutOfSpan("light-cone lag runs past the end of the partner worldline")
        a = np.where(need, b, a)
        b = np.where(need, np.minimum(2.0 * b, room), b)
        gb = g(b)
    else:  # pragma: no cover - guarded by the span check above
        raise NoBracket("light-cone bracket did not close")
    # the bracket is only meaningful for subluminal partners
    i0 = np.searchsorted(p2.t, np.minimum(t + sign * a, t + sign * b), side="left")
    i1 = np.searchsorted(p2.t, np.maximum(t + sign * a, t + sign * b), side="right")
    cum = np.concatenate([[0], np.cumsum(np.abs(p2.v) >= 1)])
    bad = cum[np.minimum(i1, p2.t.size)] - cum[np.maximum(i0 - 1, 0)] > 0
    if np.any(bad):
        raise NoBracket("partner speed reaches 1 inside the light-cone bracket")
    for _ in range(max_iter):
        width = b - a
        if np.all(width <= tol * np.maximum(1.0, b)):
            break
        m = 0.5 * (a + b)
        gm = g(m)
        left = gm < 0
        a = np.where(left, m, a)
        b = np.where(left, b, m)
    L = 0.5 * (a + b)
    slope = 1.0 + sign * np.atleast_1d(p2.velocity(t + sign * L))
    L_new = L - g(L) / slope
    inside = (L_new >= a - tol) & (L_new <= b + tol) & np.isfinite(L_new)
    return np.where(inside, L_new, L)


def solve_lightcone(p1: Worldline, p2: Worldline, t):
    """Retarded delay r and advanced lag q of particle 2 seen from particle 1 at t.

    r = x1(t) - x2(t - r) and q = x1(t) - x2(t + q); particle 1 is on the right.
    Accepts a scalar or an array of times.
    """
    r = _lags(p1, p2, t, -1.0)
    q = _lags(p1, p2, t, +1.0)
    if np.ndim(t) == 0:
        return float(r[0]), float(q[0])
    return r, q


def orbit_center(orbit: OrbitSolution) -> float:
    """Centre c of a symmetric orbit, x2(t) = 2c - x1(t).

    Particle 1 turns at t = 0 and sees particle 2 on its advanced cone at
    t = r_c, so x1(0) - x2(r_c) = r_c fixes c = (x1(0) + x1(r_c) - r_c) / 2.
    """
    p1 = orbit.p1
    return float(0.5 * (p1.position(0.0) + p1.position(orbit.r_c) - orbit.r_c))


def mirror_partner(p1: Worldline, center: float = 0.0) -> Worldline:
    """Particle 2 of a symmetric orbit: x2(t) = 2 center - x1(t)."""
    return Worldline(p1.t, 2 * center - p1.x, -p1.v, p1.tau, check_speed=p1.check_speed)


# ---------------------------------------------------------------------------
# delay-equation residual


@dataclass(frozen=True)
class ResidualReport:
    t_grid: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    residuals: np.ndarray
    max_rel: float

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.residuals)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RESIDUAL_HEADER)
            for row in zip(self.t_grid, self.lhs, self.rhs, self.residuals):
                w.writerow([fmt(v) for v in row])


def _momentum(p: Worldline, t):
    v = np.asarray(p.velocity(t), dtype=float)
    return v / np.sqrt(1.0 - v * v)


def wf_residual_pair(p1: Worldline, p2: Worldline, t_grid, h: float) -> ResidualReport:
    """Residual of the half-retarded plus half-advanced equation of motion of particle 1.

    LHS = d/dt (v / sqrt(1 - v^2)) by a five-point stencil of width h on the
    dense output; RHS = (1 + v2(t-r)) / (1 - v2(t-r)) / (2 r^2)
    + (1 - v2(t+q)) / (1 + v2(t+q)) / (2 q^2), the repulsion from particle 2
    on the left.
    """
    t = np.atleast_1d(np.asarray(t_grid, dtype=float))
    # cones first: a superluminal sample surfaces as NoBracket, not as NaN momenta
    r, q = solve_lightcone(p1, p2, t)
    r, q = np.atleast_1d(r), np.atleast_1d(q)
    lhs = (-_momentum(p1, t + 2 * h) + 8 * _momentum(p1, t + h)
           - 8 * _momentum(p1, t - h) + _momentum(p1, t - 2 * h)) / (12 * h)
    vr = np.asarray(p2.velocity(t - r), dtype=float)
    vq = np.asarray(p2.velocity(t + q), dtype=float)
    force = 0.5 * (1 + vr) / (1 - vr) / r ** 2 + 0.5 * (1 - vq) / (1 + vq) / q ** 2
    defect = lhs - force
    max_rel = float(np.max(np.abs(defect) / np.abs(force)))
    return ResidualReport(t, lhs, force, defect, max_rel)


def wf_residual(orbit: OrbitSolution, window: Optional[float] = None, n: int = 401,
                partner: str = "mirror", h: Optional[float] = None) -> ResidualReport:
    """Delay-equation residual of particle 1 over |t| <= window (default 5 r_c).

    partner selects particle 2: "mirror" reflects particle 1 through the orbit
    centre (the symmetric-orbit ansatz), "a" or "b" use the reconstructions.
    """
    window = 5.0 * orbit.r_c if window is None else float(window)
    h = 1e-3 * orbit.r_c if h is None else float(h)
    if partner == "mirror":
        p2 = mirror_partner(orbit.p1, orbit_center(orbit))
    elif partner == "a":
        p2 = orbit.p2a
    elif partner == "b":
        p2 = orbit.p2b
    else:
        raise ValueError(f"unknown partner {partner!r}")
    t = np.linspace(-window, window, n)
    return wf_residual_pair(orbit.p1, p2, t, h)


# ---------------------------------------------------------------------------
# twice-monotonic property


@dataclass(frozen=True)
class MonotonicityReport:
    sign_changes: int
    qdot_min: float
    qdot_max: float
    lower: float
    upper: float
    within_bounds: bool
    v_inf: float
    warning: Optional[str] = None

    @property
    def passed(self) -> bool:
        if self.warning is not None:
            return True
        return self.sign_changes == 1 and self.within_bounds

    def to_text(self) -> str:
        lines = [
            f"sign_changes = {self.sign_changes}",
            f"qdot_min = {fmt(self.qdot_min)}",
            f"qdot_max = {fmt(self.qdot_max)}",
            f"lower_bound = {fmt(self.lower)}",
            f"upper_bound = {fmt(self.upper)}",
            f"within_bounds = {self.within_bounds}",
            f"v_inf = {fmt(self.v_inf)}",
            f"passed = {self.passed}",
        ]
        if self.warning:
            lines.append(f"warning = {self.warning}")
        return "\n".join(lines) + "\n"


def qdot_profile(p1: Worldline, p2: Worldline, t) -> np.ndarray:
    """dq/dt = (v1(t) - v2(t+q)) / (1 + v2(t+q)) along the advanced cone."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    q = _lags(p1, p2, t, +1.0)
    v2 = np.asarray(p2.velocity(t + q), dtype=float)
    return (np.asarray(p1.velocity(t), dtype=float) - v2) / (1 + v2)


def count_sign_changes(values, eps: float = 0.0) -> int:
    """Sign changes of a sampled function, ignoring samples with |value| <= eps."""
    v = np.asarray(values, dtype=float)
    s = np.sign(v[np.abs(v) > eps])
    return int(np.count_nonzero(s[1:] != s[:-1]))


def check_twice_monotonic_pair(p1: Worldline, p2: Worldline, v_inf: float, t_grid,
                               slack: float = 1e-9) -> MonotonicityReport:
    qd = qdot_profile(p1, p2, t_grid)
    lower = -2 * v_inf / (1 + v_inf)
    upper = 2 * v_inf / (1 - v_inf)
    within = bool(np.all(qd >= lower - slack) and np.all(qd <= upper + slack))
    warning = None
    if v_inf >= 1.0 / 3.0:
        warning = f"v_inf = {v_inf:.4f} >= 1/3: the property is not guaranteed"
    return MonotonicityReport(count_sign_changes(qd), float(qd.min()), float(qd.max()),
                              lower, upper, within, float(v_inf), warning)


def check_twice_monotonic(orbit: OrbitSolution, n: int = 2001, extent: float = 0.8) -> MonotonicityReport:
    """Count sign changes of dq/dt over the sampled orbit and test the asymptotic bounds.

    The partner is the mirror image of particle 1.  Since t + q grows at most
    like t (1 + v) / (1 - v), times are limited to that fraction of the span
    (times ``extent``) so the advanced point stays inside the data.
    """
    p1 = orbit.p1
    p2 = mirror_partner(p1, orbit_center(orbit))
    lo, hi = p1.span
    v = min(orbit.v_inf, 0.99)
    T = extent * min(-lo, hi) * (1 - v) / (1 + v)
    return check_twice_monotonic_pair(p1, p2, orbit.v_inf, np.linspace(-T, T, n))


# ---------------------------------------------------------------------------
# Lorentz covariance


class BoostedWorldlines(NamedTuple):
    p1: Worldline
    p2a: Worldline
    p2b: Worldline
    w: float


def boost_orbit(orbit, w: float) -> BoostedWorldlines:
    """Lorentz-boost every worldline of the orbit by speed w (proper time kept)."""
    if not abs(w) < 1:
        raise ValueError("boost speed must satisfy |w| < 1")
    if w == 0:
        return BoostedWorldlines(orbit.p1, orbit.p2a, orbit.p2b, 0.0)
    return BoostedWorldlines(orbit.p1.boosted(w), orbit.p2a.boosted(w), orbit.p2b.boosted(w), float(w))


def rsf_defect(p1: Worldline, p2: Worldline, n: int = 401, center=(0.0, 0.0),
               half_width: Optional[float] = None) -> float:
    """max |x1(t) + x2(2 t_c - t) - 2 x_c| over the common time span.

    A symmetric orbit, and every boost of one, is invariant under the point
    reflection through its centre event (t_c, x_c) with the particles
    exchanged: whenever x1(t1) + x2(t2) = 2 x_c on reflected events,
    t1 + t2 = 2 t_c.
    """
    tc, xc = center
    lo = max(p1.span[0], 2 * tc - p2.span[1])
    hi = min(p1.span[1], 2 * tc - p2.span[0])
    if half_width is not None:
        lo, hi = max(lo, tc - half_width), min(hi, tc + half_width)
    t = np.linspace(lo, hi, n)[1:-1]
    return float(np.max(np.abs(p1.position(t) + p2.position(2 * tc - t) - 2 * xc)))


@dataclass(frozen=True)
class CovarianceReport:
    w: float
    lam_a: float
    lam_b: float
    ode_defect: float      # max |kinematic - rhs| over dr_a, dr_b, dPhi (per tau)
    s_defect: float        # max |s_a in the boosted frame - s_a in the rest frame|
    distance_defect: float  # max |r_a(boosted) - r_a / lam_a| relative
    rsf: float             # reflection defect of the boosted pair (reported, not gated)
    tol: float

    @property
    def passed(self) -> bool:
        return self.ode_defect < self.tol and self.s_defect < self.tol and self.distance_defect < self.tol

    def row(self) -> str:
        return (f"w = {self.w:g}  lambda_a = {self.lam_a:.12g}  ode_defect = {self.ode_defect:.3e}  "
                f"s_defect = {self.s_defect:.3e}  distance_defect = {self.distance_defect:.3e}  "
                f"rsf = {self.rsf:.3e}  {'PASS' if self.passed else 'FAIL'}")

    def to_text(self) -> str:
        return self.row() + "\n"


def _rapidity(v):
    return np.arctanh(np.asarray(v, dtype=float))


def check_covariance(orbit: OrbitSolution, w: float, tol: float = 1e-8, n: int = 201,
                     window: Optional[float] = None) -> CovarianceReport:
    """Boost the orbit and test it against the matching system with scaled series.

    From the boosted worldlines alone the light-cone distances r_a (advanced,
    to the foliation-a reconstruction) and r_b (retarded, to foliation b) and
    the rapidity Phi are rebuilt at n proper times of particle 1 within
    |tau| <= window (default 5 r_c).  Their tau-derivatives, obtained
    kinematically from the velocities at both ends of each cone,

        dr_a/dtau = sinh(Phi - Phi2a) exp(-Phi2a)
        dr_b/dtau = sinh(Phi - Phi2b) exp(Phi2b)
        dPhi/dtau = cosh(Phi) dPhi/dt,

    are compared with the matching right-hand side evaluated with
    F_a -> scale_series(F, lam_a) and F_b -> scale_series(F, 1/lam_a).
    """
    lam_a = math.sqrt((1 - w) / (1 + w))
    lam_b = 1.0 / lam_a
    Fa = scale_series(orbit.F_a, lam_a)
    Fb = scale_series(orbit.F_b, lam_b)
    b = boost_orbit(orbit, w)
    window = 5.0 * orbit.r_c if window is None else float(window)
    tau = np.linspace(-window, window, n)
    p1 = b.p1
    t = np.interp(tau, p1.tau, p1.t)
    ra = _lags(p1, b.p2a, t, +1.0)
    rb = _lags(p1, b.p2b, t, -1.0)
    v1 = np.asarray(p1.velocity(t), dtype=float)
    phi = _rapidity(v1)
    phi2a = _rapidity(b.p2a.velocity(t + ra))
    phi2b = _rapidity(b.p2b.velocity(t - rb))
    dra = np.sinh(phi - phi2a) * np.exp(-phi2a)
    drb = np.sinh(phi - phi2b) * np.exp(phi2b)
    h = 1e-3 * orbit.r_c
    dv = (-p1.velocity(t + 2 * h) + 8 * p1.velocity(t + h) - 8 * p1.velocity(t - h)
          + p1.velocity(t - 2 * h)) / (12 * h)
    dphi = np.cosh(phi) * np.asarray(dv) / (1 - v1 * v1)
    worst = 0.0
    for i in range(tau.size):
        st = MatchingState(tau[i], ra[i], rb[i], phi[i], 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        d = matching_rhs(st, Fa, Fb)
        worst = max(worst, abs(d.r_a - dra[i]), abs(d.r_b - drb[i]), abs(d.phi - dphi[i]))
    # rest-frame values at the same proper times
    y = orbit.trajectory(tau)
    s_rest = np.log(orbit.F_a(y[0])) - 2 * y[2]
    s_boost = np.log(Fa(ra)) - 2 * phi
    s_def = float(np.max(np.abs(s_boost - s_rest)))
    dist = float(np.max(np.abs(ra * lam_a - y[0]) / y[0]))
    c = orbit_center(orbit)
    g = 1.0 / math.sqrt(1 - w * w)
    # particle 2 as reconstructed in foliation a, not the mirror of particle 1
    rsf = rsf_defect(p1, b.p2a, center=(-g * w * c, g * c), half_width=g * window)
    return CovarianceReport(float(w), lam_a, lam_b, float(worst), s_def, dist, rsf, tol)
