"""Units, the ghost series F(r) and the value types shared by the other modules.

Units are c = m = e^2 = 1 throughout: lengths and times are measured in
classical electron radii and velocities are fractions of c.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Any, ClassVar, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from .errors import NonPositiveF, NonPositiveLambda, NonPositiveRadius

MAX_COEFFS = 18
F_CHECK_RMAX = 1e3
F_CHECK_POINTS = 256


@dataclass(frozen=True)
class Units:
    """Marker for the unit convention: c = 1, m1 = m2 = 1, e^2 = 1."""

    c: ClassVar[float] = 1.0
    m: ClassVar[float] = 1.0
    e2: ClassVar[float] = 1.0


UNITS = Units()


def fmt(x: float) -> str:
    """Lossless float formatting (17 significant digits)."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# ghost series


def _horner(k0: float, coeffs: Sequence[float], u):
    acc = 0.0 * u
    for k in reversed(coeffs):
        acc = (acc + k) * u
    return k0 - acc


@dataclass(frozen=True)
class GhostSeries:
    """F(r) = k0 - sum_n k_n / r**n for n = 1..N, N <= 18.

    ``r_min_valid`` is the smallest radius at which the series is trusted.
    ``None`` means "not yet fixed"; the solver sets it to 0.5*r_c.
    """

    coeffs: tuple = ()
    k0: float = 1.0
    r_min_valid: Optional[float] = None

    def __post_init__(self):
        c = tuple(float(k) for k in np.atleast_1d(np.asarray(self.coeffs, dtype=float)))
        if len(c) > MAX_COEFFS:
            raise ValueError(f"at most {MAX_COEFFS} coefficients allowed, got {len(c)}")
        if not all(math.isfinite(k) for k in c) or not math.isfinite(self.k0):
            raise ValueError("series coefficients must be finite")
        if self.r_min_valid is not None and not self.r_min_valid > 0:
            raise NonPositiveRadius(f"r_min_valid must be positive, got {self.r_min_valid}")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "k0", float(self.k0))

    @property
    def n(self) -> int:
        return len(self.coeffs)

    def __call__(self, r):
        return eval_F(self, r)

    def derivative(self, r):
        """Analytic dF/dr = sum_n n k_n / r**(n+1)."""
        r = np.asarray(r, dtype=float)
        u = 1.0 / r
        acc = np.zeros_like(r)
        for n in range(self.n, 0, -1):
            acc = (acc + n * self.coeffs[n - 1]) * u
        out = acc * u
        return float(out) if out.ndim == 0 else out

    def with_coeffs(self, coeffs, k0=None) -> "GhostSeries":
        return GhostSeries(tuple(coeffs), self.k0 if k0 is None else k0, self.r_min_valid)

    def with_r_min(self, r_min: Optional[float]) -> "GhostSeries":
        return GhostSeries(self.coeffs, self.k0, r_min)

    def padded(self, n: int) -> "GhostSeries":
        """Same function with zero coefficients appended up to length n."""
        return self.with_coeffs(self.coeffs + (0.0,) * max(0, n - self.n))

    def trimmed(self, threshold: float = 1e-12) -> "GhostSeries":
        """Drop trailing coefficients with |k_n| < threshold."""
        c = list(self.coeffs)
        while c and abs(c[-1]) < threshold:
            c.pop()
        return self.with_coeffs(c)

    def check_domain(self, r_min: Optional[float] = None, r_max: float = F_CHECK_RMAX,
                     n: int = F_CHECK_POINTS) -> None:
        """Raise NonPositiveF unless F > 0 on n log-spaced radii in [r_min, r_max]."""
        r_min = self.r_min_valid if r_min is None else r_min
        if r_min is None:
            raise ValueError("no lower radius given and r_min_valid is unset")
        rr = np.geomspace(r_min, max(r_max, 2 * r_min), n)
        vals = _horner(self.k0, self.coeffs, 1.0 / rr)
        bad = ~(vals > 0)
        if np.any(bad):
            r_bad = rr[np.argmax(bad)]
            raise NonPositiveF(f"F <= 0 at r = {r_bad:.6g} (domain check from r = {r_min:.6g})")

    def in_domain(self, r_min: Optional[float] = None) -> bool:
        try:
            self.check_domain(r_min)
        except NonPositiveF:
            return False
        return True

    def to_text(self) -> str:
        lines = [f"k0 = {fmt(self.k0)}"]
        lines += [f"k{n} = {fmt(k)}" for n, k in enumerate(self.coeffs, start=1)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, r_min_valid: Optional[float] = None) -> "GhostSeries":
        return parse_series(text, r_min_valid)


_KEY = re.compile(r"^k(0|[1-9][0-9]*)$")


def parse_series(text: str, r_min_valid: Optional[float] = None) -> GhostSeries:
    """Parse the ``k0 = ...`` / ``k<n> = ...`` block. Unknown keys are rejected."""
    vals: dict[int, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        m = _KEY.match(key)
        if not m:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        idx = int(m.group(1))
        if idx in vals:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            vals[idx] = float(val)
        except ValueError:
            raise ValueError(f"line {lineno}: bad number {val!r}") from None
    if 0 not in vals:
        raise ValueError("series text lacks a k0 line")
    n = max(vals)
    missing = [i for i in range(1, n + 1) if i not in vals]
    if missing:
        raise ValueError(f"missing coefficients: {', '.join('k%d' % i for i in missing)}")
    return GhostSeries(tuple(vals[i] for i in range(1, n + 1)), vals[0], r_min_valid)


def eval_F(series: GhostSeries, r):
    """Evaluate k0 - sum k_n / r**n. Accepts scalars or arrays."""
    arr = np.asarray(r, dtype=float)
    if np.any(~(arr > 0)):
        raise NonPositiveRadius(f"radius must be positive, got {r!r}")
    val = _horner(series.k0, series.coeffs, 1.0 / arr)
    if np.any(~(val > 0)):
        raise NonPositiveF(f"F(r) <= 0 for r = {r!r}")
    return float(val) if arr.ndim == 0 else val


def scale_series(series: GhostSeries, lam: float) -> GhostSeries:
    """Series of lam**2 * F(lam * r): k0 -> lam**2 k0, k_n -> lam**(2-n) k_n."""
    if not lam > 0:
        raise NonPositiveLambda(f"lambda must be positive, got {lam}")
    if lam == 1.0:
        return series
    c = tuple(k * lam ** (2 - n) for n, k in enumerate(series.coeffs, start=1))
    r_min = None if series.r_min_valid is None else series.r_min_valid / lam
    return GhostSeries(c, lam * lam * series.k0, r_min)


# ---------------------------------------------------------------------------
# worldlines


@dataclass(frozen=True, eq=False)
class Worldline:
    """Sampled trajectory with C1 dense output.

    x(t) is a cubic Hermite interpolant through (t, x, v); v(t) is a cubic
    spline through (t, v). Both depend on the samples only, so a worldline
    written to CSV and read back interpolates identically.
    """

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    tau: Optional[np.ndarray] = None
    check_speed: bool = field(default=True, repr=False)

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=float)
        x = np.ascontiguousarray(self.x, dtype=float)
        v = np.ascontiguousarray(self.v, dtype=float)
        if t.ndim != 1 or t.shape != x.shape or t.shape != v.shape or t.size < 2:
            raise ValueError("t, x, v must be 1-d arrays of equal length >= 2")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ValueError("worldline samples must be finite")
        if np.any(np.diff(t) <= 0):
            raise ValueError("worldline times must be strictly increasing")
        if self.check_speed and np.any(np.abs(v) >= 1):
            raise ValueError("worldline speed must stay below 1")
        if self.tau is None:
            gam = np.sqrt(np.clip(1 - v * v, 0, None))
            tau = cumulative_trapezoid(gam, t, initial=0.0)
        else:
            tau = np.ascontiguousarray(self.tau, dtype=float)
            if tau.shape != t.shape:
                raise ValueError("tau must match t in shape")
        for name, arr in (("t", t), ("x", x), ("v", v), ("tau", tau)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_x", CubicHermiteSpline(t, x, v, extrapolate=False))
        object.__setattr__(self, "_v", CubicSpline(t, v, extrapolate=False))

    def __len__(self):
        return self.t.size

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[-1])

    @property
    def subluminal(self) -> bool:
        return bool(np.all(np.abs(self.v) < 1))

    def position(self, t):
        out = self._x(t)
        return float(out) if np.ndim(out) == 0 else out

    def velocity(self, t):
        out = self._v(t)
        return float(out) if np.ndim(out) == 0 else out

    def resample(self, n: int) -> "Worldline":
        """Worldline on n points evenly spaced in proper time."""
        if n < 2:
            raise ValueError("need at least two samples")
        tau_s = np.linspace(self.tau[0], self.tau[-1], n)
        t_s = np.interp(tau_s, self.tau, self.t)
        t_s[0], t_s[-1] = self.t[0], self.t[-1]
        return Worldline(t_s, self._x(t_s), self._v(t_s), tau_s, check_speed=self.check_speed)

    def boosted(self, w: float) -> "Worldline":
        """Lorentz boost with speed w; proper time is carried unchanged."""
        if not abs(w) < 1:
            raise ValueError("boost speed must satisfy |w| < 1")
        g = 1.0 / math.sqrt(1 - w * w)
        tb = g * (self.t - w * self.x)
        xb = g * (self.x - w * self.t)
        vb = (self.v - w) / (1 - w * self.v)
        return Worldline(tb, xb, vb, self.tau, check_speed=self.check_speed)

    def shifted(self, dt: float = 0.0, dx: float = 0.0) -> "Worldline":
        return Worldline(self.t + dt, self.x + dx, self.v, self.tau, check_speed=self.check_speed)


WORLDLINE_HEADER = ("tau", "t", "x", "v")


def write_worldline_csv(wl: Worldline, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WORLDLINE_HEADER)
        for row in zip(wl.tau, wl.t, wl.x, wl.v):
            w.writerow([fmt(val) for val in row])


def read_worldline_csv(path, check_speed: bool = False) -> Worldline:
    """Load a worldline CSV. Speeds are not validated by default so that a
    corrupt file surfaces in the light-cone solver rather than at load time."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path) as fh:
        header = tuple(s.strip() for s in fh.readline().split(","))
    if header != WORLDLINE_HEADER:
        raise ValueError(f"{path}: expected header {','.join(WORLDLINE_HEADER)}")
    return Worldline(data[:, 1], data[:, 2], data[:, 3], data[:, 0], check_speed=check_speed)


# ---------------------------------------------------------------------------
# matching state and orbit


@dataclass(frozen=True)
class MatchingState:
    tau: float
    r_a: float
    r_b: float
    phi: float
    t1: float = 0.0
    x1: float = 0.0
    t2a: float = 0.0
    x2a: float = 0.0
    t2b: float = 0.0
    x2b: float = 0.0

    def __post_init__(self):
        if not (self.r_a > 0 and self.r_b > 0):
            raise NonPositiveRadius(f"light-cone distances must be positive: r_a={self.r_a}, r_b={self.r_b}")
        if not math.isfinite(self.phi):
            raise ValueError("rapidity must be finite")

    @property
    def v1(self) -> float:
        return math.tanh(self.phi)


@dataclass(frozen=True)
class QuenchRecord:
    """Bookkeeping attached to orbits produced by the quench."""

    iterations: int
    status: str
    history: tuple = ()
    wall_time: float = 0.0
    r_o_over_r_c: float = float("nan")


@dataclass(frozen=True, eq=False)
class OrbitSolution:
    series: Any  # GhostSeries, or (F_a, F_b) in generalized mode
    p1: Worldline
    p2a: Worldline
    p2b: Worldline
    r_c: float
    r_o: float
    v_inf: float
    deviation: float
    tau_max: float
    trajectory: Any = field(default=None, repr=False)
    mode: str = "symmetric"
    r_s0: float = float("nan")
    v_inf_fitted: bool = True
    quench: Optional[QuenchRecord] = None

    @property
    def F_a(self) -> GhostSeries:
        return self.series[0] if isinstance(self.series, tuple) else self.series

    @property
    def F_b(self) -> GhostSeries:
        return self.series[1] if isinstance(self.series, tuple) else self.series

    @property
    def n_coeffs(self) -> int:
        return max(self.F_a.n, self.F_b.n)
