"""Mismatch functional, finite-difference gradient, descent and continuation.

The unknown ghost series is adjusted until the two reconstructions of
particle 2 (advanced-cone foliation a, retarded-cone foliation b) coincide.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .core import GhostSeries, OrbitSolution, QuenchRecord, fmt, scale_series
from .errors import (DomainError, GridOutOfRange, NoDescentDirection, NonPositiveF, StageFailed,
                     StepSizeUnderflow)
from .matching import SolveConfig, integrate_orbit, integrate_trajectory, mismatch_vector

log = logging.getLogger(__name__)

QUENCH_LOG_HEADER = ("iter", "A", "step", "grad_norm", "n_coeffs")


@dataclass(frozen=True)
class QuenchConfig:
    """Settings of the mismatch functional and of the descent.

    grid_span is the fraction of the overlap covered by the comparison grid,
    measured from the turning end; window bounds the overlap to |t2| below
    window * r_c.  direction selects the descent metric: "gauss-newton"
    preconditions the gradient with the pull-back of the mismatch vector,
    "steepest" uses the raw coefficient gradient.
    """

    grid_size: int = 64
    grid_span: float = 1.0
    window: float = 5.0
    fd_step: float = 1e-5
    step0: float = 1.0
    shrink: float = 0.5
    grow: float = 2.0
    A_tol: float = 1e-6
    A_accept: float = 1e-4
    max_iters: int = 100
    direction: str = "gauss-newton"
    min_step: float = 1e-10
    stall_rtol: float = 1e-3
    stall_patience: int = 3
    max_coeffs: int = 18
    threads: int = 1

    def __post_init__(self):
        if self.grid_size < 16:
            raise ValueError("grid_size must be at least 16")
        if not 0 < self.grid_span <= 1:
            raise ValueError("grid_span must lie in (0, 1]")
        if not self.window > 0:
            raise ValueError("window must be positive")
        if not self.A_tol > 0:
            raise ValueError("A_tol must be positive")
        if not 0 < self.shrink < 1 < self.grow:
            raise ValueError("need 0 < shrink < 1 < grow")
        if not self.fd_step > 0 or not self.step0 > 0:
            raise ValueError("fd_step and step0 must be positive")
        if self.direction not in ("gauss-newton", "steepest"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if not 1 <= self.max_coeffs <= 18:
            raise ValueError("max_coeffs must lie in 1..18")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


# ---------------------------------------------------------------------------
# parameterisation


class _Problem:
    """Maps a flat parameter vector to series, and evaluates the mismatch.

    The descent works on the dimensionless coefficients u_n = k_n / r**n
    (r = the turning-point distance), in which every basis function
    (r/x)**n is of order one on the orbit; raw k_n span many decades and a
    fixed finite-difference step would be lost in integration noise for
    the higher terms.  Symmetric mode varies u_1..u_N with k0 fixed;
    generalized mode varies (k0, u_1..u_N) of F_a followed by F_b.
    """

    def __init__(self, cfg: SolveConfig, qcfg: QuenchConfig, F_a: GhostSeries,
                 F_b: Optional[GhostSeries] = None):
        self.cfg, self.qcfg = cfg, qcfg
        self.generalized = cfg.mode == "generalized"
        self.F_a = F_a.with_r_min(F_a.r_min_valid or 0.5 * cfg.r_c)
        F_b = F_a if F_b is None else F_b
        self.F_b = F_b.with_r_min(F_b.r_min_valid or 0.5 * cfg.r_b0)
        self.na, self.nb = self.F_a.n, self.F_b.n
        self.ra, self.rb = cfg.r_c, cfg.r_b0
        self.stop_after = (qcfg.window + 0.5) * cfg.r_ref

    @staticmethod
    def _powers(r, n):
        return r ** np.arange(1, n + 1, dtype=float)

    def params(self) -> np.ndarray:
        ua = np.asarray(self.F_a.coeffs) / self._powers(self.ra, self.na)
        if self.generalized:
            ub = np.asarray(self.F_b.coeffs) / self._powers(self.rb, self.nb)
            return np.concatenate([[self.F_a.k0], ua, [self.F_b.k0], ub])
        return ua

    def series(self, p) -> tuple[GhostSeries, GhostSeries]:
        p = np.asarray(p, dtype=float)
        if self.generalized:
            ka = p[1:self.na + 1] * self._powers(self.ra, self.na)
            kb = p[self.na + 2:] * self._powers(self.rb, self.nb)
            a = GhostSeries(tuple(ka), p[0], self.F_a.r_min_valid)
            b = GhostSeries(tuple(kb), p[self.na + 1], self.F_b.r_min_valid)
            return a, b
        s = self.F_a.with_coeffs(p * self._powers(self.ra, self.na))
        return s, s

    def scales(self, p) -> np.ndarray:
        return self.qcfg.fd_step * np.maximum(1.0, np.abs(p))

    def residual(self, p) -> Optional[np.ndarray]:
        """Mismatch vector, or None when the series leaves the physical domain."""
        try:
            Fa, Fb = self.series(p)
            Fa.check_domain()
            if self.generalized:
                Fb.check_domain()
            traj = integrate_trajectory(self.cfg, Fa, Fb, stop_after=self.stop_after)
            d = mismatch_vector(traj, self.qcfg.grid_size, self.qcfg.grid_span, self.qcfg.window)
        except (DomainError, NonPositiveF, StepSizeUnderflow, GridOutOfRange, ValueError) as exc:
            log.debug("objective unavailable: %s", exc)
            return None
        if not np.all(np.isfinite(d)):
            return None
        return d


def _rms(d) -> float:
    return float(np.sqrt(np.mean(np.square(d))))


def deviation(orbit: OrbitSolution, qcfg: Optional[QuenchConfig] = None) -> float:
    """Root-mean-square gap t2a(x_i) - t2b(x_i) over the comparison grid."""
    qcfg = QuenchConfig() if qcfg is None else qcfg
    d = mismatch_vector(orbit.trajectory, qcfg.grid_size, qcfg.grid_span, qcfg.window)
    return _rms(d)


def deviation_of_samples(t_a: np.ndarray, t_b: np.ndarray) -> float:
    """RMS gap between two reconstructions already evaluated on a common grid."""
    t_a, t_b = np.asarray(t_a, dtype=float), np.asarray(t_b, dtype=float)
    if t_a.shape != t_b.shape or t_a.size == 0:
        raise GridOutOfRange("reconstructions must be sampled on the same nonempty grid")
    return _rms(t_a - t_b)


class _FDResult(NamedTuple):
    grad: np.ndarray      # dA/dp, NaN where unavailable
    jac: np.ndarray       # d(mismatch)/dp, zero columns where unavailable


def _finite_differences(prob: _Problem, p: np.ndarray, d0: np.ndarray, A0: float,
                        threads: int = 1) -> _FDResult:
    h = prob.scales(p)
    trials = []
    for i in range(p.size):
        for sgn in (1.0, -1.0):
            q = p.copy()
            q[i] += sgn * h[i]
            trials.append(q)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            res = list(pool.map(prob.residual, trials))
    else:
        res = [prob.residual(q) for q in trials]
    ok = np.zeros(p.size, dtype=bool)
    jac = np.zeros((d0.size, p.size))
    for i in range(p.size):
        dp, dm = res[2 * i], res[2 * i + 1]
        if dp is not None and dm is not None:
            jac[:, i] = (dp - dm) / (2 * h[i])
        elif dp is not None:
            jac[:, i] = (dp - d0) / h[i]
        elif dm is not None:
            jac[:, i] = (d0 - dm) / h[i]
        else:
            continue
        ok[i] = True
    # chain rule through the differenced mismatch vector: dA/dp = J^T d / (N A).
    # Differencing A itself fails near a minimum, where |J h| exceeds |d| and
    # the kink of the norm swamps the slope.
    grad = np.full(p.size, np.nan)
    if A0 > 0:
        grad[ok] = (jac[:, ok].T @ d0) / (d0.size * A0)
    else:
        grad[ok] = 0.0
    return _FDResult(grad, jac)


class _RawProblem(_Problem):
    """Same objective parameterised by the raw coefficients k_n."""

    def params(self) -> np.ndarray:
        if self.generalized:
            return np.array([self.F_a.k0, *self.F_a.coeffs, self.F_b.k0, *self.F_b.coeffs])
        return np.array(self.F_a.coeffs, dtype=float)

    def series(self, p):
        p = np.asarray(p, dtype=float)
        if self.generalized:
            a = GhostSeries(tuple(p[1:self.na + 1]), p[0], self.F_a.r_min_valid)
            b = GhostSeries(tuple(p[self.na + 2:]), p[self.na + 1], self.F_b.r_min_valid)
            return a, b
        s = self.F_a.with_coeffs(p)
        return s, s


def objective(series: GhostSeries, cfg: SolveConfig, qcfg: Optional[QuenchConfig] = None,
              series_b: Optional[GhostSeries] = None) -> float:
    """A for the given series (inf when the series leaves the domain)."""
    qcfg = QuenchConfig() if qcfg is None else qcfg
    prob = _RawProblem(cfg, qcfg, series, series_b)
    d = prob.residual(prob.params())
    return math.inf if d is None else _rms(d)


def gradient(series: GhostSeries, cfg: SolveConfig, qcfg: Optional[QuenchConfig] = None,
             series_b: Optional[GhostSeries] = None) -> np.ndarray:
    """dA/dk_n from central differences with step fd_step * max(1, |k_n|).

    The mismatch vector d is differenced and contracted as J^T d / (N A),
    which equals the derivative of A = rms(d) but stays accurate close to a
    minimum where differencing A directly does not.

    Components whose perturbations leave the domain on both sides are NaN.
    In generalized mode the vector is (k0_a, k_a..., k0_b, k_b...).
    """
    qcfg = QuenchConfig() if qcfg is None else qcfg
    prob = _RawProblem(cfg, qcfg, series, series_b)
    p = prob.params()
    d0 = prob.residual(p)
    if d0 is None:
        raise DomainError("objective is not defined at the given series")
    return _finite_differences(prob, p, d0, _rms(d0), qcfg.threads).grad


# ---------------------------------------------------------------------------
# descent


class _Log:
    def __init__(self, path=None, checkpoint=None, append=False):
        self.rows = []
        self.path = Path(path) if path else None
        self.checkpoint = Path(checkpoint) if checkpoint else None
        if self.path and not (append and self.path.exists()):
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(QUENCH_LOG_HEADER)

    def add(self, it, A, step, gnorm, n, series=None):
        row = (it, A, step, gnorm, n)
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([it, fmt(A), fmt(step), fmt(gnorm), n])
        if self.checkpoint and series is not None:
            tmp = self.checkpoint.with_suffix(self.checkpoint.suffix + ".tmp")
            tmp.write_text(series.to_text())
            tmp.replace(self.checkpoint)


def _descend(prob: _Problem, p: np.ndarray, qcfg: QuenchConfig, logger: _Log):
    d = prob.residual(p)
    if d is None:
        raise DomainError("seed series is outside the domain of the objective")
    A = _rms(d)
    n_coef = max(prob.na, prob.nb)
    logger.add(0, A, 0.0, math.nan, n_coef, prob.series(p)[0] if not prob.generalized else None)
    eta = qcfg.step0
    accepted = 0
    slow = 0
    status = "max_iters"
    while True:
        if A <= qcfg.A_tol:
            status = "converged"
            break
        if accepted >= qcfg.max_iters:
            break
        fd = _finite_differences(prob, p, d, A, qcfg.threads)
        g = np.nan_to_num(fd.grad, nan=0.0)
        gnorm = float(np.linalg.norm(g))
        if not gnorm > 0:
            if accepted == 0:
                raise NoDescentDirection("gradient vanishes or is unavailable at the seed")
            status = "stalled"
            break
        if qcfg.direction == "gauss-newton":
            step, *_ = np.linalg.lstsq(fd.jac, -d, rcond=1e-12)
            if not np.all(np.isfinite(step)) or step @ g >= 0:
                step = -g
        else:
            step = -g
        eta_try = min(eta, 1.0) if qcfg.direction == "gauss-newton" else eta
        floor = qcfg.min_step * qcfg.step0
        new = None
        while eta_try >= floor:
            q = p + eta_try * step
            dq = prob.residual(q)
            if dq is not None and _rms(dq) < A:
                new = (q, dq, _rms(dq))
                break
            eta_try *= qcfg.shrink
        if new is None:
            if accepted == 0:
                raise NoDescentDirection(f"backtracking underflow at A = {A:.3e}")
            status = "stalled"
            break
        q, dq, Aq = new
        rel = (A - Aq) / A
        p, d, A = q, dq, Aq
        accepted += 1
        logger.add(accepted, A, eta_try, gnorm, n_coef, prob.series(p)[0] if not prob.generalized else None)
        log.info("iter %d  A = %.4e  step = %.3g  |grad| = %.3e", accepted, A, eta_try, gnorm)
        eta = eta_try * qcfg.grow
        slow = slow + 1 if rel < qcfg.stall_rtol else 0
        if slow >= qcfg.stall_patience:
            status = "stalled"
            break
    return p, A, accepted, status


def quench(seed: GhostSeries, cfg: SolveConfig, qcfg: Optional[QuenchConfig] = None,
           log_path=None, checkpoint=None, seed_b: Optional[GhostSeries] = None,
           append_log: bool = False) -> OrbitSolution:
    """Backtracking descent on the series coefficients from ``seed``.

    The returned orbit carries the final series, the full worldlines and a
    QuenchRecord whose ``iterations`` counts the seed evaluation plus every
    accepted step (a converged seed therefore reports one iteration).
    """
    qcfg = QuenchConfig() if qcfg is None else qcfg
    t0 = time.perf_counter()
    prob = _Problem(cfg, qcfg, seed, seed_b)
    logger = _Log(log_path, checkpoint, append_log)
    p, A, accepted, status = _descend(prob, prob.params(), qcfg, logger)
    Fa, Fb = prob.series(p)
    orbit = integrate_orbit(cfg, Fa, Fb, qcfg.grid_size, qcfg.grid_span, qcfg.window)
    rec = QuenchRecord(accepted + 1, status, tuple(logger.rows), time.perf_counter() - t0,
                       orbit.r_o / orbit.r_c)
    return replace(orbit, quench=rec)


# ---------------------------------------------------------------------------
# continuation


def _seed_for(series: GhostSeries, r_c_old: Optional[float], r_c: float) -> GhostSeries:
    """Carry a converged series to the next r_c.

    The unchanged series is used when it passes the domain check at the new
    r_c; otherwise the series expressed in r/r_c (k_n scaled by
    (r_c/r_c_old)**n) is tried.
    """
    s = series.with_r_min(0.5 * r_c)
    if s.in_domain() or r_c_old is None:
        return s
    ratio = r_c / r_c_old
    alt = s.with_coeffs([k * ratio ** n for n, k in enumerate(s.coeffs, start=1)])
    return alt if alt.in_domain() else s


def solve_stage(seed: GhostSeries, cfg: SolveConfig, qcfg: Optional[QuenchConfig] = None,
                log_path=None, checkpoint=None, stage: int = 0) -> OrbitSolution:
    """Quench at one r_c, growing the series while it pays off.

    After each quench that misses A_tol, one zero coefficient is appended and
    the quench restarted; growth stops when the extra coefficient fails to
    halve A or max_coeffs is reached.  Trailing coefficients below 1e-12 are
    dropped from the result.  All attempts append to one quench log.
    Raises StageFailed when the best A exceeds qcfg.A_accept.
    """
    qcfg = QuenchConfig() if qcfg is None else qcfg
    t0 = time.perf_counter()
    s = seed
    best = None
    if log_path is not None:
        _Log(log_path)          # truncate and write the header once
    try:
        while True:
            orb = quench(s, cfg, qcfg, log_path=log_path, checkpoint=checkpoint, append_log=True)
            log.info("stage %d r_c=%g n=%d A=%.3e (%s)", stage, cfg.r_c, s.n, orb.deviation, orb.quench.status)
            if best is not None and not orb.deviation < 0.5 * best.deviation:
                break
            best = orb
            if orb.deviation <= qcfg.A_tol or s.n >= qcfg.max_coeffs:
                break
            s = orb.series.padded(s.n + 1)
    except (NoDescentDirection, DomainError, StepSizeUnderflow) as exc:
        if best is None:
            raise StageFailed(f"stage {stage} (r_c = {cfg.r_c}) failed: {exc}", stage, cfg.r_c, math.inf) from exc
    if best.deviation > qcfg.A_accept:
        raise StageFailed(f"stage {stage} (r_c = {cfg.r_c}) stopped at A = {best.deviation:.3e}",
                          stage, cfg.r_c, best.deviation)
    trimmed = best.series.trimmed(1e-12)
    if checkpoint is not None:
        Path(checkpoint).write_text(trimmed.to_text())
    rec = replace(best.quench, wall_time=time.perf_counter() - t0)
    return replace(best, series=trimmed, quench=rec)


def continuation(schedule: Sequence[float], cfg: Optional[SolveConfig] = None,
                 qcfg: Optional[QuenchConfig] = None, seed: Optional[GhostSeries] = None,
                 n_start: int = 2, out_dir=None,
                 on_stage: Optional[Callable[[int, OrbitSolution], None]] = None) -> list:
    """Quench along a decreasing r_c schedule, seeding each stage with the last.

    Each stage runs solve_stage.  With out_dir, stage k logs to
    quench_log_<k>.csv and checkpoints series_<k>.txt there.  A failing stage
    raises StageFailed carrying the completed orbits; later stages are not
    attempted.
    """
    qcfg = QuenchConfig() if qcfg is None else qcfg
    schedule = [float(r) for r in schedule]
    if not schedule:
        raise ValueError("schedule is empty")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be strictly decreasing")
    base = cfg if cfg is not None else SolveConfig(r_c=schedule[0])
    series = seed if seed is not None else GhostSeries((0.0,) * n_start)
    prev_rc = None
    out = []
    for stage, r_c in enumerate(schedule):
        tau_max = None if cfg is None or cfg.tau_max is None else cfg.tau_max * r_c / base.r_c
        scfg = replace(base, r_c=r_c, tau_max=tau_max, sample_step=None, r_b0=None)
        paths = {}
        if out_dir is not None:
            paths = dict(log_path=Path(out_dir) / f"quench_log_{stage:02d}.csv",
                         checkpoint=Path(out_dir) / f"series_{stage:02d}.txt")
        try:
            best = solve_stage(_seed_for(series, prev_rc, r_c), scfg, qcfg, stage=stage, **paths)
        except StageFailed as exc:
            raise StageFailed(str(exc), stage, r_c, exc.best_A, out) from exc
        out.append(best)
        if on_stage is not None:
            on_stage(stage, best)
        series, prev_rc = best.series, r_c
    return out


# ---------------------------------------------------------------------------
# generalized mode


class ScalingReport(NamedTuple):
    lam: float          # lambda_a with F_a = scale(F, lam), F_b = scale(F, 1/lam)
    residual: float     # RMS relative misfit of F_b against the scaled F_a
    radii: tuple


def fit_scaling(F_a: GhostSeries, F_b: GhostSeries, r_lo: float, r_hi: float, n: int = 200) -> ScalingReport:
    """Best lam with F_b(r) = lam**-4 F_a(r / lam**2) on [r_lo, r_hi]."""
    rr = np.geomspace(r_lo, r_hi, n)
    try:
        fb = F_b(rr)
    except NonPositiveF:
        return ScalingReport(math.nan, math.inf, (r_lo, r_hi))

    def misfit(log_lam):
        mu = math.exp(-2 * log_lam)
        try:
            model = scale_series(F_a, mu)(rr)
        except (NonPositiveF, ValueError):
            return math.inf
        return float(np.sqrt(np.mean(((model - fb) / fb) ** 2)))

    guess = 0.25 * math.log(F_a.k0 / F_b.k0) if F_a.k0 > 0 and F_b.k0 > 0 else 0.0
    res = minimize_scalar(misfit, bracket=(guess - 0.05, guess + 0.05), tol=1e-12)
    return ScalingReport(math.exp(res.x), float(res.fun), (r_lo, r_hi))


def generalized_quench(seed_a: GhostSeries, seed_b: GhostSeries, r_a0: float, r_b0: float,
                       cfg: Optional[SolveConfig] = None, qcfg: Optional[QuenchConfig] = None,
                       log_path=None, prescale: bool = True):
    """Quench F_a and F_b (k0 free) jointly from a Phi = 0 start with r_a0, r_b0.

    A symmetric orbit seen from a frame moving at w has, at the instant
    particle 1 is at rest, r_b0 / r_a0 close to lam_a**4 (exact in the slow
    limit).  With ``prescale`` the seeds are therefore mapped to
    scale_series(seed_a, lam0) and scale_series(seed_b, 1 / lam0) with
    lam0 = (r_b0 / r_a0)**0.25 before the descent; without it an unequal
    start begins far outside the basin of the quench.

    Returns (orbit, ScalingReport).
    """
    base = cfg if cfg is not None else SolveConfig(r_c=r_a0)
    gcfg = replace(base, r_c=r_a0, r_b0=r_b0, mode="generalized", sample_step=None,
                   tau_max=base.tau_max if cfg is not None else None)
    if prescale and r_a0 != r_b0:
        lam0 = (r_b0 / r_a0) ** 0.25
        seed_a = scale_series(seed_a.with_r_min(None), lam0)
        seed_b = scale_series(seed_b.with_r_min(None), 1.0 / lam0)
    orbit = quench(seed_a, gcfg, qcfg, log_path=log_path, seed_b=seed_b)
    Fa, Fb = orbit.series
    report = fit_scaling(Fa, Fb, orbit.r_o, 20.0 * gcfg.r_ref)
    return orbit, report
