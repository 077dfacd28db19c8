"""Command-line front end.

    wfquench solve <config>          quench one orbit
    wfquench continue <config>       quench along a decreasing r_c schedule
    wfquench verify <dir>            run the independent checks on a solution
    wfquench export <dir> --what trajectories|F|potentials [--resample N]

Exit status: 0 success, 1 a check or a quench stage failed, 2 bad
configuration, 3 missing or corrupt solution artifacts.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import GhostSeries, OrbitSolution, Worldline, fmt, read_worldline_csv, write_worldline_csv
from .errors import ConfigError, LagOutOfSpan, NoBracket, NoDescentDirection, StageFailed, WFError
from .matching import SolveConfig, integrate_trajectory
from .potentials import DEFAULT_ENERGY, F_profile, build_potentials, s_table, two_term_fit
from .quench import QuenchConfig, continuation, generalized_quench, solve_stage
from .verify import check_covariance, check_twice_monotonic, mirror_partner, orbit_center, wf_residual

log = logging.getLogger("wfquench")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_ARTIFACT = 0, 1, 2, 3

WORLDLINE_FILES = ("p1.csv", "p2a.csv", "p2b.csv")
RESIDUAL_LIMIT = 1e-3


# ---------------------------------------------------------------------------
# configuration

_SOLVE_KEYS = {f.name for f in fields(SolveConfig)} - {"mode", "r_b0"}
_QUENCH_KEYS = {f.name for f in fields(QuenchConfig)}


@dataclass
class RunConfig:
    solve: SolveConfig
    quench: QuenchConfig = field(default_factory=QuenchConfig)
    schedule: tuple = ()
    out: Path = Path("run")
    seed: Optional[Path] = None
    seed_b: Optional[Path] = None
    n_coeffs: int = 2
    boosts: tuple = (0.0, 0.2)
    covariance_tol: float = 1e-8
    energy: float = DEFAULT_ENERGY
    source: str = ""

    @property
    def mode(self) -> str:
        return self.solve.mode


_EXTRA = {"schedule", "out", "seed", "seed_b", "n_coeffs", "boosts", "covariance_tol", "energy",
          "mode", "r_b0"}
_INT_KEYS = {"grid_size", "max_iters", "stall_patience", "max_coeffs", "threads", "n_coeffs"}
_STR_KEYS = {"direction", "mode", "out", "seed", "seed_b"}
_LIST_KEYS = {"schedule", "boosts"}


def _convert(key: str, raw: str, lineno: int):
    try:
        if key in _STR_KEYS:
            return raw
        if key in _LIST_KEYS:
            return tuple(float(x) for x in raw.replace(",", " ").split())
        if key in _INT_KEYS:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {raw!r} for {key}") from None


def parse_config(text: str, base_dir: Path = Path(".")) -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment.

    Relative paths (out, seed, seed_b) resolve against base_dir.
    """
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value': {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _SOLVE_KEYS | _QUENCH_KEYS | _EXTRA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not raw:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        values[key] = _convert(key, raw, lineno)
    sched = values.pop("schedule", ())
    if "r_c" not in values:
        if not sched:
            raise ConfigError("r_c is required (or a schedule)")
        values["r_c"] = sched[0]
    try:
        scfg = SolveConfig(**{k: values.pop(k) for k in list(values) if k in _SOLVE_KEYS | {"mode", "r_b0"}})
        qcfg = QuenchConfig(**{k: values.pop(k) for k in list(values) if k in _QUENCH_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise ConfigError("schedule must be strictly decreasing")
    for key in ("out", "seed", "seed_b"):
        if key in values:
            p = Path(values[key])
            values[key] = p if p.is_absolute() else base_dir / p
    n = values.get("n_coeffs", 2)
    if not 1 <= n <= 18:
        raise ConfigError("n_coeffs must lie in 1..18")
    if any(not abs(w) < 1 for w in values.get("boosts", ())):
        raise ConfigError("boost speeds must satisfy |w| < 1")
    return RunConfig(scfg, qcfg, tuple(sched), source=text, **values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text, path.parent)


# ---------------------------------------------------------------------------
# artifacts


def _summary(orbit: OrbitSolution, cfg: SolveConfig, extra: Optional[dict] = None) -> dict:
    rec = orbit.quench
    out = {
        "mode": cfg.mode,
        "r_c": orbit.r_c,
        "r_b0": cfg.r_b0,
        "r_o": orbit.r_o,
        "v_inf": orbit.v_inf,
        "A_final": orbit.deviation,
        "n_coeffs": orbit.n_coeffs,
        "iterations": rec.iterations if rec else 0,
        "status": rec.status if rec else "unquenched",
        "wall_time": rec.wall_time if rec else 0.0,
        "tau_max": cfg.tau_max,
        "abs_tol": cfg.abs_tol,
        "rel_tol": cfg.rel_tol,
        "max_step": None if math.isinf(cfg.max_step) else cfg.max_step,
    }
    if extra:
        out.update(extra)
    return out


def write_solution(orbit: OrbitSolution, cfg: SolveConfig, out: Path, extra: Optional[dict] = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "series.txt").write_text(orbit.F_a.to_text())
    if cfg.mode == "generalized":
        (out / "series_b.txt").write_text(orbit.F_b.to_text())
    for name, wl in zip(WORLDLINE_FILES, (orbit.p1, orbit.p2a, orbit.p2b)):
        write_worldline_csv(wl, out / name)
    # json keeps 17 significant digits for floats
    (out / "summary.json").write_text(json.dumps(_summary(orbit, cfg, extra), indent=2) + "\n")


class Solution:
    """A solution directory loaded back from disk."""

    def __init__(self, directory):
        self.dir = Path(directory)
        need = ["summary.json", "series.txt", *WORLDLINE_FILES]
        missing = [n for n in need if not (self.dir / n).is_file()]
        if missing:
            raise FileNotFoundError(f"{self.dir}: missing {', '.join(missing)}")
        self.summary = json.loads((self.dir / "summary.json").read_text())
        self.F_a = GhostSeries.from_text((self.dir / "series.txt").read_text())
        b = self.dir / "series_b.txt"
        self.F_b = GhostSeries.from_text(b.read_text()) if b.is_file() else self.F_a
        self.p1, self.p2a, self.p2b = (read_worldline_csv(self.dir / n) for n in WORLDLINE_FILES)

    def solve_config(self) -> SolveConfig:
        s = self.summary
        return SolveConfig(r_c=s["r_c"], tau_max=s["tau_max"], abs_tol=s["abs_tol"], rel_tol=s["rel_tol"],
                           max_step=math.inf if s.get("max_step") is None else s["max_step"],
                           mode=s.get("mode", "symmetric"), r_b0=s.get("r_b0"))

    def orbit(self, with_trajectory: bool = False) -> OrbitSolution:
        s = self.summary
        traj = None
        series = self.F_a if s.get("mode", "symmetric") == "symmetric" else (self.F_a, self.F_b)
        if with_trajectory:
            cfg = self.solve_config()
            traj = integrate_trajectory(cfg, self.F_a.with_r_min(0.5 * cfg.r_c),
                                        self.F_b.with_r_min(0.5 * cfg.r_b0))
        return OrbitSolution(series, self.p1, self.p2a, self.p2b, s["r_c"], s["r_o"], s["v_inf"],
                             s["A_final"], s["tau_max"], trajectory=traj, mode=s.get("mode", "symmetric"))


# ---------------------------------------------------------------------------
# commands


def _seed(path: Optional[Path], n: int) -> GhostSeries:
    if path is None:
        return GhostSeries((0.0,) * n)
    try:
        return GhostSeries.from_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read seed {path}: {exc}") from None


def cmd_solve(rc: RunConfig) -> int:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(rc.source)
    cfg = rc.solve
    if rc.mode == "generalized":
        seed_a = _seed(rc.seed, rc.n_coeffs)
        seed_b = _seed(rc.seed_b, rc.n_coeffs) if rc.seed_b else seed_a
        orbit, rep = generalized_quench(seed_a, seed_b, cfg.r_c, cfg.r_b0, cfg, rc.quench,
                                        log_path=out / "quench_log.csv")
        extra = {"lambda": rep.lam, "scaling_residual": rep.residual}
        if orbit.deviation > rc.quench.A_accept:
            write_solution(orbit, cfg, out, extra)
            print(f"error: quench stopped at A = {orbit.deviation:.3e}", file=sys.stderr)
            return EXIT_CHECK
    else:
        orbit = solve_stage(_seed(rc.seed, rc.n_coeffs), cfg, rc.quench,
                            log_path=out / "quench_log.csv", checkpoint=out / "series.txt")
        extra = None
    write_solution(orbit, cfg, out, extra)
    print(json.dumps(_summary(orbit, cfg, extra)))
    return EXIT_OK


def cmd_continue(rc: RunConfig) -> int:
    if not rc.schedule:
        raise ConfigError("continue needs a schedule")
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(rc.source)
    stages = []

    def on_stage(k, orbit):
        cfg = replace(rc.solve, r_c=orbit.r_c, tau_max=orbit.tau_max, sample_step=None, r_b0=None)
        write_solution(orbit, cfg, out / f"stage_{k:02d}")
        stages.append(_summary(orbit, cfg))
        print(f"stage {k}: r_c = {orbit.r_c:g}  v_inf = {orbit.v_inf:.4f}  A = {orbit.deviation:.3e}  "
              f"n = {orbit.n_coeffs}  {orbit.quench.wall_time:.1f} s", flush=True)

    cfg0 = replace(rc.solve, r_c=rc.schedule[0], tau_max=None, sample_step=None, r_b0=None)
    seed = _seed(rc.seed, rc.n_coeffs) if rc.seed else None
    status = EXIT_OK
    try:
        orbits = continuation(rc.schedule, cfg0, rc.quench, seed, rc.n_coeffs, out, on_stage)
    except StageFailed as exc:
        print(f"error: {exc} (best A = {exc.best_A:.3e})", file=sys.stderr)
        orbits, status = exc.completed, EXIT_CHECK
    if orbits:
        last = orbits[-1]
        cfg = replace(rc.solve, r_c=last.r_c, tau_max=last.tau_max, sample_step=None, r_b0=None)
        write_solution(last, cfg, out, {"stages": stages})
    return status


def _run_checks(sol: Solution, boosts, cov_tol: float, out: Path) -> bool:
    orbit = sol.orbit(with_trajectory=True)
    ok = True
    stats: dict = {}
    res = wf_residual(orbit)
    res.to_csv(out / "residual.csv")
    print(f"residual: max_rel = {res.max_rel:.3e} (limit {RESIDUAL_LIMIT:g})")
    ok &= res.max_rel < RESIDUAL_LIMIT
    stats["residual_max_rel"] = res.max_rel
    mono = check_twice_monotonic(orbit)
    (out / "monotonicity.txt").write_text(mono.to_text())
    print(f"monotonicity: sign changes = {mono.sign_changes}, within bounds = {mono.within_bounds}"
          + (f" ({mono.warning})" if mono.warning else ""))
    ok &= mono.passed
    stats["sign_changes"] = mono.sign_changes
    stats["within_bounds"] = bool(mono.within_bounds)
    rows = []
    if sol.summary.get("mode", "symmetric") == "symmetric":
        for w in boosts:
            rep = check_covariance(orbit, w, cov_tol)
            rows.append(rep.row())
            stats.setdefault("covariance", []).append(
                {"w": w, "ode_defect": rep.ode_defect, "s_defect": rep.s_defect,
                 "distance_defect": rep.distance_defect, "rsf": rep.rsf, "passed": bool(rep.passed)})
            ok &= rep.passed
    else:
        rows.append("covariance: skipped for generalized-mode solutions")
    (out / "covariance.txt").write_text("\n".join(rows) + "\n")
    for row in rows:
        print(f"covariance: {row}")
    stats["passed"] = bool(ok)
    (out / "verify.json").write_text(json.dumps(stats, indent=2) + "\n")
    return bool(ok)


def cmd_verify(directory, boosts=None, cov_tol: Optional[float] = None) -> int:
    d = Path(directory)
    try:
        sol = Solution(d)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    cfg_file = d / "run.cfg"
    if (boosts is None or cov_tol is None) and cfg_file.is_file():
        try:
            rc = parse_config(cfg_file.read_text(), d)
            boosts = rc.boosts if boosts is None else boosts
            cov_tol = rc.covariance_tol if cov_tol is None else cov_tol
        except ConfigError:
            pass
    boosts = (0.0, 0.2) if boosts is None else boosts
    cov_tol = 1e-8 if cov_tol is None else cov_tol
    try:
        ok = _run_checks(sol, boosts, cov_tol, d)
    except (NoBracket, LagOutOfSpan) as exc:
        print(f"error: corrupt worldline data: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    return EXIT_OK if ok else EXIT_CHECK


def _overlay(sol: Solution, n: int) -> tuple[list, np.ndarray]:
    """Particle 1 with both particle-2 reconstructions reflected onto it."""
    c = orbit_center(sol.orbit())
    lo = max(sol.p1.span[0], sol.p2a.span[0], sol.p2b.span[0])
    hi = min(sol.p1.span[1], sol.p2a.span[1], sol.p2b.span[1])
    half = min(-lo, hi, 10.0 * sol.summary["r_c"])
    t = np.linspace(-half, half, n)
    cols = [t, sol.p1.position(t), 2 * c - sol.p2a.position(t), 2 * c - sol.p2b.position(t)]
    return ["t", "x1", "x2a_reflected", "x2b_reflected"], np.column_stack(cols)


def _write_table(path: Path, header, data) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def cmd_export(directory, what: str, resample: Optional[int] = None, out=None,
               energy: float = DEFAULT_ENERGY) -> int:
    d = Path(directory)
    try:
        sol = Solution(d)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    dest = Path(out) if out is not None else d / "export"
    dest.mkdir(parents=True, exist_ok=True)
    if resample is not None and resample < 2:
        print("error: --resample needs at least 2 rows", file=sys.stderr)
        return EXIT_CONFIG
    if what == "trajectories":
        for name, wl in zip(WORLDLINE_FILES, (sol.p1, sol.p2a, sol.p2b)):
            write_worldline_csv(wl.resample(resample) if resample else wl, dest / name)
        for name in ("summary.json", "series.txt", "series_b.txt", "run.cfg"):
            if (d / name).is_file() and dest.resolve() != d.resolve():
                shutil.copyfile(d / name, dest / name)
        header, data = _overlay(sol, resample or 1000)
        _write_table(dest / "overlay.csv", header, data)
    elif what == "F":
        x, F = F_profile(sol.F_a, sol.summary["r_o"], resample or 200)
        _write_table(dest / "F.csv", ("ro_over_r", "F"), np.column_stack([x, F]))
        fit = two_term_fit(x, F, sol.summary["r_o"])
        print(f"two-term fit: k1 = {fit.k1:.6g}, max relative misfit = {fit.max_rel:.3e}")
    elif what == "potentials":
        orbit = sol.orbit(with_trajectory=True)
        table = s_table(orbit, n=resample or 400)
        build_potentials(table, sol.F_a, energy).to_csv(dest / "potentials.csv")
    else:
        print(f"error: unknown export {what!r}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wfquench", description=__doc__.split("\n\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog="exit status: 0 ok, 1 check or stage failed, 2 bad configuration, "
                                        "3 missing or corrupt artifacts")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("solve", help="quench a single orbit")
    p.add_argument("config")
    p = sub.add_parser("continue", help="quench along an r_c schedule")
    p.add_argument("config")
    p = sub.add_parser("verify", help="run the independent checks on a solution directory")
    p.add_argument("directory")
    p.add_argument("--boosts", type=lambda s: tuple(float(x) for x in s.split(",")), default=None)
    p.add_argument("--covariance-tol", type=float, default=None)
    p = sub.add_parser("export", help="write plot-ready data")
    p.add_argument("directory")
    p.add_argument("--what", choices=("trajectories", "F", "potentials"), required=True)
    p.add_argument("--resample", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--energy", type=float, default=DEFAULT_ENERGY)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        if args.command in ("solve", "continue"):
            rc = load_config(args.config)
            code = cmd_solve(rc) if args.command == "solve" else cmd_continue(rc)
        elif args.command == "verify":
            code = cmd_verify(args.directory, args.boosts, args.covariance_tol)
        else:
            code = cmd_export(args.directory, args.what, args.resample, args.out, args.energy)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageFailed, NoDescentDirection) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except WFError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    log.info("done in %.1f s", time.perf_counter() - t0)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
