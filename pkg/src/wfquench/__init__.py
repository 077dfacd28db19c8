"""Self-consistent quenching solver for symmetric 1D Wheeler-Feynman two-body orbits."""
from .core import GhostSeries, MatchingState, OrbitSolution, Units, Worldline, eval_F, scale_series
from .errors import *  # noqa: F401,F403
from .matching import SolveConfig, integrate_orbit

__version__ = "0.1.0"
