"""Doubly reflected BSDEs with jumps, generalized Dynkin games and their
finite-difference counterparts on discrete lattices."""
from .drbsde import DrbsdeSolution, solve_drbsde_dp, solve_drbsde_picard, solve_snell_system
from .drivers import LinearDriver, PositivePartDriver, SmoothDriver, ZeroDriver, driver_from_config
from .errors import DynkinError
from .games import extract_saddle, game_values_bruteforce, solve_mixed_game
from .model import MarkSpace, TimeGrid, build_lattice, build_recombining, build_tree

__all__ = [
    "DrbsdeSolution",
    "DynkinError",
    "LinearDriver",
    "MarkSpace",
    "PositivePartDriver",
    "SmoothDriver",
    "TimeGrid",
    "ZeroDriver",
    "build_lattice",
    "build_recombining",
    "build_tree",
    "driver_from_config",
    "extract_saddle",
    "game_values_bruteforce",
    "solve_drbsde_dp",
    "solve_drbsde_picard",
    "solve_mixed_game",
    "solve_snell_system",
]
__version__ = "0.1.0"
