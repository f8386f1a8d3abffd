from .aliev_panfilov import (
    ApConfig,
    ap1d_solve,
    ap_reaction,
    even_indices,
    subsample_field,
    subsample_grid,
)
from .bueno_orovio import (
    CHANNELS,
    BoParams,
    bo_rhs,
    bo_rhs_partials,
    bo_solve,
    bo_solve_bank,
    heaviside,
    make_bo_dataset,
    pinned_params,
    pinned_solver_settings,
    pinned_stimulus,
    resting_state,
)
from .datasets import Dataset, SpaceTimeField, Trajectory, fmt, params_hash
from .stimulus import Pulse, Stimulus

__all__ = [
    "ApConfig", "BoParams", "CHANNELS", "Dataset", "Pulse", "SpaceTimeField",
    "Stimulus", "Trajectory", "ap1d_solve", "ap_reaction", "bo_rhs",
    "bo_rhs_partials", "bo_solve", "bo_solve_bank", "even_indices", "fmt",
    "heaviside",
    "make_bo_dataset", "params_hash", "pinned_params",
    "pinned_solver_settings", "pinned_stimulus", "resting_state",
    "subsample_field", "subsample_grid",
]
