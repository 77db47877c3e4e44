"""Checkpoint arithmetic for post-training parameter deltas.

The heavy lifting lives in the compiled ``_paramdelta`` extension; this
package re-exports its operations.
"""

from ._paramdelta import (
    ParamDeltaError,
    __version__,
    apply,
    classify_tensor,
    cosine_map,
    diff,
    fit_gamma,
    fuse,
    gamma_report,
    gen,
    histogram,
    hypothetical_scores,
    inspect,
    norm_map,
    plan_sweep,
    read_tensor,
    run_sweep,
    validate,
)

__all__ = [
    "ParamDeltaError",
    "__version__",
    "apply",
    "classify_tensor",
    "cosine_map",
    "diff",
    "fit_gamma",
    "fuse",
    "gamma_report",
    "gen",
    "histogram",
    "hypothetical_scores",
    "inspect",
    "norm_map",
    "plan_sweep",
    "read_tensor",
    "run_sweep",
    "validate",
]
