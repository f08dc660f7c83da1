"""Quasi time optimal receding horizon control.

Thin wrapper over the C++ core: plant models, LQ terminal synthesis,
the optimal control solver and closed-loop scenario runs.
"""

from ._core import (
    ConfigError,
    Error,
    audit,
    certify,
    compare,
    dynamics,
    first_solve,
    jacobians,
    load_config,
    run,
    solve_care,
    solve_lyapunov,
    synthesize,
)

__all__ = [
    "ConfigError",
    "Error",
    "audit",
    "certify",
    "compare",
    "dynamics",
    "first_solve",
    "jacobians",
    "load_config",
    "run",
    "solve_care",
    "solve_lyapunov",
    "synthesize",
]
