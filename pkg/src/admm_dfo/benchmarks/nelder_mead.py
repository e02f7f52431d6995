"""Monolithic Nelder-Mead baseline with a target value and an evaluation budget."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

__all__ = ["NelderMeadResult", "nelder_mead"]


@dataclass
class NelderMeadResult:
    x: np.ndarray
    f: float
    evals: int
    converged: bool

    def __iter__(self):
        return iter((self.x, self.f, self.evals))


class _TargetReached(Exception):
    pass


def nelder_mead(oracle, x0, target=1e-5, max_evals=1_000_000, step=1.0):
    """
    Run the standard simplex method (reflection 1, expansion 2, contraction
    0.5, shrink 0.5) until ``f <= target`` or ``max_evals`` evaluations.

    The initial simplex is ``x0`` together with ``x0 + step * e_j``.  Running
    out of budget is a normal outcome reported through ``converged``.

    Returns
    -------
    NelderMeadResult
        Unpacks as ``(x, f, evals)``; holds the best point seen.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = x0.shape[0]
    if max_evals < n + 1:
        raise ValueError(f"max_evals must be at least n + 1 = {n + 1}")
    best = {"x": x0.copy(), "f": np.inf, "evals": 0}

    def counted(x):
        if best["evals"] >= max_evals:
            raise _TargetReached
        value = float(oracle(x))
        best["evals"] += 1
        if value < best["f"]:
            best["x"], best["f"] = np.array(x, dtype=float), value
        if value <= target:
            raise _TargetReached
        return value

    simplex = np.vstack([x0, x0 + step * np.eye(n)])
    options = dict(
        maxfev=max_evals, maxiter=10 * max_evals, xatol=0.0, fatol=0.0, initial_simplex=simplex
    )
    try:
        minimize(counted, x0, method="Nelder-Mead", options=options)
    except _TargetReached:
        pass
    return NelderMeadResult(best["x"], best["f"], best["evals"], best["f"] <= target)
