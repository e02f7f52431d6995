"""
ARWHEAD and chained Rosenbrock test functions with their block
decompositions.

Both decompositions introduce local copies of coupled variables and tie them
to a consensus vector ``x_bar`` through ``A_i x_i - x_bar = 0``.  A point is
consensus-feasible when every copy equals its ``x_bar`` entry; there the sum
of block objectives equals the monolithic function.
"""

import math
from dataclasses import dataclass

import numpy as np

from ..problem import BlockProblem, ConfigurationError, LocalObjective, Smoothness

__all__ = [
    "arwhead_eval",
    "rosenbrock_eval",
    "decompose_arwhead",
    "decompose_rosenbrock",
    "ArwheadLayout",
    "RosenbrockLayout",
]


def _check_length(u):
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or u.shape[0] < 2:
        raise ConfigurationError("need a vector of length at least 2")
    return u


def arwhead_eval(u):
    """``sum_{i<N} (u_i^2 + u_N^2)^2 - 4 u_i + 3``."""
    u = _check_length(u)
    head, last = u[:-1], u[-1]
    return float(np.sum((head**2 + last**2) ** 2 - 4.0 * head + 3.0))


def rosenbrock_eval(u):
    """``sum_{i<N} 100 (u_{i+1} - u_i^2)^2 + (1 - u_i)^2``."""
    u = _check_length(u)
    return float(np.sum(100.0 * (u[1:] - u[:-1] ** 2) ** 2 + (1.0 - u[:-1]) ** 2))


def _arwhead_block(x):
    head, v = x[:-1], x[-1]
    return float(np.sum((head**2 + v**2) ** 2 - 4.0 * head + 3.0))


def _rosenbrock_block(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


@dataclass(frozen=True)
class ArwheadLayout:
    """Which coordinates ``u_i`` (0-based, excluding ``u_N``) each block owns."""

    N: int
    owned: tuple

    @property
    def NB(self):
        return len(self.owned)

    def to_blocks(self, u):
        """Consensus point for ``u``: block copies of ``u_N`` and ``x_bar = [u_N]``."""
        u = np.asarray(u, dtype=float)
        x = [np.append(u[list(idx)], u[-1]) for idx in self.owned]
        return x, u[-1:].copy()

    def from_blocks(self, x_blocks, x_bar):
        u = np.empty(self.N)
        for idx, xi in zip(self.owned, x_blocks):
            u[list(idx)] = xi[:-1]
        u[-1] = x_bar[0]
        return u


@dataclass(frozen=True)
class RosenbrockLayout:
    """Index windows of each block and the overlap variables held in ``x_bar``."""

    N: int
    windows: tuple
    overlaps: tuple

    @property
    def NB(self):
        return len(self.windows)

    def to_blocks(self, u):
        u = np.asarray(u, dtype=float)
        return [u[list(w)].copy() for w in self.windows], u[list(self.overlaps)].copy()

    def from_blocks(self, x_blocks, x_bar):
        u = np.empty(self.N)
        for w, xi in zip(self.windows, x_blocks):
            u[list(w)] = xi
        if len(self.overlaps):
            u[list(self.overlaps)] = x_bar
        return u


def decompose_arwhead(N, block_size=4):
    """
    Block form of ARWHEAD with ``ceil((N-1)/block_size)`` blocks.

    Block ``i`` holds up to ``block_size`` of the coordinates ``u_1..u_{N-1}``
    followed by its own copy ``v_i`` of ``u_N``.  The scalar ``x_bar`` plays
    the role of ``u_N`` and the constraints read ``v_i - x_bar = 0``.

    Returns
    -------
    (BlockProblem, ArwheadLayout)
    """
    N = int(N)
    if N < 2:
        raise ConfigurationError("ARWHEAD needs N >= 2")
    NB = math.ceil((N - 1) / block_size)
    owned = tuple(
        tuple(range(j * block_size, min((j + 1) * block_size, N - 1))) for j in range(NB)
    )
    blocks, A = [], []
    for j, idx in enumerate(owned):
        dim = len(idx) + 1
        blocks.append(LocalObjective(_arwhead_block, dim, name=f"arwhead[{j}]"))
        Aj = np.zeros((NB, dim))
        Aj[j, -1] = 1.0
        A.append(Aj)
    B = -np.ones((NB, 1))
    problem = BlockProblem(
        blocks, A, B, np.zeros(NB), smoothness=[Smoothness.SMOOTH] * NB, name=f"arwhead-{N}"
    )
    return problem, ArwheadLayout(N, owned)


def decompose_rosenbrock(N, width=4):
    """
    Block form of the chained Rosenbrock function.

    Windows of ``width`` consecutive indices advance by ``width - 1`` so that
    neighbours share exactly one variable.  Each block keeps a copy of every
    index in its window; the shared variables are stacked in ``x_bar`` and
    both copies are tied to their entry.  Every term ``(i, i+1)`` falls inside
    exactly one window.

    Returns
    -------
    (BlockProblem, RosenbrockLayout)
    """
    N = int(N)
    if N < 2:
        raise ConfigurationError("Rosenbrock needs N >= 2")
    stride = width - 1
    windows = []
    s = 0
    while s < N - 1:
        windows.append(tuple(range(s, min(s + width, N))))
        s += stride
    overlaps = tuple(w[-1] for w in windows[:-1])
    NB, n_bar = len(windows), len(overlaps)
    m = 2 * n_bar
    blocks, A = [], []
    for j, w in enumerate(windows):
        blocks.append(LocalObjective(_rosenbrock_block, len(w), name=f"rosenbrock[{j}]"))
        Aj = np.zeros((m, len(w)))
        # rows 2t and 2t+1 tie the left and right copies of overlap t
        if j < n_bar:
            Aj[2 * j, len(w) - 1] = 1.0
        if j > 0:
            Aj[2 * j - 1, 0] = 1.0
        A.append(Aj)
    B = np.zeros((m, n_bar))
    for t in range(n_bar):
        B[2 * t, t] = B[2 * t + 1, t] = -1.0
    problem = BlockProblem(
        blocks, A, B, np.zeros(m), smoothness=[Smoothness.SMOOTH] * NB, name=f"rosenbrock-{N}"
    )
    return problem, RosenbrockLayout(N, tuple(windows), overlaps)
