"""
Block-separable linearly constrained problems and the algebra shared by
all solvers.

The problem handled throughout the package is::

    min  sum_i f_i(x_i) + g(xbar)
    s.t. sum_i A_i x_i + B xbar = b

where every ``f_i`` is a black box that can only be evaluated.  The slack
relaxation used by the two-level ADMM adds a vector ``z`` with
``A x + B xbar + z = b``.
"""

import enum
import threading
from dataclasses import dataclass, field

import numpy as np

from .numerics import solve_least_squares

__all__ = [
    "Smoothness",
    "OracleError",
    "DimensionError",
    "ConfigurationError",
    "LocalObjective",
    "SharedObjective",
    "BlockProblem",
    "AdmmState",
    "ConstraintResidual",
    "evaluate_block",
    "augmented_lagrangian",
    "primal_residual",
]


class Smoothness(enum.Enum):
    SMOOTH = "smooth"
    NONSMOOTH = "nonsmooth"


class DimensionError(ValueError):
    """Raised when vector or matrix shapes do not match the problem."""


class ConfigurationError(ValueError):
    """Raised when a problem or solver is set up inconsistently."""


class OracleError(ArithmeticError):
    """Raised when a black-box oracle returns a non-finite value."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = None if point is None else np.array(point, dtype=float)


class LocalObjective:
    """
    A counted black-box objective ``f_i``.

    Parameters
    ----------
    func : callable
        Maps a float vector of length ``dim`` to a float.
    dim : int
    name : str, optional
    check_deterministic : bool, optional
        Evaluate ``func`` twice at a probe point on construction and reject
        it if the values differ.  The probe calls are not counted.
    """

    def __init__(self, func, dim, name=None, check_deterministic=True):
        dim = int(dim)
        if dim < 1:
            raise ConfigurationError("block dimension must be at least 1")
        self.func = func
        self.dim = dim
        self.name = name
        self._count = 0
        self._lock = threading.Lock()
        if check_deterministic:
            probe = np.linspace(0.1, 0.9, dim)
            a, b = float(func(probe.copy())), float(func(probe.copy()))
            if not (a == b or (np.isnan(a) and np.isnan(b))):
                raise ConfigurationError(
                    f"objective {name or ''} is not deterministic ({a!r} != {b!r})"
                )

    @property
    def eval_count(self):
        return self._count

    def reset_count(self):
        with self._lock:
            self._count = 0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionError(f"expected a vector of length {self.dim}, got shape {x.shape}")
        value = float(self.func(x))
        with self._lock:
            self._count += 1
        if not np.isfinite(value):
            raise OracleError(f"oracle returned {value!r}", point=x)
        return value

    def __repr__(self):
        return f"LocalObjective(dim={self.dim}, name={self.name!r}, evals={self._count})"


class SharedObjective:
    """
    The shared convex term ``g(xbar)`` together with its closed-form
    minimizer ``G(B, v, rho) = argmin g(xbar) + rho/2 ||v + B xbar||^2``.

    Without arguments this is ``g = 0``, whose minimizer is a least-squares
    solve and requires ``B`` to have full column rank.
    """

    def __init__(self, dim, value=None, minimizer=None):
        self.dim = int(dim)
        self._value = value
        self._minimizer = minimizer

    @property
    def is_zero(self):
        return self._value is None

    def value(self, xbar):
        if self._value is None:
            return 0.0
        return float(self._value(np.asarray(xbar, dtype=float)))

    def minimizer(self, B, v, rho):
        if self._minimizer is not None:
            return np.asarray(self._minimizer(B, v, rho), dtype=float)
        if self._value is not None:
            raise ConfigurationError("a nonzero shared term needs a closed-form minimizer")
        if self.dim == 0:
            return np.zeros(0)
        if not np.any(B):
            # g = 0 and B = 0: every xbar is optimal, take the minimum-norm one
            return np.zeros(self.dim)
        return solve_least_squares(B, -np.asarray(v, dtype=float))

    @classmethod
    def squared_norm(cls, dim, weight):
        """``g(xbar) = weight/2 ||xbar||^2`` with its exact minimizer."""

        def value(xbar):
            return 0.5 * weight * float(xbar @ xbar)

        def minimizer(B, v, rho):
            lhs = weight * np.eye(dim) + rho * B.T @ B
            return np.linalg.solve(lhs, -rho * B.T @ v)

        return cls(dim, value=value, minimizer=minimizer)


def _as_rows(M, m):
    M = np.asarray(M, dtype=float)
    return M if M.ndim == 2 else M.reshape(m, -1)


@dataclass
class BlockProblem:
    """
    Block-separable problem with linear coupling constraints.

    Attributes
    ----------
    blocks : list of LocalObjective
    A : list of ndarray
        ``A[i]`` has shape ``(m, blocks[i].dim)``.
    B : ndarray, shape (m, n_xbar)
    b : ndarray, shape (m,)
    shared_term : SharedObjective or None
        ``None`` means ``g = 0``.
    smoothness : list of Smoothness
        Selects the trust-region solver used for each block.
    """

    blocks: list
    A: list
    B: np.ndarray
    b: np.ndarray
    shared_term: SharedObjective = None
    smoothness: list = None
    name: str = "problem"
    _A_full: np.ndarray = field(init=False, repr=False)
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ConfigurationError("a problem needs at least one block")
        if len(self.A) != len(self.blocks):
            raise ConfigurationError("one A_i is needed per block")
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        m = self.b.shape[0]
        self.B = _as_rows(self.B, m)
        self.A = [_as_rows(Ai, m) for Ai in self.A]
        for i, (Ai, blk) in enumerate(zip(self.A, self.blocks)):
            if Ai.shape != (m, blk.dim):
                raise DimensionError(f"A[{i}] has shape {Ai.shape}, expected {(m, blk.dim)}")
        n_xbar = self.B.shape[1]
        if self.shared_term is None:
            self.shared_term = SharedObjective(n_xbar)
        if self.shared_term.dim != n_xbar:
            raise DimensionError("shared term dimension does not match B")
        if self.shared_term.is_zero and n_xbar > 0 and np.any(self.B):
            if m < n_xbar or np.linalg.matrix_rank(self.B) < n_xbar:
                raise ConfigurationError("B must have full column rank when g = 0")
        if self.smoothness is None:
            self.smoothness = [Smoothness.SMOOTH] * len(self.blocks)
        self.smoothness = [Smoothness(s) for s in self.smoothness]
        if len(self.smoothness) != len(self.blocks):
            raise ConfigurationError("one smoothness hint is needed per block")
        self._A_full = np.hstack(self.A) if m else np.zeros((0, self.n_x))
        self._offsets = np.concatenate([[0], np.cumsum([blk.dim for blk in self.blocks])])

    @property
    def N(self):
        return len(self.blocks)

    @property
    def m(self):
        return self.b.shape[0]

    @property
    def n_xbar(self):
        return self.B.shape[1]

    @property
    def n_x(self):
        return int(sum(blk.dim for blk in self.blocks))

    @property
    def dims(self):
        return [blk.dim for blk in self.blocks]

    @property
    def A_full(self):
        return self._A_full

    def split(self, x):
        """Split a concatenated vector into per-block pieces."""
        x = np.asarray(x, dtype=float)
        return [x[self._offsets[i]:self._offsets[i + 1]].copy() for i in range(self.N)]

    def Ax(self, x_blocks):
        out = np.zeros(self.m)
        for Ai, xi in zip(self.A, x_blocks):
            out += Ai @ xi
        return out

    def eval_counts(self):
        return [blk.eval_count for blk in self.blocks]

    def total_evals(self):
        return int(sum(self.eval_counts()))

    def max_block_evals(self):
        return int(max(self.eval_counts()))

    def reset_counts(self):
        for blk in self.blocks:
            blk.reset_count()

    def check_state(self, state):
        if len(state.x) != self.N:
            raise DimensionError(f"state has {len(state.x)} blocks, problem has {self.N}")
        for i, (xi, blk) in enumerate(zip(state.x, self.blocks)):
            if np.shape(xi) != (blk.dim,):
                raise DimensionError(f"x[{i}] has shape {np.shape(xi)}, expected {(blk.dim,)}")
        if np.shape(state.x_bar) != (self.n_xbar,):
            raise DimensionError("x_bar has the wrong length")
        for name in ("z", "y", "lam"):
            if np.shape(getattr(state, name)) != (self.m,):
                raise DimensionError(f"{name} must have length {self.m}")


@dataclass
class AdmmState:
    """Iterate of the two-level ADMM."""

    x: list
    x_bar: np.ndarray
    z: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    beta: float
    k: int = 1
    r: int = 0
    z_norm_prev: float = np.inf

    @property
    def rho(self):
        return 2.0 * self.beta

    def copy(self):
        return AdmmState(
            x=[np.array(xi, dtype=float) for xi in self.x],
            x_bar=np.array(self.x_bar, dtype=float),
            z=np.array(self.z, dtype=float),
            y=np.array(self.y, dtype=float),
            lam=np.array(self.lam, dtype=float),
            beta=float(self.beta),
            k=self.k,
            r=self.r,
            z_norm_prev=self.z_norm_prev,
        )

    @classmethod
    def zeros(cls, problem, beta=1.0):
        m = problem.m
        return cls(
            x=[np.zeros(d) for d in problem.dims],
            x_bar=np.zeros(problem.n_xbar),
            z=np.zeros(m),
            y=np.zeros(m),
            lam=np.zeros(m),
            beta=beta,
        )


@dataclass
class ConstraintResidual:
    value: np.ndarray
    norm: float


def evaluate_block(problem, i, x_i):
    """Evaluate ``f_i(x_i)``, incrementing block ``i``'s counter."""
    if not 0 <= i < problem.N:
        raise IndexError(f"block index {i} out of range")
    return problem.blocks[i](x_i)


def primal_residual(state, problem):
    """``A x + B xbar + z - b`` and its norm."""
    problem.check_state(state)
    value = problem.Ax(state.x) + problem.B @ state.x_bar + state.z - problem.b
    return ConstraintResidual(value=value, norm=float(np.linalg.norm(value)))


def augmented_lagrangian(state, problem, f_values=None):
    """
    Augmented Lagrangian of the slack-relaxed problem.

    Parameters
    ----------
    state : AdmmState
    problem : BlockProblem
    f_values : sequence of float, optional
        Known values ``f_i(x_i)``.  When omitted the oracles are called (and
        counted).
    """
    if f_values is None:
        f_values = [blk(xi) for blk, xi in zip(problem.blocks, state.x)]
    res = primal_residual(state, problem).value
    rho = state.rho
    total = (
        float(np.sum(f_values))
        + problem.shared_term.value(state.x_bar)
        + state.y @ res
        + 0.5 * rho * res @ res
        + state.lam @ state.z
        + 0.5 * state.beta * state.z @ state.z
    )
    if not np.isfinite(total):
        raise OracleError("augmented Lagrangian is not finite")
    return float(total)
