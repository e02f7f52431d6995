"""
Two-level inexact ADMM for block-separable black-box problems.

The inner level runs ADMM on the slack-relaxed problem

    min  sum_i f_i(x_i) + g(xbar) + lam^T z + beta/2 ||z||^2
    s.t. A x + B xbar + z = b

with block subproblems solved by trust-region DFO to a radius tolerance
that tightens with the residuals.  The outer level is a method of
multipliers on ``z = 0``: a projected update of ``lam`` and a slow
amplification of ``beta`` while ``||z||`` is not shrinking fast enough.
"""

import enum
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .problem import AdmmState, ConfigurationError, Smoothness, primal_residual
from .tr_nonsmooth import NonsmoothTrConfig, solve_nonsmooth
from .tr_smooth import BudgetError, SampleArchive, SmoothTrConfig, solve_smooth

__all__ = [
    "ParallelMode",
    "ToleranceSchedule",
    "OuterConfig",
    "RunTrace",
    "AdmmResult",
    "InnerStallError",
    "tolerance_at",
    "inner_radius_tolerance",
    "block_subproblem_objective",
    "xbar_update",
    "z_update",
    "y_update",
    "inner_residuals",
    "outer_update",
    "initial_state",
    "BlockSolver",
    "inner_iteration",
    "inner_loop",
    "solve",
]

logger = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "k", "r", "L", "eps1_kr", "eps2_kr", "eps3_kr", "eps4_kr",
    "z_norm", "beta", "max_block_evals", "wall_ms",
)


class ParallelMode(enum.Enum):
    SEQUENTIAL = "sequential"
    JACOBI = "jacobi"


class InnerStallError(RuntimeError):
    """The inner loop stopped making progress; carries the last state."""

    def __init__(self, message, state=None, residuals=None, trace=None):
        super().__init__(message)
        self.state = state
        self.residuals = residuals
        self.trace = trace


@dataclass
class ToleranceSchedule:
    """
    Geometric tolerance schedule with terminal floors.

    ``eps1_k = max(c1 / a1**k, eps1)``, ``eps2_k = max(c2 / a2**k, eps2)``,
    ``eps3_k = (eps3 / eps1) * eps1_k`` and ``eps4_k = eps1_k``.
    """

    c1: float = 1.0
    c2: float = 1.0
    c4: float = 1.0
    a1: float = 2.0
    a2: float = 2.0
    a4: float = 1.5
    eps1: float = 1e-5
    eps2: float = 1e-5
    eps3: float = 1e-5
    eps4: float = 1e-5

    def __post_init__(self):
        for name in ("c1", "c2", "c4", "a1", "a2", "a4"):
            if not 1.0 <= getattr(self, name) <= 2.0:
                raise ConfigurationError(f"{name} must lie in [1, 2]")
        for name in ("eps1", "eps2", "eps3", "eps4"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")

    def at(self, k):
        return tolerance_at(self, k)

    def floors_reached(self, k):
        return self.c1 / self.a1**k <= self.eps1 and self.c2 / self.a2**k <= self.eps2


def tolerance_at(schedule, k):
    """Tolerances ``(eps1_k, eps2_k, eps3_k, eps4_k)`` of outer iteration ``k >= 1``."""
    if k < 1:
        raise ValueError("outer iterations are counted from 1")
    e1 = max(schedule.c1 / schedule.a1**k, schedule.eps1)
    e2 = max(schedule.c2 / schedule.a2**k, schedule.eps2)
    e3 = schedule.eps3 / schedule.eps1 * e1
    return e1, e2, e3, e1


def inner_radius_tolerance(schedule, eps1_kr, eps4_k):
    """Block-solve radius tolerance ``max(c4 * eps1_kr**a4, eps4_k)``."""
    return max(schedule.c4 * eps1_kr**schedule.a4, eps4_k)


@dataclass
class OuterConfig:
    omega: float = 0.75
    gamma: float = 1.005
    lambda_bounds: tuple = (-1e3, 1e3)
    beta1: float = 20.0
    max_outer: int = 200
    max_inner: int = 5000
    parallel_mode: ParallelMode = ParallelMode.JACOBI
    threads: int = None
    max_evals: int = None
    delta0: float = 1.0
    warm_factor: float = 10.0
    warm_floor: float = 0.1
    stall_window: int = 50
    stall_factor: float = 0.999
    smooth: SmoothTrConfig = field(default_factory=SmoothTrConfig)
    nonsmooth: NonsmoothTrConfig = field(default_factory=NonsmoothTrConfig)

    def __post_init__(self):
        self.parallel_mode = ParallelMode(self.parallel_mode)
        if not 0.0 <= self.omega < 1.0:
            raise ConfigurationError("omega must lie in [0, 1)")
        if not self.gamma > 1.0:
            raise ConfigurationError("gamma must exceed 1")
        if not self.beta1 > 0:
            raise ConfigurationError("beta1 must be positive")
        lo, hi = self.lambda_bounds
        if np.any(np.asarray(lo) > np.asarray(hi)):
            raise ConfigurationError("lambda lower bound exceeds upper bound")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ConfigurationError("iteration caps must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigurationError("threads must be positive")
        if self.max_evals is not None and self.max_evals < 1:
            raise ConfigurationError("max_evals must be positive")


class RunTrace:
    """Per-inner-iteration records, ordered by ``(k, r)``."""

    columns = TRACE_COLUMNS

    def __init__(self):
        self.rows = []

    def append(self, **row):
        self.rows.append(tuple(row[c] for c in self.columns))

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        j = self.columns.index(name)
        return np.array([row[j] for row in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


@dataclass
class AdmmResult:
    state: AdmmState
    converged: bool
    status: str
    objective: float
    trace: RunTrace
    eval_counts: list
    wall_time: float
    outer_iterations: int
    inner_iterations: int
    residuals: tuple = (np.nan, np.nan, np.nan)

    @property
    def max_block_evals(self):
        return int(max(self.eval_counts))

    @property
    def total_evals(self):
        return int(sum(self.eval_counts))


# ---------------------------------------------------------------- updates

def block_subproblem_objective(state, problem, i, x_blocks=None):
    """
    The ``x_i`` subproblem ``f_i(x_i) + rho/2 ||A_i x_i + rest + y/rho - b||^2``
    with every other variable frozen at ``x_blocks`` (default ``state.x``).
    """
    xs = state.x if x_blocks is None else x_blocks
    rho = state.rho
    Ai = problem.A[i]
    rest = problem.Ax(xs) - Ai @ xs[i] + problem.B @ state.x_bar + state.z + state.y / rho - problem.b
    blk = problem.blocks[i]

    def oracle(xi):
        r = Ai @ xi + rest
        return blk(xi) + 0.5 * rho * float(r @ r)

    return oracle


def xbar_update(state, problem, x_blocks=None):
    xs = state.x if x_blocks is None else x_blocks
    v = problem.Ax(xs) + state.z + state.y / state.rho - problem.b
    return problem.shared_term.minimizer(problem.B, v, state.rho)


def z_update(state, problem, x_blocks=None, x_bar=None):
    xs = state.x if x_blocks is None else x_blocks
    xb = state.x_bar if x_bar is None else x_bar
    rho, beta = state.rho, state.beta
    v = problem.Ax(xs) + problem.B @ xb + state.y / rho - problem.b
    return -(rho / (rho + beta)) * v - state.lam / (rho + beta)


def y_update(state, problem, x_blocks=None, x_bar=None, z=None):
    xs = state.x if x_blocks is None else x_blocks
    xb = state.x_bar if x_bar is None else x_bar
    zz = state.z if z is None else z
    return state.y + state.rho * (problem.Ax(xs) + problem.B @ xb + zz - problem.b)


def inner_residuals(prev, nxt, problem):
    """The three inner stopping residuals between consecutive inner states."""
    rho = nxt.rho
    dBz = problem.B @ (nxt.x_bar - prev.x_bar) + (nxt.z - prev.z)
    e1 = float(np.linalg.norm(rho * problem.A_full.T @ dBz)) if problem.m else 0.0
    e2 = float(np.linalg.norm(rho * problem.B.T @ (nxt.z - prev.z))) if problem.m else 0.0
    e3 = primal_residual(nxt, problem).norm
    return e1, e2, e3


def outer_update(state, z_norm_prev, config):
    """
    Projected multiplier step and conditional penalty amplification.

    Returns a new state whose inner variables are re-initialized so that
    ``lam + beta z + y = 0``.
    """
    new = state.copy()
    lo, hi = config.lambda_bounds
    new.lam = np.clip(state.lam + state.beta * state.z, lo, hi)
    z_norm = float(np.linalg.norm(state.z))
    if z_norm > config.omega * z_norm_prev:
        new.beta = config.gamma * state.beta
    new.z_norm_prev = z_norm
    new.k = state.k + 1
    new.r = 0
    new.y = -(new.lam + new.beta * new.z)
    return new


def initial_state(problem, beta, rng):
    """Uniform ``[0, 1]`` primal variables and ``lam``; ``y`` from the dual identity."""
    x = [rng.uniform(0.0, 1.0, d) for d in problem.dims]
    x_bar = rng.uniform(0.0, 1.0, problem.n_xbar)
    z = rng.uniform(0.0, 1.0, problem.m)
    lam = rng.uniform(0.0, 1.0, problem.m)
    y = -(lam + beta * z)
    return AdmmState(x=x, x_bar=x_bar, z=z, y=y, lam=lam, beta=float(beta))


# ---------------------------------------------------------------- block solves

class BlockSolver:
    """
    Trust-region solver for one block, remembering every raw ``f_i``
    evaluation so later subproblems can reuse them under a new penalty.
    """

    _reuse_cap = 2000

    def __init__(self, problem, i, config, rng):
        self.problem = problem
        self.i = i
        self.config = config
        self.rng = rng
        self.smooth = problem.smoothness[i] is Smoothness.SMOOTH
        n = problem.blocks[i].dim
        self.memory = SampleArchive(n)
        self._values = {}
        self.radius = None

    def raw_value(self, x):
        """``f_i(x)``, from memory when possible."""
        key = np.asarray(x, dtype=float).tobytes()
        val = self._values.get(key)
        if val is None:
            val = self.problem.blocks[self.i](x)
            self._remember(x, val)
        return val

    def _remember(self, x, val):
        self.memory.add(x, val)
        self._values[np.asarray(x, dtype=float).tobytes()] = val

    def _history(self, x0, rest, rho, reach):
        X = self.memory.points
        if X.shape[0] == 0:
            return SampleArchive(x0.shape[0])
        d = np.linalg.norm(X - x0, axis=1)
        idx = np.flatnonzero(d <= reach)
        if idx.size > self._reuse_cap:
            idx = idx[np.argsort(d[idx])[: self._reuse_cap]]
        Xs = X[idx]
        R = Xs @ self.problem.A[self.i].T + rest
        vals = self.memory.values[idx] + 0.5 * rho * np.einsum("ij,ij->i", R, R)
        return SampleArchive(x0.shape[0], Xs, vals)

    def solve(self, state, x_blocks, stop_radius):
        """Solve the block subproblem from ``x_blocks[i]``; returns ``(x_i, f_i(x_i))``."""
        problem, i, cfg = self.problem, self.i, self.config
        rho = state.rho
        Ai = problem.A[i]
        rest = problem.Ax(x_blocks) - Ai @ x_blocks[i] + problem.B @ state.x_bar + state.z + state.y / rho - problem.b
        blk = problem.blocks[i]

        def oracle(xi):
            raw = blk(xi)
            self._remember(xi, raw)
            r = Ai @ xi + rest
            return raw + 0.5 * rho * float(r @ r)

        x0 = np.array(x_blocks[i], dtype=float)
        if self.radius is None:
            delta0 = cfg.delta0
        else:
            delta0 = max(cfg.warm_factor * self.radius, cfg.warm_floor)
        delta_max = cfg.smooth.delta_max if self.smooth else cfg.nonsmooth.delta_max
        delta0 = min(delta0, delta_max)
        f0_raw = self.raw_value(x0)
        r0 = Ai @ x0 + rest
        f0 = f0_raw + 0.5 * rho * float(r0 @ r0)
        history = self._history(x0, rest, rho, 4.0 * delta0)
        if history.lookup(x0) is None:
            history.add(x0, f0)
        stop = max(stop_radius, 1e-15)
        try:
            if self.smooth:
                res = solve_smooth(oracle, x0, delta0, stop, cfg.smooth, history=history, f0=f0)
            else:
                res = solve_nonsmooth(oracle, x0, delta0, stop, cfg.nonsmooth, history=history, f0=f0, rng=self.rng)
            x_new, radius = res.x, res.radius
        except BudgetError as exc:
            logger.warning("block %d: %s; keeping best iterate", i, exc)
            x_new, radius = exc.x_best, exc.radius
        self.radius = float(radius)
        return np.array(x_new, dtype=float), self.raw_value(x_new)


# ---------------------------------------------------------------- inner loop

def _pool(config, problem):
    if config.parallel_mode is not ParallelMode.JACOBI:
        return None
    threads = config.threads or min(problem.N, os.cpu_count() or 1)
    if threads <= 1 or problem.N == 1:
        return None
    return ThreadPoolExecutor(max_workers=threads)


def inner_iteration(state, problem, solvers, stop_radius, mode=ParallelMode.SEQUENTIAL, pool=None):
    """
    One sweep: block solves, then the closed-form ``xbar``, ``z`` and ``y``
    updates.  Returns the new state and the list of ``f_i(x_i)``.
    """
    mode = ParallelMode(mode)
    new = state.copy()
    f_vals = [None] * problem.N
    if mode is ParallelMode.SEQUENTIAL:
        for i in range(problem.N):
            new.x[i], f_vals[i] = solvers[i].solve(state, new.x, stop_radius)
    else:
        snapshot = [xi.copy() for xi in state.x]
        if pool is None:
            results = [solvers[i].solve(state, snapshot, stop_radius) for i in range(problem.N)]
        else:
            futures = [pool.submit(solvers[i].solve, state, snapshot, stop_radius) for i in range(problem.N)]
            results = [fut.result() for fut in futures]
        for i, (xi, fi) in enumerate(results):
            new.x[i], f_vals[i] = xi, fi
    new.x_bar = xbar_update(new, problem)
    new.z = z_update(new, problem)
    new.y = y_update(new, problem)
    new.r = state.r + 1
    return new, f_vals


def _lagrangian(state, problem, f_vals):
    res = primal_residual(state, problem).value
    return float(
        np.sum(f_vals)
        + problem.shared_term.value(state.x_bar)
        + state.y @ res
        + 0.5 * state.rho * res @ res
        + state.lam @ state.z
        + 0.5 * state.beta * state.z @ state.z
    )


def inner_loop(state, problem, schedule, solvers, config, trace=None, clock=None, pool=None):
    """
    Inner ADMM iterations at fixed ``(lam, beta)`` until the residuals and
    the block radius tolerance meet the outer-level tolerances.

    Returns ``(state, f_vals, residuals, status)`` where ``status`` is
    ``"converged"`` or ``"budget"``.
    """
    k = state.k
    e1k, e2k, e3k, e4k = tolerance_at(schedule, k)
    eps1_prev = e1k
    tighten = 1.0
    best, best_L, best_at, tightened = np.inf, np.inf, 0, False
    if clock is None:
        clock = time.perf_counter()
    f_vals, residuals = None, (np.nan, np.nan, np.nan)
    for r in range(config.max_inner):
        eps4_kr = inner_radius_tolerance(schedule, eps1_prev, e4k)
        radius_ok = eps4_kr <= e4k
        new, f_vals = inner_iteration(state, problem, solvers, tighten * eps4_kr, config.parallel_mode, pool)
        residuals = inner_residuals(state, new, problem)
        state = new
        e1, e2, e3 = residuals
        L = _lagrangian(state, problem, f_vals)
        if trace is not None:
            trace.append(
                k=k, r=r, L=L,
                eps1_kr=e1, eps2_kr=e2, eps3_kr=e3, eps4_kr=tighten * eps4_kr,
                z_norm=float(np.linalg.norm(state.z)), beta=state.beta,
                max_block_evals=problem.max_block_evals(),
                wall_ms=1e3 * (time.perf_counter() - clock),
            )
        logger.debug("k=%d r=%d L=%.6g residuals %.3g %.3g %.3g", k, r, L, e1, e2, e3)
        if e1 <= e1k and e2 <= e2k and e3 <= e3k and radius_ok:
            return state, f_vals, residuals, "converged"
        if config.max_evals is not None and problem.max_block_evals() >= config.max_evals:
            return state, f_vals, residuals, "budget"
        eps1_prev = e1

        # progress means either smaller residuals or a lower Lagrangian
        score = max(e1 / e1k, e2 / e2k, e3 / e3k)
        progressed = False
        if score < config.stall_factor * best:
            best, progressed = score, True
        if L < best_L - (1.0 - config.stall_factor) * max(1.0, abs(L)):
            best_L, progressed = L, True
        if progressed:
            best_at = r
        elif r - best_at >= config.stall_window:
            if tightened:
                raise InnerStallError(
                    f"inner loop stalled at k={k}, r={r}: residuals {residuals}",
                    state=state, residuals=residuals, trace=trace,
                )
            logger.info("inner loop stalled at k=%d r=%d; tightening block solves", k, r)
            tighten, tightened, best_at = 0.5, True, r
    raise InnerStallError(
        f"inner loop hit the cap of {config.max_inner} iterations at k={k}; residuals {residuals}",
        state=state, residuals=residuals, trace=trace,
    )


# ---------------------------------------------------------------- driver

def solve(problem, config=None, schedule=None, seed=0, state=None):
    """
    Run the two-level ADMM.

    Parameters
    ----------
    problem : BlockProblem
    config : OuterConfig, optional
    schedule : ToleranceSchedule, optional
    seed : int
        Seeds the initial point and the random directions of nonsmooth
        block solves.
    state : AdmmState, optional
        Starting point; drawn uniformly from ``[0, 1]`` when omitted.

    Returns
    -------
    AdmmResult
        ``status`` is ``"converged"``, ``"max_outer"`` or ``"budget"``.

    Raises
    ------
    InnerStallError
        When an inner loop stops making progress.  ``exc.trace`` holds the
        partial trace.
    """
    config = OuterConfig() if config is None else config
    schedule = ToleranceSchedule() if schedule is None else schedule
    seeds = np.random.SeedSequence(seed)
    init_seq, *block_seqs = seeds.spawn(problem.N + 1)
    if state is None:
        state = initial_state(problem, config.beta1, np.random.default_rng(init_seq))
    else:
        state = state.copy()
    problem.check_state(state)
    solvers = [BlockSolver(problem, i, config, np.random.default_rng(block_seqs[i])) for i in range(problem.N)]
    trace = RunTrace()
    clock = time.perf_counter()
    inner_total = 0
    status = "max_outer"
    f_vals = None
    residuals = (np.nan, np.nan, np.nan)
    pool = _pool(config, problem)
    try:
        while True:
            n_before = len(trace)
            try:
                state, f_vals, residuals, inner_status = inner_loop(
                    state, problem, schedule, solvers, config, trace, clock, pool
                )
            except InnerStallError as exc:
                exc.trace = trace
                raise
            inner_total += len(trace) - n_before
            logger.info(
                "k=%d: %d inner iterations, residuals %.3g %.3g %.3g, |z|=%.3g, beta=%.4g, max evals %d",
                state.k, len(trace) - n_before, *residuals, np.linalg.norm(state.z), state.beta,
                problem.max_block_evals(),
            )
            if inner_status == "budget":
                status = "budget"
                break
            z_norm = float(np.linalg.norm(state.z))
            if schedule.floors_reached(state.k) and z_norm <= schedule.eps3:
                status = "converged"
                break
            if state.k >= config.max_outer:
                break
            state = outer_update(state, state.z_norm_prev, config)
    finally:
        if pool is not None:
            pool.shutdown()
    objective = float(np.sum(f_vals)) + problem.shared_term.value(state.x_bar)
    return AdmmResult(
        state=state,
        converged=status == "converged",
        status=status,
        objective=objective,
        trace=trace,
        eval_counts=problem.eval_counts(),
        wall_time=time.perf_counter() - clock,
        outer_iterations=state.k,
        inner_iterations=inner_total,
        residuals=residuals,
    )
