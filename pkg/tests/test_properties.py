"""Cross-module property suite with fixed instance counts; the whole file runs in well under a minute."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from admm_dfo.admm import BlockSolver, OuterConfig, ParallelMode, initial_state, inner_iteration, z_update
from admm_dfo.benchmarks import arwhead_eval, decompose_arwhead, decompose_rosenbrock, rosenbrock_eval
from admm_dfo.numerics import QpProblem, solve_tr_qp
from admm_dfo.problem import AdmmState, BlockProblem, LocalObjective, augmented_lagrangian
from admm_dfo.tr_smooth import SmoothTrConfig, build_fully_linear, solve_smooth

seeds = st.integers(0, 2**31 - 1)


def counted(n):
    return settings(max_examples=n, derandomize=True, database=None)


def quadratic(Q, c):
    return lambda x: float(0.5 * x @ Q @ x + c @ x)


def random_block_problem(rng):
    """Two or three convex quadratic blocks coupled through a random full-rank ``B``."""
    N = int(rng.integers(2, 4))
    dims = [int(rng.integers(1, 3)) for _ in range(N)]
    m = sum(dims)
    n_xbar = int(rng.integers(1, min(m, 3) + 1))
    blocks = []
    for d in dims:
        R = rng.standard_normal((d, d))
        blocks.append(LocalObjective(quadratic(R @ R.T + np.eye(d), rng.standard_normal(d)), d))
    A = [rng.standard_normal((m, d)) for d in dims]
    B = rng.standard_normal((m, n_xbar))
    return BlockProblem(blocks, A, B, rng.standard_normal(m))


def run_inner(problem, rng, beta, iterations, mode):
    cfg = OuterConfig(parallel_mode=mode)
    state = initial_state(problem, beta, rng)
    solvers = [BlockSolver(problem, i, cfg, np.random.default_rng(i)) for i in range(problem.N)]
    f_vals = [problem.blocks[i](state.x[i]) for i in range(problem.N)]
    for _ in range(iterations):
        new, new_f = inner_iteration(state, problem, solvers, 1e-2, mode)
        yield state, f_vals, new, new_f
        state, f_vals = new, new_f


@counted(100)
@given(seeds, st.floats(0.5, 50.0))
def test_dual_identity_every_inner_iteration(seed, beta):
    rng = np.random.default_rng(seed)
    problem = random_block_problem(rng)
    for _, _, new, _ in run_inner(problem, rng, beta, 2, ParallelMode.JACOBI):
        assert np.linalg.norm(new.lam + new.beta * new.z + new.y) <= 1e-8


@counted(50)
@given(seeds)
def test_z_update_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    problem = random_block_problem(rng)
    state = AdmmState(
        x=[rng.standard_normal(d) for d in problem.dims],
        x_bar=rng.standard_normal(problem.n_xbar),
        z=np.zeros(problem.m),
        y=rng.standard_normal(problem.m),
        lam=rng.standard_normal(problem.m),
        beta=float(rng.uniform(0.1, 20.0)),
    )
    v = problem.Ax(state.x) + problem.B @ state.x_bar - problem.b

    def L(z):
        r = v + z
        return state.y @ r + state.rho / 2 * r @ r + state.lam @ z + state.beta / 2 * z @ z

    def grad(z):
        return state.y + state.rho * (v + z) + state.lam + state.beta * z

    best = minimize(L, np.zeros(problem.m), jac=grad, method="BFGS", options={"gtol": 1e-12}).x
    assert np.allclose(z_update(state, problem), best, atol=1e-6)


@counted(20)
@given(seeds)
def test_sequential_descent_inequality(seed):
    rng = np.random.default_rng(seed)
    problem = random_block_problem(rng)
    for old, f_old, new, f_new in run_inner(problem, rng, float(rng.uniform(1.0, 20.0)), 3, ParallelMode.SEQUENTIAL):
        dB = problem.B @ (new.x_bar - old.x_bar)
        dz = new.z - old.z
        bound = augmented_lagrangian(old, problem, f_old) - old.beta * dB @ dB - old.beta / 2 * dz @ dz
        assert augmented_lagrangian(new, problem, f_new) <= bound + 1e-6


@counted(200)
@given(seeds, st.integers(1, 6), st.integers(1, 8), st.booleans())
def test_qp_multipliers_and_stationarity(seed, n, p, convex):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    H = M @ M.T if convex else 0.5 * (M + M.T)
    G = rng.standard_normal((p, n))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    qp = QpProblem(H, rng.standard_normal(p), G, rng.uniform(0.1, 3.0))
    sol = solve_tr_qp(qp)
    lam = sol.multipliers
    assert lam.min() >= -1e-8
    assert abs(lam.sum() - 1.0) <= 1e-8
    stat = qp.H @ sol.s + qp.directions.T @ lam + 2 * sol.tr_multiplier * sol.s
    assert np.linalg.norm(stat) <= 1e-6 * (1 + np.linalg.norm(H))


@counted(20)
@given(seeds, st.integers(2, 4))
def test_smooth_gradient_radius_bound(seed, n):
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((n, n))
    Q = R @ R.T + 0.1 * np.eye(n)
    c = rng.standard_normal(n)
    cfg = SmoothTrConfig()
    res = solve_smooth(quadratic(Q, c), rng.standard_normal(n), 1.0, 1e-5, config=cfg)
    m = res.model
    kappa_eg = np.linalg.norm(Q @ m.center + c - m.g) / m.radius
    C1 = max((1 + kappa_eg * cfg.mu) / cfg.tau, kappa_eg + 1 / cfg.mu)
    assert res.radius <= 1e-5
    assert np.linalg.norm(Q @ res.x + c) <= C1 * res.radius


@counted(50)
@given(seeds, st.integers(2, 40))
def test_reassembly_both_decompositions(seed, N):
    u = np.random.default_rng(seed).uniform(-3, 3, N)
    for decompose, f in ((decompose_arwhead, arwhead_eval), (decompose_rosenbrock, rosenbrock_eval)):
        problem, layout = decompose(N)
        x, xb = layout.to_blocks(u)
        total = sum(problem.blocks[i](x[i]) for i in range(problem.N))
        assert total == pytest.approx(f(u), rel=1e-12, abs=1e-12)


@counted(50)
@given(seeds, st.integers(1, 5))
def test_quadratic_models_are_exact(seed, n):
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((n, n))
    Q = 0.5 * (R + R.T)
    c = rng.standard_normal(n)
    f = quadratic(Q, c)
    center = rng.standard_normal(n)
    m = build_fully_linear(f, center, float(rng.uniform(0.1, 2.0)), n_points="quadratic")
    assert np.allclose(m.H, Q, atol=1e-9)
    assert np.allclose(m.g, Q @ center + c, atol=1e-9)
    probe = center + rng.uniform(-1, 1, n)
    assert m.value(probe) == pytest.approx(f(probe), abs=1e-9 * (1 + abs(f(probe))))
