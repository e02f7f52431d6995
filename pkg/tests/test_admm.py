import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from admm_dfo.admm import (
    BlockSolver,
    OuterConfig,
    ParallelMode,
    ToleranceSchedule,
    block_subproblem_objective,
    initial_state,
    inner_iteration,
    inner_loop,
    inner_radius_tolerance,
    inner_residuals,
    outer_update,
    solve,
    tolerance_at,
    xbar_update,
    y_update,
    z_update,
)
from admm_dfo.benchmarks import arwhead_eval, decompose_arwhead, decompose_rosenbrock, rosenbrock_eval
from admm_dfo.problem import AdmmState, BlockProblem, ConfigurationError, LocalObjective, augmented_lagrangian
from admm_dfo.tr_smooth import solve_smooth


def consensus_problem(fs, dim=1):
    N = len(fs)
    blocks = [LocalObjective(f, dim) for f in fs]
    A = []
    for i in range(N):
        Ai = np.zeros((N * dim, dim))
        Ai[i * dim:(i + 1) * dim] = np.eye(dim)
        A.append(Ai)
    B = -np.tile(np.eye(dim), (N, 1))
    return BlockProblem(blocks, A, B, np.zeros(N * dim))


def random_state(rng, problem, beta=2.0):
    return AdmmState(
        x=[rng.standard_normal(d) for d in problem.dims],
        x_bar=rng.standard_normal(problem.n_xbar),
        z=rng.standard_normal(problem.m),
        y=rng.standard_normal(problem.m),
        lam=rng.standard_normal(problem.m),
        beta=beta,
    )


class TestSchedule:
    def test_examples(self):
        s = ToleranceSchedule(c1=1, a1=2, eps1=1e-5)
        assert tolerance_at(s, 1)[0] == 0.5
        assert tolerance_at(s, 2)[0] == 0.25
        assert tolerance_at(s, 20)[0] == 1e-5

    def test_eps3_ratio_one(self):
        s = ToleranceSchedule(eps1=1e-5, eps3=1e-5)
        for k in range(1, 30):
            e1, _, e3, e4 = tolerance_at(s, k)
            assert e3 == e1 == e4

    def test_rejects_k0(self):
        with pytest.raises(ValueError):
            tolerance_at(ToleranceSchedule(), 0)

    @pytest.mark.parametrize("kw", [dict(c1=0.5), dict(a4=2.5), dict(eps2=0.0)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            ToleranceSchedule(**kw)

    @given(
        st.floats(1, 2), st.floats(1, 2), st.floats(1, 2), st.floats(1, 2),
        st.floats(1e-8, 1e-2), st.floats(1e-8, 1e-2), st.floats(1e-8, 1e-2),
    )
    def test_nonincreasing_and_floored(self, c1, c2, a1, a2, e1, e2, e3):
        s = ToleranceSchedule(c1=c1, c2=c2, a1=a1, a2=a2, eps1=e1, eps2=e2, eps3=e3, eps4=e1)
        prev = None
        for k in range(1, 60):
            cur = tolerance_at(s, k)
            assert cur[0] >= e1 and cur[1] >= e2 and cur[2] >= e3 * (1 - 1e-12)
            if prev is not None:
                assert all(c <= p for c, p in zip(cur, prev))
            prev = cur

    def test_radius_tolerance(self):
        s = ToleranceSchedule(c4=1, a4=1.5)
        assert inner_radius_tolerance(s, 0.04, 1e-5) == pytest.approx(0.008)
        assert inner_radius_tolerance(s, 0.0, 1e-5) == 1e-5
        assert inner_radius_tolerance(ToleranceSchedule(c4=2), 1.0, 1e-5) == 2.0


class TestBlockSubproblem:
    def test_plain_penalty(self):
        problem = BlockProblem([LocalObjective(lambda x: float(np.sum(np.cos(x))), 2)], [np.eye(2)], np.zeros((2, 1)), np.zeros(2))
        state = AdmmState(x=[np.zeros(2)], x_bar=np.zeros(1), z=np.zeros(2), y=np.zeros(2), lam=np.zeros(2), beta=1.0)
        oracle = block_subproblem_objective(state, problem, 0)
        x = np.array([0.3, -1.2])
        assert oracle(x) == pytest.approx(np.sum(np.cos(x)) + x @ x)

    def test_proximal_form(self, rng):
        problem = consensus_problem([lambda x: float(x @ x)] * 3, dim=2)
        xb = rng.standard_normal(2)
        state = AdmmState(x=[xb.copy() for _ in range(3)], x_bar=xb, z=np.zeros(6), y=np.zeros(6), lam=np.zeros(6), beta=1.5)
        oracle = block_subproblem_objective(state, problem, 1)
        x = rng.standard_normal(2)
        assert oracle(x) == pytest.approx(x @ x + 0.5 * state.rho * np.sum((x - xb) ** 2))

    def test_matches_naive_and_counts_once(self, rng):
        problem, _ = decompose_rosenbrock(10)
        state = random_state(rng, problem, beta=4.0)
        i = 1
        oracle = block_subproblem_objective(state, problem, i)
        x = rng.standard_normal(problem.dims[i])
        total = problem.b * 0
        for j in range(problem.N):
            total = total + problem.A[j] @ (x if j == i else state.x[j])
        v = total + problem.B @ state.x_bar + state.z + state.y / state.rho - problem.b
        want = rosenbrock_eval(x) + state.rho / 2 * v @ v
        before = problem.eval_counts()[i]
        assert oracle(x) == pytest.approx(want, rel=1e-12)
        assert problem.eval_counts()[i] == before + 1


class TestClosedForms:
    def test_xbar_consensus_mean(self):
        problem = consensus_problem([lambda x: 0.0] * 2)
        state = AdmmState(x=[np.array([1.0]), np.array([3.0])], x_bar=np.zeros(1), z=np.zeros(2),
                          y=np.zeros(2), lam=np.zeros(2), beta=1.0)
        assert xbar_update(state, problem) == pytest.approx([2.0])

    def test_xbar_identity_B(self, rng):
        problem = BlockProblem([LocalObjective(lambda x: 0.0, 2)], [rng.standard_normal((3, 2))], np.eye(3), rng.standard_normal(3))
        state = random_state(rng, problem)
        v = problem.Ax(state.x) + state.z + state.y / state.rho - problem.b
        assert np.allclose(xbar_update(state, problem), -v)

    def test_xbar_optimality_probe(self, rng):
        problem = consensus_problem([lambda x: 0.0] * 4, dim=3)
        state = random_state(rng, problem)
        xb = xbar_update(state, problem)
        v = problem.Ax(state.x) + state.z + state.y / state.rho - problem.b
        phi = lambda u: 0.5 * np.sum((v + problem.B @ u) ** 2)  # noqa: E731
        grad = problem.B.T @ (v + problem.B @ xb)
        assert np.allclose(xb, np.mean([state.x[i] + state.z[3 * i:3 * i + 3] + state.y[3 * i:3 * i + 3] / state.rho
                                        for i in range(4)], axis=0))
        for _ in range(100):
            d = rng.standard_normal(3)
            assert grad @ d >= -1e-8
            assert phi(xb + 1e-4 * d) >= phi(xb)

    def test_z_examples(self):
        problem = BlockProblem([LocalObjective(lambda x: 0.0, 2)], [np.eye(2)], np.zeros((2, 1)), np.zeros(2))
        state = AdmmState(x=[np.array([0.3, -0.6])], x_bar=np.zeros(1), z=np.zeros(2), y=np.zeros(2), lam=np.zeros(2), beta=1.0)
        assert np.allclose(z_update(state, problem), -(2 / 3) * state.x[0])
        state = AdmmState(x=[np.zeros(2)], x_bar=np.zeros(1), z=np.zeros(2), y=np.zeros(2), lam=np.array([3.0, 0.0]), beta=1.0)
        assert np.allclose(z_update(state, problem), [-1.0, 0.0])

    def test_z_brute_force(self, rng):
        problem, _ = decompose_arwhead(9)
        state = random_state(rng, problem, beta=1.7)
        v = problem.Ax(state.x) + problem.B @ state.x_bar - problem.b

        def L(z):
            r = v + z
            return state.y @ r + state.rho / 2 * r @ r + state.lam @ z + state.beta / 2 * z @ z

        best = minimize(L, np.zeros(problem.m), method="BFGS", options={"gtol": 1e-12}).x
        assert np.allclose(z_update(state, problem), best, atol=1e-6)

    def test_y_examples(self, rng):
        problem = BlockProblem([LocalObjective(lambda x: 0.0, 2)], [np.eye(2)], np.zeros((2, 1)), np.zeros(2))
        y0 = rng.standard_normal(2)
        state = AdmmState(x=[np.zeros(2)], x_bar=np.zeros(1), z=np.zeros(2), y=y0, lam=np.zeros(2), beta=1.0)
        assert np.array_equal(y_update(state, problem), y0)
        state = AdmmState(x=[np.array([1.0, -1.0])], x_bar=np.zeros(1), z=np.zeros(2), y=np.zeros(2), lam=np.zeros(2), beta=1.0)
        assert np.allclose(y_update(state, problem), [2.0, -2.0])

    @given(st.integers(0, 10_000), st.floats(0.1, 100.0))
    def test_dual_identity(self, seed, beta):
        rng = np.random.default_rng(seed)
        problem, _ = decompose_rosenbrock(8)
        state = random_state(rng, problem, beta=beta)
        state.x_bar = xbar_update(state, problem)
        state.z = z_update(state, problem)
        state.y = y_update(state, problem)
        gap = np.linalg.norm(state.lam + state.beta * state.z + state.y)
        assert gap <= 1e-8 * (1 + np.linalg.norm(state.lam)) * max(1.0, beta)


class TestResiduals:
    def test_stationary(self, rng):
        problem, _ = decompose_arwhead(9)
        state = random_state(rng, problem)
        e1, e2, e3 = inner_residuals(state, state.copy(), problem)
        r = problem.Ax(state.x) + problem.B @ state.x_bar + state.z - problem.b
        assert (e1, e2) == (0.0, 0.0) and e3 == pytest.approx(np.linalg.norm(r))

    def test_z_step(self):
        problem = BlockProblem([LocalObjective(lambda x: 0.0, 2)], [np.eye(2)], np.eye(2), np.zeros(2))
        a = AdmmState(x=[np.zeros(2)], x_bar=np.zeros(2), z=np.zeros(2), y=np.zeros(2), lam=np.zeros(2), beta=1.0)
        b = a.copy()
        b.z = np.array([1.0, 0.0])
        assert inner_residuals(a, b, problem)[1] == pytest.approx(2.0)

    def test_naive(self, rng):
        problem, _ = decompose_rosenbrock(11)
        a, b = random_state(rng, problem), random_state(rng, problem)
        A = np.hstack(problem.A)
        d = problem.B @ b.x_bar + b.z - problem.B @ a.x_bar - a.z
        e1 = np.linalg.norm(b.rho * A.T @ d)
        e2 = np.linalg.norm(b.rho * problem.B.T @ (b.z - a.z))
        e3 = np.linalg.norm(A @ np.concatenate(b.x) + problem.B @ b.x_bar + b.z - problem.b)
        assert inner_residuals(a, b, problem) == pytest.approx((e1, e2, e3), rel=1e-12)


class TestOuterUpdate:
    def _state(self, z, beta=20.0, lam=None):
        z = np.asarray(z, dtype=float)
        lam = np.zeros_like(z) if lam is None else np.asarray(lam, dtype=float)
        return AdmmState(x=[np.zeros(1)], x_bar=np.zeros(1), z=z, y=-(lam + beta * z), lam=lam, beta=beta)

    def test_amplify(self):
        cfg = OuterConfig(omega=0.75, gamma=1.005)
        new = outer_update(self._state([0.8]), 1.0, cfg)
        assert new.beta == pytest.approx(20.1)
        assert new.rho == pytest.approx(40.2)

    def test_keep(self):
        new = outer_update(self._state([0.7]), 1.0, OuterConfig(omega=0.75, gamma=1.005))
        assert new.beta == 20.0

    def test_projection_and_reinit(self):
        cfg = OuterConfig(lambda_bounds=(-1.0, 1.0))
        st_ = self._state([1.0, -1.0, 0.01], beta=20.0)
        new = outer_update(st_, 10.0, cfg)
        assert np.array_equal(new.lam, [1.0, -1.0, 0.2])
        assert np.allclose(new.lam + new.beta * new.z + new.y, 0)
        assert new.k == st_.k + 1 and new.r == 0

    @pytest.mark.parametrize("kw", [dict(omega=1.0), dict(gamma=1.0), dict(beta1=0.0), dict(lambda_bounds=(1, -1))])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            OuterConfig(**kw)


def quadratic_blocks(a, c):
    return [lambda x: 0.5 * float((x[0] - a) ** 2), lambda x: 0.5 * float((x[0] - c) ** 2)]


class TestInnerLoop:
    def test_stationary_feasible_start(self):
        problem = consensus_problem([lambda x: float(x @ x)] * 2)
        state = AdmmState(x=[np.zeros(1), np.zeros(1)], x_bar=np.zeros(1), z=np.zeros(2), y=np.zeros(2), lam=np.zeros(2), beta=5.0)
        cfg = OuterConfig(parallel_mode="sequential")
        solvers = [BlockSolver(problem, i, cfg, np.random.default_rng(i)) for i in range(2)]
        sched = ToleranceSchedule()
        _, _, residuals, status = inner_loop(state, problem, sched, solvers, cfg)
        assert status == "converged"
        assert problem.max_block_evals() < 100
        assert all(r <= t for r, t in zip(residuals, tolerance_at(sched, 1)))

    def test_arwhead_first_outer_iteration(self):
        problem, _ = decompose_arwhead(10)
        cfg = OuterConfig()
        sched = ToleranceSchedule()
        state = initial_state(problem, cfg.beta1, np.random.default_rng(0))
        solvers = [BlockSolver(problem, i, cfg, np.random.default_rng(i)) for i in range(problem.N)]
        out, _, residuals, status = inner_loop(state, problem, sched, solvers, cfg)
        assert status == "converged"
        assert residuals[2] <= tolerance_at(sched, 1)[2]
        assert out.r < cfg.max_inner

    def test_two_block_toy_limit(self):
        a, c = 1.0, 3.0
        problem = consensus_problem(quadratic_blocks(a, c))
        lam, beta = np.array([0.4, -0.1]), 2.0
        state = AdmmState(x=[np.zeros(1), np.zeros(1)], x_bar=np.zeros(1), z=np.zeros(2), y=-lam.copy(), lam=lam, beta=beta, k=40)
        cfg = OuterConfig(parallel_mode="sequential")
        sched = ToleranceSchedule(eps1=1e-9, eps2=1e-9, eps3=1e-9, eps4=1e-9)
        solvers = [BlockSolver(problem, i, cfg, np.random.default_rng(i)) for i in range(2)]
        out, *_ = inner_loop(state, problem, sched, solvers, cfg)
        # stationarity of the slack-relaxed problem in (x1, x2, xbar) with z_i = xbar - x_i
        K = np.array([[1 + beta, 0, -beta], [0, 1 + beta, -beta], [-beta, -beta, 2 * beta]])
        rhs = np.array([a + lam[0], c + lam[1], -lam.sum()])
        x1, x2, xb = np.linalg.solve(K, rhs)
        assert out.x[0][0] == pytest.approx(x1, abs=1e-5)
        assert out.x[1][0] == pytest.approx(x2, abs=1e-5)
        assert out.x_bar[0] == pytest.approx(xb, abs=1e-5)


class TestSequentialProperties:
    def test_descent_identity_and_blocks(self):
        problem, _ = decompose_arwhead(9)
        cfg = OuterConfig(parallel_mode="sequential")
        state = initial_state(problem, 20.0, np.random.default_rng(1))
        solvers = [BlockSolver(problem, i, cfg, np.random.default_rng(i)) for i in range(problem.N)]
        f_prev = [problem.blocks[i](state.x[i]) for i in range(problem.N)]
        for _ in range(15):
            L_prev = augmented_lagrangian(state, problem, f_prev)
            # block updates are individually non-increasing in L
            x_work = [xi.copy() for xi in state.x]
            L_run = L_prev
            for i in range(problem.N):
                x_work[i], _ = solvers[i].solve(state, x_work, 1e-3)
                trial = state.copy()
                trial.x = [xi.copy() for xi in x_work]
                L_i = augmented_lagrangian(trial, problem)
                assert L_i <= L_run + 1e-9 * max(1.0, abs(L_run))
                L_run = L_i
            new, f_vals = inner_iteration(state, problem, solvers, 1e-3, ParallelMode.SEQUENTIAL)
            L_new = augmented_lagrangian(new, problem, f_vals)
            dB = problem.B @ (new.x_bar - state.x_bar)
            dz = new.z - state.z
            assert L_new <= L_prev - state.beta * dB @ dB - state.beta / 2 * dz @ dz + 1e-6
            assert np.linalg.norm(new.lam + new.beta * new.z + new.y) <= 1e-8 * (1 + np.linalg.norm(new.lam)) * new.beta
            state, f_prev = new, f_vals


class TestSolve:
    def test_arwhead_10(self):
        problem, layout = decompose_arwhead(10)
        res = solve(problem, OuterConfig(), ToleranceSchedule(), seed=0)
        u = layout.from_blocks(res.state.x, res.state.x_bar)
        assert res.converged
        assert arwhead_eval(u) <= 1e-5
        betas = res.trace.column("beta")
        assert np.all(np.diff(betas) >= 0)
        assert res.residuals[0] <= 1e-5 and res.residuals[1] <= 1e-5
        r = problem.Ax(res.state.x) + problem.B @ res.state.x_bar - problem.b
        assert np.linalg.norm(r) <= 1e-5 + np.linalg.norm(res.state.z) + 1e-12

    def test_rosenbrock_10(self):
        problem, layout = decompose_rosenbrock(10)
        res = solve(problem, OuterConfig(), ToleranceSchedule(), seed=0)
        assert res.converged
        assert rosenbrock_eval(layout.from_blocks(res.state.x, res.state.x_bar)) <= 1e-5

    def test_degenerate_coupling(self):
        f = lambda x: float((x[0] - 1) ** 2 + 3 * (x[1] + 0.5) ** 2 + 0.5 * x[0] * x[1])  # noqa: E731
        problem = BlockProblem([LocalObjective(f, 2)], [np.zeros((1, 2))], np.zeros((1, 1)), np.zeros(1))
        res = solve(problem, OuterConfig(), ToleranceSchedule(), seed=0)
        direct = solve_smooth(f, np.zeros(2), 1.0, 1e-6)
        assert res.objective == pytest.approx(direct.f, abs=1e-6)

    def test_seeded_determinism_sequential(self):
        runs = []
        for _ in range(2):
            problem, _ = decompose_arwhead(10)
            res = solve(problem, OuterConfig(parallel_mode="sequential"), ToleranceSchedule(), seed=7)
            runs.append([row[:-1] for row in res.trace.rows])
        assert runs[0] == runs[1]

    def test_jacobi_matches_across_thread_counts(self):
        out = []
        for threads in (1, 3):
            problem, _ = decompose_arwhead(10)
            res = solve(problem, OuterConfig(threads=threads), ToleranceSchedule(), seed=3)
            out.append([row[:-1] for row in res.trace.rows])
        assert out[0] == out[1]
