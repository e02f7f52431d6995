"""
Bundle-style trust-region DFO for locally Lipschitz black boxes.

The model at ``x`` is a max of affine pieces built on random unit
directions plus a quadratic term::

    m(s) = max_i { f(x) + g_i^T s - beta_i } + s^T H s / 2

where the offsets ``beta_i >= 0`` are computed from nearby samples so that
each piece stays below the function up to a small quadratic slack.  Steps
come from the convex QP in :func:`admm_dfo.numerics.solve_tr_qp`, and the
QP multipliers aggregate the directions into an approximate subgradient.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import QpFailure, QpProblem, clip_eigenvalues, solve_tr_qp
from .tr_smooth import BudgetError, _as_archive, _basis, _unpack_quadratic

__all__ = [
    "NonsmoothTrConfig",
    "BundleModel",
    "NonsmoothResult",
    "compute_offsets",
    "aggregate_subgradient",
    "fit_hessian",
    "solve_nonsmooth",
]

logger = logging.getLogger(__name__)

_RIDGE = 1e-6


@dataclass
class NonsmoothTrConfig:
    eta1_bar: float = 1e-4
    theta_bar: float = 1e-3
    eps_bar: float = 1.0
    zeta1_bar: float = 0.7
    zeta2_bar: float = 2.0
    zeta_bar: float = 2.0
    p_bar: float = 1.0
    delta_param: float = 1e-3
    delta_exp: float = 0.25
    curve_m: float = 1e3
    curve_M: float = 1e3
    max_directions: int = 50
    probe: bool = True
    delta_max: float = 10.0
    rng_seed: int = 0
    max_iters: int = 5000

    def __post_init__(self):
        if self.eta1_bar <= 0 or self.theta_bar <= 0 or self.eps_bar <= 0:
            raise ValueError("eta1_bar, theta_bar and eps_bar must be positive")
        if not 0.0 < self.zeta1_bar < 1.0 <= self.zeta2_bar:
            raise ValueError("need 0 < zeta1_bar < 1 <= zeta2_bar")
        if self.zeta_bar <= 0 or self.p_bar <= 0:
            raise ValueError("zeta_bar and p_bar must be positive")
        if self.delta_param <= 0:
            raise ValueError("delta_param must be positive")
        if not 0.0 < self.delta_exp < 0.5:
            raise ValueError("delta_exp must lie in (0, 1/2)")
        if self.curve_m <= 0 or self.curve_M <= 0:
            raise ValueError("curvature bounds must be positive")
        if self.delta_max <= 0:
            raise ValueError("delta_max must be positive")
        if self.max_directions < 1:
            raise ValueError("max_directions must be at least 1")


@dataclass
class BundleModel:
    center: np.ndarray
    f_center: float
    directions: np.ndarray
    offsets: np.ndarray
    H: np.ndarray
    samples: np.ndarray = field(repr=False, default=None)
    sample_values: np.ndarray = field(repr=False, default=None)

    def value(self, s):
        s = np.asarray(s, dtype=float)
        pieces = self.f_center + self.directions @ s - self.offsets
        return float(pieces.max() + 0.5 * s @ self.H @ s)


@dataclass
class NonsmoothResult:
    x: np.ndarray
    f: float
    radius: float
    iterations: int
    model: BundleModel = field(repr=False, default=None)
    trace: list = field(repr=False, default_factory=list)


def compute_offsets(center, f_center, directions, samples, sample_values, delta_param):
    """
    Offsets ``beta_i = max_j max(0, f(x) - f(y_j) + g_i^T (y_j - x) + delta ||y_j - x||^2)``.

    With no samples all offsets are zero.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    samples = np.asarray(samples, dtype=float).reshape(-1, directions.shape[1])
    if samples.shape[0] == 0:
        return np.zeros(directions.shape[0])
    D = samples - np.asarray(center, dtype=float)
    base = f_center - np.asarray(sample_values, dtype=float) + delta_param * np.sum(D * D, axis=1)
    vals = base[None, :] + directions @ D.T
    return np.maximum(vals.max(axis=1), 0.0)


def aggregate_subgradient(multipliers, directions):
    """Convex combination ``sum_i lambda_i g_i`` of the directions."""
    return np.asarray(multipliers, dtype=float) @ np.atleast_2d(np.asarray(directions, dtype=float))


def fit_hessian(center, f_center, radius, samples, sample_values, H_prior=None):
    """
    Hessian of a ridge-regularized quadratic regression on the samples.

    The ridge pulls the curvature toward ``H_prior`` (zero by default), so
    an underdetermined fit changes the previous Hessian as little as
    possible.  Returns ``None`` when there are too few samples.
    """
    n = center.shape[0]
    samples = np.asarray(samples, dtype=float).reshape(-1, n)
    if samples.shape[0] < n + 2:
        return None
    Y = (samples - center) / radius
    Phi = _basis(Y)
    rhs = np.asarray(sample_values, dtype=float) - f_center
    if H_prior is not None:
        Hs = H_prior * radius**2
        rhs = rhs - 0.5 * np.einsum("ij,jk,ik->i", Y, Hs, Y)
    q = Phi.shape[1]
    scale = max(1.0, np.abs(rhs).max())
    reg = np.zeros((q - n - 1, q))
    reg[:, n + 1:] = np.sqrt(_RIDGE) * scale * np.eye(q - n - 1)
    coef = np.linalg.lstsq(np.vstack([Phi, reg]), np.concatenate([rhs, np.zeros(q - n - 1)]), rcond=None)[0]
    _, _, H = _unpack_quadratic(coef, n)
    H = H / radius**2
    return H if H_prior is None else H + H_prior


def _random_direction(rng, n):
    while True:
        d = rng.standard_normal(n)
        nrm = np.linalg.norm(d)
        if nrm > 1e-12:
            return d / nrm


def solve_nonsmooth(oracle, x0, delta0, stop_radius, config=None, history=None, f0=None, rng=None):
    """
    Minimize a locally Lipschitz black box until the radius is at most
    ``stop_radius``.

    Parameters
    ----------
    oracle : callable
    x0 : array_like
    delta0 : float
    stop_radius : float
    config : NonsmoothTrConfig, optional
    history : SampleArchive or tuple, optional
        Known evaluations, reused for offsets and curvature.
    f0 : float, optional
    rng : numpy.random.Generator, optional
        Source of the random directions.  Defaults to one seeded from
        ``config.rng_seed``.

    Returns
    -------
    NonsmoothResult
        ``trace`` holds ``(x, f, radius, ratio, n_directions, ||g_agg||)``
        per iteration.
    """
    if config is None:
        config = NonsmoothTrConfig()
    if stop_radius <= 0:
        raise ValueError("stop_radius must be positive")
    if delta0 <= 0:
        raise ValueError("delta0 must be positive")
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    x = np.array(x0, dtype=float)
    n = x.shape[0]
    delta = min(float(delta0), config.delta_max)
    archive = _as_archive(history, n)
    f = archive.lookup(x) if f0 is None else float(f0)
    if f is None:
        f = oracle(x)
        archive.add(x, f)
    elif archive.lookup(x) is None:
        archive.add(x, f)

    directions = np.zeros((0, n))
    H = np.zeros((n, n))
    last_multipliers = None
    trace = []
    model = None

    for it in range(config.max_iters):
        if delta <= stop_radius:
            return NonsmoothResult(x=x, f=f, radius=delta, iterations=it, model=model, trace=trace)

        # Step 1: model construction
        g_new = _random_direction(rng, n)
        if directions.shape[0] >= config.max_directions:
            drop = 0 if last_multipliers is None else int(np.argmin(last_multipliers))
            directions = np.delete(directions, drop, axis=0)
        directions = np.vstack([directions, g_new])
        if config.probe:
            # one sample along the new direction calibrates its offset
            y = x + delta * g_new
            archive.add(y, oracle(y))
        X = archive.points
        near = np.linalg.norm(X - x, axis=1) <= config.zeta_bar * delta
        Ys, Fs = X[near], archive.values[near]
        H_fit = fit_hessian(x, f, delta, Ys, Fs, H)
        if H_fit is not None:
            H = H_fit
        bound = delta ** (-config.delta_exp)
        H = clip_eigenvalues(H, -config.curve_m * bound, config.curve_M * bound)

        try:
            offsets = compute_offsets(x, f, directions, Ys, Fs, config.delta_param)
            sol = solve_tr_qp(QpProblem(H, -offsets, directions, delta))
            g_agg = aggregate_subgradient(sol.multipliers, directions)

            # Step 3: criticality test
            if np.linalg.norm(g_agg) < config.eps_bar * np.sqrt(delta):
                directions = g_new[None, :]
                offsets = compute_offsets(x, f, directions, Ys, Fs, config.delta_param)
                sol = solve_tr_qp(QpProblem(H, -offsets, directions, delta))
                g_agg = aggregate_subgradient(sol.multipliers, directions)
        except QpFailure as exc:
            logger.debug("QP failure at radius %g: %s", delta, exc)
            trace.append((x.copy(), f, delta, -np.inf, directions.shape[0], np.nan))
            delta *= config.zeta1_bar
            continue
        last_multipliers = sol.multipliers
        model = BundleModel(x.copy(), f, directions.copy(), offsets, H.copy(), Ys, Fs)

        # Step 4: power-ratio test
        s = sol.s
        snorm = np.linalg.norm(s)
        if snorm <= 1e-15 * max(1.0, np.linalg.norm(x)):
            ratio = -np.inf
        else:
            x_trial = x + s
            f_trial = oracle(x_trial)
            archive.add(x_trial, f_trial)
            ratio = (f - f_trial) / (config.theta_bar * snorm ** (config.p_bar + 1))
        trace.append((x.copy(), f, delta, ratio, directions.shape[0], float(np.linalg.norm(g_agg))))

        # Step 5: acceptance and radius update
        if ratio >= config.eta1_bar:
            x, f = x_trial, f_trial
            delta = min(config.zeta2_bar * delta, config.delta_max)
        else:
            delta *= config.zeta1_bar

    raise BudgetError(f"no convergence after {config.max_iters} iterations", x_best=x, f_best=f, radius=delta)
