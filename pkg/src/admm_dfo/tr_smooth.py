"""
Model-based trust-region DFO for smooth black-box functions.

Quadratic models are fitted to stored evaluations.  Geometry is controlled
by threshold pivoting on the monomial basis over the trust region scaled to
the unit ball: the ``n + 1`` linear pivots certify that a model is fully
linear, and remaining points (up to ``(n + 1)(n + 2) / 2``) only add
curvature information.  With fewer than a full quadratic set, the
minimum-Frobenius-norm interpolant is used.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import clip_eigenvalues, trust_region_step

__all__ = [
    "SmoothTrConfig",
    "SurrogateModel",
    "SampleArchive",
    "GeometryError",
    "BudgetError",
    "SmoothResult",
    "build_fully_linear",
    "build_model",
    "criticality_step",
    "compute_step",
    "solve_smooth",
    "poisedness_constant",
]

logger = logging.getLogger(__name__)

# pivot thresholds on the scaled region ||y|| <= region_factor
_LINEAR_PIVOT = 0.1
_QUADRATIC_PIVOT = 1e-2
_MIN_RADIUS = 1e-14


class GeometryError(RuntimeError):
    """Raised when poised sample points cannot be placed (radius underflow)."""


class BudgetError(RuntimeError):
    """Raised when a solver runs out of iterations; carries the best point."""

    def __init__(self, message, x_best=None, f_best=None, radius=None):
        super().__init__(message)
        self.x_best = x_best
        self.f_best = f_best
        self.radius = radius


@dataclass
class SmoothTrConfig:
    eta0: float = 0.0
    eta1: float = 0.1
    eps_c: float = 1e-2
    kappa_fcd: float = 0.5
    alpha: float = 0.5
    zeta: float = 0.5
    gamma_inc: float = 2.0
    mu: float = 1.0
    tau: float = 0.5
    delta_max: float = 10.0
    kappa_bhm: float = 1e4
    max_iters: int = 5000
    region_factor: float = 2.0
    check_fcd: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eta0 <= self.eta1 < 1.0:
            raise ValueError("need 0 <= eta0 <= eta1 < 1")
        if self.eps_c <= 0:
            raise ValueError("eps_c must be positive")
        if not 0.0 < self.kappa_fcd <= 1.0:
            raise ValueError("kappa_fcd must lie in (0, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 < self.zeta < 1.0:
            raise ValueError("zeta must lie in (0, 1)")
        if not self.gamma_inc > 1.0:
            raise ValueError("gamma_inc must exceed 1")
        if not self.mu > self.tau > 0.0:
            raise ValueError("need mu > tau > 0")
        if self.delta_max <= 0 or self.kappa_bhm <= 0:
            raise ValueError("delta_max and kappa_bhm must be positive")
        if self.region_factor < 1.0:
            raise ValueError("region_factor must be at least 1")


class SampleArchive:
    """Growable store of evaluated points and their values."""

    def __init__(self, n, points=None, values=None):
        self.n = n
        self._X = np.empty((16, n))
        self._F = np.empty(16)
        self.size = 0
        if points is not None:
            for x, f in zip(np.atleast_2d(points), np.atleast_1d(values)):
                self.add(x, f)

    def add(self, x, f):
        if self.size == self._F.shape[0]:
            self._X = np.vstack([self._X, np.empty_like(self._X)])
            self._F = np.concatenate([self._F, np.empty_like(self._F)])
        self._X[self.size] = x
        self._F[self.size] = f
        self.size += 1
        return self.size - 1

    @property
    def points(self):
        return self._X[: self.size]

    @property
    def values(self):
        return self._F[: self.size]

    def lookup(self, x):
        """Return the stored value at exactly ``x`` or ``None``."""
        if self.size == 0:
            return None
        hit = np.flatnonzero(np.all(self.points == x, axis=1))
        return float(self.values[hit[-1]]) if hit.size else None


def _n_quadratic(n):
    return (n + 1) * (n + 2) // 2


def _basis(Y):
    """Monomial basis ``[1, y, y_i^2 / 2, y_i y_j (i < j)]`` evaluated row-wise."""
    p, n = Y.shape
    iu = np.triu_indices(n, 1)
    cols = [np.ones((p, 1)), Y, 0.5 * Y**2, (Y[:, iu[0]] * Y[:, iu[1]])]
    return np.hstack(cols)


def _unpack_quadratic(coef, n):
    """Split basis coefficients into (c, g, H)."""
    c = coef[0]
    g = coef[1:n + 1]
    H = np.diag(coef[n + 1:2 * n + 1]).astype(float)
    iu = np.triu_indices(n, 1)
    H[iu] = coef[2 * n + 1:]
    H[(iu[1], iu[0])] = coef[2 * n + 1:]
    return c, g, H


def _poly_as_quadratic(coef, n):
    c, g, H = _unpack_quadratic(coef, n)
    return c, g, H


def _maximize_abs_on_ball(coef, n):
    """Point of the unit ball maximizing ``|u(y)|`` for a quadratic ``u``."""
    c, g, H = _poly_as_quadratic(coef, n)
    best_y, best_v = None, -1.0
    for sign in (1.0, -1.0):
        # minimize sign * u  <=>  maximize -sign * u
        y, _ = trust_region_step(sign * g, sign * H, 1.0)
        v = abs(c + g @ y + 0.5 * y @ H @ y)
        if v > best_v:
            best_y, best_v = y, v
    if np.linalg.norm(best_y) < 0.5:
        # degenerate quadratic pieces: fall back to the largest gradient direction
        d = g if np.linalg.norm(g) > 0 else np.eye(n)[0]
        best_y = d / np.linalg.norm(d)
    return best_y


def _pivot(Phi, q_target, n_linear, thresholds):
    """
    Threshold pivoting on candidate rows of ``Phi`` (row 0 is the center).

    Returns selected row indices, the pivot polynomial coefficient matrix and
    the number of pivots filled.
    """
    p, q = Phi.shape
    U = np.eye(q)
    avail = np.ones(p, dtype=bool)
    selected = [0]
    avail[0] = False
    U[0] /= Phi[0] @ U[0]
    U[1:] -= np.outer(Phi[0] @ U[1:].T, U[0])
    filled = 1
    for i in range(1, q_target):
        if not avail.any():
            break
        vals = Phi @ U[i]
        vals[~avail] = 0.0
        j = int(np.argmax(np.abs(vals)))
        thr = thresholds[0] if i < n_linear else thresholds[1]
        if abs(vals[j]) < thr:
            break
        selected.append(j)
        avail[j] = False
        U[i] /= vals[j]
        if i + 1 < q:
            U[i + 1:] -= np.outer(Phi[j] @ U[i + 1:].T, U[i])
        filled += 1
    return selected, U, filled


@dataclass
class SurrogateModel:
    """
    Quadratic model ``m(x) = f_center + g (x - c) + (x - c) H (x - c) / 2``.

    ``fully_linear`` is true when the ``n + 1`` linear pivots were met by
    points within ``region_factor * radius`` of the center.
    """

    center: np.ndarray
    f_center: float
    g: np.ndarray
    H: np.ndarray
    radius: float
    fully_linear: bool
    sample_points: np.ndarray = field(repr=False, default=None)
    sample_values: np.ndarray = field(repr=False, default=None)

    def value(self, x):
        s = np.asarray(x, dtype=float) - self.center
        return self.f_center + self.g @ s + 0.5 * s @ self.H @ s

    def step_value(self, s):
        return self.f_center + self.g @ s + 0.5 * s @ self.H @ s

    def interpolation_residuals(self):
        if self.sample_points is None:
            return np.zeros(0)
        return np.array([self.value(x) - f for x, f in zip(self.sample_points, self.sample_values)])


def _fit(center, f_center, radius, Xsel, Fsel, kappa_bhm, H_prior=None):
    """
    Fit a quadratic to the selected points (row 0 is the center).

    Underdetermined fits choose the Hessian closest to ``H_prior`` in the
    Frobenius norm (zero when no prior is given).
    """
    n = center.shape[0]
    q = _n_quadratic(n)
    Y = (Xsel - center) / radius
    Phi = _basis(Y)
    rhs = Fsel - f_center
    p = Y.shape[0]
    Hs_prior = None
    if H_prior is not None and p < q:
        Hs_prior = H_prior * radius**2
        rhs = rhs - 0.5 * np.einsum("ij,jk,ik->i", Y, Hs_prior, Y)
    if p >= q:
        coef = np.linalg.lstsq(Phi, rhs, rcond=None)[0]
    else:
        # minimum Frobenius norm: min ||quad coeffs|| s.t. interpolation
        ML = Phi[:, : n + 1]
        MQ = Phi[:, n + 1:]
        K = np.zeros((p + n + 1, p + n + 1))
        K[:p, :p] = MQ @ MQ.T
        K[:p, p:] = ML
        K[p:, :p] = ML.T
        sol = np.linalg.lstsq(K, np.concatenate([rhs, np.zeros(n + 1)]), rcond=None)[0]
        coef = np.concatenate([sol[p:], MQ.T @ sol[:p]])
    _, g_s, H_s = _unpack_quadratic(coef, n)
    if Hs_prior is not None:
        H_s = H_s + Hs_prior
    g = g_s / radius
    H = H_s / radius**2
    H = clip_eigenvalues(H, -kappa_bhm, kappa_bhm)
    return g, H


def build_model(center, f_center, radius, archive, config, oracle=None, n_points="linear", H_prior=None):
    """
    Build a model around ``center`` from archived points, optionally adding
    evaluations to meet the geometry requirements.

    Parameters
    ----------
    center : ndarray
    f_center : float
    radius : float
    archive : SampleArchive
        Must contain ``center``.  New evaluations are appended.
    config : SmoothTrConfig
    oracle : callable, optional
        When given, missing pivots are filled with new evaluations.
    n_points : {"linear", "quadratic"}
        Which pivots may be filled with new evaluations.
    H_prior : ndarray, optional
        Hessian of a previous model; underdetermined fits change it as
        little as possible.

    Returns
    -------
    SurrogateModel
    """
    n = center.shape[0]
    q = _n_quadratic(n)
    region = config.region_factor * radius
    if radius < _MIN_RADIUS * max(1.0, np.linalg.norm(center)):
        raise GeometryError(f"trust-region radius {radius:g} underflowed")

    X = archive.points
    d = np.linalg.norm(X - center, axis=1)
    near = np.flatnonzero((d <= region) & (d > 0))
    cand_X = np.vstack([center[None, :], X[near]])
    cand_F = np.concatenate([[f_center], archive.values[near]])
    # nearest points first so ties favour local information
    order = np.argsort(np.linalg.norm(cand_X[1:] - center, axis=1)) + 1
    cand_X = np.vstack([cand_X[:1], cand_X[order]])
    cand_F = np.concatenate([cand_F[:1], cand_F[order]])

    fill_to = q if n_points == "quadratic" else n + 1
    thresholds = (_LINEAR_PIVOT, _QUADRATIC_PIVOT)
    for _ in range(q + 1):
        Y = (cand_X - center) / radius
        Phi = _basis(Y)
        selected, U, filled = _pivot(Phi, q, n + 1, thresholds)
        if filled >= fill_to or oracle is None:
            break
        # the first unfilled pivot drives the next evaluation
        y_new = _maximize_abs_on_ball(U[filled], n)
        x_new = center + radius * y_new
        f_new = oracle(x_new)
        archive.add(x_new, f_new)
        cand_X = np.vstack([cand_X, x_new[None, :]])
        cand_F = np.concatenate([cand_F, [f_new]])

    fully_linear = filled >= n + 1
    sel = np.array(selected)
    g, H = _fit(center, f_center, radius, cand_X[sel], cand_F[sel], config.kappa_bhm, H_prior)
    return SurrogateModel(
        center=center.copy(),
        f_center=float(f_center),
        g=g,
        H=H,
        radius=float(radius),
        fully_linear=bool(fully_linear),
        sample_points=cand_X[sel],
        sample_values=cand_F[sel],
    )


def build_fully_linear(oracle, center, radius, history=None, config=None, n_points="linear"):
    """
    Build a model that is fully linear on ``B(center, radius)``.

    Parameters
    ----------
    oracle : callable
    center : array_like
    radius : float
    history : SampleArchive or tuple of (points, values), optional
        Previously evaluated points of the same function.
    config : SmoothTrConfig, optional
    n_points : {"linear", "quadratic"}
        ``"quadratic"`` evaluates a full quadratic interpolation set.
    """
    if config is None:
        config = SmoothTrConfig()
    center = np.asarray(center, dtype=float)
    archive = _as_archive(history, center.shape[0])
    f_center = archive.lookup(center)
    if f_center is None:
        f_center = oracle(center)
        archive.add(center, f_center)
    return build_model(center, f_center, radius, archive, config, oracle=oracle, n_points=n_points)


def _as_archive(history, n):
    if history is None:
        return SampleArchive(n)
    if isinstance(history, SampleArchive):
        return history
    points, values = history
    return SampleArchive(n, points, values)


def poisedness_constant(points, center, radius):
    """
    Lambda-poisedness constant of a sample set on ``B(center, radius)``.

    The largest absolute value over the ball of the Lagrange polynomials of
    the set (linear or minimum-norm quadratic basis).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    p, n = points.shape
    Y = (points - center) / radius
    if p == n + 1:
        Phi = np.hstack([np.ones((p, 1)), Y])
        coefs = np.linalg.inv(Phi)  # column j: Lagrange polynomial j
        worst = 0.0
        for j in range(p):
            c, g = coefs[0, j], coefs[1:, j]
            worst = max(worst, abs(c) + np.linalg.norm(g))
        return worst
    Phi = _basis(Y)
    coefs = np.linalg.pinv(Phi)
    worst = 0.0
    for j in range(p):
        coef = np.zeros(_n_quadratic(n))
        coef[: coefs.shape[0]] = coefs[:, j]
        y = _maximize_abs_on_ball(coef, n)
        c, g, H = _unpack_quadratic(coef, n)
        worst = max(worst, abs(c + g @ y + 0.5 * y @ H @ y), abs(c))
    return worst


def compute_step(model, radius, config=None):
    """
    Minimizer of the model on the ball of radius ``radius``.

    The trust-region subproblem is solved exactly; the Cauchy point is kept
    if it happens to be better (only possible through round-off).
    """
    g, H = model.g, model.H
    gn = np.linalg.norm(g)
    n = g.shape[0]
    if gn == 0.0 and np.linalg.eigvalsh(H)[0] >= 0.0:
        return np.zeros(n)
    s, _ = trust_region_step(g, H, radius)
    if gn > 0.0:
        curv = g @ H @ g
        t = radius / gn if curv <= 0 else min(gn**2 / curv, radius / gn)
        s_c = -t * g
        if model.step_value(s) > model.step_value(s_c):
            s = s_c
    nrm = np.linalg.norm(s)
    if nrm > radius:
        s *= radius / nrm
    if config is not None and config.check_fcd:
        hn = np.linalg.norm(H, 2)
        bound = gn if hn == 0 else min(gn, gn / hn)
        need = 0.5 * config.kappa_fcd * gn * min(bound, radius)
        assert model.f_center - model.step_value(s) >= need * (1 - 1e-12), "Cauchy decrease violated"
    return s


def criticality_step(model, radius_icb, config, oracle, archive, stop_radius=0.0):
    """
    Criticality check of the smooth trust-region method.

    Returns the model and radius to use for the step.  When the incumbent
    gradient is small, the model is rebuilt on shrinking balls until the
    radius is at most ``mu`` times the model gradient norm; the result is
    clamped to ``[tau ||g||, radius_icb]``.
    """
    gnorm = np.linalg.norm(model.g)
    if gnorm > config.eps_c:
        return model, radius_icb
    certified = model.fully_linear and model.radius <= radius_icb * (1 + 1e-12)
    if certified and radius_icb <= config.mu * gnorm:
        return model, radius_icb
    u = 0
    while True:
        u += 1
        delta_t = config.alpha ** (u - 1) * radius_icb
        m_t = build_model(model.center, model.f_center, delta_t, archive, config, oracle=oracle, H_prior=model.H)
        g_t = np.linalg.norm(m_t.g)
        if delta_t <= config.mu * g_t or delta_t <= stop_radius:
            break
    radius = min(max(delta_t, config.tau * g_t), radius_icb)
    return m_t, radius


@dataclass
class SmoothResult:
    x: np.ndarray
    f: float
    radius: float
    iterations: int
    model: SurrogateModel = field(repr=False, default=None)
    trace: list = field(repr=False, default_factory=list)


def solve_smooth(oracle, x0, delta0, stop_radius, config=None, history=None, f0=None):
    """
    Minimize a smooth black box until the trust-region radius is at most
    ``stop_radius``.

    Parameters
    ----------
    oracle : callable
    x0 : array_like
    delta0 : float
        Initial radius in ``(0, delta_max]``.
    stop_radius : float
    config : SmoothTrConfig, optional
    history : SampleArchive or tuple, optional
        Known evaluations of ``oracle``, reused for model building.
    f0 : float, optional
        Known value at ``x0``.

    Returns
    -------
    SmoothResult
        ``trace`` holds one ``(x, f, radius, ratio)`` tuple per iteration.

    Raises
    ------
    BudgetError
        After ``config.max_iters`` iterations.
    """
    if config is None:
        config = SmoothTrConfig()
    if stop_radius <= 0:
        raise ValueError("stop_radius must be positive")
    x = np.array(x0, dtype=float)
    n = x.shape[0]
    delta = min(float(delta0), config.delta_max)
    if delta <= 0:
        raise ValueError("delta0 must be positive")
    archive = _as_archive(history, n)
    f = archive.lookup(x) if f0 is None else float(f0)
    if f is None:
        f = oracle(x)
        archive.add(x, f)
    elif archive.lookup(x) is None:
        archive.add(x, f)

    trace = []
    model = build_model(x, f, delta, archive, config)
    if model.sample_points.shape[0] < n + 1:
        model = build_model(x, f, delta, archive, config, oracle=oracle)

    for it in range(config.max_iters):
        # Step 1: criticality
        model, delta = criticality_step(model, delta, config, oracle, archive, stop_radius)
        if delta <= stop_radius:
            return SmoothResult(x=x, f=f, radius=delta, iterations=it, model=model, trace=trace)
        if not model.fully_linear and model.sample_points.shape[0] < n + 1:
            model = build_model(x, f, delta, archive, config, oracle=oracle, H_prior=model.H)

        # Step 2: step computation
        s = compute_step(model, delta, config)
        pred = model.f_center - model.step_value(s)
        snorm = np.linalg.norm(s)

        # Step 3: acceptance
        if pred <= 0 or snorm == 0.0:
            ratio = -np.inf
        else:
            x_trial = x + s
            f_trial = oracle(x_trial)
            archive.add(x_trial, f_trial)
            ratio = (f - f_trial) / pred
        accepted = ratio >= config.eta1 or (ratio >= config.eta0 and model.fully_linear)
        was_fl = model.fully_linear
        trace.append((x.copy(), f, delta, ratio))

        # Step 5: radius update
        if ratio >= config.eta1:
            new_delta = max(min(config.gamma_inc * delta, config.delta_max), delta) if snorm >= 0.5 * delta else delta
        elif was_fl:
            new_delta = config.zeta * delta
        else:
            new_delta = delta
        if accepted:
            x, f = x_trial, f_trial

        # Step 4: model improvement on failure, fresh incumbent otherwise
        oracle_arg = oracle if ratio < config.eta1 and not was_fl else None
        model = build_model(x, f, new_delta, archive, config, oracle=oracle_arg, H_prior=model.H)
        delta = new_delta

    raise BudgetError(f"no convergence after {config.max_iters} iterations", x_best=x, f_best=f, radius=delta)
