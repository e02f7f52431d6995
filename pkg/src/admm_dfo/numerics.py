"""
Dense linear-algebra kernels shared by the trust-region solvers and the
ADMM closed-form updates.

Everything here works on small dense arrays (a handful of variables, a few
dozen constraints), so the routines favour robustness over asymptotic speed.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sp_linalg
from scipy.optimize import brentq

__all__ = [
    "RankDeficientError",
    "QpFailure",
    "QpProblem",
    "QpSolution",
    "solve_least_squares",
    "solve_regularized_least_squares",
    "symmetric_eig_bounds",
    "clip_eigenvalues",
    "trust_region_step",
    "solve_tr_qp",
]


class RankDeficientError(np.linalg.LinAlgError):
    """Raised when a least-squares matrix is numerically rank deficient."""


class QpFailure(RuntimeError):
    """Raised when the trust-region QP iteration does not converge."""


def solve_least_squares(M, rhs, rcond=1e-12):
    """
    Solve ``min ||M w - rhs||`` by a QR factorization.

    Parameters
    ----------
    M : ndarray, shape (m, n)
        Tall matrix (``m >= n``) of full column rank.
    rhs : ndarray, shape (m,)
    rcond : float, optional
        Relative threshold on the diagonal of R below which the matrix is
        declared rank deficient.

    Returns
    -------
    w : ndarray, shape (n,)

    Raises
    ------
    RankDeficientError
        If ``M`` is wide or numerically rank deficient.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    rhs = np.asarray(rhs, dtype=float).ravel()
    m, n = M.shape
    if rhs.shape[0] != m:
        raise ValueError(f"rhs has length {rhs.shape[0]}, expected {m}")
    if m < n:
        raise RankDeficientError(f"underdetermined system ({m} rows < {n} columns)")
    if n == 0:
        return np.zeros(0)
    Q, R = np.linalg.qr(M, mode="reduced")
    diag = np.abs(np.diag(R))
    if diag.min() <= rcond * max(diag.max(), np.finfo(float).tiny):
        raise RankDeficientError("matrix is numerically rank deficient")
    return sp_linalg.solve_triangular(R, Q.T @ rhs)


def solve_regularized_least_squares(M, rhs):
    """
    Least squares with a ridge fallback for rank-deficient ``M``.

    The ridge factor is ``1e-10 * trace(M^T M) / n``.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    rhs = np.asarray(rhs, dtype=float).ravel()
    try:
        return solve_least_squares(M, rhs)
    except RankDeficientError:
        n = M.shape[1]
        MtM = M.T @ M
        ridge = 1e-10 * np.trace(MtM) / max(n, 1)
        if ridge <= 0.0:
            ridge = 1e-10
        return np.linalg.solve(MtM + ridge * np.eye(n), M.T @ rhs)


def symmetric_eig_bounds(H):
    """Return ``(lambda_min, lambda_max)`` of a symmetric matrix."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.size == 0:
        return 0.0, 0.0
    w = np.linalg.eigvalsh(0.5 * (H + H.T))
    return float(w[0]), float(w[-1])


def clip_eigenvalues(H, lower, upper):
    """Project the spectrum of symmetric ``H`` onto ``[lower, upper]``."""
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    if w[0] >= lower and w[-1] <= upper:
        return H
    w = np.clip(w, lower, upper)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def trust_region_step(g, H, radius):
    """
    Globally minimize ``g^T s + s^T H s / 2`` subject to ``||s|| <= radius``.

    Uses a full eigendecomposition, so it is meant for small ``n``.
    Handles indefinite ``H`` and the hard case.

    Returns
    -------
    s : ndarray
    sigma : float
        Multiplier of the ball constraint in ``(H + sigma I) s = -g``.
    """
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    if n == 0:
        return np.zeros(0), 0.0
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    gh = V.T @ g
    scale = max(1.0, np.abs(w).max())
    tiny = 1e-13 * scale

    if w[0] > tiny:
        s_hat = -gh / w
        if np.linalg.norm(s_hat) <= radius:
            return V @ s_hat, 0.0

    lo = max(0.0, -w[0])

    def norm_at(sigma):
        return np.linalg.norm(gh / (w + sigma))

    # hard case: g has (numerically) no component on the bottom eigenspace
    bottom = np.abs(w - w[0]) <= tiny
    gnorm = np.linalg.norm(gh)
    if np.linalg.norm(gh[bottom]) <= 1e-12 * max(gnorm, 1.0):
        rest = ~bottom
        s_hat = np.zeros(n)
        s_hat[rest] = -gh[rest] / (w[rest] + lo)
        nrm = np.linalg.norm(s_hat)
        if nrm <= radius:
            t = np.sqrt(max(radius**2 - nrm**2, 0.0))
            j = np.flatnonzero(bottom)[0]
            s_hat[j] += t
            return V @ s_hat, lo

    # secular equation 1/||s(sigma)|| = 1/radius, monotone in sigma
    hi = lo + gnorm / radius + scale
    while norm_at(hi) > radius:
        hi = 2.0 * hi + 1.0
    a = lo + max(tiny, 1e-300)
    if norm_at(a) <= radius:
        sigma = a
    else:
        sigma = _bisect_secular(lambda sg: 1.0 / norm_at(sg) - 1.0 / radius, a, hi)
    s_hat = -gh / (w + sigma)
    nrm = np.linalg.norm(s_hat)
    if nrm > radius:
        s_hat *= radius / nrm
    return V @ s_hat, sigma


def _bisect_secular(phi, a, b):
    # root of phi, increasing on [a, b]
    fa, fb = phi(a), phi(b)
    if fb <= 0:
        return b
    if fa >= 0:
        return a
    return brentq(phi, a, b, xtol=1e-300, rtol=8 * np.finfo(float).eps, maxiter=200)


@dataclass
class QpProblem:
    """
    Trust-region QP over a max of affine pieces::

        min_{s, alpha}  s^T H s / 2 + alpha
        s.t.            offsets[i] + directions[i] @ s <= alpha
                        ||s|| <= radius
    """

    H: np.ndarray
    offsets: np.ndarray
    directions: np.ndarray
    radius: float

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.offsets = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
        n = self.H.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("H must be square")
        if not np.allclose(self.H, self.H.T, atol=1e-12, rtol=0.0):
            raise ValueError("H must be symmetric")
        if self.directions.shape != (self.offsets.shape[0], n):
            raise ValueError("directions must have shape (len(offsets), n)")
        if self.offsets.shape[0] < 1:
            raise ValueError("at least one linear constraint is required")
        if not (np.all(np.isfinite(self.directions)) and np.all(np.isfinite(self.offsets))):
            raise ValueError("non-finite constraint data")
        if not self.radius > 0:
            raise ValueError("radius must be positive")


@dataclass
class QpSolution:
    s: np.ndarray
    alpha: float
    multipliers: np.ndarray
    tr_multiplier: float
    objective: float = field(init=False)
    H: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        quad = 0.0 if self.H is None else 0.5 * self.s @ self.H @ self.s
        self.objective = float(quad + self.alpha)

    def __iter__(self):
        # allows ``s, alpha, lam, nu = solve_tr_qp(qp)``
        return iter((self.s, self.alpha, self.multipliers, self.tr_multiplier))


def _simplex_qp(Q, c, lam0=None, max_iter=None):
    """
    Active-set solver for ``min lam^T Q lam / 2 - c^T lam`` over the simplex.

    ``Q`` is symmetric positive semidefinite, possibly singular.
    """
    p = c.shape[0]
    if max_iter is None:
        max_iter = 50 * p + 100
    if lam0 is None or lam0.shape[0] != p:
        j = int(np.argmin(0.5 * np.diag(Q) - c))
        lam = np.zeros(p)
        lam[j] = 1.0
    else:
        lam = np.clip(lam0, 0.0, None)
        tot = lam.sum()
        if tot <= 0:
            lam = np.zeros(p)
            lam[int(np.argmin(0.5 * np.diag(Q) - c))] = 1.0
        else:
            lam /= tot
    free = lam > 0
    scale = max(1.0, np.abs(Q).max(), np.abs(c).max())
    tol = 1e-13 * scale

    for _ in range(max_iter):
        grad = Q @ lam - c
        F = np.flatnonzero(free)
        k = F.shape[0]
        K = np.zeros((k + 1, k + 1))
        K[:k, :k] = Q[np.ix_(F, F)]
        K[:k, k] = 1.0
        K[k, :k] = 1.0
        rhs = np.concatenate([-grad[F], [0.0]])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=1e-13)
        resid = rhs - K @ sol
        if np.linalg.norm(resid) > 1e-10 * (1.0 + np.linalg.norm(rhs)):
            # zero-curvature descent direction inside the face: move to its boundary
            d = resid[:k]
            unbounded = True
        else:
            d = sol[:k]
            unbounded = False

        # multipliers live on the unit simplex, so an absolute threshold is scale-free
        # on an ill-conditioned face d can jitter at round-off level, so a flat
        # projected gradient also counts as stationary
        if not unbounded and (np.linalg.norm(d) <= 1e-10 or np.ptp(grad[F]) <= 1e-12 * scale):
            lam[F] += d
            nu = grad[F].mean()
            mu = grad - nu
            mu[F] = 0.0
            j = int(np.argmin(mu))
            if mu[j] >= -tol:
                return lam
            free[j] = True
            continue

        step = 1.0 if not unbounded else np.inf
        block = -1
        neg = np.flatnonzero(d < 0)
        for ii in neg:
            t = -lam[F[ii]] / d[ii]
            if t < step:
                step, block = t, F[ii]
        if not np.isfinite(step):
            raise QpFailure("unbounded direction in simplex QP")
        lam[F] += step * d
        if block >= 0:
            lam[block] = 0.0
            free[block] = False
        lam[lam < 0] = 0.0
        tot = lam.sum()
        if not tot > 0:
            raise QpFailure("multipliers collapsed in simplex QP")
        lam /= tot
    raise QpFailure("simplex QP active-set iteration limit reached")


def solve_tr_qp(qp, warm_multipliers=None):
    """
    Solve the trust-region QP of a max-linear model.

    The linear constraints are handled by an active-set method on the dual
    (a simplex-constrained QP in the multipliers); the ball is handled by a
    Lagrange shift ``H + 2 nu I`` found by a safeguarded root search on the
    step norm.

    Parameters
    ----------
    qp : QpProblem
    warm_multipliers : ndarray, optional
        Starting multipliers for the active-set iteration.

    Returns
    -------
    QpSolution
        Step ``s``, level ``alpha``, multipliers on the linear constraints
        (nonnegative, summing to one) and the multiplier ``nu`` of the
        constraint ``||s||^2 <= radius^2``.
    """
    H, c, G, radius = qp.H, qp.offsets, qp.directions, qp.radius
    w, V = np.linalg.eigh(H)
    GV = G @ V  # directions in the eigenbasis
    scale = max(1.0, np.abs(w).max())
    lam_state = {"lam": warm_multipliers}

    def solve_at(nu):
        d = w + 2.0 * nu
        # multiply the dual objective by min(d) > 0 so Q stays O(||g||^2)
        dmin = d.min()
        Q = (GV * (dmin / d)) @ GV.T
        Q = 0.5 * (Q + Q.T)
        lam = _simplex_qp(Q, dmin * c, lam_state["lam"])
        lam_state["lam"] = lam
        s = -V @ ((GV.T @ lam) / d)
        return s, lam

    tiny = 1e-12 * scale
    if w[0] > tiny:
        s, lam = solve_at(0.0)
        if np.linalg.norm(s) <= radius:
            return _finish(qp, s, lam, 0.0)

    nu_lo = max(0.0, -0.5 * w[0]) + 1e-8 * scale
    s_lo, lam_lo = solve_at(nu_lo)
    if np.linalg.norm(s_lo) <= radius:
        if w[0] < -tiny:
            return _hard_case(qp, s_lo, V[:, 0], lam_lo, nu_lo)
        return _finish(qp, s_lo, lam_lo, nu_lo)

    gmax = np.linalg.norm(G, axis=1).max()
    nu_hi = nu_lo + 0.5 * (gmax / radius + scale)
    s_hi, lam_hi = solve_at(nu_hi)
    it = 0
    while np.linalg.norm(s_hi) > radius:
        nu_lo, s_lo = nu_hi, s_hi
        nu_hi = 2.0 * nu_hi
        s_hi, lam_hi = solve_at(nu_hi)
        it += 1
        if it > 200:
            raise QpFailure("could not bracket the ball multiplier")

    # 1/||s(nu)|| is close to linear in nu, so regula falsi on it (Illinois
    # variant) converges fast; bisection steps guard against a stuck side
    def phi(s):
        nrm = np.linalg.norm(s)
        return np.inf if nrm == 0.0 else 1.0 / nrm - 1.0 / radius

    f_lo, f_hi = phi(s_lo), phi(s_hi)
    side = 0
    for _ in range(200):
        width = nu_hi - nu_lo
        if width <= 1e-14 * nu_hi:
            break
        if np.isfinite(f_hi) and f_hi > f_lo:
            mid = nu_hi - f_hi * width / (f_hi - f_lo)
        else:
            mid = 0.5 * (nu_lo + nu_hi)
        if not nu_lo + 0.01 * width <= mid <= nu_hi - 0.01 * width:
            mid = 0.5 * (nu_lo + nu_hi)
        s_mid, lam_mid = solve_at(mid)
        f_mid = phi(s_mid)
        if f_mid < 0.0:
            nu_lo, f_lo = mid, f_mid
            if side == -1:
                f_hi *= 0.5
            side = -1
        else:
            nu_hi, s_hi, lam_hi, f_hi = mid, s_mid, lam_mid, f_mid
            if np.linalg.norm(s_mid) >= radius * (1.0 - 1e-12):
                break
            if side == 1:
                f_lo *= 0.5
            side = 1
    return _finish(qp, s_hi, lam_hi, nu_hi)


def _hard_case(qp, s0, u, lam, nu):
    """
    Indefinite ``H`` whose shifted minimiser lies inside the ball.  Padding
    along the bottom eigenvector reaches the boundary and keeps stationarity;
    it is a KKT point as long as the pieces carrying multipliers stay tied at
    the maximum.  Otherwise both paddings are polished locally and the
    multipliers are recovered at the result.
    """
    from scipy.optimize import minimize

    H, c, G, radius = qp.H, qp.offsets, qp.directions, qp.radius
    n = s0.shape[0]
    b = s0 @ u
    root = np.sqrt(b * b + max(radius**2 - s0 @ s0, 0.0))
    support = lam > 1e-12
    best = None
    for t in (-b + root, -b - root):
        s = s0 + t * u
        vals = c + G @ s
        top = vals.max()
        if np.all(top - vals[support] <= 1e-10 * max(1.0, abs(top))):
            sol = _finish(qp, s, lam, nu)
            if best is None or sol.objective < best.objective:
                best = sol
    if best is not None:
        return best
    cons = [
        {"type": "ineq", "fun": lambda z: radius**2 - z[:n] @ z[:n], "jac": lambda z: np.append(-2.0 * z[:n], 0.0)},
        {"type": "ineq", "fun": lambda z: z[n] - c - G @ z[:n], "jac": lambda z: np.hstack([-G, np.ones((len(c), 1))])},
    ]
    # polish from the better of the two paddings
    starts = [s0 + t * u for t in (-b + root, -b - root)]
    s = min(starts, key=lambda v: 0.5 * v @ H @ v + (c + G @ v).max())
    res = minimize(
        lambda z: 0.5 * z[:n] @ H @ z[:n] + z[n],
        np.append(s, (c + G @ s).max()),
        jac=lambda z: np.append(H @ z[:n], 1.0),
        constraints=cons,
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": 500},
    )
    s = res.x[:n]
    nrm = np.linalg.norm(s)
    if nrm > radius:
        s *= radius / nrm
    return _recover_multipliers(qp, s)


def _recover_multipliers(qp, s):
    # nonnegative fit of H s + G_A^T lam + 2 nu s = 0 with sum(lam) = 1 on the active pieces
    from scipy.optimize import nnls

    vals = qp.offsets + qp.directions @ s
    alpha = vals.max()
    active = np.flatnonzero(vals >= alpha - 1e-9 * max(1.0, abs(alpha)))
    on_ball = np.linalg.norm(s) >= qp.radius * (1.0 - 1e-9)
    cols = [qp.directions[active].T] + ([2.0 * s[:, None]] if on_ball else [])
    M = np.hstack(cols)
    weight = 1e3 * max(1.0, np.abs(M).max())
    row = np.zeros(M.shape[1])
    row[: len(active)] = weight
    sol, _ = nnls(np.vstack([M, row]), np.append(-qp.H @ s, weight))
    lam = np.zeros(len(qp.offsets))
    lam[active] = sol[: len(active)]
    lam /= lam.sum() if lam.sum() > 0 else 1.0
    nu = sol[len(active)] if on_ball else 0.0
    return _finish(qp, s, lam, nu)


def _finish(qp, s, lam, nu):
    vals = qp.offsets + qp.directions @ s
    alpha = float(vals.max())
    return QpSolution(s=s, alpha=alpha, multipliers=lam, tr_multiplier=float(nu), H=qp.H)
