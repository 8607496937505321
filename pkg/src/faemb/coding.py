"""Coordinate coding of local descriptors against a learned anchor set.

Two coders are provided for the same family of objectives.  For one
descriptor ``x`` and anchors ``C = [v_1 .. v_n]`` with coefficients summing
to one:

* ``ffaemb_gamma`` minimizes the ridge-style per-sample objective
  ``0.5*||x - C g||^2 + 0.5*mu*||g||^2 * sum_j a_j`` in closed form, where
  ``a_j = ||x - v_j||_1^3``.
* ``faemb_gamma`` minimizes ``0.5*||x - C g||^2 + 0.5*mu*sum_j |g_j| a_j``
  by an equality-constrained Newton iteration on the sign-linearized
  objective (``sign(0) = 0``), followed by an exact active-set refinement
  over sign orthants.  The distance-weighted absolute values act like a
  weighted lasso, so minimizers may pin coefficients exactly to zero; the
  refinement handles those kinks that the plain damped iteration cannot.

``train_coding`` alternates per-sample coefficient solves with a damped
Newton update of the anchors (``update_anchors``), keeping the batch
objective non-increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .core import l1_dist_cubed, l1_dist_cubed_batch

__all__ = [
    "VARIANTS",
    "STATIONARITY_TOL",
    "CodingModel",
    "SolverParams",
    "NewtonSolution",
    "BatchNewtonSolution",
    "TrainResult",
    "SingularSystemError",
    "kmeans_init",
    "ffaemb_gamma",
    "ffaemb_gamma_batch",
    "faemb_gamma",
    "faemb_gamma_batch",
    "gamma_gradient",
    "objective",
    "per_sample_objective",
    "anchor_gradient",
    "update_anchors",
    "train_coding",
]

Variant = Literal["faemb", "ffaemb"]
VARIANTS: tuple[str, ...] = ("faemb", "ffaemb")

# Contract-level convergence threshold for the Newton coder: the solution is
# reported as converged when the KKT residual is at or below this value.
STATIONARITY_TOL = 1e-5

_STALL_WINDOW = 20  # damped iterations without objective progress before refining


class SingularSystemError(ValueError):
    """Raised when a coding system is singular; typically mu == 0 with
    rank-deficient anchors.  Setting mu > 0 regularizes the system."""


@dataclass(frozen=True)
class CodingModel:
    """Learned anchors plus the coding objective they were trained for.

    ``anchors`` has shape ``(d, n)`` with anchors as columns.
    """

    anchors: np.ndarray = field(repr=False)
    mu: float
    variant: str

    def __post_init__(self) -> None:
        arr = np.asarray(self.anchors, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"anchors must be a (d, n) matrix, got shape {arr.shape}")
        d, n = arr.shape
        if n < 1:
            raise ValueError(f"need at least 1 anchor, got {n}")
        if d < 1:
            raise ValueError("anchor dimension must be >= 1")
        if not np.isfinite(arr).all():
            raise ValueError("anchors contain non-finite values")
        if not (np.isfinite(self.mu) and self.mu >= 0.0):
            raise ValueError(f"mu must be finite and >= 0, got {self.mu}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for j in range(n - 1):
            dup = np.abs(arr[:, j + 1 :] - arr[:, j : j + 1]).max(axis=0) <= 1e-12
            if dup.any():
                k = j + 1 + int(np.flatnonzero(dup)[0])
                raise ValueError(f"anchors {j} and {k} coincide (within 1e-12)")
        object.__setattr__(self, "anchors", arr)
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def dim(self) -> int:
        return self.anchors.shape[0]

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[1]


@dataclass(frozen=True)
class SolverParams:
    """Knobs for coefficient solves and the alternating trainer."""

    max_outer_iters: int = 20
    outer_tol: float = 1e-6
    newton_tol: float = 1e-6
    newton_step: float = 0.1
    newton_max_iters: int = 500

    def __post_init__(self) -> None:
        if self.max_outer_iters < 0:
            raise ValueError("max_outer_iters must be >= 0")
        if self.outer_tol <= 0 or self.newton_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not (0.0 < self.newton_step <= 1.0):
            raise ValueError(f"newton_step must lie in (0, 1], got {self.newton_step}")
        if self.newton_max_iters < 1:
            raise ValueError("newton_max_iters must be >= 1")


@dataclass(frozen=True)
class NewtonSolution:
    """Result of one ``faemb_gamma`` solve.

    ``iterations`` counts damped Newton iterations; ``refine_steps`` counts
    orthant solves in the active-set refinement.  ``decrement_iteration`` is
    the first iteration whose Newton decrement satisfied
    ``delta^2 / 2 <= newton_tol`` (None if never reached).
    ``stationarity`` is ``max_j |grad_j + w|`` with the sign-linearized
    gradient (``sign(0) = 0``); at a solution with exact zeros this may stay
    at the size of the corresponding penalty weight even though the point is
    optimal, which is what ``kkt_residual`` measures (it accounts for the
    subdifferential at zero).
    """

    gamma: np.ndarray
    iterations: int
    refine_steps: int
    decrement_iteration: int | None
    stationarity: float
    kkt_residual: float
    converged: bool


@dataclass(frozen=True)
class BatchNewtonSolution:
    """Vectorized counterpart of :class:`NewtonSolution`; arrays over samples.

    ``decrement_iterations`` uses -1 where the criterion was never met.
    """

    gamma: np.ndarray
    iterations: np.ndarray
    decrement_iterations: np.ndarray
    stationarity: np.ndarray
    kkt_residual: np.ndarray
    converged: np.ndarray


@dataclass(frozen=True)
class TrainResult:
    model: CodingModel
    gamma: np.ndarray
    trace: np.ndarray


# ---------------------------------------------------------------------------
# anchor initialization


def kmeans_init(X: np.ndarray, n: int, seed: int = 0, max_iters: int = 100) -> np.ndarray:
    """Deterministic k-means anchors for ``X`` of shape ``(d, m)``.

    Greedy distance-weighted seeding followed by Lloyd iterations.  A cluster
    that empties is re-seeded to the point currently farthest from its
    assigned centroid.  Returns anchors of shape ``(d, n)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be (d, m), got shape {X.shape}")
    d, m = X.shape
    if n < 1:
        raise ValueError("need n >= 1 clusters")
    if m < n:
        raise ValueError(f"need at least n={n} samples, got m={m}")
    pts = np.ascontiguousarray(X.T)
    rng = np.random.default_rng(seed)

    centers = np.empty((n, d))
    centers[0] = pts[rng.integers(m)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for k in range(1, n):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            idx = int(rng.integers(m))
        centers[k] = pts[idx]
        d2 = np.minimum(d2, ((pts - centers[k]) ** 2).sum(axis=1))

    sq = (pts * pts).sum(axis=1)
    assign = np.full(m, -1)
    for _ in range(max_iters):
        dist2 = sq[:, None] - 2.0 * (pts @ centers.T) + (centers * centers).sum(axis=1)
        new_assign = dist2.argmin(axis=1)
        here = dist2[np.arange(m), new_assign]
        for j in range(n):
            if not (new_assign == j).any():
                far = int(here.argmax())
                centers[j] = pts[far]
                new_assign[far] = j
                here[far] = 0.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(n):
            members = assign == j
            centers[j] = pts[members].mean(axis=0)
    return centers.T.copy()


# ---------------------------------------------------------------------------
# shared pieces


def _penalty_weights(X: np.ndarray, model: CodingModel) -> np.ndarray:
    """Per-sample kink weights ``0.5 * mu * a_j`` as an (n, m) matrix."""
    return 0.5 * model.mu * l1_dist_cubed_batch(X, model.anchors)


def _bordered_inverse(H: np.ndarray) -> np.ndarray:
    """Inverse of ``[[H, 1], [1^T, 0]]``; raises SingularSystemError."""
    n = H.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = H
    M[n, :n] = 1.0
    M[:n, n] = 1.0
    try:
        return np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "the constrained coding system is singular; use regularization mu > 0 "
            "or full-rank anchors"
        ) from exc


def gamma_gradient(x: np.ndarray, gamma: np.ndarray, model: CodingModel) -> np.ndarray:
    """Analytic gradient of the per-sample coding objective at ``gamma``.

    Uses the ``sign(0) = 0`` convention for the faemb variant, where the
    objective is non-differentiable at zero coefficients.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    C = model.anchors
    a = l1_dist_cubed(x, C)
    smooth = C.T @ (C @ gamma - x)
    if model.variant == "faemb":
        return smooth + 0.5 * model.mu * np.sign(gamma) * a
    return smooth + model.mu * a.sum() * gamma


# ---------------------------------------------------------------------------
# closed-form coder


def ffaemb_gamma(x: np.ndarray, model: CodingModel) -> np.ndarray:
    """Closed-form sum-to-one coefficients for the ridge-style objective."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.dim:
        raise ValueError(f"x must have shape ({model.dim},), got {x.shape}")
    C = model.anchors
    n = model.n_anchors
    a_total = l1_dist_cubed(x, C).sum()
    G = C.T @ C + (model.mu * a_total) * np.eye(n)
    rhs = np.empty((n, 2))
    rhs[:, 0] = C.T @ x
    rhs[:, 1] = 1.0
    try:
        sol = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "coding system is singular (rank-deficient anchors with mu == 0); "
            "set mu > 0 to regularize"
        ) from exc
    y1, y2 = sol[:, 0], sol[:, 1]
    lam = (y1.sum() - 1.0) / y2.sum()
    gamma = y1 - lam * y2
    if not np.isfinite(gamma).all():
        raise SingularSystemError(
            "coding solve produced non-finite coefficients; set mu > 0 to regularize"
        )
    return gamma


def ffaemb_gamma_batch(
    X: np.ndarray, model: CodingModel, chunk: int = 8192
) -> np.ndarray:
    """Vectorized :func:`ffaemb_gamma` over column-stacked descriptors.

    ``X`` has shape ``(d, m)``; returns coefficients ``(n, m)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != model.dim:
        raise ValueError(f"X must be ({model.dim}, m), got shape {X.shape}")
    C = model.anchors
    n = model.n_anchors
    m = X.shape[1]
    H = C.T @ C
    CtX = C.T @ X
    out = np.empty((n, m))
    eye = np.eye(n)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        a_tot = l1_dist_cubed_batch(X[:, lo:hi], C).sum(axis=0)
        G = H[None, :, :] + (model.mu * a_tot)[:, None, None] * eye[None]
        rhs = np.empty((hi - lo, n, 2))
        rhs[:, :, 0] = CtX[:, lo:hi].T
        rhs[:, :, 1] = 1.0
        try:
            sol = np.linalg.solve(G, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(
                "coding system is singular (rank-deficient anchors with mu == 0); "
                "set mu > 0 to regularize"
            ) from exc
        y1 = sol[:, :, 0]
        y2 = sol[:, :, 1]
        lam = (y1.sum(axis=1) - 1.0) / y2.sum(axis=1)
        out[:, lo:hi] = (y1 - lam[:, None] * y2).T
    if not np.isfinite(out).all():
        raise SingularSystemError(
            "coding solve produced non-finite coefficients; set mu > 0 to regularize"
        )
    return out


# ---------------------------------------------------------------------------
# Newton coder (scalar)


def faemb_gamma(
    x: np.ndarray, model: CodingModel, params: SolverParams | None = None
) -> NewtonSolution:
    """Sum-to-one coefficients for the kinked (absolute-value) objective.

    Phase 1 runs the damped equality-constrained Newton iteration with a
    fixed step ``params.newton_step``, stopping at the decrement criterion
    ``delta^2/2 <= params.newton_tol``, at objective stagnation, or at
    ``params.newton_max_iters``.  Phase 2 refines to the exact minimizer by
    walking sign orthants (each step solves the KKT system restricted to the
    orthant's support and either accepts it or clamps/releases a coordinate).
    """
    params = params or SolverParams()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.dim:
        raise ValueError(f"x must have shape ({model.dim},), got {x.shape}")
    C = model.anchors
    n = model.n_anchors
    H = C.T @ C
    Ctx = C.T @ x
    w_pen = 0.5 * model.mu * l1_dist_cubed(x, C)
    scale = max(1.0, np.abs(Ctx).max(), w_pen.max() if n else 0.0)
    Minv_left = _bordered_inverse(H)[:, :n]

    def q(g: np.ndarray) -> float:
        r = x - C @ g
        return 0.5 * float(r @ r) + float(np.abs(g) @ w_pen)

    gamma = np.full(n, 1.0 / n)
    dec_iter: int | None = None
    best_q = q(gamma)
    best_iter = 0
    it = 0
    for it in range(1, params.newton_max_iters + 1):
        g = H @ gamma - Ctx + w_pen * np.sign(gamma)
        sol = Minv_left @ g
        dgamma = -sol[:n]
        delta2 = max(-float(g @ dgamma), 0.0)
        if 0.5 * delta2 <= params.newton_tol:
            dec_iter = it
            break
        gamma = gamma + params.newton_step * dgamma
        if not np.isfinite(gamma).all():
            raise SingularSystemError(
                "Newton iteration diverged; anchors may be rank-deficient (set mu > 0)"
            )
        qc = q(gamma)
        if qc < best_q - 1e-13 * max(best_q, 1.0):
            best_q, best_iter = qc, it
        elif it - best_iter >= _STALL_WINDOW:
            break

    if model.mu == 0.0 or w_pen.max() == 0.0:
        gamma, refine = _lstsq_orthant(H, Ctx, n), 1
        gs = H @ gamma - Ctx
        lam = -float(gs.mean())
        resid = float(np.abs(gs + lam).max())
        return NewtonSolution(
            gamma=gamma,
            iterations=it,
            refine_steps=refine,
            decrement_iteration=dec_iter,
            stationarity=resid,
            kkt_residual=resid,
            converged=resid <= STATIONARITY_TOL,
        )

    sigma = np.sign(gamma)
    if dec_iter is None:
        # warm sign pattern from the closed-form ridge solution
        ridge = ffaemb_gamma(x, model)
        thresh = 0.05 * np.abs(ridge).max()
        sigma = np.where(np.abs(ridge) > thresh, np.sign(ridge), 0.0)
    if not sigma.any():
        sigma = np.ones(n)

    gamma, lam, refine = _orthant_walk(H, Ctx, w_pen, gamma, sigma, scale)
    gs = H @ gamma - Ctx
    g = gs + w_pen * np.sign(gamma)
    stationarity = float(np.abs(g + lam).max())
    kkt = np.where(
        gamma == 0.0,
        np.maximum(np.abs(gs + lam) - w_pen, 0.0),
        np.abs(g + lam),
    )
    kkt_residual = float(kkt.max())
    return NewtonSolution(
        gamma=gamma,
        iterations=it,
        refine_steps=refine,
        decrement_iteration=dec_iter,
        stationarity=stationarity,
        kkt_residual=kkt_residual,
        converged=kkt_residual <= STATIONARITY_TOL,
    )


def _lstsq_orthant(H: np.ndarray, Ctx: np.ndarray, n: int) -> np.ndarray:
    """Exact sum-to-one least-squares coefficients (no kink term)."""
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = H
    A[n, :n] = 1.0
    A[:n, n] = 1.0
    b = np.concatenate([Ctx, [1.0]])
    try:
        sol = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "the constrained coding system is singular; use regularization mu > 0 "
            "or full-rank anchors"
        ) from exc
    return sol[:n]


def _orthant_walk(
    H: np.ndarray,
    Ctx: np.ndarray,
    w_pen: np.ndarray,
    gamma: np.ndarray,
    sigma: np.ndarray,
    scale: float,
) -> tuple[np.ndarray, float, int]:
    """Active-set refinement: returns (gamma, multiplier, steps taken)."""
    n = H.shape[0]
    lam = 0.0
    releases = 0
    steps = 0
    for steps in range(1, 6 * n + 1):
        free = np.flatnonzero(sigma)
        k = len(free)
        A = np.zeros((k + 1, k + 1))
        A[:k, :k] = H[np.ix_(free, free)]
        A[k, :k] = 1.0
        A[:k, k] = 1.0
        b = np.concatenate([Ctx[free] - w_pen[free] * sigma[free], [1.0]])
        try:
            sol = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            A[:k, :k] += 1e-12 * scale * np.eye(k)
            sol = np.linalg.solve(A, b)
        gstar = np.zeros(n)
        gstar[free] = sol[:k]
        lam = float(sol[k])
        if np.all(gstar[free] * sigma[free] >= -1e-12 * max(1.0, np.abs(gstar).max())):
            gamma = gstar
            gs = H @ gamma - Ctx
            viol = np.abs(gs + lam) - w_pen
            viol[free] = -np.inf
            j = int(viol.argmax())
            if viol[j] > 1e-10 * scale and releases < 2 * n + 4:
                releases += 1
                s = -np.sign(gs[j] + lam)
                sigma[j] = s if s != 0 else 1.0
                continue
            break
        diff = gstar - gamma
        crossing = (sigma != 0) & (gstar * sigma < 0) & (np.abs(diff) > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            theta = np.where(crossing, gamma / -diff, np.inf)
        theta = np.where(theta > 0, theta, np.inf)
        j = int(theta.argmin())
        tj = theta[j]
        if not np.isfinite(tj) or tj >= 1.0:
            gamma = gstar
            sigma = np.sign(gamma)
            if not sigma.any():
                sigma[int(w_pen.argmin())] = 1.0
            continue
        gamma = gamma + tj * diff
        gamma[j] = 0.0
        sigma[j] = 0.0
        if not sigma.any():
            sigma[int(w_pen.argmin())] = 1.0
    return gamma, lam, steps


# ---------------------------------------------------------------------------
# Newton coder (vectorized batch)


def faemb_gamma_batch(
    X: np.ndarray, model: CodingModel, params: SolverParams | None = None
) -> BatchNewtonSolution:
    """Vectorized :func:`faemb_gamma` over column-stacked descriptors."""
    params = params or SolverParams()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != model.dim:
        raise ValueError(f"X must be ({model.dim}, m), got shape {X.shape}")
    C = model.anchors
    n = model.n_anchors
    m = X.shape[1]
    H = C.T @ C
    CtX = C.T @ X
    W = _penalty_weights(X, model)
    scale = max(1.0, np.abs(CtX).max(), W.max())
    Minv_left = _bordered_inverse(H)[:, :n]

    def q_cols(G: np.ndarray, cols: np.ndarray) -> np.ndarray:
        R = X[:, cols] - C @ G
        return 0.5 * (R * R).sum(axis=0) + (np.abs(G) * W[:, cols]).sum(axis=0)

    Gam = np.full((n, m), 1.0 / n)
    dec = np.full(m, -1, dtype=np.int64)
    iters = np.zeros(m, dtype=np.int64)
    best_q = q_cols(Gam, np.arange(m))
    best_it = np.zeros(m, dtype=np.int64)
    active = np.ones(m, dtype=bool)
    for it in range(1, params.newton_max_iters + 1):
        if not active.any():
            break
        ai = np.flatnonzero(active)
        Ga = Gam[:, ai]
        Grad = H @ Ga - CtX[:, ai] + W[:, ai] * np.sign(Ga)
        Dg = -(Minv_left @ Grad)[:n]
        delta2 = np.maximum(-(Grad * Dg).sum(axis=0), 0.0)
        iters[ai] = it
        hit = 0.5 * delta2 <= params.newton_tol
        first = hit & (dec[ai] < 0)
        dec[ai[first]] = it
        Ga = Ga + params.newton_step * Dg
        Gam[:, ai] = Ga
        qn = q_cols(Ga, ai)
        improved = qn < best_q[ai] - 1e-13 * np.maximum(best_q[ai], 1.0)
        best_q[ai[improved]] = qn[improved]
        best_it[ai[improved]] = it
        stalled = (it - best_it[ai]) >= _STALL_WINDOW
        active[ai[hit | stalled]] = False
    if not np.isfinite(Gam).all():
        raise SingularSystemError(
            "Newton iteration diverged; anchors may be rank-deficient (set mu > 0)"
        )

    if model.mu == 0.0 or W.max() == 0.0:
        ones = np.ones(n)
        A = np.zeros((n + 1, n + 1))
        A[:n, :n] = H
        A[n, :n] = 1.0
        A[:n, n] = 1.0
        rhs = np.concatenate([CtX, np.ones((1, m))], axis=0)
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(
                "the constrained coding system is singular; use regularization "
                "mu > 0 or full-rank anchors"
            ) from exc
        Gam = sol[:n]
        gs = H @ Gam - CtX
        lam = -gs.mean(axis=0)
        resid = np.abs(gs + lam).max(axis=0)
        return BatchNewtonSolution(
            gamma=Gam,
            iterations=iters,
            decrement_iterations=dec,
            stationarity=resid,
            kkt_residual=resid.copy(),
            converged=resid <= STATIONARITY_TOL,
        )

    # warm sign patterns: converged samples trust their Newton signs, stalled
    # samples start from the thresholded closed-form ridge solution
    sig = np.sign(Gam)
    stall_cols = dec < 0
    if stall_cols.any():
        ridge = ffaemb_gamma_batch(X[:, stall_cols], model)
        thresh = 0.05 * np.abs(ridge).max(axis=0, keepdims=True)
        sig[:, stall_cols] = np.where(np.abs(ridge) > thresh, np.sign(ridge), 0.0)
    empty = ~sig.any(axis=0)
    if empty.any():
        sig[:, empty] = 1.0

    lam_final = np.zeros(m)
    _orthant_walk_batch(H, CtX, W, Gam, sig, lam_final, scale)

    gs = H @ Gam - CtX
    g = gs + W * np.sign(Gam)
    stationarity = np.abs(g + lam_final).max(axis=0)
    kkt = np.where(
        Gam == 0.0,
        np.maximum(np.abs(gs + lam_final) - W, 0.0),
        np.abs(g + lam_final),
    ).max(axis=0)
    return BatchNewtonSolution(
        gamma=Gam,
        iterations=iters,
        decrement_iterations=dec,
        stationarity=stationarity,
        kkt_residual=kkt,
        converged=kkt <= STATIONARITY_TOL,
    )


def _orthant_walk_batch(
    H: np.ndarray,
    CtX: np.ndarray,
    W: np.ndarray,
    Gam: np.ndarray,
    sig: np.ndarray,
    lam_out: np.ndarray,
    scale: float,
) -> None:
    """Vectorized active-set refinement; updates Gam, sig, lam_out in place."""
    n, m = Gam.shape
    M0 = np.zeros((n + 1, n + 1))
    M0[:n, :n] = H
    M0[n, :n] = 1.0
    M0[:n, n] = 1.0
    todo = np.ones(m, dtype=bool)
    releases = np.zeros(m, dtype=np.int64)
    for _ in range(6 * n):
        if not todo.any():
            break
        ti = np.flatnonzero(todo)
        k = len(ti)
        S = sig[:, ti]
        clamped = S == 0  # (n, k)
        A = np.broadcast_to(M0, (k, n + 1, n + 1)).copy()
        for j in range(n):
            cm = clamped[j]
            if cm.any():
                A[cm, j, :] = 0.0
                A[cm, :, j] = 0.0
                A[cm, j, j] = 1.0
        rhs = np.empty((k, n + 1))
        rhs[:, :n] = (CtX[:, ti] - W[:, ti] * S).T
        rhs[:, :n][clamped.T] = 0.0
        rhs[:, n] = 1.0
        try:
            sol = np.linalg.solve(A, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            A[:, :n, :n] += 1e-12 * scale * np.eye(n)
            sol = np.linalg.solve(A, rhs[..., None])[..., 0]
        Gstar = sol[:, :n].T  # (n, k)
        lam = sol[:, n]
        gscale = np.maximum(1.0, np.abs(Gstar).max(axis=0))
        consistent = np.all(Gstar * S >= -1e-12 * gscale, axis=0)

        if consistent.any():
            ci = ti[consistent]
            Gam[:, ci] = Gstar[:, consistent]
            lam_out[ci] = lam[consistent]
            gs = H @ Gam[:, ci] - CtX[:, ci]
            viol = np.abs(gs + lam[consistent]) - W[:, ci]
            viol[~clamped[:, consistent]] = -np.inf
            vmax = viol.max(axis=0)
            done = (vmax <= 1e-10 * scale) | (releases[ci] >= 2 * n + 4)
            todo[ci[done]] = False
            rel = ~done
            if rel.any():
                rci = ci[rel]
                releases[rci] += 1
                jrel = viol[:, rel].argmax(axis=0)
                picked = gs[jrel, np.flatnonzero(rel)] + lam[consistent][rel]
                s = -np.sign(picked)
                s[s == 0] = 1.0
                sig[jrel, rci] = s

        inconsistent = ~consistent
        if inconsistent.any():
            ii = ti[inconsistent]
            Gc = Gam[:, ii]
            Gi = Gstar[:, inconsistent]
            Si = S[:, inconsistent]
            diff = Gi - Gc
            crossing = (Si != 0) & (Gi * Si < 0) & (np.abs(diff) > 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                theta = np.where(crossing, Gc / -diff, np.inf)
            theta = np.where(theta > 0, theta, np.inf)
            jmin = theta.argmin(axis=0)
            cols = np.arange(len(ii))
            tmin = theta[jmin, cols]
            ok = np.isfinite(tmin) & (tmin < 1.0)
            Gn = Gc + np.where(ok, tmin, 1.0)[None, :] * diff
            Gn[jmin[ok], cols[ok]] = 0.0
            sig[jmin[ok], ii[ok]] = 0.0
            full = ~ok
            if full.any():
                sig[:, ii[full]] = np.sign(Gn[:, full])
            Gam[:, ii] = Gn
            empty = ~sig[:, ii].any(axis=0)
            if empty.any():
                cols_e = ii[empty]
                jbest = W[:, cols_e].argmin(axis=0)
                sig[jbest, cols_e] = 1.0


# ---------------------------------------------------------------------------
# batch objective and anchor updates


def _check_coefficients(X: np.ndarray, Gamma: np.ndarray, model: CodingModel) -> None:
    if X.ndim != 2 or Gamma.ndim != 2:
        raise ValueError("X and Gamma must be 2-D")
    if X.shape[0] != model.dim:
        raise ValueError(f"X rows ({X.shape[0]}) != anchor dim ({model.dim})")
    if Gamma.shape[0] != model.n_anchors:
        raise ValueError(f"Gamma rows ({Gamma.shape[0]}) != anchor count ({model.n_anchors})")
    if X.shape[1] != Gamma.shape[1]:
        raise ValueError(f"column counts differ: X {X.shape[1]} vs Gamma {Gamma.shape[1]}")
    dev = np.abs(Gamma.sum(axis=0) - 1.0).max() if Gamma.size else 0.0
    if dev > 1e-6:
        raise ValueError(f"coefficient columns must sum to 1 (worst deviation {dev:.3e})")


def per_sample_objective(X: np.ndarray, Gamma: np.ndarray, model: CodingModel) -> np.ndarray:
    """Per-column value of the coding objective (before averaging)."""
    X = np.asarray(X, dtype=np.float64)
    Gamma = np.asarray(Gamma, dtype=np.float64)
    _check_coefficients(X, Gamma, model)
    R = X - model.anchors @ Gamma
    rec = 0.5 * (R * R).sum(axis=0)
    A = l1_dist_cubed_batch(X, model.anchors)
    if model.variant == "faemb":
        pen = 0.5 * model.mu * (np.abs(Gamma) * A).sum(axis=0)
    else:
        pen = 0.5 * model.mu * (Gamma * Gamma).sum(axis=0) * A.sum(axis=0)
    return rec + pen


def objective(X: np.ndarray, Gamma: np.ndarray, model: CodingModel) -> float:
    """Mean coding objective over column-stacked descriptors ``X (d, m)``."""
    return float(per_sample_objective(X, Gamma, model).mean())


def anchor_gradient(
    X: np.ndarray, Gamma: np.ndarray, anchors: np.ndarray, mu: float, variant: str
) -> np.ndarray:
    """Analytic gradient of the batch objective with respect to the anchors.

    The absolute-value distance terms use the ``sign(0) = 0`` convention
    coordinate-wise; the gradient is exact wherever no anchor coordinate
    ties a descriptor coordinate.
    """
    X = np.asarray(X, dtype=np.float64)
    Gamma = np.asarray(Gamma, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    d, m = X.shape
    n = anchors.shape[1]
    R = anchors @ Gamma - X
    grad = (R @ Gamma.T) / m
    if mu > 0.0:
        Wp = np.abs(Gamma) if variant == "faemb" else np.broadcast_to(
            (Gamma * Gamma).sum(axis=0), (n, m)
        )
        for j in range(n):
            diff = anchors[:, j : j + 1] - X
            l1 = np.abs(diff).sum(axis=0)
            grad[:, j] += (1.5 * mu / m) * (np.sign(diff) @ (Wp[j] * l1 * l1))
    return grad


def _solve_anchor_coordinate(
    a: float,
    b: float,
    mu: float,
    w: np.ndarray,
    x: np.ndarray,
    r: np.ndarray,
    t_old: float,
) -> float:
    """Exact minimizer of one anchor coordinate with everything else fixed.

    The slice objective is ``F(t) = a/2 t^2 - b t + mu/2 sum_i w_i
    (|t - x_i| + r_i)^3`` with ``w_i, r_i >= 0``: convex in ``t``, smooth
    except at the breakpoints ``{x_i}`` where the derivative jumps upward.
    Binary-search the breakpoints for the subgradient sign change; between
    breakpoints the derivative is an explicit quadratic, so the interior
    root is closed-form (with a bisection fallback for degenerate cases).
    """
    keep = w > 0.0
    if not keep.any():
        return b / a if a > 0.0 else t_old
    w, x, r = w[keep], x[keep], r[keep]
    c15 = 1.5 * mu

    def deriv(t: float, side: float) -> float:
        sig = np.sign(t - x)
        if side != 0.0:
            sig = np.where(sig == 0.0, side, sig)
        z = np.abs(t - x) + r
        return a * t - b + c15 * float(w @ (sig * z * z))

    def region_root(lo: float, hi: float, sig: np.ndarray) -> float:
        # On a breakpoint-free stretch deriv(t) = A t^2 + B t + D.
        ws = w * sig
        z = x - sig * r
        A = c15 * float(ws.sum())
        B = a - 2.0 * c15 * float(ws @ z)
        D = c15 * float(ws @ (z * z)) - b
        root = np.nan
        if abs(A) <= 1e-300:
            if B != 0.0:
                root = -D / B
        else:
            disc = B * B - 4.0 * A * D
            if disc >= 0.0:
                sq = math.sqrt(disc)
                qq = -0.5 * (B + math.copysign(sq, B))
                cands = [qq / A]
                if qq != 0.0:
                    cands.append(D / qq)
                pad = 1e-9 * (1.0 + abs(lo) + abs(hi))
                for t in cands:
                    if lo - pad <= t <= hi + pad and 2.0 * A * t + B >= -pad:
                        root = min(max(t, lo), hi)
                        break
        if np.isfinite(root):
            return float(root)
        # Fallback: bisect on the derivative inside a finite bracket.
        if not np.isfinite(lo):
            step = 1.0 + abs(hi)
            lo = hi - step
            while deriv(lo, 0.0) > 0.0:
                step *= 2.0
                lo = hi - step
        if not np.isfinite(hi):
            step = 1.0 + abs(lo)
            hi = lo + step
            while deriv(hi, 0.0) < 0.0:
                step *= 2.0
                hi = lo + step
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if deriv(mid, 0.0) < 0.0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    s = np.unique(x)
    if deriv(s[0], -1.0) >= 0.0:
        return region_root(-np.inf, float(s[0]), -np.ones_like(x))
    if deriv(s[-1], 1.0) <= 0.0:
        return region_root(float(s[-1]), np.inf, np.ones_like(x))
    lo_i, hi_i = 0, len(s) - 1
    while lo_i < hi_i:  # smallest breakpoint with right-derivative >= 0
        mid = (lo_i + hi_i) // 2
        if deriv(s[mid], 1.0) >= 0.0:
            hi_i = mid
        else:
            lo_i = mid + 1
    if deriv(s[hi_i], -1.0) <= 0.0:
        return float(s[hi_i])  # zero lies inside the subgradient jump
    lo, hi = float(s[hi_i - 1]), float(s[hi_i])
    return region_root(lo, hi, np.sign(0.5 * (lo + hi) - x))


def _anchor_cd_sweeps(
    X: np.ndarray,
    Gamma: np.ndarray,
    C: np.ndarray,
    mu: float,
    variant: str,
    max_sweeps: int = 80,
) -> np.ndarray:
    """Cyclic exact coordinate descent on the anchors.

    The cubed-L1 penalty is non-differentiable exactly on the axis-aligned
    planes where an anchor coordinate ties a descriptor coordinate, and its
    minimizers often sit on them, which stalls curvature-based steps.  The
    penalty's subdifferential there is a coordinate-aligned box, so a point
    that no single-coordinate move can improve is a true minimizer of this
    convex subproblem; each exact 1-D solve also keeps the descent monotone.
    """
    d, m = X.shape
    n = C.shape[1]
    C = C.copy()
    if variant == "faemb":
        W = np.abs(Gamma)
    else:
        W = np.broadcast_to((Gamma * Gamma).sum(axis=0), (n, m))
    curv = (Gamma * Gamma).sum(axis=1)
    half_mu = 0.5 * mu
    for _ in range(max_sweeps):
        R = X - C @ Gamma
        L1 = np.abs(C.T[:, :, None] - X[None, :, :]).sum(axis=1)
        moved = 0.0
        for j in range(n):
            g_j = Gamma[j]
            w = W[j]
            a = float(curv[j])
            for k in range(d):
                t_old = float(C[k, j])
                x_row = X[k]
                r = np.maximum(L1[j] - np.abs(t_old - x_row), 0.0)
                e = R[k] + t_old * g_j
                b = float(g_j @ e)
                if a <= 0.0 and (mu == 0.0 or not (w > 0.0).any()):
                    continue
                t_new = _solve_anchor_coordinate(a, b, mu, w, x_row, r, t_old)
                if not np.isfinite(t_new) or t_new == t_old:
                    continue
                l1_old = np.abs(t_old - x_row) + r
                l1_new = np.abs(t_new - x_row) + r
                f_old = 0.5 * a * t_old * t_old - b * t_old
                f_new = 0.5 * a * t_new * t_new - b * t_new
                if mu > 0.0:
                    f_old += half_mu * float(w @ (l1_old**3))
                    f_new += half_mu * float(w @ (l1_new**3))
                if f_new > f_old:
                    continue
                C[k, j] = t_new
                R[k] = e - t_new * g_j
                L1[j] = l1_new
                moved = max(moved, abs(t_new - t_old))
        if moved <= 1e-12 * (1.0 + np.abs(C).max()):
            break
    return C


def update_anchors(
    X: np.ndarray,
    Gamma: np.ndarray,
    c_init: np.ndarray,
    model: CodingModel,
    max_inner: int = 50,
    grad_tol: float = 1e-9,
) -> np.ndarray:
    """Damped Newton descent on the anchors for fixed coefficients.

    The Hessian couples anchors through the reconstruction term
    (``Gamma @ Gamma.T`` blocks) and adds a per-anchor block for the cubed
    L1 penalty.  Because that penalty kinks wherever an anchor coordinate
    ties a descriptor coordinate, the Newton phase is finished by exact
    coordinate-descent sweeps that land on the kinks; see
    :func:`_anchor_cd_sweeps`.  A backtracking line search keeps the batch
    objective non-increasing; the returned anchors never score worse than
    ``c_init``.
    """
    X = np.asarray(X, dtype=np.float64)
    Gamma = np.asarray(Gamma, dtype=np.float64)
    C = np.array(c_init, dtype=np.float64, copy=True)
    d, m = X.shape
    n = C.shape[1]
    mu, variant = model.mu, model.variant
    probe = replace(model, anchors=C)

    def value(anchors: np.ndarray) -> float:
        return objective(X, Gamma, replace(probe, anchors=anchors))

    GGt = Gamma @ Gamma.T
    H_rec = np.kron(GGt, np.eye(d)) / m
    Wp = None
    if mu > 0.0:
        Wp = np.abs(Gamma) if variant == "faemb" else np.broadcast_to(
            (Gamma * Gamma).sum(axis=0), (n, m)
        )
    q = value(C)
    for _ in range(max_inner):
        g = anchor_gradient(X, Gamma, C, mu, variant)
        if np.abs(g).max() <= grad_tol * (1.0 + abs(q)):
            break
        Hfull = H_rec.copy()
        if mu > 0.0:
            for j in range(n):
                diff = C[:, j : j + 1] - X
                l1 = np.abs(diff).sum(axis=0)
                S = np.sign(diff)
                block = (3.0 * mu / m) * ((S * (Wp[j] * l1)) @ S.T)
                lo = j * d
                Hfull[lo : lo + d, lo : lo + d] += block
        tau = 1e-10 * (1.0 + np.trace(Hfull) / (n * d))
        Hfull[np.diag_indices_from(Hfull)] += tau
        gv = g.flatten(order="F")
        try:
            pv = -np.linalg.solve(Hfull, gv)
        except np.linalg.LinAlgError:
            break
        P = pv.reshape((d, n), order="F")
        slope = float(gv @ pv)
        alpha = 1.0
        accepted = False
        for _ in range(60):
            trial = C + alpha * P
            qt = value(trial)
            if qt <= q + 1e-4 * alpha * slope or qt <= q - 1e-15:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        C, q = trial, qt
    polished = _anchor_cd_sweeps(X, Gamma, C, mu, variant)
    if value(polished) <= q:
        C = polished
    return C


def _gamma_step(
    X: np.ndarray, model: CodingModel, params: SolverParams
) -> np.ndarray:
    if model.variant == "faemb":
        return faemb_gamma_batch(X, model, params).gamma
    return ffaemb_gamma_batch(X, model)


def train_coding(
    X: np.ndarray,
    n: int,
    mu: float,
    variant: str,
    params: SolverParams | None = None,
    seed: int = 0,
) -> TrainResult:
    """Alternating minimization of anchors and coefficients.

    Anchors start from :func:`kmeans_init`.  Each outer iteration updates the
    anchors for the current coefficients, then re-solves every coefficient
    column; a per-sample safeguard keeps whichever coefficients score better
    under the new anchors, so the recorded objective trace is non-increasing.
    Stops after ``params.max_outer_iters`` iterations or when the objective
    improves by less than ``params.outer_tol``.
    """
    params = params or SolverParams()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be (d, m), got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("training descriptors contain non-finite values")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if n < 2:
        raise ValueError(f"training needs at least 2 anchors, got n={n}")
    d, m = X.shape
    if m < n:
        raise ValueError(f"need at least n={n} training descriptors, got {m}")

    anchors = kmeans_init(X, n, seed=seed)
    model = CodingModel(anchors=anchors, mu=mu, variant=variant)
    Gamma = _gamma_step(X, model, params)
    trace = [objective(X, Gamma, model)]
    for _ in range(params.max_outer_iters):
        anchors = update_anchors(X, Gamma, model.anchors, model)
        model = replace(model, anchors=anchors)
        fresh = _gamma_step(X, model, params)
        worse = per_sample_objective(X, fresh, model) > per_sample_objective(
            X, Gamma, model
        )
        if worse.any():
            fresh[:, worse] = Gamma[:, worse]
        Gamma = fresh
        trace.append(objective(X, Gamma, model))
        if abs(trace[-1] - trace[-2]) < params.outer_tol:
            break
    return TrainResult(model=model, gamma=Gamma, trace=np.asarray(trace))
