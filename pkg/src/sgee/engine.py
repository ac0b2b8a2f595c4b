"""Estimating-equation solvers for the single-index model.

Two stages share one damped-Newton core:

* the initial fit solves the working-independence equations with rows
  ``gprime(x'beta) (J' x)'`` and slope ``sum Z' Z``;
* the bias-corrected fit centers covariates at their smoothed conditional
  means along the initial index, rows ``gprime(x'beta) (J'(x - Ehat[x|x'beta_tilde]))'``,
  weighted by per-cluster inverse working matrices, with slope ``n * Vhat``.

The conditional-mean centering is computed once at the initial estimate and
frozen; the bandwidth is cross-validated at the initial estimate and frozen.
The Newton direction uses the Gauss-type slope (the estimating function's
dominant linearization) with step halving until the score norm decreases.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .correlation import (ResidualSet, WorkingCorrelationSpec, build_R,
                          estimate_alpha_moments, estimate_pooled_sigma,
                          invert_R, repair_pooled)
from .data import ClusteredDataset
from .errors import BoundaryError, ConditioningError, SgeeError
from .geometry import IndexParam, choose_r, embed, jacobian, project_into_chart, reduce
from .smoothing import SmootherConfig, cv_bandwidth, default_cv_grid, pilot_bandwidth, smooth_many

G_GRID_POINTS = 101
MAX_BOUNDARY_HITS = 5
COND_LIMIT = 1e12
# A stationary point of |F| counts as solved when the leftover score is
# below this fraction of the score's sampling noise scale.
NOISE_FRACTION = 0.05


@dataclass
class GeeConfig:
    """Solver controls shared by the initial, bias-corrected and SGEE fits."""

    max_iter: int = 100
    tol: float = 1e-8
    damping: int = 20
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    trace: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class FitResult:
    """Converged (or best-effort) index estimate with plug-in covariance."""

    beta: IndexParam
    converged: bool
    iterations: int
    final_residual_norm: float
    sigma_a: np.ndarray
    se: np.ndarray
    g_grid: tuple[np.ndarray, np.ndarray]
    h: float
    trace: list[tuple[int, float, float]] = field(default_factory=list)


@dataclass
class InitialFit:
    """Working-independence estimate plus convergence diagnostics."""

    beta: IndexParam
    converged: bool
    iterations: int
    final_residual_norm: float


@dataclass
class _Problem:
    """Frozen numerics for one solve: data, centering, inverse R's."""

    X: np.ndarray
    y: np.ndarray
    Xc: np.ndarray
    r: int
    h: float
    ridge: float
    n: int
    groups: list | None       # None -> identity working matrices
    slices: list
    # The uncentered working-independence score has slope (in beta) equal to
    # the conditionally centered second-moment matrix, because the smoother's
    # weights move with beta. center_slope recenters the slope rows at the
    # running index while leaving the score itself untouched.
    center_slope: bool = False

    def score(self, beta_red, with_omega=False):
        """Estimating function G, slope matrix V = (1/n) sum Z' Rinv Z, the
        residual vector, and optionally the per-cluster score outer-product
        Omega."""
        beta = embed(beta_red, self.r)
        z = self.X @ beta.beta
        if self.center_slope:
            ghat, gp, centers = smooth_many(z, self.y, z, self.h, self.ridge, X=self.X)
        else:
            ghat, gp = smooth_many(z, self.y, z, self.h, self.ridge)
        resid = self.y - ghat
        J = jacobian(beta_red, self.r)
        A = (gp[:, None] * self.Xc) @ J
        As = (gp[:, None] * (self.X - centers)) @ J if self.center_slope else A
        if self.groups is None:
            G = A.T @ resid
            V = (As.T @ As) / self.n
            if with_omega:
                return G, V, resid, self._omega_identity(A, resid)
            return G, V, resid
        G = np.zeros(A.shape[1])
        V = np.zeros((A.shape[1], A.shape[1]))
        rows_u = []
        for rows, ng, m, Rinv3 in self.groups:
            Ag = A[rows].reshape(ng, m, -1)
            Asg = As[rows].reshape(ng, m, -1) if self.center_slope else Ag
            eg = resid[rows].reshape(ng, m)
            ARe = np.einsum("nmi,nmk->nki", Ag, Rinv3)
            G += np.einsum("nki,nk->i", ARe, eg)
            if self.center_slope:
                V += np.einsum("nmi,nmk,nkj->ij", Asg, Rinv3, Asg)
            else:
                V += np.einsum("nki,nkj->ij", ARe, Ag)
            if with_omega:
                rows_u.append(np.einsum("nki,nk->ni", ARe, eg))
        V /= self.n
        if with_omega:
            U = np.concatenate(rows_u, axis=0)
            return G, V, resid, (U.T @ U) / self.n
        return G, V, resid

    def _omega_identity(self, A, resid):
        out = np.zeros((A.shape[1], A.shape[1]))
        for a, b in self.slices:
            u = A[a:b].T @ resid[a:b]
            out += np.outer(u, u)
        return out / self.n

    def quad_from_resid(self, resid):
        """Residual quadratic form sum_j e_j' Rinv_j e_j."""
        if self.groups is None:
            return float(resid @ resid)
        total = 0.0
        for rows, ng, m, Rinv3 in self.groups:
            eg = resid[rows].reshape(ng, m)
            total += float(np.einsum("nk,nkl,nl->", eg, Rinv3, eg))
        return total

    def quad_form(self, beta_red):
        """Residual quadratic form at the given index (refits the smoother)."""
        beta = embed(beta_red, self.r)
        z = self.X @ beta.beta
        ghat, _ = smooth_many(z, self.y, z, self.h, self.ridge)
        return self.quad_from_resid(self.y - ghat)


def _make_groups(slices, Rinv_list):
    by_m: dict[int, list[int]] = {}
    for j, (a, b) in enumerate(slices):
        by_m.setdefault(b - a, []).append(j)
    groups = []
    for m in sorted(by_m):
        js = by_m[m]
        rows = np.concatenate([np.arange(*slices[j]) for j in js])
        groups.append((rows, len(js), m, np.stack([Rinv_list[j] for j in js])))
    return groups


def _check_slope(M):
    if not np.all(np.isfinite(M)):
        raise ConditioningError("singular step matrix (non-finite slope)")
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise ConditioningError(f"singular step matrix (condition number {cond:.3g})")


def _solve_newton(problem: _Problem, beta_red0, cfg: GeeConfig, delta=None):
    """Damped Newton iteration on the (possibly threshold-mixed) equations.

    With threshold weights ``delta`` the free-coordinate system is
    ``(1 - d_i) G_i + d_i b_i = 0`` and the slope is
    ``(I - D) n V - D``; with ``delta=None`` it reduces to ``G = 0`` with
    slope ``n V``. Coordinates with ``d_i = 1`` are pinned to exact zero.

    Convergence follows three routes: score norm ``|F|/n <= tol``; an
    accepted step of norm ``<= tol``; or stationarity at a statistically
    negligible score. The score is only piecewise smooth (observations
    cross kernel windows as beta moves), so at cross-validated bandwidths
    it can bottom out at a small positive floor with no exact root nearby;
    a floor point counts as solved when the leftover score is below
    NOISE_FRACTION of the score's own sampling scale sqrt(tr(Omega)/n).

    Returns (beta_red, converged, iterations, score_norm, trace, resid).
    """
    p1 = len(beta_red0)
    d = np.zeros(p1) if delta is None else np.asarray(delta, dtype=float)
    free = d < 1.0
    beta_red = np.array(beta_red0, dtype=float)
    beta_red[~free] = 0.0
    trace = []
    if not free.any():
        _, _, resid = problem.score(beta_red)
        return beta_red, True, 0, 0.0, trace, resid

    n = problem.n
    df = d[free]

    def eval_point(br):
        G, V, resid = problem.score(br)
        F = (1.0 - df) * G[free] + df * br[free]
        return F, V, resid

    def statistically_stationary(br, f):
        # |F(beta_0)| is of order sqrt(n tr((I-D) Omega (I-D))), so a
        # stationary point whose score sits far below that sampling scale
        # solves the equations to within their own noise.
        _, _, _, Omega = problem.score(br, with_omega=True)
        noise = np.sqrt(((1.0 - df) ** 2 * np.diag(Omega)[free]).sum() / n)
        return f / n <= NOISE_FRACTION * noise

    F, V, resid = eval_point(beta_red)
    fnorm = float(np.linalg.norm(F))
    best = (fnorm, beta_red.copy(), resid)
    converged = False
    boundary_hits = 0
    it = 0
    while True:
        if fnorm / n <= cfg.tol:
            if it == 0:
                # A zero score with a degenerate slope (e.g. ghat' == 0
                # everywhere) is not a usable solution.
                _check_slope((1.0 - df)[:, None] * (n * V[np.ix_(free, free)]) - np.diag(df))
            converged = True
            break
        if it >= cfg.max_iter:
            converged = statistically_stationary(beta_red, fnorm)
            break
        M = (1.0 - df)[:, None] * (n * V[np.ix_(free, free)]) - np.diag(df)
        _check_slope(M)
        step = np.linalg.solve(M, F)
        it += 1

        def try_ray(direction, scale):
            nonlocal boundary_hits
            for _ in range(cfg.damping + 1):
                cand = beta_red.copy()
                cand[free] += scale * direction
                cand, hit = project_into_chart(cand)
                if hit:
                    boundary_hits += 1
                    if boundary_hits > MAX_BOUNDARY_HITS:
                        raise BoundaryError(
                            f"chart boundary hit {boundary_hits} times; index degenerating")
                Fc, Vc, resid_c = eval_point(cand)
                fc = float(np.linalg.norm(Fc))
                if fc < fnorm:
                    return cand, Fc, Vc, resid_c, fc
                scale *= 0.5
            return None

        hit_state = try_ray(step, 1.0)
        if hit_state is None and not statistically_stationary(beta_red, fnorm):
            # The surrogate ray can point uphill where the score is rough;
            # fall back to numerical steepest descent on 0.5 |F|^2.
            fd = 1e-7
            grad = np.empty(int(free.sum()))
            for j in range(len(grad)):
                probe = beta_red.copy()
                probe[np.flatnonzero(free)[j]] += fd
                Fp, _, _ = eval_point(probe)
                grad[j] = (0.5 * float(Fp @ Fp) - 0.5 * fnorm * fnorm) / fd
            gnorm = float(np.linalg.norm(grad))
            if gnorm > 0:
                hit_state = try_ray(-grad / gnorm, float(np.linalg.norm(step)))
        if hit_state is None:
            converged = (float(np.linalg.norm(step)) <= cfg.tol
                         or statistically_stationary(beta_red, fnorm))
            break
        cand, Fc, Vc, resid_c, fc = hit_state
        moved = float(np.linalg.norm(cand - beta_red))
        still_fast = fc <= 0.5 * fnorm
        beta_red, F, V, resid, fnorm = cand, Fc, Vc, resid_c, fc
        if cfg.trace:
            trace.append((it, fnorm, moved))
        if fnorm < best[0]:
            best = (fnorm, beta_red.copy(), resid)
        if fnorm / n <= cfg.tol:
            converged = True
            break
        if moved <= cfg.tol and not still_fast:
            converged = True
            break
    if not converged:
        fnorm, beta_red, resid = best
    return beta_red, converged, it, fnorm, trace, resid


def _start_vector(ds: ClusteredDataset):
    """Pooled covariate-response cross-moment direction, unit-normalized."""
    X, y, _ = ds.flat()
    c = (X - X.mean(axis=0)).T @ (y - y.mean())
    nrm = np.linalg.norm(c)
    if nrm <= 1e-12 * max(1.0, float(np.abs(y).max())):
        c = np.ones(ds.p)
        nrm = np.linalg.norm(c)
    return c / nrm


def initial_fit(ds: ClusteredDataset, cfg: GeeConfig | None = None) -> InitialFit:
    """Working-independence fit with full diagnostics.

    Without a preset bandwidth, a pilot-bandwidth fit seeds leave-one-out
    cross validation and the fit is then rerun at the selected bandwidth.
    """
    cfg = cfg or GeeConfig()
    if ds.p < 2:
        raise SgeeError(f"single-index fit needs p >= 2, got p={ds.p}")
    X, y, slices = ds.flat()
    r, oriented = choose_r(_start_vector(ds))
    beta0 = oriented / np.linalg.norm(oriented)
    ridge = cfg.smoother.ridge_eps

    def solve_at(h, beta_red0):
        problem = _Problem(X=X, y=y, Xc=X, r=r, h=h, ridge=ridge,
                           n=ds.n, groups=None, slices=slices, center_slope=True)
        return _solve_newton(problem, beta_red0, cfg)

    beta_red0 = reduce(beta0, r)
    if cfg.smoother.h is not None:
        beta_red, converged, its, fnorm, _, _ = solve_at(cfg.smoother.h, beta_red0)
    else:
        pilot_red, _, _, _, _, _ = solve_at(pilot_bandwidth(ds, beta0), beta_red0)
        pilot = embed(pilot_red, r)
        h = cv_bandwidth(ds, pilot, default_cv_grid(ds, pilot), ridge)
        beta_red, converged, its, fnorm, _, _ = solve_at(h, pilot_red)
    return InitialFit(beta=embed(beta_red, r), converged=converged,
                      iterations=its, final_residual_norm=fnorm)


def initial_estimate(ds: ClusteredDataset, cfg: GeeConfig | None = None) -> IndexParam:
    """Initial index estimate under working independence."""
    return initial_fit(ds, cfg).beta


def residual_set(ds: ClusteredDataset, beta: IndexParam, h: float,
                 ridge: float = 1e-10) -> ResidualSet:
    """Per-cluster residuals y - ghat(x'beta) at the given index and bandwidth."""
    X, y, slices = ds.flat()
    z = X @ beta.beta
    ghat, _ = smooth_many(z, y, z, h, ridge)
    resid = y - ghat
    return ResidualSet(residuals=[resid[a:b] for a, b in slices],
                       times=[ds.cluster_times(i) for i in range(ds.n)])


def resolve_correlation(spec: WorkingCorrelationSpec, ds: ClusteredDataset,
                        residuals: ResidualSet | None = None) -> WorkingCorrelationSpec:
    """Fill in data-driven parameters (pooled estimate, time-power alpha)."""
    if spec.kind == "pooled_residual" and spec.pooled is None:
        if residuals is None:
            raise ConditioningError("pooled_residual needs initial-fit residuals")
        return replace(spec, pooled=repair_pooled(estimate_pooled_sigma(residuals)))
    if spec.kind == "time_power" and spec.alpha is None:
        if residuals is None:
            raise ConditioningError("time_power alpha estimation needs initial-fit residuals")
        return replace(spec, alpha=estimate_alpha_moments(residuals, residuals.times))
    return spec


def build_R_list(spec: WorkingCorrelationSpec, ds: ClusteredDataset) -> list[np.ndarray]:
    return [build_R(spec, c, position=i) for i, c in enumerate(ds.clusters)]


@dataclass
class BcContext:
    """Everything frozen before the bias-corrected solve: bandwidth, the
    conditional-mean centering at the initial estimate, and inverse R's."""

    ds: ClusteredDataset
    beta_tilde: IndexParam
    h: float
    problem: _Problem
    R_list: list[np.ndarray]
    spec: WorkingCorrelationSpec


def _centered_problem(ds, beta_tilde, h, ridge, Rinv_list, slices):
    X, y, _ = ds.flat()
    z_t = X @ beta_tilde.beta
    _, _, centers = smooth_many(z_t, y, z_t, h, ridge, X=X)
    groups = None if Rinv_list is None else _make_groups(slices, Rinv_list)
    return _Problem(X=X, y=y, Xc=X - centers, r=beta_tilde.r, h=h,
                    ridge=ridge, n=ds.n, groups=groups, slices=slices)


def prepare_bc(ds: ClusteredDataset, spec: WorkingCorrelationSpec,
               beta_tilde: IndexParam, cfg: GeeConfig) -> BcContext:
    """Select the bandwidth at beta_tilde, estimate R parameters from the
    working-independence residuals, and freeze the centering."""
    ridge = cfg.smoother.ridge_eps
    h = cfg.smoother.h
    if h is None:
        h = cv_bandwidth(ds, beta_tilde, default_cv_grid(ds, beta_tilde), ridge)
    res = residual_set(ds, beta_tilde, h, ridge)
    resolved = resolve_correlation(spec, ds, res)
    R_list = build_R_list(resolved, ds)
    Rinv = None if resolved.kind == "identity" else [invert_R(R) for R in R_list]
    _, _, slices = ds.flat()
    problem = _centered_problem(ds, beta_tilde, h, ridge, Rinv, slices)
    return BcContext(ds=ds, beta_tilde=beta_tilde, h=h, problem=problem,
                     R_list=R_list, spec=resolved)


def context_with_correlation(ctx: BcContext, spec: WorkingCorrelationSpec,
                             residuals: ResidualSet | None = None) -> BcContext:
    """Reuse a prepared context (bandwidth, centering) under a different
    working-correlation choice."""
    resolved = resolve_correlation(spec, ctx.ds, residuals)
    R_list = build_R_list(resolved, ctx.ds)
    Rinv = None if resolved.kind == "identity" else [invert_R(R) for R in R_list]
    groups = None if Rinv is None else _make_groups(ctx.problem.slices, Rinv)
    problem = replace(ctx.problem, groups=groups)
    return BcContext(ds=ctx.ds, beta_tilde=ctx.beta_tilde, h=ctx.h,
                     problem=problem, R_list=R_list, spec=resolved)


def bc_gee_residual(beta_reduced, ds: ClusteredDataset, R_list: list[np.ndarray],
                    beta_tilde: IndexParam, cfg: GeeConfig) -> np.ndarray:
    """Value of the bias-corrected estimating function at ``beta_reduced``.

    The bandwidth must already be fixed in ``cfg.smoother.h``; the
    conditional-mean centering is evaluated at ``beta_tilde`` and frozen.
    """
    if cfg.smoother.h is None:
        raise ValueError("bc_gee_residual needs a fixed bandwidth in cfg.smoother.h")
    _, _, slices = ds.flat()
    Rinv = [invert_R(R) for R in R_list]
    problem = _centered_problem(ds, beta_tilde, cfg.smoother.h,
                                cfg.smoother.ridge_eps, Rinv, slices)
    G, _, _ = problem.score(np.asarray(beta_reduced, dtype=float))
    return G


def _sigma_a(problem: _Problem, beta_red, free=None):
    """Plug-in sandwich J V^-1 Omega V^-1 J' on the given free coordinates."""
    _, V, _, Omega = problem.score(beta_red, with_omega=True)
    J = jacobian(beta_red, problem.r)
    if free is not None:
        V = V[np.ix_(free, free)]
        Omega = Omega[np.ix_(free, free)]
        J = J[:, free]
    if V.size == 0:
        return np.zeros((J.shape[0], J.shape[0]))
    Vi = invert_R(V)
    S = J @ Vi @ Omega @ Vi @ J.T
    return 0.5 * (S + S.T)


def asymptotic_covariance(fit_beta: IndexParam, ds: ClusteredDataset,
                          R_list: list[np.ndarray], cfg: GeeConfig,
                          beta_tilde: IndexParam | None = None) -> np.ndarray:
    """Plug-in asymptotic covariance of sqrt(n) (beta_hat - beta0).

    Centering defaults to the fitted index when no initial estimate is
    passed; the bandwidth comes from ``cfg.smoother.h``.
    """
    if cfg.smoother.h is None:
        raise ValueError("asymptotic_covariance needs a fixed bandwidth in cfg.smoother.h")
    _, _, slices = ds.flat()
    Rinv = [invert_R(R) for R in R_list]
    problem = _centered_problem(ds, beta_tilde or fit_beta, cfg.smoother.h,
                                cfg.smoother.ridge_eps, Rinv, slices)
    return _sigma_a(problem, fit_beta.beta_reduced)


def _g_grid(problem: _Problem, beta: IndexParam):
    z = problem.X @ beta.beta
    grid = np.linspace(float(z.min()), float(z.max()), G_GRID_POINTS)
    ghat, _ = smooth_many(z, problem.y, grid, problem.h, problem.ridge, on_empty="nan")
    return grid, ghat


def _finish_fit(problem, beta_red, converged, its, fnorm, trace, h, free=None) -> FitResult:
    beta = embed(beta_red, problem.r)
    sigma = _sigma_a(problem, beta_red, free=free)
    se = np.sqrt(np.maximum(np.diag(sigma), 0.0) / problem.n)
    return FitResult(beta=beta, converged=converged, iterations=its,
                     final_residual_norm=fnorm, sigma_a=sigma, se=se,
                     g_grid=_g_grid(problem, beta), h=h, trace=trace)


def solve_bc_gee(ds: ClusteredDataset, spec: WorkingCorrelationSpec,
                 beta_tilde: IndexParam, cfg: GeeConfig | None = None,
                 context: BcContext | None = None) -> FitResult:
    """Solve the bias-corrected estimating equations anchored at beta_tilde."""
    cfg = cfg or GeeConfig()
    ctx = context or prepare_bc(ds, spec, beta_tilde, cfg)
    beta_red, converged, its, fnorm, trace, _ = _solve_newton(
        ctx.problem, beta_tilde.beta_reduced, cfg)
    return _finish_fit(ctx.problem, beta_red, converged, its, fnorm, trace, ctx.h)
