"""Local-linear smoothing of the link function along the index.

For index values ``z_i = x_i' beta`` and a point ``t``, the local-linear
fit minimizes ``sum_i (y_i - a - b (z_i - t))^2 K_h(z_i - t)`` and returns
``ghat(t) = a``, ``gprime(t) = b``. With the moment sums

    S_l(t) = (1/N) sum_i (z_i - t)^l K_h(z_i - t),   l = 0, 1, 2,

the solution has closed-form weights

    U_i  = K_h(z_i - t) (S_2 - (z_i - t) S_1)
    Ut_i = K_h(z_i - t) ((z_i - t) S_0 - S_1)
    ghat = sum U_i y_i / sum U_i,   gprime = sum Ut_i y_i / sum U_i.

The same ``U`` weights give conditional covariate means along the index.
The kernel is Epanechnikov, K(u) = 0.75 (1 - u^2) on |u| <= 1, and
``K_h(d) = K(d/h)/h``.

Because the kernel is a quadratic polynomial on a window, every weighted
sum above is a polynomial in windowed power sums ``sum z^k`` (k <= 4) and
``sum z^k y`` (k <= 3), so evaluation uses sorted prefix sums instead of an
N x N kernel matrix.

The shared denominator ``sum U_i = N (S_0 S_2 - S_1^2)`` is nonnegative by
Cauchy-Schwarz; when it falls to ``ridge_eps * N`` or below (degenerate
window) that amount is added so division stays safe. Otherwise weights are
untouched and sum to one exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClusteredDataset
from .errors import BandwidthSelectionError, OutOfSupportError
from .geometry import IndexParam


@dataclass
class SmootherConfig:
    """Bandwidth and denominator guard for the local-linear smoother.

    ``h=None`` lets the caller pick a bandwidth (pilot rule or CV) before
    the smoother is used.
    """

    h: float | None = None
    ridge_eps: float = 1e-10

    def __post_init__(self):
        if self.h is not None and self.h <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.h}")
        if self.ridge_eps < 0:
            raise ValueError("ridge_eps must be nonnegative")


@dataclass(frozen=True)
class SmootherFit:
    """Dataset flattened along one index direction, ready for evaluation."""

    dataset: ClusteredDataset
    beta: np.ndarray
    X: np.ndarray
    y: np.ndarray
    index_values: np.ndarray


def make_smoother_fit(ds: ClusteredDataset, beta) -> SmootherFit:
    beta_vec = beta.beta if isinstance(beta, IndexParam) else np.asarray(beta, dtype=float)
    X, y, _ = ds.flat()
    z = X @ beta_vec
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite index values")
    return SmootherFit(dataset=ds, beta=beta_vec, X=X, y=y, index_values=z)


def kernel_eval(u: float) -> float:
    """Epanechnikov kernel, 0.75 (1 - u^2) on |u| <= 1 and 0 outside."""
    u = float(u)
    return 0.75 * (1.0 - u * u) if abs(u) <= 1.0 else 0.0


def local_moments(t: float, fit: SmootherFit, cfg: SmootherConfig) -> tuple[float, float, float]:
    """Kernel moment sums S_0, S_1, S_2 at ``t`` by direct summation."""
    d = fit.index_values - t
    u = d / cfg.h
    kh = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u) / cfg.h, 0.0)
    N = len(d)
    return (float(kh.sum() / N), float((kh * d).sum() / N), float((kh * d * d).sum() / N))


class _SortedIndex:
    """Sorted index values with prefix sums of z^k, z^k y and z^k X."""

    def __init__(self, z, y, X=None):
        self.order = np.argsort(z, kind="stable")
        zs = z[self.order]
        ys = y[self.order]
        self.zs = zs
        self.ys = ys
        self.N = len(zs)
        pows = [np.ones_like(zs)]
        for _ in range(4):
            pows.append(pows[-1] * zs)
        self.P = np.stack([_prefix(p) for p in pows])          # (5, N+1)
        self.Q = np.stack([_prefix(p * ys) for p in pows[:4]])  # (4, N+1)
        if X is not None:
            Xs = X[self.order]
            self.Xs = Xs
            self.R = np.stack([_prefix_cols(pows[k][:, None] * Xs) for k in range(4)])
        else:
            self.Xs = None
            self.R = None

    def window(self, t, h):
        lo = np.searchsorted(self.zs, t - h, side="left")
        hi = np.searchsorted(self.zs, t + h, side="right")
        return lo, hi


def _prefix(a):
    out = np.empty(len(a) + 1)
    out[0] = 0.0
    np.cumsum(a, out=out[1:])
    return out


def _prefix_cols(a):
    out = np.zeros((a.shape[0] + 1, a.shape[1]))
    np.cumsum(a, axis=0, out=out[1:])
    return out


def _windowed(prefix, lo, hi):
    return prefix[:, hi] - prefix[:, lo]


def _shifted_moments(p, t):
    """Sums of (z - t)^k over a window from raw power sums p[k] = sum z^k."""
    t2 = t * t
    m0 = p[0]
    m1 = p[1] - t * p[0]
    m2 = p[2] - 2.0 * t * p[1] + t2 * p[0]
    m3 = p[3] - 3.0 * t * p[2] + 3.0 * t2 * p[1] - t2 * t * p[0]
    m4 = p[4] - 4.0 * t * p[3] + 6.0 * t2 * p[2] - 4.0 * t2 * t * p[1] + t2 * t2 * p[0]
    return m0, m1, m2, m3, m4


def _kernel_moments(p, t, h):
    """M_l = sum (z-t)^l K_h(z-t) for l = 0..2 from raw power sums."""
    m0, m1, m2, m3, m4 = _shifted_moments(p, t)
    a = 0.75 / h
    ih2 = 1.0 / (h * h)
    return a * (m0 - m2 * ih2), a * (m1 - m3 * ih2), a * (m2 - m4 * ih2)


def _kernel_sums_01(q, t, h):
    """T_l = sum (z-t)^l K_h(z-t) v for l = 0, 1 from power sums of z^k v."""
    t2 = t * t
    s0 = q[0]
    s1 = q[1] - t * q[0]
    s2 = q[2] - 2.0 * t * q[1] + t2 * q[0]
    s3 = q[3] - 3.0 * t * q[2] + 3.0 * t2 * q[1] - t2 * t * q[0]
    a = 0.75 / h
    ih2 = 1.0 / (h * h)
    return a * (s0 - s2 * ih2), a * (s1 - s3 * ih2)


def smooth_many(z, y, t_eval, h, ridge_eps=1e-10, X=None, on_empty="raise"):
    """Evaluate ghat and gprime (and optionally conditional covariate means)
    at every point of ``t_eval``.

    Returns ``(ghat, gprime)`` or ``(ghat, gprime, cond_means)`` with
    ``cond_means[k, q] = sum_i W_i(t_k) X[i, q]``. Points with no kernel
    mass raise OutOfSupportError, or yield NaN with ``on_empty="nan"``.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    t = np.atleast_1d(np.asarray(t_eval, dtype=float))
    idx = _SortedIndex(z, y, X=X)
    lo, hi = idx.window(t, h)
    empty = hi == lo
    if np.any(empty):
        if on_empty != "nan":
            bad = t[int(np.argmax(empty))]
            raise OutOfSupportError(f"no kernel mass at t={bad:.6g} (bandwidth {h:.6g})")
    N = idx.N
    M0, M1, M2 = _kernel_moments(_windowed(idx.P, lo, hi), t, h)
    T0, T1 = _kernel_sums_01(_windowed(idx.Q, lo, hi), t, h)
    denomU = (M0 * M2 - M1 * M1) / N
    guard = ridge_eps * N
    # A window whose index values barely spread (denominator at or below
    # the guard) cannot support a line fit; fall back to the local-constant
    # estimate there instead of dividing by a ridged zero.
    degenerate = denomU <= guard
    denom = np.where(degenerate, 1.0, denomU)
    ghat = (M2 * T0 - M1 * T1) / (N * denom)
    gprime = (M0 * T1 - M1 * T0) / (N * denom)
    if np.any(degenerate):
        with np.errstate(invalid="ignore", divide="ignore"):
            nw = T0 / M0
        ghat = np.where(degenerate, nw, ghat)
        gprime = np.where(degenerate, 0.0, gprime)
    cond = None
    if X is not None:
        R = idx.R[:, hi, :] - idx.R[:, lo, :]                  # (4, K, p)
        C0, C1 = _kernel_sums_01(R, t[:, None], h)
        cond = (M2[:, None] * C0 - M1[:, None] * C1) / (N * denom[:, None])
        if np.any(degenerate):
            with np.errstate(invalid="ignore", divide="ignore"):
                cond = np.where(degenerate[:, None], C0 / M0[:, None], cond)
    # Tiny windows are dominated by cancellation in the prefix-sum route;
    # recompute those few points with explicit kernel weights.
    for k in np.flatnonzero((hi - lo) <= 3):
        gh, gp, cm = _direct_point(idx, t[k], lo[k], hi[k], h, ridge_eps)
        ghat[k], gprime[k] = gh, gp
        if cond is not None:
            cond[k] = cm
    if np.any(empty):
        ghat[empty] = np.nan
        gprime[empty] = np.nan
        if cond is not None:
            cond[empty] = np.nan
    if cond is None:
        return ghat, gprime
    return ghat, gprime, cond


def _direct_point(idx: _SortedIndex, t, lo, hi, h, ridge_eps, skip_pos=None):
    """Exact local-linear evaluation on one (small) window.

    ``skip_pos`` drops one observation (sorted position) from the sums.
    """
    N = idx.N
    zw = idx.zs[lo:hi]
    yw = idx.ys[lo:hi]
    d = zw - t
    u = d / h
    kh = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u) / h, 0.0)
    if skip_pos is not None and lo <= skip_pos < hi:
        kh = kh.copy()
        kh[skip_pos - lo] = 0.0
    S1 = (kh * d).sum() / N
    S2 = (kh * d * d).sum() / N
    U = kh * (S2 - d * S1)
    denom = U.sum()
    mass = kh.sum()
    if denom <= ridge_eps * N:
        # degenerate window: local-constant fallback
        if mass <= 0.0:
            nan_cond = None if idx.Xs is None else np.full(idx.Xs.shape[1], np.nan)
            return float("nan"), float("nan"), nan_cond
        gh = float(kh @ yw) / mass
        cond = None if idx.Xs is None else (kh @ idx.Xs[lo:hi]) / mass
        return gh, 0.0, cond
    Ut = kh * (d * (mass / N) - S1)
    gh = float(U @ yw) / denom
    gp = float(Ut @ yw) / denom
    if idx.Xs is None:
        return gh, gp, None
    return gh, gp, (U @ idx.Xs[lo:hi]) / denom


def estimate_g(t: float, fit: SmootherFit, cfg: SmootherConfig) -> tuple[float, float]:
    """Local-linear estimates (ghat(t), gprime(t))."""
    gh, gp = smooth_many(fit.index_values, fit.y, [t], cfg.h, cfg.ridge_eps)
    return float(gh[0]), float(gp[0])


def estimate_cond_mean(q: int, t: float, fit: SmootherFit, cfg: SmootherConfig) -> float:
    """Smoothed conditional mean of covariate ``q`` (0-based) at index value ``t``."""
    _, _, cond = smooth_many(fit.index_values, fit.y, [t], cfg.h, cfg.ridge_eps,
                             X=fit.X[:, [q]])
    return float(cond[0, 0])


def loo_cv_score(z, y, h, ridge_eps=1e-10) -> tuple[float, int]:
    """Leave-one-observation-out CV score at bandwidth ``h``.

    Each observation is predicted by the smoother fitted without it; rows
    whose leave-one-out window carries no kernel mass are skipped. Returns
    ``(sum of squared prediction errors, number skipped)``.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    idx = _SortedIndex(z, y)
    t = idx.zs
    lo, hi = idx.window(t, h)
    N = idx.N
    M0, M1, M2 = _kernel_moments(_windowed(idx.P, lo, hi), t, h)
    T0, T1 = _kernel_sums_01(_windowed(idx.Q, lo, hi), t, h)
    # The held-out point sits at offset 0: it contributes K_h(0) = 0.75/h
    # to M_0 and 0.75/h * y to T_0, nothing to the higher moments.
    a = 0.75 / h
    M0 = M0 - a
    T0 = T0 - a * idx.ys
    denomU = (M0 * M2 - M1 * M1) / N
    guard = ridge_eps * N
    degenerate = denomU <= guard
    denom = np.where(degenerate, 1.0, denomU)
    ghat = (M2 * T0 - M1 * T1) / (N * denom)
    if np.any(degenerate):
        with np.errstate(invalid="ignore", divide="ignore"):
            ghat = np.where(degenerate, np.where(M0 > 0, T0 / np.where(M0 > 0, M0, 1.0), 0.0), ghat)
    for k in np.flatnonzero((hi - lo) <= 4):
        ghat[k] = _direct_point(idx, t[k], lo[k], hi[k], h, ridge_eps, skip_pos=k)[0]
    keep = (hi - lo) > 1
    resid = idx.ys[keep] - ghat[keep]
    return float(resid @ resid), int(N - keep.sum())


def pilot_bandwidth(ds: ClusteredDataset, beta) -> float:
    """Rule-of-thumb bandwidth sd(index values) * n^(-1/5)."""
    fit = make_smoother_fit(ds, beta)
    sd = float(np.std(fit.index_values))
    if sd == 0.0:
        raise BandwidthSelectionError("index values are constant; no bandwidth scale")
    return sd * ds.n ** (-0.2)


def default_cv_grid(ds: ClusteredDataset, beta, size: int = 20) -> np.ndarray:
    """Log-spaced grid spanning [0.5, 2] times the pilot bandwidth."""
    h0 = pilot_bandwidth(ds, beta)
    return np.geomspace(0.5 * h0, 2.0 * h0, size)


def cv_bandwidth(ds: ClusteredDataset, beta, grid, ridge_eps: float = 1e-10) -> float:
    """Bandwidth minimizing the leave-one-observation-out CV error.

    Skipped observations (empty leave-one-out window) are counted, and
    bandwidths are ranked by the mean squared prediction error over the
    observations actually predicted; a raw-sum comparison would favor
    bandwidths that skip more observations. Bandwidths at which every
    observation is skipped are excluded; score ties (within a tiny
    absolute slack for float noise) go to the smaller bandwidth.
    """
    grid = np.asarray(list(grid), dtype=float)
    if grid.size == 0 or np.any(grid <= 0):
        raise BandwidthSelectionError("bandwidth grid must be nonempty and positive")
    fit = make_smoother_fit(ds, beta)
    N = len(fit.y)
    scored = []
    for h in np.sort(grid):
        score, skipped = loo_cv_score(fit.index_values, fit.y, h, ridge_eps)
        if skipped < N:
            scored.append((float(h), score / (N - skipped)))
    if not scored:
        raise BandwidthSelectionError("every bandwidth in the grid skipped all observations")
    best = min(s for _, s in scored)
    tol = 1e-10 * (1.0 + best)
    return min(h for h, s in scored if s <= best + tol)
