"""Working covariance/correlation matrices for the estimating equations.

Supported kinds: identity, exchangeable(alpha), time_power(alpha) with
entries ``alpha ** |t_j - t_k|``, pooled_residual (a common covariance
estimated from initial-fit residuals, clusters of size m using its leading
m x m principal submatrix), and fixed (one matrix per cluster).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Cluster
from .errors import ConditioningError, ConfigError, EstimationError

KINDS = ("identity", "exchangeable", "time_power", "pooled_residual", "fixed")

# Estimated time-power parameters are clipped into [0, ALPHA_MAX] to keep
# the working matrices positive definite.
ALPHA_MAX = 0.99


@dataclass
class WorkingCorrelationSpec:
    """Declarative choice of the per-cluster working matrix R_i."""

    kind: str = "identity"
    alpha: float | None = None
    pooled: np.ndarray | None = None
    fixed: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown correlation kind '{self.kind}'")
        if self.kind == "fixed" and not self.fixed:
            raise ConfigError("fixed correlation needs one matrix per cluster")


@dataclass
class ResidualSet:
    """Per-cluster residual vectors from the working-independence fit."""

    residuals: list[np.ndarray]
    times: list[np.ndarray] = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [len(e) for e in self.residuals]


def build_R(spec: WorkingCorrelationSpec, cluster: Cluster, position: int | None = None) -> np.ndarray:
    """Working matrix for one cluster; always symmetric and checked PD."""
    m = cluster.m
    if spec.kind == "identity":
        R = np.eye(m)
    elif spec.kind == "exchangeable":
        if spec.alpha is None:
            raise ConfigError("exchangeable correlation needs alpha")
        a = float(spec.alpha)
        if m > 1 and not (-1.0 / (m - 1) < a < 1.0):
            raise ConfigError(f"exchangeable alpha {a} invalid for cluster size {m}")
        R = np.full((m, m), a)
        np.fill_diagonal(R, 1.0)
    elif spec.kind == "time_power":
        if spec.alpha is None:
            raise ConfigError("time_power correlation needs alpha (give one or estimate it)")
        a = float(spec.alpha)
        if not 0.0 <= a < 1.0:
            raise ConfigError(f"time_power alpha {a} outside [0, 1)")
        t = cluster.times if cluster.times is not None else np.arange(1.0, m + 1.0)
        gaps = np.abs(t[:, None] - t[None, :])
        R = a ** gaps
    elif spec.kind == "pooled_residual":
        if spec.pooled is None:
            raise ConfigError("pooled_residual spec has no pooled estimate attached")
        if spec.pooled.shape[0] < m:
            raise ConditioningError(
                f"cluster {cluster.id}: size {m} exceeds pooled estimate of size {spec.pooled.shape[0]}")
        R = np.array(spec.pooled[:m, :m])
    else:  # fixed
        if position is None:
            raise ConfigError("fixed correlation needs the cluster position")
        R = np.array(spec.fixed[position], dtype=float)
        if R.shape != (m, m):
            raise ConfigError(f"cluster {cluster.id}: fixed matrix shape {R.shape} != ({m}, {m})")
    R = 0.5 * (R + R.T)
    if np.linalg.eigvalsh(R).min() <= 0:
        raise ConditioningError(f"cluster {cluster.id}: working matrix is not positive definite")
    return R


def estimate_pooled_sigma(res: ResidualSet) -> np.ndarray:
    """Pooled residual covariance, averaging eps_a * eps_b over the clusters
    long enough to contain both positions."""
    sizes = res.sizes
    if not sizes:
        raise EstimationError("no residual vectors")
    m_max = max(sizes)
    acc = np.zeros((m_max, m_max))
    cnt = np.zeros((m_max, m_max))
    for e in res.residuals:
        m = len(e)
        acc[:m, :m] += np.outer(e, e)
        cnt[:m, :m] += 1.0
    if np.any(cnt == 0):
        a, b = np.argwhere(cnt == 0)[0]
        raise EstimationError(f"no cluster covers positions ({a + 1}, {b + 1})")
    return acc / cnt


def repair_pooled(sigma: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Add eps * I when the pooled estimate is not positive definite."""
    if np.linalg.eigvalsh(0.5 * (sigma + sigma.T)).min() <= 0:
        return sigma + eps * np.eye(sigma.shape[0])
    return sigma


def estimate_alpha_moments(res: ResidualSet, times: list[np.ndarray] | None = None) -> float:
    """Moment estimate of the time-power parameter.

    Residuals are standardized by pooled per-position standard deviations;
    for each position pair the pooled cross-moment ``corr`` and mean time
    gap feed ``alpha = exp(sum log|corr| / sum gap)``, clipped to
    [0, 0.99].
    """
    sizes = res.sizes
    if not sizes or max(sizes) < 2:
        raise EstimationError("no within-cluster pairs to estimate alpha from")
    if times is None:
        times = [np.arange(1.0, m + 1.0) for m in sizes]
    m_max = max(sizes)

    sd = np.zeros(m_max)
    cnt = np.zeros(m_max)
    for e in res.residuals:
        sd[:len(e)] += e * e
        cnt[:len(e)] += 1.0
    sd = np.sqrt(sd / cnt)
    if np.any(sd == 0):
        raise EstimationError("zero residual variance at some within-cluster position")

    log_sum = 0.0
    gap_sum = 0.0
    for k in range(m_max - 1):
        for l in range(k + 1, m_max):
            cross, gaps, n_kl = 0.0, 0.0, 0
            for e, t in zip(res.residuals, times):
                if len(e) > l:
                    cross += (e[k] / sd[k]) * (e[l] / sd[l])
                    gaps += abs(t[k] - t[l])
                    n_kl += 1
            if n_kl == 0:
                continue
            corr = cross / n_kl
            if corr == 0.0:
                return 0.0
            log_sum += np.log(abs(corr))
            gap_sum += gaps / n_kl
    if gap_sum == 0.0:
        raise EstimationError("all within-cluster time gaps are zero")
    return float(np.clip(np.exp(log_sum / gap_sum), 0.0, ALPHA_MAX))


def invert_R(R: np.ndarray) -> np.ndarray:
    """Inverse of a small symmetric matrix via its eigendecomposition.

    Raises ConditioningError when the condition number exceeds 1e12.
    """
    R = np.asarray(R, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (R + R.T))
    amax, amin = np.abs(vals).max(), np.abs(vals).min()
    if amin == 0.0 or amax / amin > 1e12:
        raise ConditioningError(f"matrix condition number {amax / max(amin, 1e-300):.3g} exceeds 1e12")
    inv = (vecs / vals) @ vecs.T
    return 0.5 * (inv + inv.T)
