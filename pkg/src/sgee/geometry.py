"""Remove-one-component parameterization of the unit sphere.

The unit-norm index vector ``beta`` (with ``beta[r] > 0``) is charted by
the reduced vector ``beta_reduced`` obtained by deleting component ``r``;
the deleted component is recovered as ``sqrt(1 - ||beta_reduced||^2)``.
Indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ChartDomainError, DegenerateInputError

# Iterates whose reduced norm reaches this bound leave the chart and are
# projected back to radius 1 - BOUNDARY_PROJECT by the solvers.
BOUNDARY_GUARD = 1.0 - 1e-10
BOUNDARY_PROJECT = 1e-8


@dataclass(frozen=True)
class IndexParam:
    """Unit-norm index vector with its removed component and reduced form."""

    beta: np.ndarray
    r: int
    beta_reduced: np.ndarray

    @property
    def p(self) -> int:
        return len(self.beta)


def embed(beta_reduced, r: int) -> IndexParam:
    """Lift a reduced vector back to the sphere, inserting component ``r``.

    Raises ChartDomainError when ``||beta_reduced|| >= 1``.
    """
    beta_reduced = np.asarray(beta_reduced, dtype=float).ravel()
    sq = float(beta_reduced @ beta_reduced)
    if sq >= 1.0:
        raise ChartDomainError(f"reduced vector norm {np.sqrt(sq):.6g} >= 1 leaves the chart")
    p = len(beta_reduced) + 1
    if not 0 <= r < p:
        raise ChartDomainError(f"removed index {r} out of range for p={p}")
    beta = np.empty(p)
    beta[:r] = beta_reduced[:r]
    beta[r] = np.sqrt(1.0 - sq)
    beta[r + 1:] = beta_reduced[r:]
    return IndexParam(beta=beta, r=r, beta_reduced=beta_reduced.copy())


def jacobian(beta_reduced, r: int) -> np.ndarray:
    """d beta / d beta_reduced, a p x (p-1) matrix.

    Rows other than ``r`` select the matching reduced coordinate; row ``r``
    is ``-beta_reduced / sqrt(1 - ||beta_reduced||^2)``.
    """
    beta_reduced = np.asarray(beta_reduced, dtype=float).ravel()
    sq = float(beta_reduced @ beta_reduced)
    if sq >= 1.0:
        raise ChartDomainError(f"reduced vector norm {np.sqrt(sq):.6g} >= 1 leaves the chart")
    k = len(beta_reduced)
    J = np.zeros((k + 1, k))
    J[:r, :r] = np.eye(r)
    J[r + 1:, r:] = np.eye(k - r)
    J[r, :] = -beta_reduced / np.sqrt(1.0 - sq)
    return J


def choose_r(beta_init) -> tuple[int, np.ndarray]:
    """Pick the removed component (largest |entry|, ties to the smallest index)
    and orient the vector so that component is positive."""
    beta_init = np.asarray(beta_init, dtype=float).ravel()
    if not np.any(beta_init != 0.0):
        raise DegenerateInputError("cannot choose removed component of a zero vector")
    r = int(np.argmax(np.abs(beta_init)))
    sign = 1.0 if beta_init[r] > 0 else -1.0
    return r, beta_init * sign


def reduce(beta, r: int) -> np.ndarray:
    """Delete component ``r`` from a unit vector with ``beta[r] > 0``."""
    beta = np.asarray(beta, dtype=float).ravel()
    if beta[r] <= 0:
        raise ChartDomainError(f"component {r} must be positive, found {beta[r]:.6g}")
    nrm = np.linalg.norm(beta)
    if abs(nrm - 1.0) > 1e-8:
        raise ChartDomainError(f"vector norm {nrm:.12g} is not 1")
    return np.delete(beta, r)


def project_into_chart(beta_reduced) -> tuple[np.ndarray, bool]:
    """Pull a reduced iterate back inside the chart if it reached the boundary.

    Returns the (possibly rescaled) vector and whether a projection happened.
    """
    beta_reduced = np.asarray(beta_reduced, dtype=float)
    nrm = np.linalg.norm(beta_reduced)
    if nrm >= BOUNDARY_GUARD:
        return beta_reduced * ((1.0 - BOUNDARY_PROJECT) / nrm), True
    return beta_reduced, False
