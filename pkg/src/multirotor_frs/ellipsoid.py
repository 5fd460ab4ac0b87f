"""Ellipsoid algebra.

An ellipsoid is stored as ``E(c, K) = {x | (x - c)^T K (x - c) <= 1}`` with a
symmetric positive-definite *forward* shape ``K``.  Several operations work on
inverse shapes ``Q = K^{-1}`` (Minkowski sums are naturally expressed there);
those functions say so in their name or docstring and the caller converts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import EmptyIntersectionError, NotPositiveDefiniteError, NumericalFault

_EIG_FLOOR = 1e-14


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky."""
    try:
        c = scipy.linalg.cho_factor(a, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("matrix is not positive definite") from exc
    inv = scipy.linalg.cho_solve(c, np.eye(a.shape[0]), check_finite=False)
    return _symmetrize(inv)


@dataclass(frozen=True)
class Ellipsoid:
    """Nondegenerate ellipsoid ``{x | (x - center)^T shape (x - center) <= 1}``."""

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        c = np.array(self.center, dtype=float).reshape(-1)
        k = np.array(self.shape, dtype=float)
        if k.shape != (c.size, c.size):
            raise ValueError(f"shape matrix {k.shape} does not match center of size {c.size}")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(k))):
            raise NumericalFault("ellipsoid has non-finite entries")
        k = _symmetrize(k)
        eig = np.linalg.eigvalsh(k)
        if eig[0] <= _EIG_FLOOR * max(eig[-1], 0.0) or eig[-1] <= 0.0:
            raise NotPositiveDefiniteError(
                f"shape matrix not positive definite (eigenvalues {eig[0]:.3e} .. {eig[-1]:.3e})"
            )
        c.setflags(write=False)
        k.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", k)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def shape_inverse(self) -> np.ndarray:
        return spd_inverse(self.shape)

    @classmethod
    def from_inverse(cls, center, shape_inverse) -> "Ellipsoid":
        """Build from the inverse shape ``Q`` (semi-axes are sqrt of eig(Q))."""
        return cls(center, spd_inverse(_symmetrize(np.asarray(shape_inverse, dtype=float))))

    def __contains__(self, x) -> bool:
        return contains(self, x)


@dataclass(frozen=True)
class Cylinder:
    """Degenerate ellipsoid: PSD shape, unbounded along its null space.

    Produced by :func:`propagate_to_space`; only meaningful as the second
    argument of :func:`fuse_intersection`.
    """

    center: np.ndarray
    shape: np.ndarray


def contains(e: Ellipsoid, x, slack: float = 0.0) -> bool:
    """Membership test ``(x - c)^T K (x - c) <= 1 + slack``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != e.dim:
        raise ValueError(f"point of dimension {x.size} tested against {e.dim}-dim ellipsoid")
    if slack < 0:
        raise ValueError("slack must be nonnegative")
    r = x - e.center
    return bool(r @ e.shape @ r <= 1.0 + slack)


def quadratic_form(e: Ellipsoid, points) -> np.ndarray:
    """Vectorized ``(x - c)^T K (x - c)`` for points stacked along the last axis."""
    r = np.asarray(points, dtype=float) - e.center
    return np.einsum("...i,ij,...j->...", r, e.shape, r)


def support(e: Ellipsoid, direction) -> float:
    """Support function ``max_{x in e} direction^T x``."""
    nu = np.asarray(direction, dtype=float).reshape(-1)
    if not np.any(nu):
        raise ValueError("support direction must be nonzero")
    q_nu = scipy.linalg.cho_solve(scipy.linalg.cho_factor(e.shape), nu)
    return float(nu @ e.center + np.sqrt(nu @ q_nu))


def min_trace_sum(shapes_inverse: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Minimal-trace outer ellipsoid of a Minkowski sum of origin-centered ellipsoids.

    Inputs and output are inverse shapes.  Uses weights
    ``a_i = sqrt(tr Q_i) / sum_j sqrt(tr Q_j)`` and returns ``sum_i Q_i / a_i``.
    """
    qs = np.asarray(shapes_inverse, dtype=float)
    if qs.ndim == 2:
        qs = qs[None]
    if qs.shape[0] == 0:
        raise ValueError("need at least one summand")
    traces = np.trace(qs, axis1=1, axis2=2)
    if np.any(traces <= 0.0):
        raise ValueError("every summand must have positive trace")
    roots = np.sqrt(traces)
    weights = roots / roots.sum()
    return _symmetrize(np.einsum("k,kij->ij", 1.0 / weights, qs))


def fuse_intersection(e1: Ellipsoid, e2: Ellipsoid | Cylinder, b: float) -> Ellipsoid:
    """Outer ellipsoid of ``e1 ∩ e2`` from the convex combination of their quadratic forms.

    ``N = b K1 + (1-b) K2``, ``c = N^{-1}(b K1 c1 + (1-b) K2 c2)``,
    ``delta = b c1'K1c1 + (1-b) c2'K2c2 - c'Nc`` and the result is
    ``E(c, N / (1 - delta))``.  ``e2`` may be degenerate (a :class:`Cylinder`).
    """
    if not 0.0 <= b <= 1.0:
        raise ValueError("fusion weight b must lie in [0, 1]")
    c1, k1 = e1.center, e1.shape
    c2, k2 = np.asarray(e2.center, dtype=float), np.asarray(e2.shape, dtype=float)
    if c2.shape != c1.shape:
        raise ValueError("ellipsoid dimensions differ")
    n = b * k1 + (1.0 - b) * k2
    rhs = b * (k1 @ c1) + (1.0 - b) * (k2 @ c2)
    try:
        cf = scipy.linalg.cho_factor(n, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("fused quadratic form is not positive definite") from exc
    c = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
    delta = b * (c1 @ k1 @ c1) + (1.0 - b) * (c2 @ k2 @ c2) - c @ n @ c
    if delta >= 1.0:
        raise EmptyIntersectionError(f"fusion delta = {delta:.6g} >= 1")
    return Ellipsoid(c, n / (1.0 - delta))


def propagate_to_space(e: Ellipsoid, target_dim: int, embedded_indices: Sequence[int]) -> Cylinder:
    """Embed ``e`` into ``target_dim`` coordinates, unconstrained along the others."""
    idx = np.asarray(embedded_indices, dtype=int)
    if idx.size != e.dim:
        raise ValueError("need one target index per ellipsoid coordinate")
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("embedded indices must be distinct")
    if np.any(idx < 0) or np.any(idx >= target_dim):
        raise IndexError(f"embedded index out of range for dimension {target_dim}")
    center = np.zeros(target_dim)
    center[idx] = e.center
    shape = np.zeros((target_dim, target_dim))
    shape[np.ix_(idx, idx)] = e.shape
    return Cylinder(center, shape)


def project(e: Ellipsoid, kept_indices: Sequence[int]) -> Ellipsoid:
    """Exact shadow of ``e`` on the kept coordinates (Schur complement of the shape)."""
    kept = np.asarray(kept_indices, dtype=int)
    if kept.size == 0 or len(set(kept.tolist())) != kept.size:
        raise ValueError("kept indices must be nonempty and distinct")
    if np.any(kept < 0) or np.any(kept >= e.dim):
        raise IndexError("kept index out of range")
    rest = np.setdiff1d(np.arange(e.dim), kept)
    k = e.shape
    m11 = k[np.ix_(kept, kept)]
    if rest.size == 0:
        return Ellipsoid(e.center[kept], m11)
    m12 = k[np.ix_(kept, rest)]
    m22 = k[np.ix_(rest, rest)]
    try:
        cf = scipy.linalg.cho_factor(m22, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("eliminated block is singular") from exc
    schur = m11 - m12 @ scipy.linalg.cho_solve(cf, m12.T, check_finite=False)
    return Ellipsoid(e.center[kept], schur)


def linear_map(e: Ellipsoid, t: np.ndarray, t_inv: np.ndarray | None = None) -> Ellipsoid:
    """Image ``{T x | x in e}`` of ``e`` under an invertible map.

    ``t_inv`` may be supplied when the inverse is already known (state
    transition matrices are integrated together with their inverses).
    """
    t = np.asarray(t, dtype=float)
    if t_inv is None:
        if np.linalg.cond(t) > 1e14:
            raise NumericalFault("linear map is singular")
        t_inv = np.linalg.inv(t)
    return Ellipsoid(t @ e.center, t_inv.T @ e.shape @ t_inv)


def min_trace_box_ellipsoid(d_max) -> np.ndarray:
    """Diagonal ``Lambda`` whose ellipsoid ``E(0, Lambda)`` covers the box ``|d_i| <= d_max_i``.

    Among diagonal shapes with ``sum lambda_i d_max_i^2 <= 1`` this minimizes
    ``trace(Lambda^{-1})``; the closed form is
    ``lambda_i = 1 / (d_max_i * sum_j d_max_j)``.
    """
    d = np.asarray(d_max, dtype=float).reshape(-1)
    if np.any(d <= 0.0):
        raise ValueError("box half-widths must be strictly positive")
    return np.diag(1.0 / (d * d.sum()))
