"""Dense low-rank kernels: SVD, singular value thresholding and projections
onto the nuclear-norm ball, an elementwise box, and their intersection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

# singular values below this are treated as exact zeros
SV_FLOOR = 1e-12


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return self.vt.T

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


@dataclass(frozen=True)
class ConstraintSet:
    """Feasible set {nuclear norm <= radius} intersected with a box.

    ``upper`` applies to every cell unless ``upper_mask_only`` is set, in
    which case it only applies where the mask passed to the projection is 0
    and ``global_upper`` (if any) caps the remaining cells.
    """

    radius: float
    lower: float = -np.inf
    upper: float = np.inf
    upper_mask_only: bool = False
    global_upper: Optional[float] = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"nuclear radius must be positive, got {self.radius}")
        if not self.lower < self.upper:
            raise ValueError("lower bound must be below upper bound")
        if self.global_upper is not None and not self.lower < self.global_upper:
            raise ValueError("lower bound must be below the global cap")

    @classmethod
    def from_scale(cls, tau: float, shape, **kw) -> "ConstraintSet":
        m, n = shape
        return cls(radius=tau * np.sqrt(m * n), **kw)

    def bounds(self, shape, mask: Optional[np.ndarray] = None):
        """Elementwise (lower, upper) arrays for a matrix of ``shape``."""
        lo = np.full(shape, self.lower, dtype=float)
        if self.upper_mask_only:
            if mask is None:
                raise ValueError("constraint set needs a mask")
            cap = np.inf if self.global_upper is None else self.global_upper
            hi = np.where(np.asarray(mask) == 0, self.upper, cap)
        else:
            hi = np.full(shape, self.upper, dtype=float)
        return lo, hi


class ProjectionError(RuntimeError):
    def __init__(self, msg, last_iterate, nuclear_violation, box_violation):
        super().__init__(
            f"{msg} (nuclear violation {nuclear_violation:.3e}, box violation {box_violation:.3e})"
        )
        self.last_iterate = last_iterate
        self.nuclear_violation = nuclear_violation
        self.box_violation = box_violation


def svd(a) -> SvdFactors:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input has non-finite entries")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    s = np.where(s < SV_FLOOR, 0.0, s)
    return SvdFactors(u, s, vt)


def nuclear_norm(a) -> float:
    return float(np.sum(svd(a).s))


def svt(a, threshold: float) -> np.ndarray:
    """Proximal operator of ``threshold * ||.||_*``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    f = svd(a)
    s = np.maximum(f.s - threshold, 0.0)
    return (f.u * s) @ f.vt


def project_simplex_l1(s, radius: float) -> np.ndarray:
    """Project a nonnegative vector onto {x >= 0, sum(x) <= radius}."""
    s = np.asarray(s, dtype=float)
    if s.sum() <= radius:
        return s.copy()
    desc = np.sort(s)[::-1]
    css = np.cumsum(desc)
    k = np.arange(1, desc.size + 1)
    cond = desc - (css - radius) / k > 0
    rho = k[cond][-1]
    theta = (css[rho - 1] - radius) / rho
    return np.maximum(s - theta, 0.0)


def project_nuclear_ball(a, radius: float) -> np.ndarray:
    if radius <= 0:
        raise ValueError("radius must be positive")
    a = np.asarray(a, dtype=float)
    f = svd(a)
    if f.s.sum() <= radius:
        return a.copy()
    s = project_simplex_l1(f.s, radius)
    return (f.u * s) @ f.vt


def project_box(a, constraints: ConstraintSet, mask=None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    lo, hi = constraints.bounds(a.shape, mask)
    return np.clip(a, lo, hi)


def _violations(x, nuc_norm, constraints, lo, hi):
    nuc = max(nuc_norm - constraints.radius, 0.0)
    box = float(max(np.max(lo - x, initial=0.0), np.max(x - hi, initial=0.0)))
    return nuc, box


def project_intersection(
    a,
    constraints: ConstraintSet,
    mask=None,
    tol: float = 1e-9,
    max_iter: int = 100,
    feas_tol: float = 1e-7,
) -> np.ndarray:
    """Approximate Euclidean projection onto nuclear ball ∩ box (Dykstra).

    Iterates until successive iterates move by at most ``tol`` in Frobenius
    norm. If the box contains the origin the result is finally shrunk toward
    zero so the nuclear constraint holds exactly; otherwise a residual
    violation above ``feas_tol`` raises :class:`ProjectionError`.
    """
    a = np.asarray(a, dtype=float)
    lo, hi = constraints.bounds(a.shape, mask)
    radius = constraints.radius

    x = a.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(max_iter):
        f = svd(x + p)
        if f.s.sum() > radius:
            y = (f.u * project_simplex_l1(f.s, radius)) @ f.vt
        else:
            y = x + p
        p = x + p - y
        x_new = np.clip(y + q, lo, hi)
        q = y + q - x_new
        step = np.linalg.norm(x_new - x)
        x = x_new
        if step <= tol:
            break
        # box inactive after the first nuclear projection: y is the answer
        if not q.any() and np.array_equal(x, y):
            break

    nuc_norm = nuclear_norm(x)
    origin_inside = np.all(lo <= 0) and np.all(hi >= 0)
    if nuc_norm > radius and origin_inside:
        x = x * (radius / nuc_norm)
        nuc_norm = radius
    nuc, box = _violations(x, nuc_norm, constraints, lo, hi)
    if nuc > feas_tol * max(1.0, radius) or box > feas_tol:
        raise ProjectionError("projection did not reach feasibility", x, nuc, box)
    return x
