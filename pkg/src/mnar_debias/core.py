"""Matrix containers, masks and loss definitions.

Missing cells are tracked by an explicit boolean presence array; the value
stored at a missing cell is meaningless and never read.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, list]


class LossKind(str, Enum):
    MSE = "MSE"
    MAE = "MAE"


class EstimatorKind(str, Enum):
    OBSERVED = "observed"
    FULL = "full"
    IPS = "IPS"
    SNIPS = "SNIPS"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MaskMatrix:
    """Binary revelation indicators, 1 = revealed."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ValueError("mask must be two-dimensional")
        if not np.all((d == 0) | (d == 1)):
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "data", _frozen(d.astype(np.int8)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def bool(self) -> np.ndarray:
        return self.data.astype(bool)

    def rate(self) -> float:
        return float(self.data.mean())


@dataclass(frozen=True)
class ObservedMatrix:
    """Partially observed real matrix with an optional declared bound ``phi``."""

    values: np.ndarray
    present: np.ndarray
    phi: Optional[float] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        p = np.asarray(self.present, dtype=bool)
        if v.ndim != 2 or v.shape != p.shape:
            raise ValueError(f"values {v.shape} and presence {p.shape} must be matching 2-d arrays")
        v = np.where(p, v, 0.0)
        if not np.all(np.isfinite(v)):
            raise ValueError("observed values must be finite")
        if self.phi is not None and np.any(np.abs(v[p]) > self.phi):
            raise ValueError(f"observed value exceeds declared bound {self.phi}")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "present", _frozen(p))

    @classmethod
    def from_nan(cls, a, phi=None) -> "ObservedMatrix":
        a = np.asarray(a, dtype=float)
        return cls(np.nan_to_num(a), ~np.isnan(a), phi)

    @classmethod
    def complete(cls, a, phi=None) -> "ObservedMatrix":
        a = np.asarray(a, dtype=float)
        return cls(a, np.ones(a.shape, dtype=bool), phi)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(self.present.sum())

    @property
    def is_complete(self) -> bool:
        return bool(self.present.all())

    def mask(self) -> MaskMatrix:
        return MaskMatrix(self.present.astype(np.int8))

    def omega(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.present)

    def observed_values(self) -> np.ndarray:
        return self.values[self.present]

    def to_nan(self) -> np.ndarray:
        return np.where(self.present, self.values, np.nan)

    def restrict(self, keep) -> "ObservedMatrix":
        """Copy keeping only cells where ``keep`` is true (and already present)."""
        return ObservedMatrix(self.values, self.present & np.asarray(keep, bool), self.phi)


@dataclass(frozen=True)
class PropensityMatrix:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 2:
            raise ValueError("propensity matrix must be two-dimensional")
        if not np.all((d > 0) & (d <= 1)):
            raise ValueError("propensities must lie in (0, 1]")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def shape(self):
        return self.data.shape

    @property
    def p_min(self) -> float:
        return float(self.data.min())


@dataclass(frozen=True)
class CompletedMatrix:
    """Predictions clipped to ``[lo, hi]``; ``psi`` bounds every entry."""

    data: np.ndarray
    lo: float = -np.inf
    hi: float = np.inf

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("clip range must satisfy lo < hi")
        d = np.clip(np.asarray(self.data, dtype=float), self.lo, self.hi)
        if not np.all(np.isfinite(d)):
            raise ValueError("completed matrix has non-finite entries")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def shape(self):
        return self.data.shape

    @property
    def psi(self) -> float:
        if np.isfinite(self.lo) and np.isfinite(self.hi):
            return max(abs(self.lo), abs(self.hi))
        return float(np.abs(self.data).max())


@dataclass(frozen=True)
class LossReport:
    loss: LossKind
    estimator: EstimatorKind
    value: float
    n_entries: int
    denominator: float = field(default=float("nan"))

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError("loss value must be nonnegative")
        if self.n_entries <= 0:
            raise ValueError("loss needs at least one entry")

    def __float__(self):
        return self.value


def _arr(x) -> np.ndarray:
    if isinstance(x, (MaskMatrix, PropensityMatrix, CompletedMatrix)):
        return x.data
    return np.asarray(x, dtype=float)


def _obs(x) -> ObservedMatrix:
    if isinstance(x, ObservedMatrix):
        return x
    return ObservedMatrix.complete(x)


def _errors(s_hat: np.ndarray, x: np.ndarray, kind: LossKind) -> np.ndarray:
    d = s_hat - x
    return d * d if LossKind(kind) is LossKind.MSE else np.abs(d)


def _check_dims(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")


def observed_loss(s_hat, x, kind=LossKind.MSE) -> LossReport:
    s_hat, x = _arr(s_hat), _obs(x)
    _check_dims(s_hat, x.values)
    n = x.n_observed
    if n == 0:
        raise ValueError("no observed entries")
    err = _errors(s_hat[x.present], x.observed_values(), kind)
    return LossReport(LossKind(kind), EstimatorKind.OBSERVED, math.fsum(err) / n, n, float(n))


def full_loss(s_hat, x_star, kind=LossKind.MSE) -> LossReport:
    s_hat, x_star = _arr(s_hat), _obs(x_star)
    _check_dims(s_hat, x_star.values)
    if not x_star.is_complete:
        raise ValueError("full loss requires complete matrix")
    err = _errors(s_hat, x_star.values, kind)
    n = err.size
    return LossReport(LossKind(kind), EstimatorKind.FULL, math.fsum(err.ravel()) / n, n, float(n))


def _weighted_terms(s_hat, x, p_hat, kind):
    s_hat, x, p = _arr(s_hat), _obs(x), _arr(p_hat)
    _check_dims(s_hat, x.values, p)
    if x.n_observed == 0:
        raise ValueError("no observed entries")
    p_obs = p[x.present]
    if not np.all(p_obs > 0):
        raise ValueError("invalid propensity")
    err = _errors(s_hat[x.present], x.observed_values(), kind)
    return err / p_obs, 1.0 / p_obs, x


def ips_loss(s_hat, x, p_hat, kind=LossKind.MSE) -> LossReport:
    """Inverse-propensity-weighted loss, normalised by the total cell count."""
    terms, _, x = _weighted_terms(s_hat, x, p_hat, kind)
    mn = x.values.size
    return LossReport(LossKind(kind), EstimatorKind.IPS, math.fsum(terms) / mn, x.n_observed, float(mn))


def snips_loss(s_hat, x, p_hat, kind=LossKind.MSE) -> LossReport:
    """Self-normalised IPS: divides by the sum of inverse propensities over Omega."""
    terms, inv, x = _weighted_terms(s_hat, x, p_hat, kind)
    denom = math.fsum(inv)
    return LossReport(LossKind(kind), EstimatorKind.SNIPS, math.fsum(terms) / denom, x.n_observed, denom)


def propensity_error(p_hat, p_true) -> Tuple[float, float]:
    """Entrywise (MSE, MAE) between two propensity matrices."""
    a, b = _arr(p_hat), _arr(p_true)
    _check_dims(a, b)
    d = (a - b).ravel()
    return math.fsum(d * d) / d.size, math.fsum(np.abs(d)) / d.size


# -- serialisation -----------------------------------------------------------

def write_dense_csv(path, m) -> None:
    """One row per line; empty field marks a missing cell."""
    if isinstance(m, ObservedMatrix):
        vals, pres = m.values, m.present
    else:
        vals = _arr(m)
        pres = np.ones(vals.shape, dtype=bool)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row_v, row_p in zip(vals, pres):
            w.writerow([repr(float(v)) if p else "" for v, p in zip(row_v, row_p)])


def read_dense_csv(path, phi=None) -> ObservedMatrix:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    n = len(rows[0])
    if any(len(r) != n for r in rows):
        raise ValueError(f"{path}: ragged rows")
    present = np.array([[c.strip() != "" for c in r] for r in rows])
    values = np.array([[float(c) if c.strip() else 0.0 for c in r] for r in rows])
    return ObservedMatrix(values, present, phi)


def write_triplets(path, m: ObservedMatrix) -> None:
    """``u,i,value`` lines (0-indexed) for present cells; first line holds the shape."""
    rows, cols = m.omega()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["#shape", m.shape[0], m.shape[1]])
        for u, i in zip(rows, cols):
            w.writerow([int(u), int(i), repr(float(m.values[u, i]))])


def read_triplets(path, shape=None, phi=None) -> ObservedMatrix:
    entries = []
    with open(path, newline="") as fh:
        for lineno, r in enumerate(csv.reader(fh), start=1):
            if not r:
                continue
            if r[0] == "#shape":
                shape = shape or (int(r[1]), int(r[2]))
                continue
            try:
                entries.append((int(r[0]), int(r[1]), float(r[2])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed triplet {r!r}") from exc
    if shape is None:
        if not entries:
            raise ValueError(f"{path}: no entries and no shape")
        shape = (max(e[0] for e in entries) + 1, max(e[1] for e in entries) + 1)
    values = np.zeros(shape)
    present = np.zeros(shape, dtype=bool)
    for u, i, v in entries:
        values[u, i] = v
        present[u, i] = True
    return ObservedMatrix(values, present, phi)


def load_matrix(path, phi=None) -> ObservedMatrix:
    """Dispatch on content: triplet files start with the ``#shape`` header."""
    with open(path) as fh:
        head = fh.readline()
    if head.startswith("#shape"):
        return read_triplets(path, phi=phi)
    return read_dense_csv(path, phi=phi)


def save_array(path, a) -> None:
    np.savetxt(Path(path), _arr(a), delimiter=",", fmt="%.17g")


def load_array(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(Path(path), delimiter=","))
