"""Propensity-weighted matrix completion solvers.

Three solvers share one interface (observed matrix, propensities, config):
proximal gradient on the IPS squared loss plus a nuclear penalty, a weighted
SoftImpute, and SGD matrix factorisation with optional biases (PMF / Funk).
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numba
import numpy as np

from .core import CompletedMatrix, ObservedMatrix, PropensityMatrix
from .linalg import svd, svt


class DivergenceError(RuntimeError):
    pass


@dataclass
class CompletionConfig:
    solver: str = "factorization-ips"
    lam: float = 0.1
    rank: int = 10
    use_biases: bool = False
    lr: float = 0.005
    lr_decay: float = 0.9
    epochs: int = 50
    seed: int = 0
    clip: Tuple[float, float] = (1.0, 5.0)
    max_iter: int = 5000
    tol: Optional[float] = None

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if not self.clip[0] < self.clip[1]:
            raise ValueError("clip range must satisfy lo < hi")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class CompletionResult:
    S_hat: CompletedMatrix
    raw: np.ndarray = field(repr=False)
    trace: List[float] = field(default_factory=list, repr=False)
    n_iter: int = 0
    converged: bool = True
    wall_time: float = 0.0
    config: Optional[CompletionConfig] = None

    def run_record(self) -> Dict:
        return {
            "config": asdict(self.config) if self.config else None,
            "objective_trace": self.trace,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "wall_time": self.wall_time,
        }


def _propensities(x: ObservedMatrix, p_hat) -> np.ndarray:
    if p_hat is None:
        return np.ones(x.shape)
    p = p_hat.data if isinstance(p_hat, PropensityMatrix) else np.asarray(p_hat, dtype=float)
    if p.shape != x.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {x.shape}")
    if not np.all(p[x.present] > 0):
        raise ValueError("invalid propensity")
    return p


def _ips_sq(gamma_mat, x: ObservedMatrix, w) -> float:
    d = gamma_mat - x.values
    return float(np.sum(w * d * d) / x.values.size)


def ips_objective(gamma_mat, x: ObservedMatrix, p, lam) -> float:
    w = np.where(x.present, 1.0 / np.where(x.present, p, 1.0), 0.0)
    return _ips_sq(gamma_mat, x, w) + lam * float(np.sum(svd(gamma_mat).s))


def fit_nuclear_ips(x: ObservedMatrix, p_hat=None, lam: float = 0.0, clip=(-np.inf, np.inf),
                    max_iter: int = 5000, tol: float = 1e-7) -> CompletionResult:
    """Proximal gradient for (1/mn) sum_Omega (G - X)^2 / P + lam * ||G||_*.

    Step sizes start at 1/L for the weighted quadratic and are halved until
    the usual quadratic upper bound holds, so the objective never increases.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    t_start = time.perf_counter()
    p = _propensities(x, p_hat)
    mn = x.values.size
    w = np.where(x.present, 1.0 / np.where(x.present, p, 1.0), 0.0)
    lip = 2.0 * w.max() / mn

    g = np.zeros(x.shape)
    loss = _ips_sq(g, x, w)
    f = loss
    trace = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = 2.0 / mn * w * (g - x.values)
        t = 1.0 / lip
        for _ in range(30):
            zf = svd(g - t * grad)
            s = np.maximum(zf.s - t * lam, 0.0)
            z = (zf.u * s) @ zf.vt
            loss_z = _ips_sq(z, x, w)
            d = z - g
            if loss_z <= loss + np.sum(grad * d) + np.sum(d * d) / (2 * t) + 1e-12 * abs(loss):
                break
            t *= 0.5
        fz = loss_z + lam * float(s.sum())
        if not np.isfinite(fz):
            raise DivergenceError(f"non-finite objective at iteration {it}")
        change = abs(f - fz)
        g, f, loss = z, fz, loss_z
        trace.append(f)
        if change <= tol * max(abs(f), 1e-300):
            converged = True
            break
    return CompletionResult(CompletedMatrix(g, *clip), g, trace, it, converged, time.perf_counter() - t_start)


def normalized_ips_weights(present, p) -> np.ndarray:
    """Inverse propensities on Omega scaled so the largest is 1; 0 off Omega."""
    inv = np.where(present, 1.0 / np.where(present, p, 1.0), 0.0)
    top = inv.max()
    return inv / top if top > 0 else inv


def softimpute_objective(z, x: ObservedMatrix, w, lam) -> float:
    d = (x.values - z)
    return float(0.5 * np.sum(w * d * d) + lam * np.sum(svd(z).s))


def fit_softimpute_ips(x: ObservedMatrix, p_hat=None, lam: float = 1.0, clip=(-np.inf, np.inf),
                       max_iter: int = 500, tol: float = 1e-6, trace_objective: bool = False) -> CompletionResult:
    """Weighted SoftImpute: Z <- svt(W*X + (1 - W)*Z, lam).

    A majorise-minimise scheme for 0.5 * sum W (X - Z)^2 + lam ||Z||_*, with W
    the normalised inverse propensities, so the objective never increases.
    Stops when ||Z_new - Z||_F^2 / ||Z||_F^2 <= tol.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    t_start = time.perf_counter()
    p = _propensities(x, p_hat)
    w = normalized_ips_weights(x.present, p)
    wx = w * x.values
    z = np.zeros(x.shape)
    trace = [softimpute_objective(z, x, w, lam)] if trace_objective else []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z_new = svt(wx + (1.0 - w) * z, lam)
        if not np.all(np.isfinite(z_new)):
            raise DivergenceError(f"non-finite iterate at iteration {it}")
        num = np.sum((z_new - z) ** 2)
        den = max(np.sum(z ** 2), 1e-300)
        z = z_new
        if trace_objective:
            trace.append(softimpute_objective(z, x, w, lam))
        if num / den <= tol or not z.any():
            converged = True
            break
    return CompletionResult(CompletedMatrix(z, *clip), z, trace, it, converged, time.perf_counter() - t_start)


@numba.njit(cache=True)
def _sgd_epoch(rows, cols, vals, wts, order, mu, bu, bi, U, V, lr, reg, use_biases):
    k = U.shape[1]
    total = 0.0
    for t in range(order.shape[0]):
        e_idx = order[t]
        u = rows[e_idx]
        i = cols[e_idx]
        pred = mu
        if use_biases:
            pred += bu[u] + bi[i]
        for f in range(k):
            pred += U[u, f] * V[i, f]
        err = vals[e_idx] - pred
        we = wts[e_idx] * err
        total += wts[e_idx] * err * err
        if use_biases:
            bu[u] += lr * (we - reg * bu[u])
            bi[i] += lr * (we - reg * bi[i])
        for f in range(k):
            uf = U[u, f]
            vf = V[i, f]
            U[u, f] += lr * (we * vf - reg * uf)
            V[i, f] += lr * (we * uf - reg * vf)
    return total


@dataclass
class FactorModel:
    mu: float
    bu: np.ndarray
    bi: np.ndarray
    U: np.ndarray
    V: np.ndarray
    use_biases: bool

    def predict(self) -> np.ndarray:
        out = self.mu + self.U @ self.V.T
        if self.use_biases:
            out = out + self.bu[:, None] + self.bi[None, :]
        return out


def init_factor_model(x: ObservedMatrix, w_obs, rank, use_biases, seed) -> FactorModel:
    m, n = x.shape
    rng = np.random.default_rng(seed)
    half = 0.5 / np.sqrt(rank)
    U = rng.uniform(-half, half, (m, rank))
    V = rng.uniform(-half, half, (n, rank))
    vals = x.observed_values()
    mu = float(np.sum(w_obs * vals) / np.sum(w_obs))
    return FactorModel(mu, np.zeros(m), np.zeros(n), U, V, use_biases)


def sgd_step(model: FactorModel, u, i, value, weight, lr, reg) -> None:
    """One in-place weighted SGD update on cell (u, i)."""
    _sgd_epoch(np.array([u], np.int64), np.array([i], np.int64), np.array([value], float),
               np.array([weight], float), np.array([0], np.int64), model.mu, model.bu, model.bi,
               model.U, model.V, lr, reg, model.use_biases)


def fit_factorization_ips(x: ObservedMatrix, p_hat=None, cfg: CompletionConfig = None) -> CompletionResult:
    """Weighted SGD factorisation; prediction = mu (+ b_u + b_i) + U[u] . V[i].

    Each observed cell contributes ``w (x - pred)^2 / 2`` with ``w`` the inverse
    propensity divided by its mean over Omega, plus ``lam/2`` times the squared
    norms of the touched parameters. ``mu`` is the weighted mean rating and
    stays fixed. The learning rate decays by ``lr_decay`` after every epoch.
    """
    cfg = cfg or CompletionConfig()
    t_start = time.perf_counter()
    p = _propensities(x, p_hat)
    rows, cols = x.omega()
    rows = rows.astype(np.int64)
    cols = cols.astype(np.int64)
    if rows.size == 0:
        raise ValueError("no observed entries")
    if cfg.rank > min(x.shape):
        raise ValueError("rank exceeds matrix dimensions")
    vals = x.values[rows, cols].astype(float)
    inv = 1.0 / p[rows, cols]
    wts = inv / inv.mean()
    model = init_factor_model(x, wts, cfg.rank, cfg.use_biases, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    lr = cfg.lr
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(rows.size).astype(np.int64)
        total = _sgd_epoch(rows, cols, vals, wts, order, model.mu, model.bu, model.bi,
                           model.U, model.V, lr, cfg.lam, cfg.use_biases)
        if not np.isfinite(total) or not np.all(np.isfinite(model.U)):
            raise DivergenceError(f"SGD diverged at epoch {epoch} with learning rate {lr:g}")
        trace.append(total / rows.size)
        lr *= cfg.lr_decay
    raw = model.predict()
    res = CompletionResult(CompletedMatrix(raw, *cfg.clip), raw, trace, cfg.epochs, True,
                           time.perf_counter() - t_start, cfg)
    res.model = model
    return res


SOLVERS = ("nuclear-ips", "softimpute-ips", "factorization-ips")


def complete(x: ObservedMatrix, p_hat=None, cfg: CompletionConfig = None) -> CompletionResult:
    """Dispatch on ``cfg.solver``; ``p_hat=None`` means uniform weights."""
    cfg = cfg or CompletionConfig()
    if cfg.solver == "nuclear-ips":
        res = fit_nuclear_ips(x, p_hat, cfg.lam, cfg.clip, cfg.max_iter, cfg.tol or 1e-7)
    elif cfg.solver == "softimpute-ips":
        res = fit_softimpute_ips(x, p_hat, cfg.lam, cfg.clip, min(cfg.max_iter, 500), cfg.tol or 1e-6)
    else:
        res = fit_factorization_ips(x, p_hat, cfg)
    res.config = cfg
    return res
