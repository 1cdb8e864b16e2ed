"""Propensity score estimators.

The main estimator fits a nuclear-norm and max-norm constrained Bernoulli
likelihood to the fully observed missingness mask by projected gradient
ascent. A variant with a piecewise link can output propensities of exactly 1.
Naive Bayes and logistic regression baselines are included for comparison.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import brentq, minimize
from scipy.special import expit, log_expit

from .core import MaskMatrix, ObservedMatrix, PropensityMatrix
from .linalg import ConstraintSet, ProjectionError, nuclear_norm, project_intersection

log = logging.getLogger(__name__)


class LinkSaturationError(FloatingPointError):
    pass


class DivergenceError(RuntimeError):
    pass


class LinkFunction:
    """Standard logistic link, or the piecewise link that reaches 1 at ``gamma``.

    The piecewise link adds a linear ramp to the logistic on [-gamma, gamma]
    that is 0 at -gamma and 1 - sigmoid(gamma) at gamma, and is 1 beyond.
    """

    def __init__(self, kind: str = "logistic", gamma: Optional[float] = None):
        if kind not in ("logistic", "piecewise"):
            raise ValueError(f"unknown link kind {kind!r}")
        if kind == "piecewise" and not (gamma and gamma > 0):
            raise ValueError("piecewise link needs gamma > 0")
        self.kind = kind
        self.gamma = gamma

    def __repr__(self):
        return f"LinkFunction({self.kind!r}, gamma={self.gamma})"

    @property
    def _slope(self) -> float:
        return (1.0 - expit(self.gamma)) / (2.0 * self.gamma)

    def _ramp(self, x):
        return self._slope * (x + self.gamma)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "logistic":
            return expit(x)
        g = self.gamma
        mid = np.clip(x, -g, g)
        inner = expit(mid) + self._ramp(mid)
        return np.where(x < -g, expit(x), np.where(x > g, 1.0, inner))

    def complement(self, x):
        """1 - link(x), computed without cancellation where possible."""
        x = np.asarray(x, dtype=float)
        if self.kind == "logistic":
            return expit(-x)
        g = self.gamma
        mid = np.clip(x, -g, g)
        inner = np.maximum(expit(-mid) - self._ramp(mid), 0.0)
        return np.where(x < -g, expit(-x), np.where(x > g, 0.0, inner))

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        s = expit(x)
        d = s * (1.0 - s)
        if self.kind == "logistic":
            return d
        g = self.gamma
        return np.where(x < -g, d, np.where(x > g, 0.0, d + self._slope))

    def inverse(self, p):
        """Smallest x with link(x) = p (p = 1 maps to gamma for the piecewise link)."""
        p = np.asarray(p, dtype=float)
        if self.kind == "logistic":
            if np.any((p <= 0) | (p >= 1)):
                raise ValueError("logistic inverse needs p in (0, 1)")
            return np.log(p) - np.log1p(-p)
        g = self.gamma
        lo = expit(-g)

        def one(q):
            if not 0 < q <= 1:
                raise ValueError("piecewise inverse needs p in (0, 1]")
            if q < lo:
                return np.log(q) - np.log1p(-q)
            if q >= 1.0:
                return g
            return brentq(lambda t: float(self(t)) - q, -g, g, xtol=1e-14)

        return np.vectorize(one, otypes=[float])(p)


def bernoulli_loglik(gamma_mat, mask, link: LinkFunction = None):
    """Bernoulli log likelihood of ``mask`` under ``link(gamma_mat)`` and its gradient."""
    link = link or LinkFunction()
    g = np.asarray(gamma_mat, dtype=float)
    y = mask.data if isinstance(mask, MaskMatrix) else np.asarray(mask)
    y = y.astype(float)
    if g.shape != y.shape:
        raise ValueError(f"dimension mismatch: {g.shape} vs {y.shape}")
    if link.kind == "logistic":
        value = float(np.sum(y * log_expit(g) + (1.0 - y) * log_expit(-g)))
        return value, y - expit(g)

    p = link(g)
    q = link.complement(g)
    on, off = y == 1, y == 0
    if np.any(p[on] <= 0) or np.any(q[off] <= 0):
        raise LinkSaturationError("link saturation at infeasible point")
    dp = link.derivative(g)
    value = float(np.sum(np.log(p[on])) + np.sum(np.log(q[off])))
    grad = np.zeros_like(g)
    grad[on] = dp[on] / p[on]
    grad[off] = -dp[off] / q[off]
    return value, grad


@dataclass
class OneBitConfig:
    tau: float = 1.0
    gamma: float = 4.0
    phi: Optional[float] = None
    step0: Optional[float] = None  # default 1/L with L = 1/4
    max_iter: int = 2000
    tol: float = 1e-8
    seed: int = 0
    dykstra_iter: int = 100

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.phi is not None and not -self.gamma < self.phi < self.gamma:
            raise ValueError("phi must lie in (-gamma, gamma)")


@dataclass
class PropensityFit:
    A_hat: np.ndarray
    P_hat: PropensityMatrix
    objective: float
    n_iter: int
    converged: bool
    trace: List[float] = field(default_factory=list, repr=False)
    config: Optional[OneBitConfig] = None

    def to_record(self) -> Dict:
        return {
            "config": vars(self.config) if self.config else None,
            "objective": self.objective,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "trace": self.trace,
        }


def _projected_ascent(y, link, constraints, box_mask, cfg: OneBitConfig):
    project = lambda z: project_intersection(z, constraints, box_mask, max_iter=cfg.dykstra_iter)
    step0 = cfg.step0 if cfg.step0 is not None else 4.0
    x = project(np.zeros(y.shape))
    f, grad = bernoulli_loglik(x, y, link)
    trace = [f]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        t = step0
        accepted = False
        for _ in range(40):
            z = project(x + t * grad)
            d = z - x
            try:
                fz, gz = bernoulli_loglik(z, y, link)
            except LinkSaturationError:
                t *= 0.5
                continue
            if not np.isfinite(fz):
                raise DivergenceError(f"non-finite objective at iteration {it} (step {t:g})")
            if fz >= f + np.sum(grad * d) - np.sum(d * d) / (2.0 * t):
                accepted = True
                break
            t *= 0.5
        if not accepted or fz < f:
            # no ascent direction left at this precision
            converged = True
            break
        gain = fz - f
        x, f, grad = z, fz, gz
        trace.append(f)
        if gain <= cfg.tol * abs(f):
            converged = True
            break
    return x, f, it, converged, trace


def fit_1bitmc(mask, cfg: OneBitConfig = None) -> PropensityFit:
    """Nuclear-norm constrained logistic maximum likelihood on a binary mask."""
    cfg = cfg or OneBitConfig()
    y = mask.data if isinstance(mask, MaskMatrix) else MaskMatrix(mask).data
    cons = ConstraintSet.from_scale(cfg.tau, y.shape, lower=-cfg.gamma, upper=cfg.gamma)
    link = LinkFunction()
    a_hat, f, it, conv, trace = _projected_ascent(y, link, cons, None, cfg)
    return PropensityFit(a_hat, PropensityMatrix(link(a_hat)), f, it, conv, trace, cfg)


def fit_1bitmc_modified(mask, cfg: OneBitConfig) -> PropensityFit:
    """Variant whose estimates may reach exactly 1.

    Entries are bounded below by -gamma everywhere, above by ``phi`` where the
    mask is 0 and by gamma where it is 1 (the link is flat beyond gamma).
    """
    if cfg.phi is None:
        raise ValueError("modified estimator needs phi")
    y = mask.data if isinstance(mask, MaskMatrix) else MaskMatrix(mask).data
    cons = ConstraintSet.from_scale(
        cfg.tau, y.shape, lower=-cfg.gamma, upper=cfg.phi, upper_mask_only=True, global_upper=cfg.gamma
    )
    link = LinkFunction("piecewise", cfg.gamma)
    a_hat, f, it, conv, trace = _projected_ascent(y, link, cons, y, cfg)
    return PropensityFit(a_hat, PropensityMatrix(link(a_hat)), f, it, conv, trace, cfg)


def select_tau(mask, taus: Sequence[float] = (0.5, 1, 2, 4, 8), gamma: float = 4.0, folds: int = 5,
               seed: int = 0, max_iter: int = 300):
    """Pick tau by held-out Bernoulli likelihood.

    Held-out cells are dropped from the likelihood (weight 0) while fitting,
    then scored. Returns (best tau, {tau: mean held-out log likelihood per cell}).
    """
    y = mask.data if isinstance(mask, MaskMatrix) else np.asarray(mask)
    rng = np.random.default_rng(seed)
    fold_of = rng.permutation(y.size) % folds
    fold_of = fold_of.reshape(y.shape)
    scores = {}
    for tau in taus:
        vals = []
        for k in range(folds):
            train = fold_of != k
            a = _fit_weighted(y, train, tau, gamma, max_iter)
            test = ~train
            ll = y[test] * log_expit(a[test]) + (1 - y[test]) * log_expit(-a[test])
            vals.append(float(ll.mean()))
        scores[tau] = float(np.mean(vals))
    best = max(taus, key=lambda t: scores[t])
    return best, scores


def _fit_weighted(y, weight, tau, gamma, max_iter):
    w = np.asarray(weight, dtype=float)
    cons = ConstraintSet.from_scale(tau, y.shape, lower=-gamma, upper=gamma)
    x = np.zeros(y.shape)

    def obj(z):
        return float(np.sum(w * (y * log_expit(z) + (1 - y) * log_expit(-z))))

    f = obj(x)
    for _ in range(max_iter):
        grad = w * (y - expit(x))
        z = project_intersection(x + 4.0 * grad, cons)
        fz = obj(z)
        if fz - f <= 1e-8 * abs(f):
            if fz > f:
                x = z
            break
        x, f = z, fz
    return x


# -- baselines ---------------------------------------------------------------

def bayes_propensity(p_rating_given_obs: float, p_obs: float, p_rating: float) -> float:
    """P(O=1 | Y=r) = P(Y=r | O=1) P(O=1) / P(Y=r)."""
    return p_rating_given_obs * p_obs / p_rating


@dataclass
class NaiveBayesFit:
    value_map: Dict[float, float]
    P_hat: np.ndarray  # propensities at observed cells, 0 elsewhere
    p_obs: float

    def apply(self, ratings) -> np.ndarray:
        """Propensities for a full matrix of rating values."""
        r = np.asarray(ratings, dtype=float)
        out = np.empty_like(r)
        for v, p in self.value_map.items():
            out[r == v] = p
        missing = ~np.isin(r, list(self.value_map))
        if missing.any():
            raise ValueError(f"rating values without a propensity: {np.unique(r[missing])}")
        return out


def fit_naive_bayes(x_mnar: ObservedMatrix, mar_sample, values: Optional[Sequence[float]] = None,
                    eps: float = 1e-6) -> NaiveBayesFit:
    """Rating-value propensities from MNAR ratings plus a missing-at-random sample.

    Both rating histograms are add-one smoothed over ``values`` (default: all
    values seen in either sample).
    """
    mar = np.asarray(mar_sample, dtype=float).ravel()
    if mar.size == 0:
        raise ValueError("naive Bayes needs a nonempty MAR sample")
    obs = x_mnar.observed_values()
    if obs.size == 0:
        raise ValueError("no observed entries")
    if values is None:
        values = np.union1d(np.unique(obs), np.unique(mar))
    values = [float(v) for v in values]
    k = len(values)
    p_obs = obs.size / x_mnar.values.size
    vmap = {}
    for v in values:
        p_r_obs = (np.count_nonzero(obs == v) + 1) / (obs.size + k)
        p_r = (np.count_nonzero(mar == v) + 1) / (mar.size + k)
        vmap[v] = float(np.clip(bayes_propensity(p_r_obs, p_obs, p_r), eps, 1.0))
    fit = NaiveBayesFit(vmap, np.zeros(x_mnar.shape), p_obs)
    full = np.where(x_mnar.present, x_mnar.values, values[0])
    fit.P_hat = np.where(x_mnar.present, fit.apply(full), 0.0)
    return fit


@dataclass
class LogisticFit:
    P_hat: PropensityMatrix
    w_user: np.ndarray
    w_item: np.ndarray
    intercept: float
    degenerate: bool = False


def _as_features(f, rows: int) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f.reshape(rows, 1)
    if f.ndim != 2 or f.shape[0] != rows:
        raise ValueError("dimension mismatch")
    return f


def fit_logistic_regression(mask, user_features=None, item_features=None, mode: str = "both",
                            l2: float = 1e-4, tol: float = 1e-8) -> LogisticFit:
    """L2-regularised logistic regression of the mask on user/item features.

    The score of cell (u, i) is ``user_features[u] @ w_user +
    item_features[i] @ w_item + b``; ``mode`` ("both", "U", "I") selects the
    blocks used. The penalty is ``l2/2 * ||w||^2`` on the mean log likelihood
    and does not touch the intercept.
    """
    y = (mask.data if isinstance(mask, MaskMatrix) else np.asarray(mask)).astype(float)
    m, n = y.shape
    if mode not in ("both", "U", "I"):
        raise ValueError(f"unknown mode {mode!r}")
    fu = np.zeros((m, 0))
    fi = np.zeros((n, 0))
    if mode in ("both", "U"):
        if user_features is None:
            raise ValueError("mode needs user features")
        fu = _as_features(user_features, m)
    if mode in ("both", "I"):
        if item_features is None:
            raise ValueError("mode needs item features")
        fi = _as_features(item_features, n)
    if not (np.all(np.isfinite(fu)) and np.all(np.isfinite(fi))):
        raise ValueError("features must be finite")
    du, di = fu.shape[1], fi.shape[1]

    rate = y.mean()
    if rate in (0.0, 1.0):
        log.warning("mask is constant; returning constant propensity")
        p = np.full(y.shape, min(max(rate, 1e-6), 1.0))
        return LogisticFit(PropensityMatrix(p), np.zeros(du), np.zeros(di), float("nan"), True)

    mn = m * n

    def unpack(w):
        return w[:du], w[du:du + di], w[-1]

    def negobj(w):
        a, b, c = unpack(w)
        s = (fu @ a)[:, None] + (fi @ b)[None, :] + c
        ll = np.sum(y * log_expit(s) + (1 - y) * log_expit(-s)) / mn
        r = (y - expit(s)) / mn
        g = np.concatenate([fu.T @ r.sum(axis=1), fi.T @ r.sum(axis=0), [r.sum()]])
        pen = 0.5 * l2 * (a @ a + b @ b)
        g[:du] -= l2 * a
        g[du:du + di] -= l2 * b
        return -(ll - pen), -g

    w0 = np.zeros(du + di + 1)
    w0[-1] = np.log(rate) - np.log1p(-rate)
    res = minimize(negobj, w0, jac=True, method="L-BFGS-B", options={"gtol": tol, "ftol": 1e-15, "maxiter": 5000})
    a, b, c = unpack(res.x)
    s = (fu @ a)[:, None] + (fi @ b)[None, :] + c
    return LogisticFit(PropensityMatrix(expit(s)), a, b, float(c))
