"""Slow, independent reference implementations used only by the tests."""
import warnings

import numpy as np
from scipy.optimize import minimize


def nuclear_2x2(x):
    x = np.asarray(x).reshape(2, 2)
    det = x[0, 0] * x[1, 1] - x[0, 1] * x[1, 0]
    return np.sqrt(max(np.sum(x * x) + 2 * abs(det), 0.0))


def brute_project_2x2(a, radius, lo, hi):
    """Euclidean projection onto {||X||_* <= radius} ∩ [lo, hi] by SLSQP from several starts."""
    a = np.asarray(a, float)
    lo_v = np.broadcast_to(lo, (2, 2)).ravel()
    hi_v = np.broadcast_to(hi, (2, 2)).ravel()
    bounds = list(zip(lo_v, hi_v))
    # ||X||_* <= r  iff  ||X||_F^2 + 2|det X| <= r^2, split into two smooth constraints
    det = lambda z: z[0] * z[3] - z[1] * z[2]
    ddet = lambda z: np.array([z[3], -z[2], -z[1], z[0]])
    cons = [
        {"type": "ineq", "fun": lambda z, s=s: radius ** 2 - z @ z - s * 2 * det(z),
         "jac": lambda z, s=s: -2 * z - s * 2 * ddet(z)}
        for s in (1.0, -1.0)
    ]
    best = None
    starts = [np.clip(a.ravel(), lo_v, hi_v) * s for s in (0.0, 0.3, 0.9)]
    starts.append(np.clip(np.zeros(4), lo_v, hi_v))
    for z0 in starts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(lambda z: np.sum((z - a.ravel()) ** 2), z0, jac=lambda z: 2 * (z - a.ravel()),
                           bounds=bounds, constraints=cons, method="SLSQP",
                           options={"ftol": 1e-14, "maxiter": 500})
        if nuclear_2x2(res.x) <= radius + 1e-7 and (best is None or res.fun < best.fun):
            best = res
    return best.x.reshape(2, 2)


def ips_loop(s_hat, x_vals, present, p, mse=True):
    m, n = s_hat.shape
    total = 0.0
    for u in range(m):
        for i in range(n):
            if present[u, i]:
                d = s_hat[u, i] - x_vals[u, i]
                total += (d * d if mse else abs(d)) / p[u, i]
    return total / (m * n)


def snips_loop(s_hat, x_vals, present, p, mse=True):
    num = den = 0.0
    for u in range(s_hat.shape[0]):
        for i in range(s_hat.shape[1]):
            if present[u, i]:
                d = s_hat[u, i] - x_vals[u, i]
                num += (d * d if mse else abs(d)) / p[u, i]
                den += 1.0 / p[u, i]
    return num / den
