"""Synthetic MNAR rating data: the user/item-feature generator, the
Movie-Lovers block construction, and the revelation sampler."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit, logit

from .core import MaskMatrix, ObservedMatrix
from .linalg import nuclear_norm

# fixed substream indices; never renumber, results depend on them
_STREAM_U1, _STREAM_V1, _STREAM_U2, _STREAM_V2, _STREAM_W1, _STREAM_W2 = range(6)
_STREAM_NOISE, _STREAM_REVEAL, _STREAM_MAR = 10, 11, 12


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream ``index`` derived from the master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


@dataclass(frozen=True)
class SyntheticTruth:
    kind: str
    seed: int
    S: np.ndarray
    P: np.ndarray
    A: np.ndarray
    params: Dict = field(default_factory=dict)
    factors: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.S.shape

    def theta_hat(self) -> float:
        """Nuclear scale of the logit matrix, ||A||_* / sqrt(mn)."""
        m, n = self.shape
        return nuclear_norm(self.A) / np.sqrt(m * n)

    def alpha_hat(self) -> float:
        a = self.A[np.isfinite(self.A)]
        return float(np.abs(a).max())

    def manifest(self) -> Dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "shape": list(self.shape),
            "params": self.params,
            "theta_hat": self.theta_hat(),
            "alpha_hat": self.alpha_hat(),
            "phi": float(np.abs(self.S).max()),
        }

    def write_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2)


def gen_user_item(m: int = 200, n: int = 300, d: int = 20, seed: int = 0) -> SyntheticTruth:
    """Ratings from a rank-``d`` uniform product, propensities from a logistic
    score on Gaussian user/item features."""
    if min(m, n, d) < 1:
        raise ValueError("m, n, d must be positive")
    u1 = substream(seed, _STREAM_U1).uniform(0.0, 1.0, (m, d))
    v1 = substream(seed, _STREAM_V1).uniform(0.0, 1.0, (n, d))
    s_tilde = u1 @ v1.T
    lo, hi = s_tilde.min(), s_tilde.max()
    scaled = 1.0 + 4.0 * (s_tilde - lo) / (hi - lo) if hi > lo else np.full_like(s_tilde, 3.0)
    S = np.rint(scaled)

    u2 = substream(seed, _STREAM_U2).normal(0.0, 1.0 / 8.0, (m, d))
    v2 = substream(seed, _STREAM_V2).normal(0.0, 1.0 / 8.0, (n, d))
    w1 = substream(seed, _STREAM_W1).uniform(0.0, 1.0, d)
    w2 = substream(seed, _STREAM_W2).uniform(0.0, 1.0, d)
    A = (u2 @ w1)[:, None] + (v2 @ w2)[None, :]
    return SyntheticTruth(
        kind="user_item",
        seed=seed,
        S=S,
        P=expit(A),
        A=A,
        params={"m": m, "n": n, "d": d},
        factors={"U1": u1, "V1": v1, "U2": u2, "V2": v2, "w1": w1, "w2": w2, "S_tilde": scaled},
    )


def gen_movie_lover(m: int = 200, n: int = 300, p: float = 0.5, seed: int = 0) -> SyntheticTruth:
    """Two user groups, each loving one genre and hating the other; a third
    block of neutral items.

    Loved cells have rating 5 and propensity ``p``, hated cells rating 1 and
    propensity ``p/10``, neutral cells rating 3 and propensity ``p/2``.
    The layout is deterministic; ``seed`` is only recorded.
    """
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    if m < 2 or n < 3:
        raise ValueError("need at least 2 rows and 3 columns")
    half = m // 2
    third = n // 3
    rows = np.arange(m) < half  # True: first user group
    genre = np.full(n, 2)
    genre[:third] = 0
    genre[third:2 * third] = 1

    S = np.full((m, n), 3.0)
    P = np.full((m, n), p / 2)
    loved = (rows[:, None] & (genre == 0)[None, :]) | (~rows[:, None] & (genre == 1)[None, :])
    hated = (rows[:, None] & (genre == 1)[None, :]) | (~rows[:, None] & (genre == 0)[None, :])
    S[loved], P[loved] = 5.0, p
    S[hated], P[hated] = 1.0, p / 10
    with np.errstate(divide="ignore"):
        A = logit(P)
    return SyntheticTruth(
        kind="movie_lover",
        seed=seed,
        S=S,
        P=P,
        A=A,
        params={"m": m, "n": n, "p": p, "user_split": half, "genre_split": [third, third, n - 2 * third]},
    )


@dataclass(frozen=True)
class ObservedSample:
    X: ObservedMatrix
    M: MaskMatrix
    X_star: np.ndarray


def noisy_ratings(truth: SyntheticTruth, noise_sd=1.0, clip=(1.0, 5.0), seed=0) -> np.ndarray:
    """Fully observed noisy ratings: add noise, clip, round (in that order)."""
    noise = substream(seed, _STREAM_NOISE).normal(0.0, 1.0, truth.shape) * noise_sd
    return np.rint(np.clip(truth.S + noise, *clip))


def sample_observations(truth: SyntheticTruth, noise_sd: float = 1.0, clip=(1.0, 5.0), seed: int = 0) -> ObservedSample:
    x_star = noisy_ratings(truth, noise_sd, clip, seed)
    revealed = substream(seed, _STREAM_REVEAL).random(truth.shape) < truth.P
    bound = max(abs(clip[0]), abs(clip[1]))
    return ObservedSample(ObservedMatrix(x_star, revealed, phi=bound), MaskMatrix(revealed.astype(np.int8)), x_star)


def sample_mar_ratings(x_star: np.ndarray, fraction: float = 0.05, seed: int = 0) -> np.ndarray:
    """Ratings at a uniformly drawn subset of cells (missing-at-random sample)."""
    rng = substream(seed, _STREAM_MAR)
    size = max(1, int(round(fraction * x_star.size)))
    idx = rng.choice(x_star.size, size=size, replace=False)
    return x_star.ravel()[idx]
