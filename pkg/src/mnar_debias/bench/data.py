"""Loaders for MovieLens-100k ``u.data`` files and the Coat ASCII matrices."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from ..core import MaskMatrix, ObservedMatrix

MOVIELENS_SHAPE = (943, 1682)
COAT_SHAPE = (290, 300)


def load_movielens(path, shape: Tuple[int, int] = MOVIELENS_SHAPE):
    """Parse tab-separated ``user item rating timestamp`` lines (1-indexed ids)."""
    m, n = shape
    values = np.zeros(shape)
    present = np.zeros(shape, dtype=bool)
    count = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                parts = line.split()
            try:
                u, i, r = int(parts[0]), int(parts[1]), float(parts[2])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed rating line {line.rstrip()!r}") from exc
            if not (1 <= u <= m and 1 <= i <= n):
                raise ValueError(f"{path}:{lineno}: id out of range (user {u}, item {i})")
            values[u - 1, i - 1] = r
            present[u - 1, i - 1] = True
            count += 1
    if count == 0:
        raise ValueError(f"{path}: no ratings")
    x = ObservedMatrix(values, present, phi=5.0)
    return x, x.mask()


@dataclass
class CoatData:
    train: ObservedMatrix
    test: ObservedMatrix
    user_features: np.ndarray
    item_features: np.ndarray


def _find(root: Path, name: str) -> Path:
    for cand in (root / name, root / "user_item_features" / name):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{name} not found under {root}")


def _read_ascii(path: Path) -> np.ndarray:
    try:
        return np.atleast_2d(np.loadtxt(path))
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable matrix file {path}: {exc}") from exc


def load_coat(directory, shape: Optional[Tuple[int, int]] = COAT_SHAPE) -> CoatData:
    """Read ``train.ascii``/``test.ascii`` (0 = missing) and binary feature files."""
    root = Path(directory)
    train = _read_ascii(_find(root, "train.ascii"))
    test = _read_ascii(_find(root, "test.ascii"))
    for name, a in (("train", train), ("test", test)):
        if shape is not None and a.shape != tuple(shape):
            raise ValueError(f"{name} matrix has shape {a.shape}, expected {tuple(shape)}")
    if train.shape != test.shape:
        raise ValueError("train and test shapes differ")
    uf = _read_ascii(_find(root, "user_features.ascii"))
    itf = _read_ascii(_find(root, "item_features.ascii"))
    if uf.shape[0] != train.shape[0] or itf.shape[0] != train.shape[1]:
        raise ValueError("feature rows do not align with the rating matrix")
    return CoatData(
        ObservedMatrix(train, train != 0, phi=5.0),
        ObservedMatrix(test, test != 0, phi=5.0),
        uf,
        itf,
    )


def write_coat(directory, data: CoatData) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for name, x in (("train.ascii", data.train), ("test.ascii", data.test)):
        np.savetxt(root / name, np.where(x.present, x.values, 0), fmt="%d")
    np.savetxt(root / "user_features.ascii", data.user_features, fmt="%d")
    np.savetxt(root / "item_features.ascii", data.item_features, fmt="%d")


def split_entries(x: ObservedMatrix, test_fraction: float = 0.1, seed: int = 0):
    """Uniform random split of the observed entries into train and test."""
    rows, cols = x.omega()
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * rows.size))
    pick = rng.permutation(rows.size)[:n_test]
    test = np.zeros(x.shape, dtype=bool)
    test[rows[pick], cols[pick]] = True
    return x.restrict(~test), x.restrict(test)
