"""Binary datasets: amat text loading, the bars toy problem, and minibatching."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .oracle import all_bit_vectors

__all__ = [
    "DataError",
    "BinaryDataset",
    "load_amat",
    "save_amat",
    "make_bars_dataset",
    "bars_distribution",
    "bars_log_prob",
    "bars_entropy",
    "stochastic_binarize",
]

SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    pass


@dataclass
class BinaryDataset:
    rows: np.ndarray
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise DataError(f"dataset must be a non-empty 2-D bit matrix, got shape {rows.shape}")
        if not np.all((rows == 0) | (rows == 1)):
            raise DataError("dataset entries must be 0 or 1")
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}")
        self.rows = rows.astype(np.float64)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def marginals(self) -> np.ndarray:
        return self.rows.mean(axis=0)

    def minibatches(self, batch_size: int, rng):
        from .training import minibatches

        return minibatches(self.rows, batch_size, rng)


def _parse_token(tok: str, lineno: int) -> float:
    if tok == "0" or tok == "1":
        return float(tok)
    try:
        v = float(tok)
    except ValueError:
        raise DataError(f"line {lineno}: non-binary token {tok!r}") from None
    # "0.0000"/"1.0000" style; anything else is not binary data
    if v not in (0.0, 1.0):
        raise DataError(f"line {lineno}: non-binary token {tok!r}")
    return v


def load_amat(path, split: str = "train", name: str | None = None) -> BinaryDataset:
    """Parse whitespace-separated 0/1 rows, one example per line."""
    path = Path(path)
    rows, width = [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            toks = line.split()
            if not toks:
                continue
            if width is None:
                width = len(toks)
            elif len(toks) != width:
                raise DataError(f"line {lineno}: expected {width} values, found {len(toks)}")
            rows.append([_parse_token(t, lineno) for t in toks])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return BinaryDataset(np.array(rows), split=split, name=name or path.stem)


def save_amat(path, rows) -> None:
    rows = np.asarray(rows).astype(np.int64)
    with open(path, "w") as fh:
        for r in rows:
            fh.write(" ".join(str(v) for v in r) + "\n")


def _bars_images(bars: np.ndarray, side: int) -> np.ndarray:
    r, c = bars[:, :side], bars[:, side:]
    img = np.maximum(r[:, :, None], c[:, None, :])
    return img.reshape(bars.shape[0], side * side)


def make_bars_dataset(side: int, n: int, rng, split: str = "train") -> BinaryDataset:
    """side x side images; each row bar and each column bar is on with prob 1/2."""
    if side < 2:
        raise DataError("bars side must be >= 2")
    bars = (rng.random((n, 2 * side)) < 0.5).astype(np.float64)
    return BinaryDataset(_bars_images(bars, side), split=split, name=f"bars{side}")


@lru_cache(maxsize=None)
def bars_distribution(side: int) -> dict:
    """Exact image distribution of the bars process: {bit tuple: probability}."""
    bars = all_bit_vectors(2 * side)
    imgs = _bars_images(bars, side).astype(np.int64)
    p = 0.5 ** (2 * side)
    dist = {}
    for img in imgs:
        key = tuple(img)
        dist[key] = dist.get(key, 0.0) + p
    return dist


def bars_log_prob(side: int, x) -> np.ndarray:
    """log-probability of images under the bars process (-inf off the support)."""
    dist = bars_distribution(side)
    x = np.atleast_2d(np.asarray(x)).astype(np.int64)
    return np.array([np.log(dist[tuple(r)]) if tuple(r) in dist else -np.inf for r in x])


def bars_entropy(side: int) -> float:
    """Entropy in nats; minus the best achievable expected log-likelihood."""
    p = np.array(list(bars_distribution(side).values()))
    return float(-(p * np.log(p)).sum())


def stochastic_binarize(gray, rng) -> np.ndarray:
    """Bernoulli(pixel) binarisation of intensities in [0, 1].

    Not the canonical binarized MNIST; published benchmarks use a fixed
    binarization that should be loaded with :func:`load_amat` instead.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.min() < 0 or gray.max() > 1:
        raise DataError("intensities must lie in [0, 1]")
    return (rng.random(gray.shape) < gray).astype(np.float64)
