"""Bootstrap bias/variance studies of the low-sample estimators.

A fixed set of datapoints gets ``reference_K`` proposal samples each.  The
estimate built from all of them is the reference; smaller estimates are
rebuilt from ``s`` of those samples drawn with replacement, and their
offset from the reference (bias) and spread (std) are reported per ``s``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimators import draw_importance_batch
from .numerics import log_sum_exp

__all__ = [
    "BootstrapReport",
    "bootstrap_gradient_study",
    "bootstrap_ll_study",
    "ll_vs_K_curve",
    "write_curve_csv",
]

CSV_HEADER = ["size", "bias_l2", "std", "n_resamples"]


@dataclass
class BootstrapReport:
    """Per-subset-size bias and std.

    For the gradient study ``bias_l2`` is the L2 norm of the mean deviation
    vector and ``std`` the L2 norm of the per-coordinate standard
    deviations.  For the log-likelihood study both are scalars averaged over
    datapoints, and ``bias_l2`` keeps its sign.
    """

    subset_sizes: list
    bias_l2: list
    std: list
    n_resamples: int
    reference_K: int
    statistic: str = "gradient"
    reference: np.ndarray | None = field(default=None, repr=False)

    def rows(self):
        for s, b, sd in zip(self.subset_sizes, self.bias_l2, self.std):
            yield {"size": s, "bias_l2": b, "std": sd, "n_resamples": self.n_resamples}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows():
                w.writerow([r["size"], repr(float(r["bias_l2"])), repr(float(r["std"])), r["n_resamples"]])

    @classmethod
    def from_csv(cls, path, reference_K: int = 0, statistic: str = "gradient") -> "BootstrapReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            subset_sizes=[int(r["size"]) for r in rows],
            bias_l2=[float(r["bias_l2"]) for r in rows],
            std=[float(r["std"]) for r in rows],
            n_resamples=int(rows[0]["n_resamples"]) if rows else 0,
            reference_K=reference_K,
            statistic=statistic,
        )


def _check(datapoints, reference_K, subset_sizes, n_resamples):
    X = np.atleast_2d(np.asarray(datapoints, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("need at least one datapoint")
    sizes = [int(s) for s in subset_sizes]
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("subset_sizes must be non-empty and strictly increasing")
    if sizes[0] < 1 or sizes[-1] > reference_K:
        raise ValueError(f"subset sizes must lie in [1, reference_K={reference_K}]")
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    return X, sizes


def _counts(rng, R, s, K, resample):
    """(R, K) multiplicity of each reference sample in each replicate."""
    if not resample:
        c = np.zeros((R, K))
        c[:, :s] = 1.0
        return c
    idx = rng.integers(0, K, size=(R, s))
    flat = (np.arange(R)[:, None] * K + idx).ravel()
    return np.bincount(flat, minlength=R * K).reshape(R, K).astype(np.float64)


def _subset_weights(counts, logw):
    """Self-normalised weights of each replicate's multiset of samples."""
    lw = np.where(counts > 0, logw[None, :], -np.inf)
    m = lw.max(axis=1, keepdims=True)
    w = counts * np.exp(lw - m)
    return w / w.sum(axis=1, keepdims=True)


def _subset_ll(counts, logw, s):
    """log of the average weight of each replicate's multiset of samples."""
    lw = np.where(counts > 0, np.log(np.where(counts > 0, counts, 1.0)) + logw[None, :], -np.inf)
    return log_sum_exp(lw, axis=1) - np.log(s)


def bootstrap_gradient_study(p, q, datapoints, reference_K: int, subset_sizes, n_resamples: int, rng,
                             resample: bool = True) -> BootstrapReport:
    """Bias and std of the minibatch wake-phase p gradient built from ``s`` samples.

    With ``resample=False`` every replicate uses the first ``s`` reference
    samples (the identity subset when ``s == reference_K``).
    """
    X, sizes = _check(datapoints, reference_K, subset_sizes, n_resamples)
    B = X.shape[0]
    batch = draw_importance_batch(p, q, X, reference_K, rng)
    logw = batch.log_weights
    G = p.grad(batch.flat_x(), batch.rows(), per_sample=True)
    G = np.concatenate([G[k].reshape(B * reference_K, -1) for k in sorted(G)], axis=1)
    G = G.reshape(B, reference_K, -1)

    w_ref = [_subset_weights(np.ones((1, reference_K)), logw[b]) for b in range(B)]
    ref = sum((w_ref[b] @ G[b])[0] for b in range(B)) / B

    biases, stds = [], []
    for s in sizes:
        # accumulate offsets from the reference directly, so a replicate that
        # reproduces the reference weights contributes an exact zero
        dev = np.zeros((n_resamples, G.shape[2]))
        for b in range(B):
            counts = _counts(rng, n_resamples, s, reference_K, resample)
            dev += (_subset_weights(counts, logw[b]) - w_ref[b]) @ G[b]
        dev /= B
        biases.append(float(np.linalg.norm(dev.mean(axis=0))))
        stds.append(float(np.linalg.norm(dev.std(axis=0))))
    return BootstrapReport(sizes, biases, stds, n_resamples, reference_K, "gradient", ref)


def bootstrap_ll_study(p, q, datapoints, reference_K: int, subset_sizes, n_resamples: int, rng,
                       resample: bool = True) -> BootstrapReport:
    """Bias (signed) and std of the log-likelihood estimate built from ``s`` samples."""
    X, sizes = _check(datapoints, reference_K, subset_sizes, n_resamples)
    B = X.shape[0]
    batch = draw_importance_batch(p, q, X, reference_K, rng)
    logw = batch.log_weights
    ones = np.ones((1, reference_K))
    ref = np.array([_subset_ll(ones, logw[b], reference_K)[0] for b in range(B)])
    biases, stds = [], []
    for s in sizes:
        bias = np.zeros(B)
        sd = np.zeros(B)
        for b in range(B):
            counts = _counts(rng, n_resamples, s, reference_K, resample)
            dev = _subset_ll(counts, logw[b], s) - ref[b]
            bias[b] = dev.mean()
            sd[b] = dev.std()
        biases.append(float(bias.mean()))
        stds.append(float(sd.mean()))
    return BootstrapReport(sizes, biases, stds, n_resamples, reference_K, "log_likelihood", ref)


def ll_vs_K_curve(p, q, dataset, K_values, rng, chunk_rows: int = 200_000) -> list:
    """Mean log-likelihood estimate for each K using nested prefixes of one sample set.

    Returns rows ``{"K", "mean_ll", "se"}``; ``se`` is the standard error
    over datapoints.
    """
    rows = np.atleast_2d(np.asarray(getattr(dataset, "rows", dataset), dtype=np.float64))
    Ks = [int(k) for k in K_values]
    if not Ks or Ks[0] < 1 or any(b <= a for a, b in zip(Ks, Ks[1:])):
        raise ValueError("K_values must be positive and strictly increasing")
    kmax = Ks[-1]
    per_chunk = max(1, chunk_rows // kmax)
    est = np.zeros((rows.shape[0], len(Ks)))
    for start in range(0, rows.shape[0], per_chunk):
        xb = rows[start:start + per_chunk]
        logw = draw_importance_batch(p, q, xb, kmax, rng).log_weights
        for j, k in enumerate(Ks):
            est[start:start + xb.shape[0], j] = log_sum_exp(logw[:, :k], axis=-1) - np.log(k)
    n = rows.shape[0]
    se = est.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(Ks))
    return [{"K": k, "mean_ll": float(m), "se": float(e)} for k, m, e in zip(Ks, est.mean(axis=0), se)]


def write_curve_csv(curve: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "mean_ll", "se"])
        for r in curve:
            w.writerow([r["K"], repr(r["mean_ll"]), repr(r["se"])])
