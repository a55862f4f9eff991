"""Importance sampling with the inference network as proposal.

An :class:`ImportanceBatch` holds K proposal samples for one datapoint
(arrays of shape ``(K,)``) or for B datapoints at once (shape ``(B, K)``).
All reductions run over the last axis, so estimators return a scalar for a
single datapoint and a length-B array otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import log_sum_exp, make_rng

__all__ = [
    "ImportanceBatch",
    "draw_importance_batch",
    "normalize_weights",
    "log_marginal_estimate",
    "elbo_estimate",
    "effective_sample_size",
    "streaming_log_marginal",
    "dataset_log_marginals",
]


@dataclass
class ImportanceBatch:
    x: np.ndarray
    h: list
    log_q: np.ndarray
    log_joint: np.ndarray

    @property
    def K(self) -> int:
        return self.log_q.shape[-1]

    @property
    def log_weights(self) -> np.ndarray:
        return self.log_joint - self.log_q

    def rows(self):
        """Samples flattened to 2-D rows, matching ``flat_x``."""
        return [v.reshape(-1, v.shape[-1]) for v in self.h]

    def flat_x(self) -> np.ndarray:
        x = np.atleast_2d(self.x)
        return np.repeat(x, self.K, axis=0)


def draw_importance_batch(p, q, x, K: int, rng) -> ImportanceBatch:
    """Draw K i.i.d. samples h ~ q(h|x) and score them under p and q.

    ``q`` is anything with ``sample(x_rows, rng) -> (h, log_q)``: an
    InferenceModel or an exact-posterior proposal.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    xs = np.atleast_2d(x)
    B = xs.shape[0]
    X = np.repeat(xs, K, axis=0)
    h, log_q = q.sample(X, rng)
    log_joint = p.log_prob(X, h)
    shape = (K,) if x.ndim == 1 else (B, K)
    return ImportanceBatch(
        x=x,
        h=[v.reshape(shape + (v.shape[-1],)) for v in h],
        log_q=np.asarray(log_q, dtype=np.float64).reshape(shape),
        log_joint=np.asarray(log_joint, dtype=np.float64).reshape(shape),
    )


def normalize_weights(batch_or_logw) -> np.ndarray:
    """Self-normalised weights softmax(log w) over the sample axis."""
    logw = batch_or_logw.log_weights if isinstance(batch_or_logw, ImportanceBatch) else np.asarray(batch_or_logw)
    m = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("importance weights are all zero or non-finite")
    w = np.exp(logw - m)
    return w / w.sum(axis=-1, keepdims=True)


def log_marginal_estimate(batch: ImportanceBatch):
    """log of the average importance weight: log (1/K) sum_k p(x,h_k)/q(h_k|x)."""
    return log_sum_exp(batch.log_weights, axis=-1) - np.log(batch.K)


def elbo_estimate(batch: ImportanceBatch):
    """Monte Carlo variational bound: mean of the log weights."""
    out = np.mean(batch.log_weights, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def effective_sample_size(w):
    w = np.asarray(w, dtype=np.float64)
    out = 1.0 / np.sum(w * w, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _streaming_stats(p, q, x, K: int, rng, chunk: int):
    """Running log sum w and log sum w^2 over K draws in chunks of ``chunk``."""
    s1 = s2 = -np.inf
    remaining = K
    while remaining > 0:
        k = min(chunk, remaining)
        lw = draw_importance_batch(p, q, x, k, rng).log_weights
        s1 = np.logaddexp(s1, log_sum_exp(lw))
        s2 = np.logaddexp(s2, log_sum_exp(2.0 * lw))
        remaining -= k
    return s1, s2


def streaming_log_marginal(p, q, x, K: int, rng, chunk: int = 10_000) -> float:
    """log p(x) estimate with large K in O(chunk) memory.

    Chunks are drawn in a fixed order and merged with a running
    log-sum-exp, so the result depends only on ``rng`` and ``chunk``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("streaming_log_marginal takes a single datapoint")
    s1, _ = _streaming_stats(p, q, x, K, rng, chunk)
    return float(s1 - np.log(K))


_POOL_MODELS = {}


def _init_pool(p, q):
    _POOL_MODELS["pq"] = (p, q)


def _eval_block(args):
    block, xb, K, seed, stream, chunk = args
    p, q = _POOL_MODELS["pq"]
    return _eval_rows(p, q, xb, K, make_rng(seed, stream, block), chunk)


def _eval_rows(p, q, xb, K, rng, chunk):
    if xb.shape[0] > 1 or K <= chunk:
        lw = draw_importance_batch(p, q, xb, K, rng).log_weights
        return log_sum_exp(lw) - np.log(K), effective_sample_size(normalize_weights(lw))
    s1, s2 = _streaming_stats(p, q, xb[0], K, rng, chunk)
    return np.array([s1 - np.log(K)]), np.array([np.exp(2 * s1 - s2)])


def dataset_log_marginals(p, q, rows, K: int, seed: int, stream: int = 0, chunk: int = 10_000,
                          workers: int = 1, dedupe: bool = False):
    """Per-row log p(x) estimates and effective sample sizes at K samples.

    Rows are cut into fixed blocks of ``max(1, chunk // K)``; block ``j``
    draws from ``make_rng(seed, stream, j)``, so results do not depend on
    ``workers``.  With ``dedupe`` identical rows share one estimate.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if K < 1:
        raise ValueError("K must be >= 1")
    inverse = None
    if dedupe:
        rows, inverse = np.unique(rows, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
    per = max(1, chunk // K)
    tasks = [(j, rows[s:s + per], K, seed, stream, chunk) for j, s in enumerate(range(0, rows.shape[0], per))]
    if workers > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers, initializer=_init_pool, initargs=(p, q)) as ex:
            parts = list(ex.map(_eval_block, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        _init_pool(p, q)
        parts = [_eval_block(t) for t in tasks]
    ll = np.concatenate([a for a, _ in parts])
    ess = np.concatenate([b for _, b in parts])
    if inverse is not None:
        ll, ess = ll[inverse], ess[inverse]
    return ll, ess
