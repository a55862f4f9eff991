"""Numerically stable primitives shared by the rest of the package.

All probabilities are carried in log space and every real is a float64.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "make_rng",
    "sigmoid",
    "softplus",
    "bernoulli_log_prob_from_logit",
    "log_sum_exp",
    "sample_bernoulli",
]


def make_rng(seed: int, stream_id: int = 0, *subkeys: int) -> np.random.Generator:
    """Return the PCG64 generator for ``(seed, stream_id)``.

    The substream is derived with ``SeedSequence(seed, spawn_key=(stream_id,))``,
    i.e. exactly the ``stream_id``-th child numpy would spawn from ``seed``.
    Identical pairs give bitwise-identical draws; distinct stream ids give
    independent streams.  Extra ``subkeys`` extend the spawn key, e.g. one
    stream per datapoint within an evaluation stream.
    """
    if seed < 0 or stream_id < 0 or any(k < 0 for k in subkeys):
        raise ValueError("seed and stream keys must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),) + tuple(int(k) for k in subkeys))
    return np.random.Generator(np.random.PCG64(ss))


def sigmoid(z):
    """Logistic function, symmetric to full precision: sigmoid(-z) == 1 - sigmoid(z)."""
    out = expit(np.asarray(z, dtype=np.float64))
    return out if np.ndim(out) else float(out)


def softplus(z):
    """log(1 + exp(z)) without overflow."""
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bernoulli_log_prob_from_logit(x, z):
    """log P(x) for a Bernoulli with logit ``z``.

    Equals ``x*log(sigmoid(z)) + (1-x)*log(sigmoid(-z))`` but is evaluated as
    ``x*z - softplus(z)`` with the softplus split into ``max(z, 0) + log1p(exp(-|z|))``,
    so it stays finite for |z| in the hundreds.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    out = x * z - np.maximum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return out if np.ndim(out) else float(out)


def log_sum_exp(v, axis=-1):
    """Stable log(sum(exp(v))) along ``axis``; all -inf input gives -inf."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[axis] == 0:
        raise ValueError("log_sum_exp needs at least one entry")
    m = np.max(v, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(v - m_safe), axis=axis, keepdims=True))
    out = np.squeeze(s + m_safe, axis=axis)
    return out if out.ndim else float(out)


def sample_bernoulli(p, rng: np.random.Generator):
    """Draw bits with P(1) = p, consuming exactly one uniform per entry."""
    p = np.asarray(p, dtype=np.float64)
    u = rng.random(p.shape)
    bits = (u < p).astype(np.float64)
    return bits if bits.ndim else float(bits)
