"""Brute-force reference computations for models small enough to enumerate.

Latent configurations are enumerated as big-endian binary counters over the
concatenation [h_1, ..., h_L].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ParamGradient
from .numerics import log_sum_exp

__all__ = [
    "BudgetExceeded",
    "EnumerationBudget",
    "all_bit_vectors",
    "enumerate_latents",
    "exact_log_marginal",
    "exact_posterior",
    "exact_marginal_gradient",
    "PosteriorTable",
    "ExactPosteriorProposal",
]


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class EnumerationBudget:
    max_total_latent_bits: int = 16
    max_visible_bits_for_normalization: int = 12


DEFAULT_BUDGET = EnumerationBudget()


def all_bit_vectors(n: int) -> np.ndarray:
    """All 2^n bit vectors as rows, big-endian counter order."""
    idx = np.arange(2 ** n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts) & 1).astype(np.float64)


def _split(bits: np.ndarray, widths) -> list:
    cuts = np.cumsum(widths)[:-1]
    return np.split(bits, cuts, axis=-1)


def enumerate_latents(p, budget: EnumerationBudget = DEFAULT_BUDGET) -> tuple:
    """Return ``(bits, h)``: the (2^T, T) config matrix and its per-layer split."""
    widths = p.latent_widths
    total = sum(widths)
    if total > budget.max_total_latent_bits:
        raise BudgetExceeded(f"{total} latent bits exceeds enumeration budget {budget.max_total_latent_bits}")
    bits = all_bit_vectors(total)
    return bits, _split(bits, widths)


def _joint_table(p, x, budget):
    bits, h = enumerate_latents(p, budget)
    X = np.repeat(np.asarray(x, dtype=np.float64)[None, :], bits.shape[0], axis=0)
    return bits, h, X, p.log_prob(X, h)


def exact_log_marginal(p, x, budget: EnumerationBudget = DEFAULT_BUDGET):
    """log p(x) = log sum_h p(x, h); vectorised over rows of a 2-D ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return np.array([exact_log_marginal(p, row, budget) for row in x])
    _, _, _, lj = _joint_table(p, x, budget)
    return float(log_sum_exp(lj))


@dataclass
class PosteriorTable:
    """Exact p(h | x) over every latent configuration."""

    x: np.ndarray
    bits: np.ndarray
    widths: list
    log_prob: np.ndarray
    log_marginal: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_prob)

    def latents(self, idx=None) -> list:
        bits = self.bits if idx is None else self.bits[idx]
        return _split(bits, self.widths)

    def as_dict(self) -> dict:
        return {tuple(int(b) for b in row): float(pr) for row, pr in zip(self.bits, self.probs)}

    def index_of(self, h_rows: list) -> np.ndarray:
        bits = np.concatenate([np.atleast_2d(v) for v in h_rows], axis=1)
        weights = 2 ** np.arange(bits.shape[1] - 1, -1, -1, dtype=np.int64)
        return (bits.astype(np.int64) @ weights)

    def draw(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms to config indices by inverse CDF."""
        cdf = np.cumsum(self.probs)
        idx = np.searchsorted(cdf, u * cdf[-1], side="right")
        return np.minimum(idx, len(cdf) - 1)


def exact_posterior(p, x, budget: EnumerationBudget = DEFAULT_BUDGET) -> PosteriorTable:
    x = np.asarray(x, dtype=np.float64)
    bits, _, _, lj = _joint_table(p, x, budget)
    lz = float(log_sum_exp(lj))
    return PosteriorTable(x=x, bits=bits, widths=p.latent_widths, log_prob=lj - lz, log_marginal=lz)


def exact_marginal_gradient(p, x, budget: EnumerationBudget = DEFAULT_BUDGET) -> ParamGradient:
    """d/dtheta log p(x) = E_{p(h|x)}[d/dtheta log p(x, h)]; rows of 2-D x are averaged."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        g = p.zero_grad()
        for row in x:
            g.add_scaled(exact_marginal_gradient(p, row, budget), 1.0 / x.shape[0])
        return g
    post = exact_posterior(p, x, budget)
    X = np.repeat(x[None, :], post.bits.shape[0], axis=0)
    return p.grad(X, post.latents(), weights=post.probs)


class ExactPosteriorProposal:
    """Proposal that samples the true posterior p(h | x) by table lookup.

    Drop-in replacement for an InferenceModel wherever only ``sample`` and
    ``log_prob`` are needed.  Tables are cached per distinct x.
    """

    def __init__(self, p, budget: EnumerationBudget = DEFAULT_BUDGET):
        self.p = p
        self.budget = budget
        self._cache = {}

    def table(self, x) -> PosteriorTable:
        x = np.asarray(x, dtype=np.float64)
        key = x.tobytes()
        if key not in self._cache:
            self._cache[key] = exact_posterior(self.p, x, self.budget)
        return self._cache[key]

    def sample(self, x, rng):
        single = np.ndim(x) == 1
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = rng.random(X.shape[0])
        widths = self.p.latent_widths
        bits = np.zeros((X.shape[0], sum(widths)))
        log_q = np.zeros(X.shape[0])
        uniq, inverse = np.unique(X, axis=0, return_inverse=True)
        for j, row in enumerate(uniq):
            sel = np.flatnonzero(inverse.reshape(-1) == j)
            tab = self.table(row)
            idx = tab.draw(u[sel])
            bits[sel] = tab.bits[idx]
            log_q[sel] = tab.log_prob[idx]
        h = _split(bits, widths)
        if single:
            return [v[0] for v in h], float(log_q[0])
        return h, log_q

    def log_prob(self, h, x):
        single = np.ndim(x) == 1
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        hs = [np.atleast_2d(v) for v in h]
        out = np.empty(X.shape[0])
        for n in range(X.shape[0]):
            tab = self.table(X[n])
            out[n] = tab.log_prob[tab.index_of([v[n:n + 1] for v in hs])[0]]
        return float(out[0]) if single else out
