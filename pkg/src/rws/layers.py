"""Stochastic binary layers: SBN, autoregressive SBN and conditional NADE.

Every layer models P(x | y) over a bit vector ``x`` of width ``n_out`` given a
parent bit vector ``y`` of width ``n_in``.  A layer with ``n_in == 0`` is an
unconditioned (prior) distribution.

Arrays are batched along the first axis: ``x`` is ``(N, n_out)`` and ``y`` is
``(N, n_in)``.  1-D inputs are accepted and give scalar results.
Autoregressive layers use the natural index order of their units.
"""
from __future__ import annotations

import numpy as np

from scipy.special import expit

from .numerics import sigmoid

__all__ = [
    "ShapeError",
    "ParamGradient",
    "Layer",
    "SbnLayer",
    "ArSbnLayer",
    "CnadeLayer",
    "FAMILIES",
    "make_layer",
    "layer_log_prob",
    "layer_sample",
    "layer_grad",
]


class ShapeError(ValueError):
    """Raised when array widths do not match a layer or model."""


class ParamGradient(dict):
    """Named gradient blocks mirroring a parameter dict.

    >>> g = ParamGradient(b=np.zeros(2))
    >>> g.add_scaled(ParamGradient(b=np.ones(2)), 0.5)["b"]
    array([0.5, 0.5])
    """

    @classmethod
    def zeros_like(cls, params) -> "ParamGradient":
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def add_scaled(self, other, c: float = 1.0) -> "ParamGradient":
        """In-place ``self <- self + c * other``; returns self."""
        if self.keys() != other.keys():
            raise ShapeError(f"gradient blocks differ: {sorted(self)} vs {sorted(other)}")
        for k, v in other.items():
            if self[k].shape != v.shape:
                raise ShapeError(f"block {k!r}: shape {self[k].shape} vs {v.shape}")
            self[k] += c * v
        return self

    def scaled(self, c: float) -> "ParamGradient":
        return ParamGradient({k: c * v for k, v in self.items()})

    def copy(self) -> "ParamGradient":
        return ParamGradient({k: v.copy() for k, v in self.items()})

    def flat(self) -> np.ndarray:
        """Concatenate all blocks in sorted key order."""
        if not self:
            return np.zeros(0)
        return np.concatenate([np.ravel(self[k]) for k in sorted(self)])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def prefixed(self, prefix: str) -> "ParamGradient":
        return ParamGradient({f"{prefix}{k}": v for k, v in self.items()})


def _prep(layer, x, y):
    """Promote inputs to 2-D float arrays and check widths."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != layer.n_out:
        raise ShapeError(f"{layer.family}: x width {x2.shape[-1]} != n_out {layer.n_out}")
    y2 = _prep_y(layer, y, x2.shape[0])
    return x2, y2, single


def _prep_y(layer, y, n):
    if y is None:
        if layer.n_in:
            raise ShapeError(f"{layer.family}: conditioning input required (n_in={layer.n_in})")
        return np.zeros((n, 0))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[1] != layer.n_in:
        raise ShapeError(f"{layer.family}: y width {y.shape[1]} != n_in {layer.n_in}")
    if y.shape[0] != n:
        if y.shape[0] == 1:
            y = np.broadcast_to(y, (n, layer.n_in))
        else:
            raise ShapeError(f"batch sizes differ: x has {n} rows, y has {y.shape[0]}")
    return y


def _row_log_prob(x, z):
    """Sum over units of log Bernoulli(x | logit z), one value per row."""
    return (x * z - np.maximum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))).sum(axis=1)


def _sigmoid_block(z):
    """Elementwise logistic for 2-D blocks.

    scipy's expit evaluates element by element; numpy's vectorised exp is
    faster once a block holds a few hundred entries.
    """
    if z.size < 512:
        return expit(z)
    return 1.0 / (1.0 + np.exp(np.minimum(-z, 709.0)))


class Layer:
    """Shared machinery; subclasses supply ``logits``, ``_sample`` and ``_backward``."""

    family = "layer"

    def __init__(self, params: dict, n_out: int, n_in: int):
        if n_out < 1:
            raise ShapeError("layers need at least one output unit")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.n_out = int(n_out)
        self.n_in = int(n_in)
        self._check_shapes()

    @property
    def is_prior(self) -> bool:
        return self.n_in == 0

    def __getattr__(self, name):
        params = self.__dict__.get("params")
        if params is not None and name in params:
            return params[name]
        raise AttributeError(name)

    def _check_shapes(self):
        for name, shape in self.param_shapes().items():
            got = self.params[name].shape
            if got != shape:
                raise ShapeError(f"{self.family}.{name}: expected shape {shape}, got {got}")

    def param_shapes(self) -> dict:
        raise NotImplementedError

    def config(self) -> dict:
        return {"family": self.family, "n_out": self.n_out, "n_in": self.n_in}

    def copy(self):
        return type(self)(**self.config_kwargs(), params={k: v.copy() for k, v in self.params.items()})

    def config_kwargs(self) -> dict:
        return {"n_out": self.n_out, "n_in": self.n_in}

    # -- probability -----------------------------------------------------

    def logits(self, x, y):
        """Per-unit logits of P(x_i = 1 | x_<i, y), shape (N, n_out)."""
        raise NotImplementedError

    def probs(self, x, y=None):
        """Per-unit conditional probabilities P(x_i = 1 | x_<i, y)."""
        x2, y2, single = _prep(self, x, y)
        p = sigmoid(self.logits(x2, y2))
        return p[0] if single else p

    def log_prob(self, x, y=None):
        x2, y2, single = _prep(self, x, y)
        lp = _row_log_prob(x2, self.logits(x2, y2))
        return float(lp[0]) if single else lp

    def sample(self, y=None, rng=None, n: int | None = None):
        """Ancestral sample in unit order; returns ``(x, log_prob)``.

        With ``y`` given, one sample is drawn per row of ``y``.  For priors
        pass ``n`` (defaults to a single unbatched sample).
        """
        if rng is None:
            raise ValueError("an explicit numpy Generator is required")
        if y is None:
            single = n is None
            rows = 1 if single else int(n)
        else:
            y = np.asarray(y, dtype=np.float64)
            single = y.ndim == 1
            rows = 1 if single else y.shape[0]
        y2 = _prep_y(self, y, rows)
        x, lp, _ = self._draw(y2, rng)
        if single:
            return x[0], float(lp[0])
        return x, lp

    def _draw(self, y, rng, score=True):
        """Unchecked sampling on 2-D arrays; returns ``(x, log_prob, logits)``.

        With ``score=False`` the log-prob slot is None.
        """
        u = rng.random((y.shape[0], self.n_out))
        x, z = self._sample(y, u)
        return x, (_row_log_prob(x, z) if score else None), z

    def _score(self, x, y):
        """Unchecked ``(log_prob, logits)`` on 2-D arrays."""
        z = self.logits(x, y)
        return _row_log_prob(x, z), z

    def _sample(self, y, u):
        raise NotImplementedError

    # -- gradients -------------------------------------------------------

    def grad(self, x, y=None, weights=None, per_sample: bool = False) -> ParamGradient:
        """Gradient of log P(x | y) w.r.t. every parameter.

        Rows are combined as ``sum_n weights[n] * d log P(x_n | y_n)``
        (unit weights by default).  With ``per_sample`` the row axis is kept
        and each block gains a leading dimension of size N.
        """
        x2, y2, single = _prep(self, x, y)
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64).reshape(-1)
            if weights.shape[0] != x2.shape[0]:
                raise ShapeError("weights must have one entry per row")
        g = self._grad(x2, y2, None, weights, per_sample)
        if per_sample and single:
            g = {k: v[0] for k, v in g.items()}
        return ParamGradient(g)

    def _grad(self, x, y, z, weights, per_sample=False):
        """Unchecked gradient; ``z`` may carry precomputed logits."""
        if z is None:
            z = self.logits(x, y)
        delta = x - _sigmoid_block(z)
        if weights is not None:
            delta *= weights[:, None]
        return self._backward(x, y, delta, per_sample)

    def _backward(self, x, y, delta, per_sample):
        raise NotImplementedError


class SbnLayer(Layer):
    """Conditionally independent units: P(x_i=1|y) = sigmoid(W[i] @ y + b[i])."""

    family = "sbn"

    def __init__(self, n_out, n_in=0, params=None):
        if params is None:
            params = {"W": np.zeros((n_out, n_in)), "b": np.zeros(n_out)}
        super().__init__(params, n_out, n_in)

    def param_shapes(self):
        return {"W": (self.n_out, self.n_in), "b": (self.n_out,)}

    def logits(self, x, y):
        return y @ self.W.T + self.b

    def _sample(self, y, u):
        z = y @ self.W.T + self.b
        x = (u < _sigmoid_block(z)).astype(np.float64)
        return x, z

    def _backward(self, x, y, delta, per_sample):
        if per_sample:
            return {"W": delta[:, :, None] * y[:, None, :], "b": delta.copy()}
        return {"W": delta.T @ y, "b": delta.sum(axis=0)}


class ArSbnLayer(Layer):
    """SBN with strictly lower-triangular links S among its own units."""

    family = "arsbn"

    def __init__(self, n_out, n_in=0, params=None):
        if params is None:
            params = {"W": np.zeros((n_out, n_in)), "S": np.zeros((n_out, n_out)), "b": np.zeros(n_out)}
        super().__init__(params, n_out, n_in)
        if np.any(np.triu(self.params["S"]) != 0):
            raise ShapeError("arsbn: S must be strictly lower triangular")
        self.mask = np.tril(np.ones((n_out, n_out)), k=-1)

    def param_shapes(self):
        return {"W": (self.n_out, self.n_in), "S": (self.n_out, self.n_out), "b": (self.n_out,)}

    def logits(self, x, y):
        return y @ self.W.T + x @ (self.S * self.mask).T + self.b

    def _sample(self, y, u):
        S = self.S * self.mask
        z = y @ self.W.T + self.b
        x = np.zeros_like(u)
        for i in range(self.n_out):
            # S is strictly lower triangular, so column i only feeds later units
            x[:, i] = u[:, i] < expit(z[:, i])
            z[:, i + 1:] += np.outer(x[:, i], S[i + 1:, i])
        # recompute so the returned log-prob matches log_prob() bit for bit
        return x, self.logits(x, y)

    def _backward(self, x, y, delta, per_sample):
        if per_sample:
            return {
                "W": delta[:, :, None] * y[:, None, :],
                "S": delta[:, :, None] * x[:, None, :] * self.mask,
                "b": delta.copy(),
            }
        return {"W": delta.T @ y, "S": (delta.T @ x) * self.mask, "b": delta.sum(axis=0)}


class CnadeLayer(Layer):
    """Conditional NADE.

    P(x_i=1|x_<i, y) = sigmoid(V[i] @ sigmoid(W[:, :i] @ x_<i + Ua @ y + a) + Ub[i] @ y + b[i])

    The hidden pre-activation is accumulated one column of W per unit, so a
    pass costs O(n_out * H + H * n_in).
    """

    family = "nade"

    def __init__(self, n_out, n_in=0, n_hidden=None, params=None):
        if params is None:
            if n_hidden is None:
                raise ShapeError("nade: n_hidden required")
            params = {
                "W": np.zeros((n_hidden, n_out)),
                "V": np.zeros((n_out, n_hidden)),
                "a": np.zeros(n_hidden),
                "b": np.zeros(n_out),
                "Ua": np.zeros((n_hidden, n_in)),
                "Ub": np.zeros((n_out, n_in)),
            }
        if n_hidden is None:
            n_hidden = np.shape(params["a"])[0]
        self.n_hidden = int(n_hidden)
        super().__init__(params, n_out, n_in)

    def param_shapes(self):
        H, D, I = self.n_hidden, self.n_out, self.n_in
        return {"W": (H, D), "V": (D, H), "a": (H,), "b": (D,), "Ua": (H, I), "Ub": (D, I)}

    def config(self):
        return {**super().config(), "n_hidden": self.n_hidden}

    def config_kwargs(self):
        return {**super().config_kwargs(), "n_hidden": self.n_hidden}

    def logits(self, x, y):
        W, V = self.W, self.V
        acc = y @ self.Ua.T + self.a
        z = y @ self.Ub.T + self.b
        for i in range(self.n_out):
            z[:, i] += expit(acc) @ V[i]
            acc += np.outer(x[:, i], W[:, i])
        return z

    def _sample(self, y, u):
        W, V = self.W, self.V
        acc = y @ self.Ua.T + self.a
        z = y @ self.Ub.T + self.b
        x = np.zeros_like(u)
        for i in range(self.n_out):
            z[:, i] += expit(acc) @ V[i]
            x[:, i] = u[:, i] < expit(z[:, i])
            acc += np.outer(x[:, i], W[:, i])
        return x, z

    def _backward(self, x, y, delta, per_sample):
        W, V = self.W, self.V
        N, D, H = x.shape[0], self.n_out, self.n_hidden
        # walk units backwards, peeling one column of W off the accumulator
        acc = y @ self.Ua.T + self.a + x @ W.T
        dacc = np.zeros((N, H))  # sum of hidden pre-activation errors of units > i
        if per_sample:
            dW = np.zeros((N, H, D))
            dV = np.zeros((N, D, H))
        else:
            dW = np.zeros((H, D))
            dV = np.zeros((D, H))
        for i in range(D - 1, -1, -1):
            acc -= np.outer(x[:, i], W[:, i])
            hid = expit(acc)
            d = delta[:, i]
            if per_sample:
                dW[:, :, i] = dacc * x[:, i:i + 1]
                dV[:, i, :] = d[:, None] * hid
            else:
                dW[:, i] = x[:, i] @ dacc
                dV[i] = d @ hid
            dacc += (d[:, None] * V[i]) * hid * (1.0 - hid)
        if per_sample:
            return {
                "W": dW,
                "V": dV,
                "a": dacc,
                "b": delta.copy(),
                "Ua": dacc[:, :, None] * y[:, None, :],
                "Ub": delta[:, :, None] * y[:, None, :],
            }
        return {
            "W": dW,
            "V": dV,
            "a": dacc.sum(axis=0),
            "b": delta.sum(axis=0),
            "Ua": dacc.T @ y,
            "Ub": delta.T @ y,
        }


FAMILIES = {"sbn": SbnLayer, "arsbn": ArSbnLayer, "nade": CnadeLayer}


def make_layer(family: str, n_out: int, n_in: int = 0, rng=None, n_hidden=None,
               bias=None) -> Layer:
    """Construct a layer, randomly initialised when ``rng`` is given.

    Weights are drawn from uniform(-s, s) with s = 1/sqrt(fan-in); biases
    are zero unless ``bias`` is passed.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown layer family {family!r}; expected one of {sorted(FAMILIES)}")
    if n_out < 1:
        raise ShapeError("layers need at least one output unit")
    if family == "nade":
        layer = CnadeLayer(n_out, n_in, n_hidden=n_hidden or n_out)
    else:
        layer = FAMILIES[family](n_out, n_in)
    if rng is not None:
        fan_in = {
            "W": n_out if family == "nade" else n_in,
            "S": n_out,
            "V": layer.params.get("a", np.zeros(0)).shape[0],
            "Ua": n_in,
            "Ub": n_in,
        }
        for name in sorted(layer.params):
            if name in ("a", "b") or layer.params[name].size == 0:
                continue
            s = 1.0 / np.sqrt(fan_in[name])
            layer.params[name][...] = rng.uniform(-s, s, size=layer.params[name].shape)
        if family == "arsbn":
            layer.params["S"] *= layer.mask
    if bias is not None:
        layer.params["b"][...] = bias
    return layer


def layer_from_config(cfg: dict, params: dict) -> Layer:
    kwargs = {"n_out": cfg["n_out"], "n_in": cfg["n_in"]}
    if cfg["family"] == "nade":
        kwargs["n_hidden"] = cfg["n_hidden"]
    return FAMILIES[cfg["family"]](**kwargs, params=params)


def layer_log_prob(layer: Layer, x, y=None):
    return layer.log_prob(x, y)


def layer_sample(layer: Layer, y=None, rng=None, n=None):
    return layer.sample(y, rng, n)


def layer_grad(layer: Layer, x, y=None) -> ParamGradient:
    return layer.grad(x, y)
