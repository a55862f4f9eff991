"""Generative stack p(x, h) and inference stack q(h | x).

Latent configurations are lists ``[h_1, ..., h_L]`` ordered from the layer
next to the data upwards, each an array of shape ``(N, D_k)`` (or ``(D_k,)``
for a single configuration).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .layers import Layer, ParamGradient, ShapeError, layer_from_config, make_layer

__all__ = [
    "GenerativeModel",
    "InferenceModel",
    "build_models",
    "check_pair",
    "joint_log_prob",
    "ancestral_sample",
    "inference_sample",
    "inference_log_prob",
]


def _as_batch(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def _out(v, single):
    if single:
        return float(v[0]) if np.ndim(v) == 1 else v[0]
    return v


class _Stack:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        if not self.layers:
            raise ShapeError("a stack needs at least one layer")

    def named_params(self) -> dict:
        """Flat ``{"k.name": array}`` view of every parameter (not copies)."""
        return {f"{k}.{n}": v for k, layer in enumerate(self.layers) for n, v in layer.params.items()}

    def zero_grad(self) -> ParamGradient:
        return ParamGradient.zeros_like(self.named_params())

    def config(self) -> list:
        return [layer.config() for layer in self.layers]

    def copy(self):
        return type(self)([layer.copy() for layer in self.layers])

    @classmethod
    def from_config(cls, config: list, arrays: dict):
        layers = []
        for k, cfg in enumerate(config):
            prefix = f"{k}."
            params = {name[len(prefix):]: v for name, v in arrays.items() if name.startswith(prefix)}
            layers.append(layer_from_config(cfg, params))
        return cls(layers)

    def n_params(self) -> int:
        return sum(v.size for v in self.named_params().values())


class GenerativeModel(_Stack):
    """p(x, h) = p_L(h_L) p_{L-1}(h_{L-1}|h_L) ... p_0(x|h_1).

    ``layers`` is ordered top first: ``layers[0]`` is the prior over h_L and
    ``layers[-1]`` is the visible layer p_0(x | h_1).
    """

    def __init__(self, layers: Sequence[Layer]):
        super().__init__(layers)
        if not self.layers[0].is_prior:
            raise ShapeError("top layer of p must be unconditioned (n_in == 0)")
        for upper, lower in zip(self.layers, self.layers[1:]):
            if lower.n_in != upper.n_out:
                raise ShapeError(
                    f"p width chain broken: layer outputs {upper.n_out} but next layer expects {lower.n_in}"
                )

    @property
    def n_latent_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def n_visible(self) -> int:
        return self.layers[-1].n_out

    @property
    def latent_widths(self) -> list:
        """Widths [D_1, ..., D_L]."""
        return [layer.n_out for layer in reversed(self.layers[:-1])]

    def _chain(self, x, h):
        # outputs top first: h_L, ..., h_1, x
        if len(h) != self.n_latent_layers:
            raise ShapeError(f"expected {self.n_latent_layers} latent layers, got {len(h)}")
        return list(reversed(h)) + [x]

    def log_prob(self, x, h):
        """log p(x, h); scalar for unbatched input, else shape (N,)."""
        single = np.ndim(x) == 1
        outs = [_as_batch(v) for v in self._chain(x, h)]
        total = self.layers[0].log_prob(outs[0])
        for layer, parent, out in zip(self.layers[1:], outs, outs[1:]):
            total = total + layer.log_prob(out, parent)
        return _out(total, single)

    def sample(self, rng, n: int | None = None):
        """Ancestral sample; returns ``(x, h, log_joint)``."""
        single = n is None
        out, lp = self.layers[0].sample(None, rng, n=1 if single else n)
        outs = [out]
        for layer in self.layers[1:]:
            out, lpk = layer.sample(outs[-1], rng)
            lp = lp + lpk
            outs.append(out)
        x = outs[-1]
        h = list(reversed(outs[:-1]))
        if single:
            return x[0], [v[0] for v in h], float(lp[0])
        return x, h, lp

    def grad(self, x, h, weights=None, per_sample: bool = False) -> ParamGradient:
        """Gradient of log p(x, h); each layer contributes independently."""
        outs = [_as_batch(v) for v in self._chain(x, h)]
        g = ParamGradient()
        g.update(self.layers[0].grad(outs[0], None, weights, per_sample).prefixed("0."))
        for k, (layer, parent, out) in enumerate(zip(self.layers[1:], outs, outs[1:]), start=1):
            g.update(layer.grad(out, parent, weights, per_sample).prefixed(f"{k}."))
        if per_sample and np.ndim(x) == 1:
            g = ParamGradient({k: v[0] for k, v in g.items()})
        return g

    # unchecked 2-D internals used by the training loop; ``outs`` is the
    # top-first chain [h_L, ..., h_1, x] and ``zs`` the matching logits

    def _draw(self, rng, n, score=True):
        outs, zs = [], []
        parent = np.zeros((n, 0))
        lp = 0.0
        for layer in self.layers:
            out, lpk, z = layer._draw(parent, rng, score)
            outs.append(out)
            zs.append(z)
            if score:
                lp = lp + lpk
            parent = out
        return outs, (lp if score else None), zs

    def _score(self, outs):
        zs = []
        parent = np.zeros((outs[0].shape[0], 0))
        lp = 0.0
        for layer, out in zip(self.layers, outs):
            lpk, z = layer._score(out, parent)
            zs.append(z)
            lp = lp + lpk
            parent = out
        return lp, zs

    def _grad(self, outs, zs, weights) -> dict:
        g = {}
        parent = np.zeros((outs[0].shape[0], 0))
        for k, (layer, out, z) in enumerate(zip(self.layers, outs, zs)):
            for name, v in layer._grad(out, parent, z, weights).items():
                g[f"{k}.{name}"] = v
            parent = out
        return g

    def visible_probs(self, x, h1):
        """Probabilities each visible bit was drawn with, P(x_i = 1 | x_<i, h_1)."""
        return self.layers[-1].probs(x, h1)


class InferenceModel(_Stack):
    """q(h | x) = q_1(h_1 | x) q_2(h_2 | h_1) ... q_L(h_L | h_{L-1})."""

    def __init__(self, layers: Sequence[Layer]):
        super().__init__(layers)
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.n_in != lower.n_out:
                raise ShapeError(
                    f"q width chain broken: layer outputs {lower.n_out} but next layer expects {upper.n_in}"
                )

    @property
    def n_visible(self) -> int:
        return self.layers[0].n_in

    def sample(self, x, rng):
        """Draw h ~ q(h|x) layer by layer; returns ``(h, log_q)``."""
        single = np.ndim(x) == 1
        below = _as_batch(x)
        if below.shape[1] != self.n_visible:
            raise ShapeError(f"x width {below.shape[1]} != q input width {self.n_visible}")
        h, lq = [], 0.0
        for layer in self.layers:
            below, lp = layer.sample(below, rng)
            lq = lq + lp
            h.append(below)
        if single:
            return [v[0] for v in h], float(lq[0])
        return h, lq

    def log_prob(self, h, x):
        single = np.ndim(x) == 1
        if len(h) != len(self.layers):
            raise ShapeError(f"expected {len(self.layers)} latent layers, got {len(h)}")
        below, total = _as_batch(x), 0.0
        for layer, hk in zip(self.layers, h):
            hk = _as_batch(hk)
            total = total + layer.log_prob(hk, below)
            below = hk
        return _out(total, single)

    def grad(self, h, x, weights=None, per_sample: bool = False) -> ParamGradient:
        g = ParamGradient()
        below = _as_batch(x)
        for k, (layer, hk) in enumerate(zip(self.layers, h)):
            hk = _as_batch(hk)
            g.update(layer.grad(hk, below, weights, per_sample).prefixed(f"{k}."))
            below = hk
        if per_sample and np.ndim(x) == 1:
            g = ParamGradient({k: v[0] for k, v in g.items()})
        return g


    # unchecked internals; ``h`` is bottom-first [h_1, ..., h_L]

    def _draw(self, x, rng):
        h, zs = [], []
        below, lq = x, 0.0
        for layer in self.layers:
            below, lp, z = layer._draw(below, rng)
            h.append(below)
            zs.append(z)
            lq = lq + lp
        return h, lq, zs

    def _grad(self, h, x, zs, weights) -> dict:
        g = {}
        below = x
        for k, (layer, hk) in enumerate(zip(self.layers, h)):
            z = None if zs is None else zs[k]
            for name, v in layer._grad(hk, below, z, weights).items():
                g[f"{k}.{name}"] = v
            below = hk
        return g


def check_pair(p: GenerativeModel, q: InferenceModel) -> None:
    """Raise ShapeError unless q proposes latents of p's widths."""
    if q.n_visible != p.n_visible:
        raise ShapeError(f"q conditions on {q.n_visible} visible bits but p emits {p.n_visible}")
    q_widths = [layer.n_out for layer in q.layers]
    if q_widths != p.latent_widths:
        raise ShapeError(f"q latent widths {q_widths} != p latent widths {p.latent_widths}")


def _families(spec, n):
    if isinstance(spec, str):
        return [spec] * n
    spec = list(spec)
    if len(spec) != n:
        raise ShapeError(f"need {n} layer families, got {len(spec)}")
    return spec


def build_models(widths: Sequence[int], n_visible: int, p_family="sbn", q_family="sbn",
                 rng=None, visible_marginals=None, nade_hidden: int | None = None):
    """Build a randomly initialised (p, q) pair.

    ``widths`` lists latent widths top layer first (``[D_L, ..., D_1]``).
    Families may be one name or a per-layer list, top first; p has
    ``len(widths) + 1`` layers and q has ``len(widths)``.  With
    ``visible_marginals`` the visible biases start at the logit of the data
    marginals.
    """
    widths = [int(w) for w in widths]
    if not widths or min(widths) < 1 or n_visible < 1:
        raise ShapeError(f"invalid widths {widths} / visible {n_visible}")
    p_fams = _families(p_family, len(widths) + 1)
    q_fams = _families(q_family, len(widths))
    outs = widths + [n_visible]
    p_layers = []
    for k, (fam, d) in enumerate(zip(p_fams, outs)):
        n_in = 0 if k == 0 else outs[k - 1]
        bias = None
        if k == len(outs) - 1 and visible_marginals is not None:
            m = np.clip(np.asarray(visible_marginals, dtype=np.float64), 1e-3, 1 - 1e-3)
            bias = np.log(m) - np.log1p(-m)
        p_layers.append(make_layer(fam, d, n_in, rng=rng, n_hidden=nade_hidden or d, bias=bias))
    # q runs bottom-up: q_1(h_1|x) first; its families are given top first too
    q_layers = []
    below = n_visible
    for fam, d in zip(reversed(q_fams), reversed(widths)):
        q_layers.append(make_layer(fam, d, below, rng=rng, n_hidden=nade_hidden or d))
        below = d
    p, q = GenerativeModel(p_layers), InferenceModel(q_layers)
    check_pair(p, q)
    return p, q


def joint_log_prob(p: GenerativeModel, x, h):
    return p.log_prob(x, h)


def ancestral_sample(p: GenerativeModel, rng, n=None):
    return p.sample(rng, n)


def inference_sample(q: InferenceModel, x, rng):
    return q.sample(x, rng)


def inference_log_prob(q: InferenceModel, h, x):
    return q.log_prob(h, x)
