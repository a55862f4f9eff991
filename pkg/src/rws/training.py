"""Reweighted wake-sleep gradient estimators, SGD with momentum, and the training loop."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .estimators import (
    ImportanceBatch,
    draw_importance_batch,
    effective_sample_size,
    log_marginal_estimate,
    normalize_weights,
)
from .layers import ParamGradient
from .model import GenerativeModel, InferenceModel, check_pair

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "wake_p_gradient",
    "wake_q_gradient",
    "sleep_q_gradient",
    "sgd_momentum_step",
    "train_step",
    "train_epoch",
    "minibatches",
]

Q_MODES = ("sleep", "wake", "both", "none")

# route all-SBN stacks through the compiled step; tests switch this off to
# compare against the numpy path
USE_SBN_KERNEL = True


@dataclass
class TrainConfig:
    K_train: int = 5
    learning_rate: float = 0.001
    momentum: float = 0.95
    batch_size: int = 25
    q_update_mode: str = "both"
    lr_decay_per_epoch: float = 1.0
    epochs: int = 1
    seed: int = 0
    # dream samples per training datapoint for the sleep-phase q update
    sleep_samples_per_datapoint: int = 1
    wake_q_weight: float = 1.0
    sleep_q_weight: float = 1.0
    grad_clip: float | None = None

    def __post_init__(self):
        if int(self.K_train) < 1:
            raise ValueError("K_train must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if self.q_update_mode not in Q_MODES:
            raise ValueError(f"q_update_mode must be one of {Q_MODES}")
        if self.lr_decay_per_epoch < 1:
            raise ValueError("lr_decay_per_epoch must be >= 1")
        if int(self.epochs) < 0:
            raise ValueError("epochs must be >= 0")
        if int(self.sleep_samples_per_datapoint) < 1:
            raise ValueError("sleep_samples_per_datapoint must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate / self.lr_decay_per_epoch ** epoch


@dataclass
class OptimizerState:
    velocity_p: ParamGradient
    velocity_q: ParamGradient
    epoch: int = 0
    step: int = 0

    @classmethod
    def zeros(cls, p: GenerativeModel, q: InferenceModel) -> "OptimizerState":
        return cls(p.zero_grad(), q.zero_grad())


def _flat_weights(batch: ImportanceBatch) -> np.ndarray:
    w = normalize_weights(batch)
    B = 1 if w.ndim == 1 else w.shape[0]
    return w.reshape(-1) / B


def wake_p_gradient(p: GenerativeModel, batch: ImportanceBatch) -> ParamGradient:
    """sum_k w~_k d/dtheta log p(x, h_k), averaged over the datapoints in ``batch``."""
    return p.grad(batch.flat_x(), batch.rows(), weights=_flat_weights(batch))


def wake_q_gradient(q: InferenceModel, batch: ImportanceBatch) -> ParamGradient:
    """sum_k w~_k d/dphi log q(h_k | x): the sampled ascent direction on -KL(p(h|x) || q(h|x))."""
    return q.grad(batch.rows(), batch.flat_x(), weights=_flat_weights(batch))


def sleep_q_gradient(p: GenerativeModel, q: InferenceModel, rng, n: int = 1) -> ParamGradient:
    """Mean of d/dphi log q(h'|x') over ``n`` dream samples (x', h') ~ p."""
    x, h, _ = p.sample(rng, n=n)
    return q.grad(h, x, weights=np.full(n, 1.0 / n))


def sgd_momentum_step(params: dict, grad: ParamGradient, velocity: ParamGradient, lr: float, beta: float):
    """v <- beta * v + grad;  params <- params + lr * v  (ascent, in place)."""
    for name, g in grad.items():
        v = velocity[name]
        v *= beta
        v += g
        params[name] += lr * v
    return params, velocity


def _clip(g: ParamGradient, limit):
    if limit is None:
        return g
    n = g.norm()
    return g.scaled(limit / n) if n > limit else g


def _fast_applicable(p, q) -> bool:
    return isinstance(p, GenerativeModel) and isinstance(q, InferenceModel)


def train_step(p, q, xb, cfg: TrainConfig, state: OptimizerState, rng, lr: float | None = None) -> dict:
    """One minibatch update.

    Random draws happen in a fixed order: first the K_train proposal samples
    for every datapoint, then (if the mode uses it) the dream samples.
    Gradients are all taken at the pre-update parameters.
    """
    lr = cfg.lr_at(state.epoch) if lr is None else lr
    xb = np.atleast_2d(np.asarray(xb, dtype=np.float64))
    if not _fast_applicable(p, q):
        return _train_step_generic(p, q, xb, cfg, state, rng, lr)
    B, K = xb.shape[0], cfg.K_train
    if USE_SBN_KERNEL and cfg.grad_clip is None and _all_sbn(p, q):
        return _train_step_sbn(p, q, xb, cfg, state, rng, lr)
    X = np.repeat(xb, K, axis=0)
    # the same draws and arithmetic as draw_importance_batch + wake_*_gradient,
    # but logits are kept between scoring and differentiation
    h, log_q, zq = q._draw(X, rng)
    outs = list(reversed(h)) + [X]
    log_p, zp = p._score(outs)
    logw = (log_p - log_q).reshape(B, K)
    w = normalize_weights(logw)
    wf = w.reshape(-1) / B
    gp = ParamGradient(p._grad(outs, zp, wf))
    mode = cfg.q_update_mode
    gq = None
    if mode == "wake":
        gq = ParamGradient(q._grad(h, X, zq, wf * cfg.wake_q_weight))
    elif mode in ("sleep", "both"):
        n = B * cfg.sleep_samples_per_datapoint
        douts, _, _ = p._draw(rng, n, score=False)
        dh = list(reversed(douts[:-1]))
        ws = np.full(n, cfg.sleep_q_weight / n)
        if mode == "sleep":
            gq = ParamGradient(q._grad(dh, douts[-1], None, ws))
        else:
            # wake and sleep terms share one backward pass over stacked rows
            hh = [np.concatenate([a, b]) for a, b in zip(h, dh)]
            gq = ParamGradient(q._grad(hh, np.concatenate([X, douts[-1]]), None,
                                       np.concatenate([wf * cfg.wake_q_weight, ws])))
    _apply(p, q, gp, gq, cfg, state, lr)
    m = np.max(logw, axis=-1)
    return {
        "ll": m + np.log(np.exp(logw - m[:, None]).sum(axis=-1)) - np.log(K),
        "ess": effective_sample_size(w),
    }


def _all_sbn(p, q) -> bool:
    return all(layer.family == "sbn" for layer in p.layers) and all(layer.family == "sbn" for layer in q.layers)


def _train_step_sbn(p, q, xb, cfg, state, rng, lr) -> dict:
    from . import _sbn_kernel

    B, K = xb.shape[0], cfg.K_train
    mode = cfg.q_update_mode
    # uniforms in the numpy path's order: proposal layers bottom-up, then the
    # dream sample top-down
    Uq = tuple(rng.random((B * K, layer.n_out)) for layer in q.layers)
    if mode in ("sleep", "both"):
        n = B * cfg.sleep_samples_per_datapoint
        Up = tuple(rng.random((n, layer.n_out)) for layer in p.layers)
    else:
        Up = tuple(np.zeros((0, layer.n_out)) for layer in p.layers)
    vp, vq = state.velocity_p, state.velocity_q
    ll, ess = np.empty(B), np.empty(B)
    ok = _sbn_kernel.sbn_step(
        np.ascontiguousarray(xb), K,
        tuple(L.params["W"] for L in p.layers), tuple(L.params["b"] for L in p.layers),
        tuple(L.params["W"] for L in q.layers), tuple(L.params["b"] for L in q.layers),
        tuple(vp[f"{k}.W"] for k in range(len(p.layers))), tuple(vp[f"{k}.b"] for k in range(len(p.layers))),
        tuple(vq[f"{k}.W"] for k in range(len(q.layers))), tuple(vq[f"{k}.b"] for k in range(len(q.layers))),
        Uq, Up, _sbn_kernel.MODES[mode], float(cfg.wake_q_weight), float(cfg.sleep_q_weight),
        float(lr), float(cfg.momentum), ll, ess,
    )
    if not ok:
        raise FloatingPointError("importance weights are all zero or non-finite")
    state.step += 1
    return {"ll": ll, "ess": ess}


def _apply(p, q, gp, gq, cfg, state, lr):
    sgd_momentum_step(p.named_params(), _clip(gp, cfg.grad_clip), state.velocity_p, lr, cfg.momentum)
    if gq is not None:
        sgd_momentum_step(q.named_params(), _clip(gq, cfg.grad_clip), state.velocity_q, lr, cfg.momentum)
    state.step += 1


def _train_step_generic(p, q, xb, cfg, state, rng, lr) -> dict:
    B = xb.shape[0]
    batch = draw_importance_batch(p, q, xb, cfg.K_train, rng)
    gp = wake_p_gradient(p, batch)
    gq = None
    if cfg.q_update_mode in ("wake", "both"):
        gq = wake_q_gradient(q, batch).scaled(cfg.wake_q_weight)
    if cfg.q_update_mode in ("sleep", "both"):
        gs = sleep_q_gradient(p, q, rng, n=B * cfg.sleep_samples_per_datapoint)
        gq = gs.scaled(cfg.sleep_q_weight) if gq is None else gq.add_scaled(gs, cfg.sleep_q_weight)
    _apply(p, q, gp, gq, cfg, state, lr)
    return {
        "ll": log_marginal_estimate(batch),
        "ess": effective_sample_size(normalize_weights(batch)),
    }


def minibatches(rows: np.ndarray, batch_size: int, rng):
    """One shuffled pass over ``rows``; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(rows.shape[0])
    for start in range(0, rows.shape[0], batch_size):
        yield rows[order[start:start + batch_size]]


def train_epoch(p, q, data, cfg: TrainConfig, state: OptimizerState, rng) -> dict:
    """One pass of reweighted wake-sleep over ``data`` (rows of bits or a BinaryDataset)."""
    rows = getattr(data, "rows", data)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        raise ValueError("dataset is empty")
    check_pair(p, q)
    lr = cfg.lr_at(state.epoch)
    lls, esss = [], []
    for xb in minibatches(rows, cfg.batch_size, rng):
        m = train_step(p, q, xb, cfg, state, rng, lr=lr)
        lls.append(m["ll"])
        esss.append(m["ess"])
    state.epoch += 1
    return {
        "ll": float(np.mean(np.concatenate(lls))),
        "ess": float(np.mean(np.concatenate(esss))),
        "lr": lr,
    }
