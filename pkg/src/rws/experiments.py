"""Small reproducible experiments shared by the acceptance suite and scripts/.

Both problems are small enough that the generating process is known in
closed form, so trained models can be scored against it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BinaryDataset, bars_entropy, make_bars_dataset
from .estimators import dataset_log_marginals
from .layers import make_layer
from .model import GenerativeModel, build_models
from .numerics import make_rng
from .oracle import exact_log_marginal
from .training import OptimizerState, TrainConfig, train_epoch

__all__ = [
    "BarsResult",
    "bars_experiment",
    "xor_teacher",
    "xor_datasets",
    "exact_mean_ll",
    "q_capacity_experiment",
]


@dataclass
class BarsResult:
    seed: int
    mode: str
    K: int
    heldout_ll: float
    analytic_ll: float
    train_ll: list


def bars_experiment(seed: int, mode: str = "both", K: int = 5, epochs: int = 200, side: int = 3,
                    n_train: int = 8000, n_test: int = 10_000, widths=(4, 16), lr: float = 0.003,
                    eval_K: int = 10_000, data_seed: int = 2024) -> BarsResult:
    """Train SBN/SBN on the bars problem and score it on fresh bars images.

    The data are the same for every ``seed``; the seed drives initialisation
    and all training randomness.  Held-out LL uses ``eval_K`` proposal
    samples per distinct test image.
    """
    train = make_bars_dataset(side, n_train, make_rng(data_seed, 0))
    test = make_bars_dataset(side, n_test, make_rng(data_seed, 1), split="test")
    p, q = build_models(list(widths), side * side, rng=make_rng(seed, 0), visible_marginals=train.marginals())
    cfg = TrainConfig(K_train=K, learning_rate=lr, momentum=0.95, batch_size=25, q_update_mode=mode, epochs=epochs)
    state = OptimizerState.zeros(p, q)
    rng = make_rng(seed, 1)
    train_ll = [train_epoch(p, q, train, cfg, state, rng)["ll"] for _ in range(epochs)]
    ll, _ = dataset_log_marginals(p, q, test.rows, eval_K, seed, 2, chunk=200_000, dedupe=True)
    return BarsResult(seed, mode, K, float(ll.mean()), -bars_entropy(side), train_ll)


def xor_teacher(n_copies: int = 4, strength: float = 6.0, n_which: int = 2, which: float = 1.0) -> GenerativeModel:
    """Two fair hidden causes; one visible block is their noisy OR, one their noisy AND.

    Seeing the OR block on and the AND block off leaves exactly one cause
    active, so the posterior is an XOR over the two causes and no factorial
    distribution can match it.  A weak "which" block leans towards cause 1
    (logit +``which``) or cause 2 (-``which``), so the two single-cause
    configurations stay distinguishable and cannot be relabelled into a
    factorial code.
    """
    top = make_layer("sbn", 2)
    vis = make_layer("sbn", 2 * n_copies + n_which, 2)
    a = strength
    W, b = vis.params["W"], vis.params["b"]
    W[:n_copies] = 2 * a
    b[:n_copies] = -a                        # OR: on when either cause is on
    W[n_copies:2 * n_copies] = 2 * a
    b[n_copies:2 * n_copies] = -3 * a        # AND: on only when both are on
    W[2 * n_copies:] = [which, -which]
    return GenerativeModel([top, vis])


def xor_datasets(n_train: int, n_test: int, seed: int = 0, teacher: GenerativeModel | None = None):
    teacher = teacher or xor_teacher()
    x_tr, _, _ = teacher.sample(make_rng(seed, 0), n=n_train)
    x_te, _, _ = teacher.sample(make_rng(seed, 1), n=n_test)
    return BinaryDataset(x_tr, "train", "xor"), BinaryDataset(x_te, "test", "xor")


def exact_mean_ll(p, rows) -> float:
    """Mean exact log p(x) over rows, enumerating once per distinct row."""
    uniq, inverse = np.unique(np.asarray(rows), axis=0, return_inverse=True)
    vals = np.array([exact_log_marginal(p, x) for x in uniq])
    return float(vals[inverse.reshape(-1)].mean())


def q_capacity_experiment(seed: int, q_family: str, K: int = 1, epochs: int = 30, lr: float = 0.01,
                          mode: str = "sleep", init_noise: float | None = 0.3, n_train: int = 2000,
                          n_test: int = 2000, data_seed: int = 7, teacher: dict | None = None) -> dict:
    """Train SBN-p with the given q family on XOR-teacher data; exact held-out LL.

    With ``init_noise`` set, p starts at the teacher plus Gaussian noise of
    that scale (drawn from ``seed``), so both q families begin next to a
    solution whose posterior is non-factorial and the comparison measures how
    far each q lets training drag p away from it.  ``init_noise=None`` starts
    p from the usual random initialisation, which also draws the same p for
    both families.
    """
    teacher = xor_teacher(**(teacher or {}))
    train, test = xor_datasets(n_train, n_test, data_seed, teacher)
    widths = [layer.n_out for layer in teacher.layers[:-1]]
    p, q = build_models(widths, train.dim, "sbn", q_family, rng=make_rng(seed, 0),
                        visible_marginals=train.marginals())
    if init_noise is not None:
        noise = make_rng(seed, 2)
        for src, dst in zip(teacher.layers, p.layers):
            for k, v in src.params.items():
                dst.params[k][...] = v + init_noise * noise.standard_normal(v.shape)
    cfg = TrainConfig(K_train=K, learning_rate=lr, batch_size=25, q_update_mode=mode, epochs=epochs)
    state = OptimizerState.zeros(p, q)
    rng = make_rng(seed, 1)
    for _ in range(epochs):
        train_epoch(p, q, train, cfg, state, rng)
    return {
        "seed": seed,
        "q_family": q_family,
        "heldout_ll": exact_mean_ll(p, test.rows),
        "teacher_ll": exact_mean_ll(teacher, test.rows),
    }
