"""Command line: ``rws train | eval | sample | analyze``.

Runs are described by a JSON :class:`RunConfig`; a handful of flags
override single fields.  Every output file is a pure function of the
config and seed (wall-clock timings are only written on request).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .analysis import bootstrap_gradient_study, bootstrap_ll_study, ll_vs_K_curve, write_curve_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import BinaryDataset, DataError, load_amat, make_bars_dataset
from .estimators import dataset_log_marginals
from .layers import FAMILIES, ShapeError
from .model import build_models, check_pair
from .numerics import make_rng
from .oracle import BudgetExceeded, ExactPosteriorProposal
from .training import OptimizerState, TrainConfig, train_epoch

__all__ = ["RunConfig", "ModelSpec", "parse_model_spec", "load_dataset", "run_training", "main"]

# independent random streams per purpose, all derived from RunConfig.seed
STREAM_INIT, STREAM_TRAIN, STREAM_VALID, STREAM_EVAL, STREAM_SAMPLE, STREAM_ANALYZE, STREAM_BOOT = range(7)
# synthetic datasets use RunConfig.data_seed, one stream per split
DATA_STREAMS = {"train": 0, "valid": 1, "test": 2}


class ConfigError(ValueError):
    pass


# -- model spec strings --------------------------------------------------------


@dataclass
class ModelSpec:
    """Latent widths top first plus layer families for p (L + 1) and q (L)."""

    widths: list
    p_families: list
    q_families: list

    def __str__(self):
        def fam(v):
            return v[0] if len(set(v)) == 1 else ",".join(v)

        return f"{fam(self.p_families)}/{fam(self.q_families)}:{'-'.join(map(str, self.widths))}"


def parse_model_spec(text: str) -> ModelSpec:
    """Parse ``"sbn/sbn:10-200-200"`` style strings.

    Widths are latent layers top first.  Either family part may be a
    comma-separated per-layer list, top first: p needs one family per latent
    layer plus the visible layer, q one per latent layer.
    """
    m = re.fullmatch(r"\s*([a-z,]+)\s*/\s*([a-z,]+)\s*:\s*([0-9]+(?:-[0-9]+)*)\s*", text.lower())
    if not m:
        raise ConfigError(f"bad model spec {text!r}; expected e.g. 'sbn/sbn:10-200-200'")
    widths = [int(w) for w in m.group(3).split("-")]
    if min(widths) < 1:
        raise ConfigError("layer widths must be positive")
    L = len(widths)

    def fams(part, n, which):
        names = part.split(",")
        for f in names:
            if f not in FAMILIES:
                raise ConfigError(f"unknown layer family {f!r}; expected one of {sorted(FAMILIES)}")
        if len(names) == 1:
            return names * n
        if len(names) != n:
            raise ConfigError(f"{which} needs {n} families for {L} latent layers, got {len(names)}")
        return names

    return ModelSpec(widths, fams(m.group(1), L + 1, "p"), fams(m.group(2), L, "q"))


# -- run configuration ---------------------------------------------------------


@dataclass
class RunConfig:
    model: str = "sbn/sbn:10-200-200"
    nade_hidden: int | None = None
    train_data: str = ""
    valid_data: str | None = None
    test_data: str | None = None
    data_seed: int = 1234
    # TrainConfig fields
    K_train: int = 5
    learning_rate: float = 0.001
    momentum: float = 0.95
    batch_size: int = 25
    q_update_mode: str = "both"
    lr_decay_per_epoch: float = 1.0
    epochs: int = 1
    seed: int = 0
    sleep_samples_per_datapoint: int = 1
    wake_q_weight: float = 1.0
    sleep_q_weight: float = 1.0
    grad_clip: float | None = None
    # evaluation
    valid_K: int = 1000
    eval_K: int = 100_000
    eval_chunk: int = 10_000
    # analysis
    reference_K: int = 5000
    subset_sizes: list = field(default_factory=lambda: [1, 2, 5, 10, 25, 100, 1000, 5000])
    n_resamples: int = 1000
    n_datapoints: int = 25
    K_values: list = field(default_factory=lambda: [1, 10, 100, 1000, 10_000, 100_000])
    # execution
    out: str = "run"
    # None means every available core; results do not depend on it
    workers: int | None = None
    record_time: bool = False

    def __post_init__(self):
        self.spec = parse_model_spec(self.model)
        try:
            self.train_config()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        for name in ("valid_K", "eval_K", "eval_chunk", "reference_K", "n_resamples", "n_datapoints"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        sizes = [int(v) for v in self.subset_sizes]
        if not sizes or sizes[0] < 1 or any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[-1] > self.reference_K:
            raise ConfigError("subset_sizes must increase strictly within [1, reference_K]")
        Ks = [int(v) for v in self.K_values]
        if not Ks or Ks[0] < 1 or any(b <= a for a, b in zip(Ks, Ks[1:])):
            raise ConfigError("K_values must be positive and strictly increasing")
        if self.nade_hidden is not None and self.nade_hidden < 1:
            raise ConfigError("nade_hidden must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def n_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


# -- datasets ------------------------------------------------------------------


def load_dataset(source: str, split: str, data_seed: int) -> BinaryDataset:
    """``bars:SIDE:N`` draws a synthetic bars set; anything else is an amat path."""
    m = re.fullmatch(r"bars:(\d+):(\d+)", source.strip())
    if m:
        side, n = int(m.group(1)), int(m.group(2))
        return make_bars_dataset(side, n, make_rng(data_seed, DATA_STREAMS[split]), split=split)
    return load_amat(source, split=split)


# -- training --------------------------------------------------------------------


METRIC_FIELDS = ["epoch", "split", "ll_estimate", "ess_mean", "lr", "seconds"]


def _fmt(v):
    return "" if v is None else repr(float(v))


def build_from_config(rc: RunConfig, train: BinaryDataset):
    spec = rc.spec
    p, q = build_models(spec.widths, train.dim, spec.p_families, spec.q_families,
                        rng=make_rng(rc.seed, STREAM_INIT), visible_marginals=train.marginals(),
                        nade_hidden=rc.nade_hidden)
    return p, q


def run_training(rc: RunConfig, out: Path | None = None, log=None) -> dict:
    """Train per ``rc``; returns the final models and per-epoch metrics.

    With ``out`` set, writes ``metrics.csv``, ``run_config.json`` and
    ``checkpoints/epoch-XXXX`` (plus ``checkpoints/best``).
    """
    train = load_dataset(rc.train_data, "train", rc.data_seed)
    valid = load_dataset(rc.valid_data, "valid", rc.data_seed) if rc.valid_data else None
    if valid is not None and valid.dim != train.dim:
        raise DataError(f"valid width {valid.dim} != train width {train.dim}")
    cfg = rc.train_config()
    p, q = build_from_config(rc, train)
    state = OptimizerState.zeros(p, q)
    rng = make_rng(rc.seed, STREAM_TRAIN)
    history = []
    best = -math.inf
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        # where and how wide the run executed does not change its results
        saved = {k: v for k, v in rc.to_dict().items() if k not in ("out", "workers")}
        (out / "run_config.json").write_text(json.dumps(saved, indent=2, sort_keys=True) + "\n")
        ck_dir = out / "checkpoints"
        save_checkpoint(ck_dir / "epoch-0000", p, q, cfg, state, rng, extra={"model": rc.model})
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            m = train_epoch(p, q, train, cfg, state, rng)
            secs = time.perf_counter() - t0 if rc.record_time else None
            rows = [{"epoch": epoch, "split": "train", "ll_estimate": m["ll"], "ess_mean": m["ess"],
                     "lr": m["lr"], "seconds": secs}]
            score = m["ll"]
            if valid is not None:
                t0 = time.perf_counter()
                ll, ess = dataset_log_marginals(p, q, valid.rows, rc.valid_K, rc.seed, STREAM_VALID,
                                                chunk=rc.eval_chunk, workers=rc.n_workers)
                score = float(ll.mean())
                rows.append({"epoch": epoch, "split": "valid", "ll_estimate": score, "ess_mean": float(ess.mean()),
                             "lr": m["lr"], "seconds": time.perf_counter() - t0 if rc.record_time else None})
            history.extend(rows)
            if log is not None:
                log(" ".join(f"{r['split']}_ll={r['ll_estimate']:.4f}" for r in rows) + f" epoch={epoch}")
            if writer is not None:
                for r in rows:
                    writer.writerow([r["epoch"], r["split"], _fmt(r["ll_estimate"]), _fmt(r["ess_mean"]),
                                     _fmt(r["lr"]), _fmt(r["seconds"])])
                fh.flush()
                d = save_checkpoint(ck_dir / f"epoch-{epoch:04d}", p, q, cfg, state, rng,
                                    extra={"model": rc.model, "score": score})
                if score > best:
                    best = score
                    tmp = ck_dir / "best.tmp"
                    shutil.rmtree(tmp, ignore_errors=True)
                    shutil.copytree(d, tmp)
                    shutil.rmtree(ck_dir / "best", ignore_errors=True)
                    tmp.rename(ck_dir / "best")
    finally:
        if writer is not None:
            fh.close()
    return {"p": p, "q": q, "state": state, "metrics": history}


# -- commands ------------------------------------------------------------------


def _config_from_args(args, overrides: dict) -> RunConfig:
    d = {}
    if getattr(args, "config", None):
        if not Path(args.config).exists():
            raise ConfigError(f"config file {args.config} not found")
        d = RunConfig.from_file(args.config).to_dict()
    d.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(d)


def cmd_train(args) -> int:
    rc = _config_from_args(args, {
        "K_train": args.k, "learning_rate": args.lr, "epochs": args.epochs, "seed": args.seed,
        "q_update_mode": args.q_update, "workers": args.workers, "out": args.out,
    })
    if not rc.train_data:
        raise ConfigError("train_data is required")
    run_training(rc, Path(rc.out), log=None if args.quiet else lambda s: print(s, flush=True))
    return 0


def _bootstrap_ci(values, seed, n_boot=1000, level=0.95):
    rng = make_rng(seed, STREAM_BOOT)
    n = len(values)
    idx = rng.integers(0, n, size=(n_boot, n))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def _proposal(ck, kind):
    if kind == "exact":
        return ExactPosteriorProposal(ck.p)
    return ck.q


def _checked_data(args, rc, ck):
    ds = load_dataset(args.data, args.split, rc.data_seed)
    if ds.dim != ck.p.n_visible:
        raise ShapeError(f"dataset width {ds.dim} does not match model visible width {ck.p.n_visible}")
    return ds


def cmd_eval(args) -> int:
    rc = _config_from_args(args, {"eval_K": args.k, "eval_chunk": args.chunk, "workers": args.workers,
                                  "data_seed": args.data_seed})
    ck = load_checkpoint(args.checkpoint)
    ds = _checked_data(args, rc, ck)
    q = _proposal(ck, args.proposal)
    ll, ess = dataset_log_marginals(ck.p, q, ds.rows, rc.eval_K, args.seed, STREAM_EVAL, chunk=rc.eval_chunk,
                                    workers=rc.n_workers, dedupe=args.dedupe)
    lo, hi = _bootstrap_ci(ll, args.seed)
    text = (f"mean_ll={float(ll.mean()):.10f} ci95=[{lo:.10f}, {hi:.10f}] "
            f"ess_mean={float(ess.mean()):.6f} n={ds.n} K={rc.eval_K}\n")
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def _grid(tiles: np.ndarray, h: int, w: int) -> np.ndarray:
    n = tiles.shape[0]
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    img = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i, t in enumerate(tiles):
        r, c = divmod(i, cols)
        img[r * h:(r + 1) * h, c * w:(c + 1) * w] = t.reshape(h, w)
    return img


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def cmd_sample(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    D = ck.p.n_visible
    if args.shape:
        m = re.fullmatch(r"(\d+)x(\d+)", args.shape)
        if not m or int(m.group(1)) * int(m.group(2)) != D:
            raise ConfigError(f"--shape {args.shape} does not cover {D} visible units")
        h, w = int(m.group(1)), int(m.group(2))
    else:
        h = w = int(round(math.sqrt(D)))
        if h * w != D:
            raise ConfigError(f"visible width {D} is not a perfect square; pass --shape HxW")
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    x, hs, _ = ck.p.sample(make_rng(args.seed, STREAM_SAMPLE), n=args.n)
    probs = ck.p.visible_probs(x, hs[0] if hs else None)
    tiles = np.rint(255.0 * probs).astype(np.uint8)
    write_pgm(args.out, _grid(tiles, h, w))
    return 0


def _int_list(text):
    return None if text is None else [int(v) for v in text.split(",")]


def cmd_analyze(args) -> int:
    rc = _config_from_args(args, {
        "reference_K": args.reference_k, "subset_sizes": _int_list(args.sizes), "n_resamples": args.resamples,
        "n_datapoints": args.n_datapoints, "K_values": _int_list(args.k_values), "data_seed": args.data_seed,
    })
    ck = load_checkpoint(args.checkpoint)
    ds = _checked_data(args, rc, ck)
    q = _proposal(ck, args.proposal)
    rng = make_rng(args.seed, STREAM_ANALYZE)
    X = ds.rows[:rc.n_datapoints]
    if args.mode == "ll-vs-k":
        write_curve_csv(ll_vs_K_curve(ck.p, q, X, rc.K_values, rng), args.out)
        return 0
    study = bootstrap_gradient_study if args.mode == "grad-bias" else bootstrap_ll_study
    rep = study(ck.p, q, X, rc.reference_K, rc.subset_sizes, rc.n_resamples, rng, resample=not args.no_resample)
    rep.to_csv(args.out)
    return 0


# -- argument parsing ------------------------------------------------------------


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rws", description="Reweighted wake-sleep for binary directed models")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model pair")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--k", type=_positive_int, help="proposal samples per datapoint (K_train)")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--q-update", choices=["sleep", "wake", "both", "none"])
    t.add_argument("--workers", type=_positive_int)
    t.add_argument("--out")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    def common(c):
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--seed", type=int, default=0)

    def data_args(c):
        c.add_argument("--config", help="JSON run config supplying defaults")
        c.add_argument("--data", required=True, help="amat path or bars:SIDE:N")
        c.add_argument("--split", default="test", choices=["train", "valid", "test"])
        c.add_argument("--data-seed", type=int)
        c.add_argument("--proposal", default="q", choices=["q", "exact"],
                       help="importance proposal: the trained q or the enumerated posterior")

    e = sub.add_parser("eval", help="estimate mean log-likelihood of a dataset")
    common(e)
    e.add_argument("--out", help="also write the result line here")
    data_args(e)
    e.add_argument("--k", type=_positive_int, help="samples per datapoint (default eval_K)")
    e.add_argument("--chunk", type=_positive_int)
    e.add_argument("--workers", type=_positive_int)
    e.add_argument("--dedupe", action="store_true", help="share one estimate between identical rows")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="write a PGM grid of visible-unit probabilities")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--shape", help="tile shape HxW when the visible width is not square")
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("analyze", help="bootstrap bias/std or LL-vs-K study")
    common(a)
    a.add_argument("--out", required=True)
    data_args(a)
    a.add_argument("--mode", required=True, choices=["grad-bias", "ll-bias", "ll-vs-k"])
    a.add_argument("--reference-k", type=_positive_int)
    a.add_argument("--sizes", help="comma-separated subset sizes")
    a.add_argument("--resamples", type=_positive_int)
    a.add_argument("--n-datapoints", type=_positive_int)
    a.add_argument("--k-values", help="comma-separated K values for ll-vs-k")
    a.add_argument("--no-resample", action="store_true", help="use the first s reference samples")
    a.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, ShapeError, CheckpointError, BudgetExceeded, ValueError, OSError) as err:
        print(f"rws {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
