"""Checkpoint directories: ``manifest.json`` plus one raw ``.f64`` file per array.

Arrays are little-endian float64 in C order; their shapes live in the
manifest, so any language can read a checkpoint without this package.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import GenerativeModel, InferenceModel, check_pair
from .layers import ParamGradient
from .training import OptimizerState, TrainConfig

__all__ = [
    "CheckpointError",
    "VersionMismatch",
    "TruncatedArray",
    "ShapeMismatch",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

FORMAT = "rws-checkpoint"
VERSION = 1
DTYPE = np.dtype("<f8")


class CheckpointError(RuntimeError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedArray(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    p: GenerativeModel
    q: InferenceModel
    config: TrainConfig
    state: OptimizerState
    rng_state: dict | None
    manifest: dict

    def rng(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        bg = getattr(np.random, self.rng_state["bit_generator"])()
        bg.state = self.rng_state
        return np.random.Generator(bg)


def _blocks(p, q, state):
    out = {}
    for prefix, params in (("p.", p.named_params()), ("q.", q.named_params())):
        out.update({prefix + k: v for k, v in params.items()})
    if state is not None:
        out.update({"vp." + k: v for k, v in state.velocity_p.items()})
        out.update({"vq." + k: v for k, v in state.velocity_q.items()})
    return out


def save_checkpoint(path, p, q, cfg: TrainConfig, state: OptimizerState | None = None, rng=None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = []
    for name, arr in sorted(_blocks(p, q, state).items()):
        fname = f"{name}.f64"
        np.ascontiguousarray(arr, dtype=DTYPE).tofile(path / fname)
        arrays.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "float64-le",
        "ordering": "autoregressive units in natural index order; p layers top first; q layers bottom first",
        "p_layers": p.config(),
        "q_layers": q.config(),
        "config": cfg.to_dict(),
        "epoch": state.epoch if state is not None else 0,
        "step": state.step if state is not None else 0,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "arrays": arrays,
        "extra": extra or {},
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path / "manifest.json")
    return path


def _read_array(path: Path, entry: dict) -> np.ndarray:
    f = path / entry["file"]
    if not f.exists():
        raise TruncatedArray(f"array block {entry['name']!r}: file {f.name} missing")
    raw = f.read_bytes()
    if len(raw) % DTYPE.itemsize:
        raise TruncatedArray(f"array block {entry['name']!r}: {len(raw)} bytes is not a whole number of float64s")
    arr = np.frombuffer(raw, dtype=DTYPE)
    shape = tuple(entry["shape"])
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeMismatch(
            f"array block {entry['name']!r}: manifest shape {shape} needs {int(np.prod(shape))} values, file has {arr.size}"
        )
    return arr.reshape(shape).astype(np.float64)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"{path}: no manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise VersionMismatch(
            f"{path}: unsupported checkpoint {manifest.get('format')!r} v{manifest.get('version')} (want {FORMAT} v{VERSION})"
        )
    blocks = {e["name"]: _read_array(path, e) for e in manifest["arrays"]}

    def take(prefix):
        return {k[len(prefix):]: v for k, v in blocks.items() if k.startswith(prefix)}

    try:
        p = GenerativeModel.from_config(manifest["p_layers"], take("p."))
        q = InferenceModel.from_config(manifest["q_layers"], take("q."))
        check_pair(p, q)
    except (KeyError, ValueError) as err:
        raise ShapeMismatch(f"{path}: arrays disagree with declared layers: {err}") from err
    state = OptimizerState(
        velocity_p=ParamGradient(take("vp.")) or p.zero_grad(),
        velocity_q=ParamGradient(take("vq.")) or q.zero_grad(),
        epoch=int(manifest.get("epoch", 0)),
        step=int(manifest.get("step", 0)),
    )
    for vel, params in ((state.velocity_p, p.named_params()), (state.velocity_q, q.named_params())):
        for k, v in params.items():
            if k not in vel or vel[k].shape != v.shape:
                raise ShapeMismatch(f"{path}: velocity block {k!r} missing or misshapen")
    return Checkpoint(
        p=p,
        q=q,
        config=TrainConfig(**manifest["config"]),
        state=state,
        rng_state=manifest.get("rng_state"),
        manifest=manifest,
    )
