"""Siamese training on time-lapse scenes.

Each step samples ``batch_size`` frame pairs (two distinct frames of one
scene), runs both frames through the shared-weight network, optimizes the
weighted loss with Adam under a cosine learning-rate schedule and finally
updates the memory bank with the step's detached queries.

Randomness: the pairs of step ``s`` (0-based) are drawn from
``np.random.default_rng([seed, s])``, scene index first, then the two frame
indices, pair by pair.  Deriving the generator from the step keeps resumed
runs on exactly the same stream as uninterrupted ones.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .errors import CheckpointError, ContractError, NumericError
from .losses import (BSWConfig, LossReport, LossWeights, background_prediction_loss, bsw_loss_batch,
                     cross_information_loss, self_consistency_loss, total_loss)
from .memory import MemoryBank, init_memory, query_rows, update
from .model import ModelConfig, Params, forward, init_params, layer_specs
from .synth import TimeLapseScene, load_frames, scene_dirs

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "lr", "loss_total", "loss_b", "loss_s", "loss_c", "loss_w"]


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr0: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    total_steps: int = 500
    seed: int = 0
    memory_items: int = 20
    dtype: str = "float64"
    weights: LossWeights = field(default_factory=LossWeights)
    bsw: BSWConfig = field(default_factory=BSWConfig)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ContractError("lr0 must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ContractError("Adam betas must lie in [0, 1)")
        if self.total_steps < 1 or self.batch_size < 1 or self.memory_items < 1:
            raise ContractError("total_steps, batch_size and memory_items must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype}")


# --------------------------------------------------------------------------
# schedule and optimizer
# --------------------------------------------------------------------------

def cosine_anneal_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; ``t`` is the 1-based step count.  Returns (param, m, v)."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

class TimeLapseDataset:
    """Training frames grouped by scene.  Backgrounds are deliberately not held here."""

    def __init__(self, frames: Sequence[np.ndarray], scene_ids: Optional[Sequence[str]] = None):
        self.frames = [np.asarray(f) for f in frames]
        self.scene_ids = list(scene_ids) if scene_ids is not None else [str(i) for i in range(len(frames))]
        if not self.frames:
            raise ContractError("dataset has no scenes")
        for sid, f in zip(self.scene_ids, self.frames):
            if f.ndim != 4 or f.shape[0] < 2:
                raise ContractError(f"scene {sid} needs at least 2 frames of shape (3, S, S)")

    @classmethod
    def from_scenes(cls, scenes: Sequence[TimeLapseScene]) -> "TimeLapseDataset":
        return cls([s.frames for s in scenes], [f"scene_{s.scene_id:03d}" for s in scenes])

    @classmethod
    def from_dir(cls, root) -> "TimeLapseDataset":
        dirs = scene_dirs(root)
        if not dirs:
            raise FileNotFoundError(f"no scene_* directories under {root}")
        return cls([load_frames(d) for d in dirs], [d.name for d in dirs])

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def image_size(self) -> int:
        return int(self.frames[0].shape[-1])


def sample_pair(dataset: TimeLapseDataset, rng: np.random.Generator):
    """Uniform scene, then two distinct frame indices.  Returns (I_w, I_v, scene index, (w, v))."""
    n = int(rng.integers(len(dataset)))
    frames = dataset.frames[n]
    if frames.shape[0] < 2:
        raise ContractError(f"scene {dataset.scene_ids[n]} has fewer than 2 frames")
    w, v = rng.choice(frames.shape[0], size=2, replace=False)
    return frames[w], frames[v], n, (int(w), int(v))


def sample_batch(dataset: TimeLapseDataset, seed: int, step: int, batch_size: int):
    rng = np.random.default_rng([seed, step])
    pairs = [sample_pair(dataset, rng) for _ in range(batch_size)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    params: Params
    memory: MemoryBank
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, model_cfg: ModelConfig, cfg: TrainConfig) -> "TrainState":
        dtype = np.dtype(cfg.dtype)
        params = init_params(model_cfg, seed=cfg.seed, dtype=dtype)
        memory = init_memory(cfg.memory_items, model_cfg.query_channels, seed=cfg.seed + 1, dtype=dtype)
        zeros = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(params, memory, zeros, {k: z.copy() for k, z in zeros.items()}, 0)


def compute_losses(iw: Tensor, iv: Tensor, memory: MemoryBank, model_cfg: ModelConfig,
                   params: Params, cfg: TrainConfig):
    """Forward both frames of every pair in one batch; returns (total, report, queries)."""
    b = iw.shape[0]
    x = ad.concat([iw, iv], axis=0)
    out = forward(x, memory, model_cfg, params)
    bg_w, bg_v = out.background[:b], out.background[b:]
    loss_b = background_prediction_loss(bg_w, bg_v)
    loss_c = (cross_information_loss(iw, bg_v) + cross_information_loss(iv, bg_w)) * 0.5
    loss_s = self_consistency_loss(x, out.background, out.rain)
    loss_w = bsw_loss_batch(out.query[:b], out.query[b:], cfg.bsw)
    total, report = total_loss(loss_b, loss_s, loss_c, loss_w, cfg.weights)
    return total, report, out.query


def train_step(iw: np.ndarray, iv: np.ndarray, state: TrainState, model_cfg: ModelConfig,
               cfg: TrainConfig) -> tuple[LossReport, float]:
    """One optimization step on a batch of pairs; mutates ``state``.  Returns (report, lr)."""
    dtype = np.dtype(cfg.dtype)
    iw_t, iv_t = Tensor(iw.astype(dtype)), Tensor(iv.astype(dtype))
    total, report, queries = compute_losses(iw_t, iv_t, state.memory, model_cfg, state.params, cfg)
    if not report.is_finite():
        raise NumericError(f"non-finite loss at step {state.step + 1}: {report.as_dict()}")

    for p in state.params.values():
        p.zero_grad()
    ad.backward(total)

    lr = cosine_anneal_lr(state.step, cfg.total_steps, cfg.lr0)
    t = state.step + 1
    for name, p in state.params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        new, state.adam_m[name], state.adam_v[name] = adam_step(
            p.data, grad, state.adam_m[name], state.adam_v[name], t,
            lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        p.data = new.astype(dtype, copy=False)

    if model_cfg.use_memory:
        state.memory = update(state.memory, query_rows(queries).data)
    state.step = t
    return report, lr


def train(dataset: TimeLapseDataset, model_cfg: ModelConfig, cfg: TrainConfig,
          state: Optional[TrainState] = None, until: Optional[int] = None) -> Iterator[tuple[int, float, LossReport]]:
    """Yield (step, lr, report) until ``until`` (default: cfg.total_steps) steps are done."""
    if dataset.image_size != model_cfg.input_size:
        raise ContractError(f"dataset images are {dataset.image_size}px, model expects {model_cfg.input_size}px")
    state = state if state is not None else TrainState.fresh(model_cfg, cfg)
    end = cfg.total_steps if until is None else min(until, cfg.total_steps)
    while state.step < end:
        iw, iv = sample_batch(dataset, cfg.seed, state.step, cfg.batch_size)
        report, lr = train_step(iw, iv, state, model_cfg, cfg)
        yield state.step, lr, report


# --------------------------------------------------------------------------
# metrics CSV
# --------------------------------------------------------------------------

def metric_row(step: int, lr: float, report: LossReport) -> list[str]:
    vals = [lr, report.total, report.loss_b, report.loss_s, report.loss_c, report.loss_w]
    return [str(step)] + [repr(float(v)) for v in vals]


class MetricsWriter:
    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        exists = self.path.exists() and self.path.stat().st_size > 0
        self._f = open(self.path, "a" if append else "w", newline="")
        self._w = csv.writer(self._f)
        if not (append and exists):
            self._w.writerow(METRIC_COLUMNS)

    def write(self, step: int, lr: float, report: LossReport) -> None:
        self._w.writerow(metric_row(step, lr, report))
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


# --------------------------------------------------------------------------
# configs and checkpoints
# --------------------------------------------------------------------------

def config_dict(model_cfg: ModelConfig, cfg: TrainConfig) -> dict:
    return {"model": asdict(model_cfg), "train": asdict(cfg)}


def configs_from_dict(d: dict) -> tuple[ModelConfig, TrainConfig]:
    t = dict(d["train"])
    t["weights"] = LossWeights(**t["weights"])
    t["bsw"] = BSWConfig(**t["bsw"])
    return ModelConfig(**d["model"]), TrainConfig(**t)


def save_state(path, state: TrainState, model_cfg: ModelConfig, cfg: TrainConfig) -> None:
    tensors = {f"param/{k}": p.data for k, p in state.params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in state.adam_m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.adam_v.items()})
    tensors["memory/items"] = state.memory.items
    tensors["step"] = np.array([state.step], dtype=np.int64)
    checkpoint.save(path, tensors, {"format": "memderain-train-state", **config_dict(model_cfg, cfg)})


def load_state(path) -> tuple[TrainState, ModelConfig, TrainConfig]:
    tensors, meta = checkpoint.load(path)
    if not meta or meta.get("format") != "memderain-train-state":
        raise CheckpointError(f"{path} is not a training-state checkpoint")
    model_cfg, cfg = configs_from_dict(meta)

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    params = {k: Tensor(v, requires_grad=True) for k, v in group("param/").items()}
    state = TrainState(params=params, memory=MemoryBank(tensors["memory/items"]),
                       adam_m=group("adam_m/"), adam_v=group("adam_v/"), step=int(tensors["step"][0]))
    # checkpoint records are name-sorted; restore the init order of the layers
    state.params = {k: state.params[k] for k in _param_order(model_cfg)}
    return state, model_cfg, cfg


def _param_order(model_cfg: ModelConfig) -> list[str]:
    return [f"{name}.{s}" for name, *_ in layer_specs(model_cfg) for s in ("w", "b")]


# --------------------------------------------------------------------------
# flat key=value config files
# --------------------------------------------------------------------------

_NESTED = {"lambda_b": "weights", "lambda_s": "weights", "lambda_c": "weights", "lambda_w": "weights",
           "bsw_l": "bsw", "bsw_h": "bsw", "bsw_grouping": "bsw"}


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def known_keys() -> set[str]:
    keys = {f.name for f in fields(TrainConfig)} - {"weights", "bsw"}
    keys |= {f.name for f in fields(ModelConfig)}
    return keys | set(_NESTED)


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def build_configs(overrides: dict, base: Optional[tuple[ModelConfig, TrainConfig]] = None):
    """Apply string or typed overrides (flat keys) on top of ``base`` (default configs)."""
    model_cfg, cfg = base if base is not None else (ModelConfig(), TrainConfig())
    m, t = asdict(model_cfg), asdict(cfg)
    unknown = set(overrides) - known_keys()
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    for k, v in overrides.items():
        if v is None:
            continue
        if k in _NESTED:
            sub = _NESTED[k]
            key = k[4:] if sub == "bsw" else k
            t[sub][key] = _coerce(v, t[sub][key]) if isinstance(v, str) else v
        elif k in m:
            m[k] = _coerce(v, m[k]) if isinstance(v, str) else v
        else:
            t[k] = _coerce(v, t[k]) if isinstance(v, str) else v
    return configs_from_dict({"model": m, "train": t})


def dump_config_text(model_cfg: ModelConfig, cfg: TrainConfig) -> str:
    d = config_dict(model_cfg, cfg)
    flat = dict(d["model"])
    t = dict(d["train"])
    flat.update(t.pop("weights"))
    flat.update({f"bsw_{k}": v for k, v in t.pop("bsw").items()})
    flat.update(t)
    return "".join(f"{k}={v}\n" for k, v in flat.items())


def echo_header(model_cfg: ModelConfig, cfg: TrainConfig) -> str:
    return json.dumps(config_dict(model_cfg, cfg), sort_keys=True)
