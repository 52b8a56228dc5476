"""Encoder-decoder de-raining network with a memory read between the two halves.

Layer layout (b = base_channels, q = query_channels, every conv 3x3 / pad 1
unless noted, ReLU after every conv and up-conv except the query projection
and the output head)::

    E1a 3->b, E1b b->b, pool          (E1b is skip 1)
    E2a b->b, E2b b->b, pool          (E2b is skip 2)
    E3a b->b, E3b b->b, pool          (E3b is skip 3)
    E4a b->b, E4b b->b
    Q   b->q  (1x1)                   -> query map
    D4a 2q->b, D4b b->b               (input: {query, retrieved})
    U3  b->b  (transposed, x2); D3a 2b->b, D3b b->b   (input: {U3, skip 3})
    U2  b->b  (transposed, x2); D2a 2b->b, D2b b->b   (input: {U2, skip 2})
    U1  b->b  (transposed, x2); D1a 2b->b, D1b b->b   (input: {U1, skip 1})
    OUT b->3 (rain) or b->6 (rain, background) when dual_head; with bg_residual
        the background channels hold I - B and are subtracted from the input
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .memory import MemoryBank, read_map

Params = Dict[str, Tensor]


@dataclass
class ModelConfig:
    base_channels: int = 16
    query_channels: int = 8
    input_size: int = 64
    dual_head: bool = True
    use_memory: bool = True
    # second head predicts I - B rather than B itself, so both heads start near "no rain"
    bg_residual: bool = True

    def __post_init__(self):
        if self.base_channels < 1 or self.query_channels < 1:
            raise ContractError("channel counts must be positive")
        if self.query_channels > self.base_channels:
            raise ContractError("query_channels must not exceed base_channels")
        if self.input_size < 8 or self.input_size % 8:
            raise ContractError(f"input_size must be a positive multiple of 8, got {self.input_size}")

    @property
    def query_size(self) -> int:
        return self.input_size // 8

    @property
    def out_channels(self) -> int:
        return 6 if self.dual_head else 3


@dataclass
class DerainOutput:
    rain: Tensor
    background: Tensor
    query: Tensor
    alpha: Optional[Tensor] = None

    def derained(self, image) -> np.ndarray:
        """Exported de-rained image, ``image - rain`` clamped to [-1, 1]."""
        img = image.data if isinstance(image, Tensor) else np.asarray(image)
        return np.clip(img - self.rain.data, -1.0, 1.0)


def layer_specs(cfg: ModelConfig) -> list[tuple[str, str, int, int, int]]:
    """(name, kind, c_in, c_out, kernel) for every learnable layer, in init order."""
    b, q = cfg.base_channels, cfg.query_channels
    specs = [("E1a", "conv", 3, b, 3), ("E1b", "conv", b, b, 3)]
    for i in (2, 3, 4):
        specs += [(f"E{i}a", "conv", b, b, 3), (f"E{i}b", "conv", b, b, 3)]
    specs += [("Q", "conv", b, q, 1),
              ("D4a", "conv", 2 * q, b, 3), ("D4b", "conv", b, b, 3)]
    for i in (3, 2, 1):
        specs += [(f"U{i}", "tconv", b, b, 3),
                  (f"D{i}a", "conv", 2 * b, b, 3), (f"D{i}b", "conv", b, b, 3)]
    specs.append(("OUT", "conv", b, cfg.out_channels, 3))
    return specs


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; each layer has c_in*c_out*k*k weights plus c_out biases.

    E1a: 27b + b.  E1b, E2a..E4b (7 layers): 9b^2 + b each.  Q: bq + q.
    D4a: 18qb + b.  D4b, D3b, D2b, D1b: 9b^2 + b each.  U3, U2, U1: 9b^2 + b each.
    D3a, D2a, D1a: 18b^2 + b each.  OUT: 9bo + o, with o = 6 for the dual head else 3.
    """
    b, q, o = cfg.base_channels, cfg.query_channels, cfg.out_channels
    return ((27 * b + b) + 7 * (9 * b * b + b) + (b * q + q) + (18 * q * b + b)
            + 4 * (9 * b * b + b) + 3 * (9 * b * b + b) + 3 * (18 * b * b + b) + (9 * b * o + o))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> Params:
    """Uniform(-k, k) init with k = 1/sqrt(c_in * kernel^2) for weights and biases."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, kind, cin, cout, k in layer_specs(cfg):
        bound = 1.0 / np.sqrt(cin * k * k)
        wshape = (cout, cin, k, k) if kind == "conv" else (cin, cout, k, k)
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, wshape).astype(dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, (cout,)).astype(dtype), requires_grad=True)
    return params


def _conv(x: Tensor, params: Params, name: str, act: bool = True) -> Tensor:
    w = params[f"{name}.w"]
    y = ad.conv2d(x, w, params[f"{name}.b"], stride=1, padding=w.shape[2] // 2)
    return ad.relu(y) if act else y


def _up(x: Tensor, params: Params, name: str) -> Tensor:
    y = ad.transposed_conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=2, padding=1, output_padding=1)
    return ad.relu(y)


def encode(image: Tensor, cfg: ModelConfig, params: Params) -> tuple[Tensor, list[Tensor]]:
    if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (cfg.input_size, cfg.input_size):
        raise DimensionError(f"expected images (N, 3, {cfg.input_size}, {cfg.input_size}), got {image.shape}")
    skips = []
    x = image
    for i in (1, 2, 3):
        x = _conv(_conv(x, params, f"E{i}a"), params, f"E{i}b")
        skips.append(x)
        x = ad.maxpool2d(x)
    x = _conv(_conv(x, params, "E4a"), params, "E4b")
    return _conv(x, params, "Q", act=False), skips


def decode(query: Tensor, retrieved: Tensor, skips: list[Tensor], cfg: ModelConfig,
           params: Params, image: Optional[Tensor] = None) -> DerainOutput:
    if retrieved.shape != query.shape:
        raise DimensionError(f"retrieved {retrieved.shape} != query {query.shape}")
    if len(skips) != 3:
        raise ContractError(f"decode needs 3 skip activations, got {len(skips)}")
    x = _conv(ad.concat_channels(query, retrieved), params, "D4a")
    x = _conv(x, params, "D4b")
    for i in (3, 2, 1):
        x = ad.concat_channels(_up(x, params, f"U{i}"), skips[i - 1])
        x = _conv(_conv(x, params, f"D{i}a"), params, f"D{i}b")
    out = _conv(x, params, "OUT", act=False)
    rain = out[:, :3]
    if cfg.dual_head:
        background = out[:, 3:6]
        if cfg.bg_residual:
            if image is None:
                raise ContractError("a residual background head needs the input image")
            background = image - background
    else:
        if image is None:
            raise ContractError("single-head decoding needs the input image to form the background")
        background = image - rain
    return DerainOutput(rain=rain, background=background, query=query)


def forward(image: Tensor, memory: Optional[MemoryBank], cfg: ModelConfig, params: Params) -> DerainOutput:
    """encode -> memory read -> decode.  The bank is never modified here."""
    query, skips = encode(image, cfg, params)
    alpha = None
    if cfg.use_memory:
        if memory is None:
            raise ContractError("model configured with use_memory but no memory bank given")
        retrieved, alpha = read_map(memory, query)
    else:
        retrieved = Tensor(np.zeros(query.shape, dtype=query.dtype))
    out = decode(query, retrieved, skips, cfg, params, image=image)
    out.alpha = alpha
    return out


def derain(image, memory: Optional[MemoryBank], cfg: ModelConfig, params: Params) -> DerainOutput:
    """Inference entry point: no graph is recorded."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    with ad.no_grad():
        return forward(x, memory, cfg, params)
