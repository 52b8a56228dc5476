"""PSNR / SSIM scoring and memory attention-map export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

PSNR_CAP_DB = 100.0


def psnr(a, b, peak: float = 2.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of the last two axes with the 1-D window g."""
    k = len(g)
    rows = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(rows, k, axis=-2) @ g


def ssim(a, b, data_range: float = 2.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over channels and valid positions.

    Accepts (H, W) or (C, H, W) arrays.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < win_size or a.shape[-2] < win_size:
        raise ContractError(f"ssim needs images of at least {win_size}x{win_size}, got {a.shape[-2:]}")
    g = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def bilinear_upsample(maps: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of (..., h, w) maps to (..., size, size).

    Linear in the input, so maps that sum to one across a leading axis still
    do after resizing.
    """
    h, w = maps.shape[-2:]

    def coords(n_in):
        src = (np.arange(size) + 0.5) * n_in / size - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    ylo, yhi, fy = coords(h)
    xlo, xhi, fx = coords(w)
    top = maps[..., ylo, :] * (1 - fy)[:, None] + maps[..., yhi, :] * fy[:, None]
    return top[..., xlo] * (1 - fx) + top[..., xhi] * fx


def attention_maps(alpha: np.ndarray, query_hw: tuple[int, int], size: int) -> np.ndarray:
    """Reshape (H*W, M) read weights of one image to (M, size, size) upsampled maps."""
    h, w = query_hw
    k, m = alpha.shape
    if k != h * w:
        raise DimensionError(f"alpha has {k} rows, expected {h * w}")
    maps = alpha.T.reshape(m, h, w)
    return bilinear_upsample(maps, size)


def to_grey_u8(m: np.ndarray) -> np.ndarray:
    """Per-map min-max normalization to [0, 255]; a constant map becomes 255 where nonzero."""
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return np.full(m.shape, 255 if hi > 0 else 0, dtype=np.uint8)


def export_attention_maps(model_cfg, params, memory, image: np.ndarray, out_dir) -> list[Path]:
    """Write one greyscale PNG per memory item showing where it is read for ``image``."""
    from .model import derain
    from .synth import save_grey_png

    out = derain(image, memory, model_cfg, params)
    if out.alpha is None:
        raise ContractError("the model was configured without a memory read")
    maps = attention_maps(out.alpha.data, (model_cfg.query_size, model_cfg.query_size), model_cfg.input_size)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for m, amap in enumerate(maps):
        p = out_dir / f"memory_item_{m:03d}.png"
        save_grey_png(p, to_grey_u8(amap))
        paths.append(p)
    return paths


@dataclass
class MetricRow:
    scene_id: str
    frame_id: int
    psnr_db: float
    ssim: float
    input_psnr_db: float
    input_ssim: float


def evaluate(scenes, model_cfg=None, params=None, memory=None, baseline_only: bool = False,
             batch_size: int = 8) -> list[MetricRow]:
    """Score de-rained frames against each scene's held-out background.

    ``scenes`` is an iterable of (scene_id, frames (T, 3, S, S), background).
    With ``baseline_only`` the de-rainer is the identity and no model is needed.
    """
    from .model import derain

    rows = []
    for scene_id, frames, background in scenes:
        frames = np.asarray(frames)
        if baseline_only:
            derained = frames
        else:
            outs = []
            dtype = next(iter(params.values())).dtype
            for i in range(0, len(frames), batch_size):
                chunk = frames[i:i + batch_size].astype(dtype)
                outs.append(derain(chunk, memory, model_cfg, params).derained(chunk))
            derained = np.concatenate(outs)
        for t, (frame, out) in enumerate(zip(frames, derained)):
            rows.append(MetricRow(str(scene_id), t, psnr(out, background), ssim(out, background),
                                  psnr(frame, background), ssim(frame, background)))
    return rows


def summarize(rows: list[MetricRow]) -> dict:
    keys = ("psnr_db", "ssim", "input_psnr_db", "input_ssim")
    return {k: float(np.mean([getattr(r, k) for r in rows])) for k in keys}
