"""Synthetic time-lapse scenes: one fixed background plus T additive rain layers.

Images are float arrays (3, S, S) in [-1, 1]; rain layers are in [0, 1] and
added before clamping, so ``frame_t = clip(background + rain_t, -1, 1)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .errors import ContractError


@dataclass(frozen=True)
class RainParams:
    density: float = 0.02
    length_px: float = 10.0
    width_px: float = 1.5
    angle_deg: float = 10.0
    intensity: float = 0.7
    jitter: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.density <= 1.0:
            raise ContractError(f"density must be in [0, 1], got {self.density}")
        if self.length_px <= 0 or self.width_px <= 0:
            raise ContractError("streak length and width must be positive")
        if not -45.0 <= self.angle_deg <= 45.0:
            raise ContractError(f"angle_deg must be in [-45, 45], got {self.angle_deg}")
        if not 0.0 < self.intensity <= 1.0:
            raise ContractError(f"intensity must be in (0, 1], got {self.intensity}")
        if self.jitter < 0:
            raise ContractError("jitter must be non-negative")


@dataclass
class TimeLapseScene:
    background: np.ndarray  # (3, S, S)
    frames: np.ndarray  # (T, 3, S, S)
    rain_layers: np.ndarray  # (T, 3, S, S), >= 0
    scene_id: int = 0
    seed: int = 0
    params: RainParams = RainParams()

    @property
    def T(self) -> int:
        return self.frames.shape[0]


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.uniform(-1.0, 1.0, size=(3, cells + 1, cells + 1))
    up = zoom(grid, (1, size / (cells + 1), size / (cells + 1)), order=3, mode="nearest", grid_mode=True)
    return up[:, :size, :size]


def gen_background(seed: int, size: int) -> np.ndarray:
    """Procedural texture: multi-octave value noise, a colour gradient and a few flat rectangles."""
    if size < 16:
        raise ContractError(f"background size must be >= 16, got {size}")
    rng = np.random.default_rng([seed, 0xB6])
    img = np.zeros((3, size, size))
    amp = 1.0
    for cells in (2, 4, 8, 16):
        img += amp * _value_noise(rng, size, cells)
        amp *= 0.5
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    direction = rng.uniform(-1, 1, size=2)
    img += rng.uniform(-0.6, 0.6, size=(3, 1, 1)) * (direction[0] * yy + direction[1] * xx)
    for _ in range(int(rng.integers(2, 6))):
        y0, x0 = rng.integers(0, size - 4, size=2)
        h, w = rng.integers(4, size // 2, size=2)
        img[:, y0:y0 + h, x0:x0 + w] = rng.uniform(-1, 1, size=(3, 1, 1))
    img -= img.mean(axis=(1, 2), keepdims=True)
    img *= 0.4 / (img.std(axis=(1, 2), keepdims=True) + 1e-12)
    img += rng.uniform(-0.3, 0.3, size=(3, 1, 1))
    return np.clip(img, -1.0, 1.0)


def _jittered(params: RainParams, rng: np.random.Generator) -> RainParams:
    j = params.jitter
    u = rng.uniform(-1.0, 1.0, size=4)
    return replace(
        params,
        density=float(np.clip(params.density * (1 + j * u[0]), 0.0, 1.0)),
        length_px=max(1.0, params.length_px * (1 + j * u[1])),
        angle_deg=float(np.clip(params.angle_deg + 15.0 * j * u[2], -45.0, 45.0)),
        intensity=float(np.clip(params.intensity * (1 + j * u[3]), 1e-3, 1.0)),
        jitter=0.0,
    )


def gen_rain_layer(params: RainParams, size: int, seed: int) -> np.ndarray:
    """Rasterize round(density * S^2) anti-aliased streaks into a (3, S, S) layer in [0, 1].

    Streaks are drawn on a 2x supersampled canvas (a pixel is covered when its
    centre lies within width/2 of the segment) and box-downsampled.  Random
    draws do not depend on ``intensity``, so scaling it scales the layer
    monotonically.
    """
    rng = np.random.default_rng([seed, 0x5A])
    n = int(round(params.density * size * size))
    ss = 2 * size
    canvas = np.zeros((ss, ss))
    if n == 0:
        return np.zeros((3, size, size))
    centres = rng.uniform(0, size, size=(n, 2))
    lengths = params.length_px * rng.uniform(0.7, 1.3, size=n)
    angles = np.deg2rad(params.angle_deg + rng.normal(0.0, 2.0, size=n))
    strength = rng.uniform(0.6, 1.0, size=n)
    half_w = params.width_px  # = (width * 2) / 2 on the 2x canvas
    for (cy, cx), length, ang, s in zip(centres * 2, lengths * 2, angles, strength):
        # angle measured from vertical
        dy, dx = np.cos(ang), np.sin(ang)
        y0, x0 = cy - dy * length / 2, cx - dx * length / 2
        r = half_w + 1
        ylo, yhi = int(max(0, np.floor(min(y0, y0 + dy * length) - r))), int(min(ss, np.ceil(max(y0, y0 + dy * length) + r) + 1))
        xlo, xhi = int(max(0, np.floor(min(x0, x0 + dx * length) - r))), int(min(ss, np.ceil(max(x0, x0 + dx * length) + r) + 1))
        if ylo >= yhi or xlo >= xhi:
            continue
        py, px = np.mgrid[ylo:yhi, xlo:xhi] + 0.5
        t = np.clip((py - y0) * dy + (px - x0) * dx, 0.0, length)
        dist = np.hypot(py - (y0 + t * dy), px - (x0 + t * dx))
        canvas[ylo:yhi, xlo:xhi] += s * (dist <= half_w)
    layer = canvas.reshape(size, 2, size, 2).mean(axis=(1, 3))
    layer = np.clip(params.intensity * layer, 0.0, 1.0)
    return np.repeat(layer[None], 3, axis=0)


def compose(background: np.ndarray, rain: np.ndarray) -> np.ndarray:
    return np.clip(background + rain, -1.0, 1.0)


def gen_timelapse(bg_seed: int, params: RainParams, T: int, size: int, scene_id: int = 0) -> TimeLapseScene:
    if T < 2:
        raise ContractError(f"a time-lapse scene needs at least 2 frames, got T={T}")
    background = gen_background(bg_seed, size)
    rng = np.random.default_rng([bg_seed, 0x71])
    layers = []
    for t in range(T):
        p = _jittered(params, rng)
        frame_seed = int(rng.integers(0, 2**31 - 1))
        layers.append(gen_rain_layer(p, size, frame_seed))
    rain = np.stack(layers)
    frames = compose(background[None], rain)
    return TimeLapseScene(background=background, frames=frames, rain_layers=rain,
                          scene_id=scene_id, seed=bg_seed, params=params)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index]).integers(0, 2**31 - 1))


def gen_dataset(n_scenes: int, T: int, size: int, seed: int, params: RainParams = RainParams()) -> list[TimeLapseScene]:
    return [gen_timelapse(scene_seed(seed, i), params, T, size, scene_id=i) for i in range(n_scenes)]


# --------------------------------------------------------------------------
# on-disk layout: root/scene_<id>/{frame_<t>.png, background.png, meta.json}
# --------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, S, S) in [-1, 1] -> (S, S, 3) uint8, linear map to [0, 255]."""
    x = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def save_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_grey_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path, format="PNG")


def write_scene(root, scene: TimeLapseScene) -> Path:
    d = Path(root) / f"scene_{scene.scene_id:03d}"
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(scene.frames):
        save_png(d / f"frame_{t:03d}.png", frame)
    save_png(d / "background.png", scene.background)
    meta = {"scene_id": scene.scene_id, "seed": scene.seed, "frames": scene.T,
            "size": int(scene.background.shape[-1]), "rain": asdict(scene.params)}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def scene_dirs(root) -> list[Path]:
    return sorted(p for p in Path(root).glob("scene_*") if p.is_dir())


def load_frames(scene_dir) -> np.ndarray:
    paths = sorted(Path(scene_dir).glob("frame_*.png"))
    return np.stack([load_png(p) for p in paths]) if paths else np.zeros((0,))


def load_background(scene_dir) -> np.ndarray:
    return load_png(Path(scene_dir) / "background.png")
