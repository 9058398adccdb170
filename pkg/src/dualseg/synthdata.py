"""Procedural road scenes with parameterised rain, fog, humidity and night degradation.

Classes: 0 sky, 1 road, 2 vehicle, 3 vegetation.  The mask is always the clean
geometry; weather only touches the image.  The degradation operators are
simple stand-ins (contrast blend, streak overlay, smoothing, brightness) and
make no claim to physical accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .nets import MIX_STENCIL, ModelDims

SKY, ROAD, VEHICLE, VEGETATION = range(4)
CLASS_NAMES = ("sky", "road", "vehicle", "vegetation")

BASE_COLORS = np.array(
    [
        [0.55, 0.70, 0.90],  # sky
        [0.35, 0.35, 0.38],  # road
        [0.70, 0.25, 0.20],  # vehicle
        [0.25, 0.55, 0.25],  # vegetation
    ]
)
FOG_GRAY = 0.6
STREAK_VALUE = 0.95
NIGHT_BRIGHTNESS = 0.45


class HiddenLabelAccess(RuntimeError):
    """Training code asked for a mask of an unlabeled sample."""


@dataclass(frozen=True)
class WeatherConfig:
    beta: float = 0.0
    rain_x: float | None = None
    fog_y: float | None = None
    humidity_z: float | None = None
    night: bool = False

    def __post_init__(self) -> None:
        for name in ("beta", "rain_x", "fog_y", "humidity_z"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def xyz(self) -> tuple[float, float, float]:
        pick = lambda v: self.beta if v is None else v  # noqa: E731
        return pick(self.rain_x), pick(self.fog_y), pick(self.humidity_z)

    @property
    def is_clean(self) -> bool:
        return self.xyz == (0.0, 0.0, 0.0) and not self.night

    def to_dict(self) -> dict:
        x, y, z = self.xyz
        return {"beta": self.beta, "rain_x": x, "fog_y": y, "humidity_z": z, "night": self.night}


SOFT = WeatherConfig(beta=0.2)
MEDIUM = WeatherConfig(beta=0.5)
HARD = WeatherConfig(beta=0.7)
PRESETS = {"clean": WeatherConfig(), "soft": SOFT, "medium": MEDIUM, "hard": HARD}


# --- rendering ----------------------------------------------------------------


def render_geometry(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.full((h, w), SKY, dtype=np.int64)
    horizon = int(rng.integers(max(1, h // 4), max(2, h // 2) + 1))
    mask[horizon:, :] = ROAD
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(1, 4))):
        cy = rng.uniform(horizon - 1, horizon + 2)
        cx = rng.uniform(0, w)
        r = rng.uniform(1.5, max(2.0, w / 5))
        mask[(ys - cy) ** 2 + ((xs - cx) * 0.8) ** 2 <= r * r] = VEGETATION
    for _ in range(int(rng.integers(1, 4))):
        vh = int(rng.integers(2, max(3, h // 4) + 1))
        vw = int(rng.integers(3, max(4, w // 3) + 1))
        top = int(rng.integers(horizon, max(horizon + 1, h - vh + 1)))
        left = int(rng.integers(0, max(1, w - vw + 1)))
        mask[top : top + vh, left : left + vw] = VEHICLE
    return mask


def render_image(mask: np.ndarray, channels: int, rng: np.random.Generator) -> np.ndarray:
    h, w = mask.shape
    palette = np.clip(BASE_COLORS + rng.uniform(-0.12, 0.12, size=BASE_COLORS.shape), 0.0, 1.0)
    if channels != 3:
        palette = np.repeat(palette.mean(axis=1, keepdims=True), channels, axis=1)
    img = palette[mask]
    img = img + rng.normal(0.0, 0.05, size=(h, w, channels))
    return np.clip(img, 0.0, 1.0)


def streak_field(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Sparse slanted streaks in [0, 1]; fixed per scene so rain strength only scales them."""
    field_ = np.zeros((h, w))
    n = max(1, (h * w) // 24)
    for _ in range(n):
        y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
        length = int(rng.integers(2, 5))
        val = rng.uniform(0.5, 1.0)
        for k in range(length):
            yy, xx = y + k, x + k // 2
            if yy < h and xx < w:
                field_[yy, xx] = max(field_[yy, xx], val)
    return field_


def blur(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += MIX_STENCIL[dy, dx] * pad[dy : dy + h, dx : dx + w]
    return out


def degrade(clean: np.ndarray, streaks: np.ndarray, weather: WeatherConfig) -> np.ndarray:
    x, y, z = weather.xyz
    img = clean
    if x > 0:
        s = (x * streaks)[..., None]
        img = img + s * (STREAK_VALUE - img)
    if z > 0:
        img = (1.0 - z) * img + z * blur(img)
    if y > 0:
        img = (1.0 - y) * img + y * FOG_GRAY
    if weather.night:
        img = img * NIGHT_BRIGHTNESS
    return img


def _scene_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    geo, tex, rain = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(geo), np.random.default_rng(tex), np.random.default_rng(rain)


def render_clean(dims: ModelDims, seed: int) -> tuple[np.ndarray, np.ndarray]:
    geo, tex, _ = _scene_rngs(seed)
    mask = render_geometry(dims.H, dims.W, geo)
    return render_image(mask, dims.in_channels, tex), mask


def generate_scene(dims: ModelDims, weather: WeatherConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render ``(image [H,W,ch], mask [H,W])`` for one scene seed under ``weather``."""
    clean, mask = render_clean(dims, seed)
    if weather.is_clean:
        return clean, mask
    _, _, rain = _scene_rngs(seed)
    return degrade(clean, streak_field(dims.H, dims.W, rain), weather), mask


# --- splits -------------------------------------------------------------------


@dataclass
class SceneBatch:
    images: np.ndarray  # [B, H, W, ch]
    _masks: np.ndarray  # [B, H, W]
    labeled: np.ndarray  # [B] bool
    weather: list[WeatherConfig]
    seeds: list[int]
    revealed: bool = field(default=False)

    def __len__(self) -> int:
        return len(self.images)

    def training_masks(self) -> np.ndarray:
        if not self.labeled.all():
            raise HiddenLabelAccess("masks of unlabeled samples are hidden from training")
        return self._masks

    def reveal_masks(self) -> np.ndarray:
        """Ground truth for evaluation only; marks the batch as revealed."""
        self.revealed = True
        return self._masks


@dataclass
class SceneSplit:
    dims: ModelDims
    scene_seeds: list[int]
    weather: list[WeatherConfig]
    labeled_index: list[int]
    unlabeled_index: list[int]

    def __len__(self) -> int:
        return len(self.scene_seeds)

    def batch(self, indices: Sequence[int]) -> SceneBatch:
        labeled = set(self.labeled_index)
        imgs, masks = [], []
        for i in indices:
            img, mask = _cached_scene(self.dims, self.weather[i], self.scene_seeds[i])
            imgs.append(img)
            masks.append(mask)
        return SceneBatch(
            images=np.stack(imgs) if imgs else np.zeros((0, self.dims.H, self.dims.W, self.dims.in_channels)),
            _masks=np.stack(masks) if masks else np.zeros((0, self.dims.H, self.dims.W), dtype=np.int64),
            labeled=np.array([i in labeled for i in indices], dtype=bool),
            weather=[self.weather[i] for i in indices],
            seeds=[self.scene_seeds[i] for i in indices],
        )

    def all(self) -> SceneBatch:
        return self.batch(range(len(self)))


@lru_cache(maxsize=4096)
def _cached_scene(dims: ModelDims, weather: WeatherConfig, seed: int):
    img, mask = generate_scene(dims, weather, seed)
    img.setflags(write=False)
    mask.setflags(write=False)
    return img, mask


def make_split(
    n_total: int,
    labeled_ratio: float,
    modes: Sequence[WeatherConfig],
    seed: int,
    dims: ModelDims | None = None,
) -> SceneSplit:
    """Deterministic pool of ``n_total`` scenes with exactly ``floor(n_total * ratio)`` labeled.

    Sample ``i`` uses ``modes[i % len(modes)]``.  Scene seeds are drawn from
    ``seed`` so pools built from different seeds do not share scenes in practice.
    """
    if not 0.0 < labeled_ratio <= 1.0:
        raise ValueError(f"labeled_ratio must lie in (0, 1], got {labeled_ratio}")
    if not modes:
        raise ValueError("at least one weather mode is required")
    dims = dims or ModelDims()
    rng = np.random.default_rng([seed, 0x5CE7E])
    scene_seeds = [int(s) for s in rng.integers(0, 2**62, size=n_total)]
    n_lab = int(np.floor(n_total * labeled_ratio + 1e-9))
    order = rng.permutation(n_total)
    labeled = sorted(int(i) for i in order[:n_lab])
    unlabeled = sorted(int(i) for i in order[n_lab:])
    weather = [modes[i % len(modes)] for i in range(n_total)]
    return SceneSplit(dims, scene_seeds, weather, labeled, unlabeled)


# --- inspection dumps ---------------------------------------------------------


def write_ppm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    rgb = image if image.shape[-1] == 3 else np.repeat(image[..., :1], 3, axis=-1)
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path: Path, mask: np.ndarray, n_classes: int = 4) -> None:
    h, w = mask.shape
    step = 255 // max(1, n_classes - 1)
    data = (mask.astype(np.int64) * step).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pnm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    magic, size, maxval, body = parts
    w, h = (int(v) for v in size.split())
    ch = 3 if magic == b"P6" else 1
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, ch)
    return arr if ch == 3 else arr[..., 0]
