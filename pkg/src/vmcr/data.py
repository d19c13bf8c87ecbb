"""Synthetic vessel images with a controllable domain shift, a loader for
fundus-style datasets using the red/blue/green artery/vein/crossing label
convention, and deterministic batching."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .imageops import bilinear_resize, gaussian_blur, nearest_resize


@dataclass
class LabelMap:
    artery: np.ndarray  # uint8 H x W in {0,1}
    vein: np.ndarray    # crossings carry 1 in both maps

    def __post_init__(self):
        self.artery = np.asarray(self.artery, dtype=np.uint8)
        self.vein = np.asarray(self.vein, dtype=np.uint8)
        if self.artery.shape != self.vein.shape:
            raise DataError(f"artery {self.artery.shape} vs vein {self.vein.shape}")
        for name, m in (("artery", self.artery), ("vein", self.vein)):
            if not np.isin(m, (0, 1)).all():
                raise DataError(f"{name} map not binary")

    @property
    def vessel(self) -> np.ndarray:
        return np.maximum(self.artery, self.vein)

    @property
    def crossing(self) -> np.ndarray:
        return self.artery * self.vein

    def stacked(self) -> np.ndarray:
        """2 x H x W float channel stack (artery, vein) for loss targets."""
        return np.stack([self.artery, self.vein]).astype(np.float32)


@dataclass
class DomainConfig:
    intensity_gain: float = 1.0
    gamma: float = 1.0
    blur_sigma: float = 0.0
    noise_std: float = 0.0
    vessel_width_scale: float = 1.0
    background_texture_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.intensity_gain <= 0 or self.vessel_width_scale <= 0 \
                or self.background_texture_scale <= 0:
            raise ConfigError("gain/width/texture scales must be positive")
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise ConfigError("blur_sigma and noise_std must be >= 0")
        if not 0.3 <= self.gamma <= 3.0:
            raise ConfigError(f"gamma must be in [0.3, 3], got {self.gamma}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def _stamp_disc(canvas: np.ndarray, cy: float, cx: float, radius: float):
    h, w = canvas.shape
    r = max(radius, 0.6)
    y0, y1 = max(0, int(cy - r)), min(h, int(cy + r) + 2)
    x0, x1 = max(0, int(cx - r)), min(w, int(cx + r) + 2)
    if y0 >= y1 or x0 >= x1:
        return
    ys = np.arange(y0, y1)[:, None] - cy
    xs = np.arange(x0, x1)[None, :] - cx
    canvas[y0:y1, x0:x1] |= (ys * ys + xs * xs) <= r * r


def _grow_tree(canvas: np.ndarray, rng: np.random.Generator,
               start: tuple[float, float], angle: float, width: float):
    """Biased random walk with occasional branching and decreasing stroke
    width, rasterized as overlapping discs."""
    h, w = canvas.shape
    steps = int(1.3 * max(h, w))
    branches = [(start[0], start[1], angle, width, steps)]
    while branches:
        cy, cx, ang, wd, n = branches.pop()
        home = ang  # drift back toward the launch direction
        for _ in range(n):
            _stamp_disc(canvas, cy, cx, wd / 2)
            ang += rng.normal(0.0, 0.22) + 0.05 * math.remainder(home - ang, 2 * math.pi)
            cy += math.sin(ang)
            cx += math.cos(ang)
            if not (-2 < cy < h + 2 and -2 < cx < w + 2):
                break
            wd = max(wd * 0.995, 1.0)
            if len(branches) < 5 and wd > 1.2 and rng.random() < 0.025:
                side = 1 if rng.random() < 0.5 else -1
                branches.append((cy, cx, ang + side * rng.uniform(0.5, 1.1),
                                 wd * 0.8, n // 2))


def _vessel_maps(rng: np.random.Generator, h: int, w: int,
                 width_scale: float) -> tuple[np.ndarray, np.ndarray]:
    maps = []
    # arteries launch from the left half, veins from the right, growing inward
    for side in (0, 1):
        canvas = np.zeros((h, w), dtype=bool)
        want = int(rng.integers(1, 3))
        grown = 0
        # keep growing until the class covers at least ~2% of the frame
        while grown < want or (canvas.mean() < 0.02 and grown < 6):
            cy = float(rng.uniform(0.15 * h, 0.85 * h))
            cx = float(rng.uniform(0.02, 0.12) * w) if side == 0 \
                else float(w - 1 - rng.uniform(0.02, 0.12) * w)
            angle = (0.0 if side == 0 else math.pi) + float(rng.uniform(-0.6, 0.6))
            width = float(rng.uniform(1.4, 2.2)) * width_scale * max(h, w) / 64.0
            _grow_tree(canvas, rng, (cy, cx), angle, width)
            grown += 1
        maps.append(canvas)
    return maps[0], maps[1]


# vessel tints: arteries bright red, veins darker and relatively bluer, so
# the A/V cue is the channel ratio (which survives monotone intensity shifts)
_ARTERY_COLOR = np.array([0.78, 0.30, 0.10])
_VEIN_COLOR = np.array([0.32, 0.18, 0.34])
_BASE_COLOR = np.array([0.82, 0.55, 0.34])


def synth_sample(domain: DomainConfig, h: int, w: int, seed: int):
    """One synthetic fundus-like sample: (image 3 x H x W in [0,1], LabelMap)."""
    if h < 32 or w < 32:
        raise ConfigError(f"minimum size is 32, got {h}x{w}")
    rng = np.random.default_rng([domain.seed, seed])
    artery, vein = _vessel_maps(rng, h, w, domain.vessel_width_scale)

    tex = rng.standard_normal((h, w))
    tex = gaussian_blur(tex, domain.background_texture_scale * min(h, w) / 16.0)
    tex /= max(tex.std(), 1e-8)

    img = _BASE_COLOR[:, None, None] * np.ones((3, h, w)) + 0.05 * tex[None]
    # paint veins first so arteries win at crossings (arteries run on top)
    a_soft = gaussian_blur(artery.astype(np.float64), 0.4)[None]
    v_soft = gaussian_blur(vein.astype(np.float64), 0.4)[None]
    img = img * (1 - v_soft) + _VEIN_COLOR[:, None, None] * v_soft
    img = img * (1 - a_soft) + _ARTERY_COLOR[:, None, None] * a_soft

    img = np.clip(img * domain.intensity_gain, 0.0, 1.0) ** domain.gamma
    if domain.blur_sigma > 0:
        img = gaussian_blur(img, domain.blur_sigma)
    if domain.noise_std > 0:
        img += rng.normal(0.0, domain.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    labels = LabelMap(artery.astype(np.uint8), vein.astype(np.uint8))
    return img, labels


def make_dataset(domain: DomainConfig, n: int, h: int, w: int,
                 seed: int) -> list:
    """n deterministic samples; sample i depends only on (domain, seed, i)."""
    return [synth_sample(domain, h, w, seed * 100_003 + i) for i in range(n)]


# -- label image encoding/decoding ------------------------------------------

_CANON = {
    "artery": (255, 0, 0),
    "vein": (0, 0, 255),
    "crossing": (0, 255, 0),
    "background": (0, 0, 0),
}
LABEL_TOLERANCE = 30  # per 8-bit channel


def encode_labels(labels: LabelMap) -> np.ndarray:
    """H x W x 3 uint8 label image: red/blue/green = artery/vein/crossing."""
    h, w = labels.artery.shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    crossing = labels.crossing.astype(bool)
    img[labels.artery.astype(bool) & ~crossing] = _CANON["artery"]
    img[labels.vein.astype(bool) & ~crossing] = _CANON["vein"]
    img[crossing] = _CANON["crossing"]
    return img


def decode_labels(arr: np.ndarray, source: str = "<array>") -> LabelMap:
    arr = np.asarray(arr, dtype=np.int16)
    if arr.ndim != 3 or arr.shape[2] < 3:
        raise DataError(f"{source}: expected H x W x RGB label image")
    arr = arr[:, :, :3]

    def near(color):
        return (np.abs(arr - np.array(color)) <= LABEL_TOLERANCE).all(axis=2)

    is_a = near(_CANON["artery"])
    is_v = near(_CANON["vein"])
    is_c = near(_CANON["crossing"])
    is_bg = near(_CANON["background"])
    bad = ~(is_a | is_v | is_c | is_bg)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise DataError(f"{source}: undecodable label pixel at ({y},{x}) "
                        f"rgb={tuple(int(v) for v in arr[y, x])}")
    artery = (is_a | is_c).astype(np.uint8)
    vein = (is_v | is_c).astype(np.uint8)
    return LabelMap(artery, vein)


def save_sample(image: np.ndarray, labels: LabelMap, out_dir: str, stem: str):
    """Write `<stem>.png` + `<stem>_av.png` (the loader's file convention)."""
    os.makedirs(out_dir, exist_ok=True)
    rgb = (np.clip(image, 0, 1).transpose(1, 2, 0) * 255).round().astype(np.uint8)
    Image.fromarray(rgb).save(os.path.join(out_dir, f"{stem}.png"))
    Image.fromarray(encode_labels(labels)).save(
        os.path.join(out_dir, f"{stem}_av.png"))


def load_dataset(dir_path: str) -> list:
    """Load `<stem>.png` + `<stem>_av.png` pairs into (image, LabelMap) tuples.

    Images come back as 3 x H x W float32 in [0,1]."""
    if not os.path.isdir(dir_path):
        raise DataError(f"not a directory: {dir_path}")
    stems = sorted(f[:-4] for f in os.listdir(dir_path)
                   if f.endswith(".png") and not f.endswith("_av.png"))
    if not stems:
        raise DataError(f"no image files in {dir_path}")
    out = []
    for stem in stems:
        img_path = os.path.join(dir_path, f"{stem}.png")
        lbl_path = os.path.join(dir_path, f"{stem}_av.png")
        if not os.path.exists(lbl_path):
            raise DataError(f"missing label file for {img_path}")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32)
        img = img.transpose(2, 0, 1) / 255.0
        labels = decode_labels(np.asarray(Image.open(lbl_path).convert("RGB")),
                               source=lbl_path)
        if labels.artery.shape != img.shape[1:]:
            raise DataError(f"{lbl_path}: label size {labels.artery.shape} "
                            f"vs image {img.shape[1:]}")
        out.append((img, labels))
    return out


def resize_normalize(image: np.ndarray, labels: LabelMap | None,
                     size: int | tuple[int, int]):
    """Bilinear resize for images (clipped to [0,1]), nearest for labels."""
    th, tw = (size, size) if isinstance(size, int) else size
    if image.shape[-2:] == (th, tw):
        out_img = np.clip(image, 0.0, 1.0).astype(np.float32)
    else:
        out_img = np.clip(bilinear_resize(image.astype(np.float64), th, tw),
                          0.0, 1.0).astype(np.float32)
    if labels is None:
        return out_img, None
    out_labels = LabelMap(nearest_resize(labels.artery, th, tw),
                          nearest_resize(labels.vein, th, tw))
    return out_img, out_labels


# -- batching ----------------------------------------------------------------


@dataclass
class Batch:
    source_images: np.ndarray   # N x 3 x H x W in [0,1]
    source_labels: list         # LabelMap per sample
    target_images: np.ndarray
    source_ids: list
    target_ids: list


def _image_of(item):
    return item[0] if isinstance(item, tuple) else item


def _index_stream(n: int, seed: int, stream: int):
    """Fresh seeded shuffle per epoch; each index appears once per epoch."""
    epoch = 0
    while True:
        rng = np.random.default_rng([seed, stream, epoch])
        yield from (int(i) for i in rng.permutation(n))
        epoch += 1


def batcher(source: list, target: list, batch_size: int, seed: int,
            pair_target: bool = False):
    """Infinite iterator of paired mini-batches; deterministic given seed.

    The shorter dataset cycles (a fresh shuffle each epoch, per domain)."""
    if not source or not target:
        raise ConfigError("source and target datasets must be non-empty")
    if pair_target and batch_size % 2:
        raise ConfigError("target batch size must be even when mixing in pairs")
    if seed < 0:
        raise ConfigError("seed must be non-negative")

    def generate():
        s_stream = _index_stream(len(source), seed, 0)
        t_stream = _index_stream(len(target), seed, 1)
        while True:
            s_ids = [next(s_stream) for _ in range(batch_size)]
            t_ids = [next(t_stream) for _ in range(batch_size)]
            yield Batch(
                source_images=np.stack([source[i][0] for i in s_ids]),
                source_labels=[source[i][1] for i in s_ids],
                target_images=np.stack([_image_of(target[i]) for i in t_ids]),
                source_ids=s_ids,
                target_ids=t_ids,
            )

    return generate()
