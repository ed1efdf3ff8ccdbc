"""
Synthetic infrared scenes, Gaussian noise protocol and dataset IO.

A scene is a smoothed multi-octave noise "cloud" field with optional horizon
ramp, bright clutter blobs and pixel grain, onto which small targets with a
Gaussian gray profile are composited.  Target amplitude is derived from a
requested signal-to-clutter ratio measured in a 20x20 neighbourhood.

Dataset directory layout::

    root/
      images/<stem>.png   8-bit grayscale
      masks/<stem>.png    8-bit, 0 or 255
      manifest.jsonl      line 1: {"format": "irformer-dataset", "version": 1,
                                   "gen_config": {...} | null, "noise_variance": float}
                          then one {"stem": ..., "meta": {...}} per sample
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from irformer.errors import ConfigError, DatasetError

log = logging.getLogger(__name__)

SCR_WINDOW = 20
MANIFEST = "manifest.jsonl"
DATASET_FORMAT = "irformer-dataset"
DATASET_VERSION = 1


@dataclass
class GenConfig:
    image_size: tuple[int, int] = (64, 64)
    targets_per_image: tuple[int, int] = (1, 2)
    # used only when scr_range is None
    amplitude_range: tuple[float, float] = (0.15, 0.4)
    sigma_range: tuple[float, float] = (0.6, 1.4)
    scr_range: Optional[tuple[float, float]] = (3.0, 6.0)
    b_max: float = 0.55
    octaves: int = 4
    base_sigma: float = 12.0
    persistence: float = 0.6
    grain: float = 0.08
    horizon: float = 0.3
    clutter_blobs: tuple[int, int] = (0, 3)
    clutter_sigma: tuple[float, float] = (1.5, 3.5)
    clutter_amplitude: tuple[float, float] = (0.2, 0.6)
    min_separation: float = 12.0
    border: int = 4
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        for name in ("targets_per_image", "amplitude_range", "sigma_range", "clutter_blobs",
                     "clutter_sigma", "clutter_amplitude"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.scr_range is not None:
            self.scr_range = tuple(float(v) for v in self.scr_range)
        self.validate()

    def validate(self) -> None:
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigError("image_size must be at least 8x8")
        lo, hi = self.targets_per_image
        if not 0 <= lo <= hi:
            raise ConfigError("targets_per_image must be an ordered non-negative range")
        s_lo, s_hi = self.sigma_range
        if not 0 < s_lo <= s_hi:
            raise ConfigError("sigma_range must be positive and ordered")
        # half-max mask diameter 2*sqrt(2 ln 2)*sigma must stay within 9 px
        if 2.0 * np.sqrt(2.0 * np.log(2.0)) * s_hi > 9.0:
            raise ConfigError("sigma too large for the small-target regime (diameter > 9 px)")
        if not 0 < self.b_max <= 1:
            raise ConfigError("b_max must lie in (0, 1]")
        if self.octaves < 0:
            raise ConfigError("octaves must be >= 0")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


def flat_config(**overrides) -> GenConfig:
    """Single-target scenes on a flat background with faint grain."""
    base = dict(targets_per_image=(1, 1), scr_range=None, octaves=0, horizon=0.0,
                clutter_blobs=(0, 0), grain=0.02)
    base.update(overrides)
    return GenConfig(**base)


@dataclass
class ImageSample:
    image: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-image stream so generation can be split across workers."""
    return np.random.default_rng([int(seed), int(index)])


def generate_background(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Cloud-like clutter normalised to [0, b_max] (constant b_max/2 if
    featureless), plus pixel grain of std ``grain * b_max``.
    """
    h, w = cfg.image_size
    field_ = np.zeros((h, w))
    weight = 1.0
    for o in range(cfg.octaves):
        noise = ndimage.gaussian_filter(rng.standard_normal((h, w)),
                                        cfg.base_sigma / 2 ** o, mode="wrap")
        std = noise.std()
        if std > 0:
            field_ += weight * noise / std
        weight *= cfg.persistence
    if cfg.horizon:
        ramp = np.linspace(-1.0, 1.0, h)[:, None] * rng.uniform(0.5, 1.0) * np.sign(rng.uniform(-1, 1))
        field_ += cfg.horizon * 3.0 * ramp
    n_blobs = int(rng.integers(cfg.clutter_blobs[0], cfg.clutter_blobs[1] + 1))
    rows, cols = np.mgrid[0:h, 0:w]
    spread = max(np.ptp(field_), 1.0)
    for _ in range(n_blobs):
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(*cfg.clutter_sigma)
        amp = rng.uniform(*cfg.clutter_amplitude) * spread
        field_ += amp * np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2 * sig ** 2))
    span = np.ptp(field_)
    if span > 0:
        bg = (field_ - field_.min()) / span * cfg.b_max
    else:
        bg = np.full((h, w), cfg.b_max / 2.0)
    if cfg.grain:
        # absolute level, added after normalisation so a flat scene stays flat
        bg = np.clip(bg + cfg.grain * cfg.b_max * rng.standard_normal((h, w)), 0.0, cfg.b_max)
    return bg


def gaussian_profile(shape: tuple[int, int], center: tuple[float, float], sigma: float) -> np.ndarray:
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    r0, c0 = center
    return np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2.0 * sigma ** 2))


def composite_target(bg: np.ndarray, center: tuple[float, float], amplitude: float,
                     sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Add ``amplitude * exp(-d^2 / 2 sigma^2)`` at ``center`` and clip to [0, 1].

    Returns the new image and the target mask: pixels where the added profile
    is at least half the amplitude (empty when amplitude is 0).
    """
    h, w = bg.shape
    r0, c0 = center
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise ConfigError(f"target center {center} outside {h}x{w} image")
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    profile = gaussian_profile(bg.shape, center, sigma)
    image = np.clip(bg + amplitude * profile, 0.0, 1.0)
    mask = profile >= 0.5 if amplitude > 0 else np.zeros(bg.shape, dtype=bool)
    return image, mask


def local_window(shape: tuple[int, int], center: tuple[float, float], size: int = SCR_WINDOW):
    h, w = shape
    r, c = int(round(center[0])), int(round(center[1]))
    half = size // 2
    r0, c0 = max(0, r - half), max(0, c - half)
    return slice(r0, min(h, r0 + size)), slice(c0, min(w, c0 + size))


def local_scr(image: np.ndarray, target_mask: np.ndarray, center: tuple[float, float],
              exclude: Optional[np.ndarray] = None, size: int = SCR_WINDOW) -> float:
    """
    ``(mean(target) - mean(bg)) / std(bg)`` with the background taken from the
    ``size`` x ``size`` window around ``center`` minus ``exclude`` (all target
    pixels, defaults to ``target_mask``).
    """
    if exclude is None:
        exclude = target_mask
    win = local_window(image.shape, center, size)
    patch, excl = image[win], exclude[win]
    bg = patch[~excl]
    if not target_mask.any() or bg.size < 2:
        return float("nan")
    sd = bg.std()
    if sd == 0:
        return float("inf")
    return float((image[target_mask].mean() - bg.mean()) / sd)


def _place_centers(cfg: GenConfig, count: int, rng: np.random.Generator) -> list[tuple[float, float]]:
    h, w = cfg.image_size
    centers: list[tuple[float, float]] = []
    tries = 0
    while len(centers) < count and tries < 1000:
        tries += 1
        cand = (rng.uniform(cfg.border, h - 1 - cfg.border), rng.uniform(cfg.border, w - 1 - cfg.border))
        if all(np.hypot(cand[0] - r, cand[1] - c) >= cfg.min_separation for r, c in centers):
            centers.append(cand)
    return centers


def generate_sample(cfg: GenConfig, index: int) -> ImageSample:
    rng = sample_rng(cfg.seed, index)
    bg = generate_background(cfg, rng)
    count = int(rng.integers(cfg.targets_per_image[0], cfg.targets_per_image[1] + 1))
    centers = _place_centers(cfg, count, rng)
    sigmas = [float(rng.uniform(*cfg.sigma_range)) for _ in centers]
    profiles = [gaussian_profile(bg.shape, c, s) for c, s in zip(centers, sigmas)]
    masks = [p >= 0.5 for p in profiles]
    all_targets = np.zeros(bg.shape, dtype=bool)
    for m in masks:
        all_targets |= m

    image = bg.copy()
    amplitudes, scrs = [], []
    for center, prof, m in zip(centers, profiles, masks):
        if cfg.scr_range is not None:
            scr = float(rng.uniform(*cfg.scr_range))
            win = local_window(bg.shape, center)
            bg_pix = bg[win][~all_targets[win]]
            # mean over the mask of (bg + amp*profile) must exceed mu_b by scr*sigma_b
            amp = (scr * bg_pix.std() + bg_pix.mean() - bg[m].mean()) / prof[m].mean()
            amp = float(np.clip(amp, 0.0, 1.0 - bg[m].max()))
        else:
            amp = float(rng.uniform(*cfg.amplitude_range))
        image = np.clip(image + amp * prof, 0.0, 1.0)
        amplitudes.append(amp)
    for center, m in zip(centers, masks):
        scrs.append(local_scr(image, m, center, exclude=all_targets))

    meta = {
        "scene_id": int(index),
        "centers": [[float(r), float(c)] for r, c in centers],
        "amplitudes": amplitudes,
        "sigmas": sigmas,
        "scr": scrs,
        "noise_variance": 0.0,
    }
    return ImageSample(image=image, mask=all_targets, meta=meta)


def generate_dataset(cfg: GenConfig, count: int, start: int = 0) -> list[ImageSample]:
    return [generate_sample(cfg, start + i) for i in range(count)]


def add_gaussian_noise(image: np.ndarray, variance: float, rng: np.random.Generator) -> np.ndarray:
    """
    Zero-mean Gaussian noise whose ``variance`` is given on the 0-255 gray
    scale (std = sqrt(variance) / 255 in [0, 1] units); result clipped to [0, 1].
    """
    if variance < 0:
        raise ConfigError("noise variance must be non-negative")
    image = np.asarray(image, dtype=np.float64)
    if variance == 0:
        return image.copy()
    std = np.sqrt(variance) / 255.0
    return np.clip(image + rng.normal(0.0, std, image.shape), 0.0, 1.0)


def noisy_copy(samples: Sequence[ImageSample], variance: float, seed: int) -> list[ImageSample]:
    """Noise-corrupted copies (masks untouched); stream per image index."""
    out = []
    for i, s in enumerate(samples):
        rng = np.random.default_rng([int(seed), i, 7919])
        meta = dict(s.meta, noise_variance=float(variance))
        out.append(ImageSample(add_gaussian_noise(s.image, variance, rng), s.mask.copy(), meta))
    return out


# ---------------------------------------------------------------------------
# directory IO
# ---------------------------------------------------------------------------

def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_dataset(samples: Sequence[ImageSample], root, gen_config: Optional[GenConfig] = None,
                 noise_variance: float = 0.0) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "gen_config": gen_config.to_dict() if gen_config is not None else None,
        "noise_variance": float(noise_variance),
    }
    lines = [json.dumps(header, sort_keys=True)]
    width = max(4, len(str(max(len(samples) - 1, 0))))
    for i, s in enumerate(samples):
        stem = f"{i:0{width}d}"
        Image.fromarray(_to_u8(s.image)).save(root / "images" / f"{stem}.png")
        Image.fromarray(np.where(s.mask, 255, 0).astype(np.uint8)).save(
            root / "masks" / f"{stem}.png")
        lines.append(json.dumps({"stem": stem, "meta": s.meta}, sort_keys=True))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(root) -> tuple[dict, dict[str, dict]]:
    path = Path(root) / MANIFEST
    if not path.exists():
        return {}, {}
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        return {}, {}
    header = json.loads(lines[0])
    records = {}
    for ln in lines[1:]:
        rec = json.loads(ln)
        records[rec["stem"]] = rec.get("meta", {})
    return header, records


def load_dataset(root) -> list[ImageSample]:
    """
    Load ``images/*.png`` paired with ``masks/*.png`` by filename stem.

    An empty (or image-less) directory yields an empty list with a warning;
    images lacking a mask raise :class:`DatasetError` naming the stems.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    img_dir, mask_dir = root / "images", root / "masks"
    images = sorted(img_dir.glob("*.png")) if img_dir.is_dir() else []
    if not images:
        warnings.warn(f"no images found under {root}", stacklevel=2)
        return []
    missing = [p.stem for p in images if not (mask_dir / p.name).exists()]
    if missing:
        raise DatasetError(f"missing masks for stems: {', '.join(missing)}")
    _, records = read_manifest(root)
    out = []
    for p in images:
        img = np.asarray(Image.open(p).convert("L"), dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(mask_dir / p.name).convert("L")) > 127
        out.append(ImageSample(img, mask, dict(records.get(p.stem, {}))))
    return out


def stack(samples: Sequence[ImageSample]) -> tuple[np.ndarray, np.ndarray]:
    """(N, H, W) image and mask arrays."""
    if not samples:
        return np.zeros((0, 0, 0)), np.zeros((0, 0, 0), dtype=bool)
    return (np.stack([s.image for s in samples]).astype(np.float64),
            np.stack([s.mask for s in samples]).astype(bool))
