# features/augmentation.py

"""
Texture-First augmentation: Large Scale Jittering, crop/pad, horizontal flip,
bounded HSV/contrast jitter, specular highlight injection and optional Gaussian
ISO noise. Geometric ops move image (bilinear) and mask (nearest) together;
photometric ops never touch the mask. Every draw comes from a generator seeded
by (seed, sample_id), so the result does not depend on processing order.
"""

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from config import Config
from util.errors import ValidationError
from util.numerics import resize_nearest, upsample_bilinear
from util.sample import Sample

logger = logging.getLogger(__name__)


def _check_range(name: str, rng_pair, allow_zero: bool = False):
    lo, hi = rng_pair
    if lo > hi or lo < 0 or (lo == 0 and not allow_zero):
        raise ValidationError(f"{name} must satisfy {'0 <=' if allow_zero else '0 <'} lo <= hi, got {list(rng_pair)}")


def _check_prob(name: str, p: float):
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"{name} must be a probability, got {p}")


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple[float, float] = (0.5, 2.0)
    crop: tuple[int, int] = (512, 512)
    flip_p: float = 0.5
    hue_delta: float = 0.02
    saturation_range: tuple[float, float] = (0.8, 1.2)
    contrast_range: tuple[float, float] = (0.7, 1.3)
    specular_p: float = 0.3
    noise_p: float = 0.3
    seed: int = 0
    ignore_label: int = Config.IGNORE_LABEL
    # highlight and noise parameterization (not given by the recipe tables)
    specular_count: tuple[int, int] = (1, 3)
    specular_amplitude: tuple[float, float] = (0.3, 0.8)
    specular_sigma_frac: tuple[float, float] = (0.01, 0.06)
    noise_sigma_range: tuple[float, float] = (0.01, 0.05)

    def __post_init__(self):
        _check_range("scale_range", self.scale_range)
        _check_range("saturation_range", self.saturation_range)
        _check_range("contrast_range", self.contrast_range)
        _check_range("specular_amplitude", self.specular_amplitude, allow_zero=True)
        _check_range("specular_sigma_frac", self.specular_sigma_frac)
        _check_range("noise_sigma_range", self.noise_sigma_range, allow_zero=True)
        for name in ("flip_p", "specular_p", "noise_p"):
            _check_prob(name, getattr(self, name))
        if not 0.0 <= self.hue_delta <= 0.5:
            raise ValidationError(f"hue_delta must lie in [0, 0.5], got {self.hue_delta}")
        if min(self.crop) < 1:
            raise ValidationError(f"crop must be positive, got {list(self.crop)}")
        lo, hi = self.specular_count
        if not 1 <= lo <= hi:
            raise ValidationError(f"specular_count must satisfy 1 <= lo <= hi, got {[lo, hi]}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown augmentation settings: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


PRESETS = {
    "mask2former": AugmentConfig(scale_range=(0.1, 2.0), contrast_range=(0.6, 1.4), noise_p=0.0),
    "segformer": AugmentConfig(scale_range=(0.5, 2.0), contrast_range=(0.7, 1.3), noise_p=0.3),
}


def preset(name: str, **overrides) -> AugmentConfig:
    if name not in PRESETS:
        raise ValidationError(f"unknown augmentation preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(sample_id) & 0xFFFFFFFFFFFFFFFF])


# --- colour space helpers ---

def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    r, g, b = image[0], image[1], image[2]
    maxc = np.max(image, axis=0)
    minc = np.min(image, axis=0)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[0], hsv[1], hsv[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


# --- photometric ops (image only) ---

def photometric_jitter(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig, record: dict | None = None) -> np.ndarray:
    """Hue rotation and saturation scaling in HSV, then contrast around the image mean."""
    delta = float(rng.uniform(-cfg.hue_delta, cfg.hue_delta)) if cfg.hue_delta > 0 else 0.0
    sat = float(rng.uniform(*cfg.saturation_range))
    con = float(rng.uniform(*cfg.contrast_range))
    if record is not None:
        record.update(hue=delta, saturation=sat, contrast=con)

    out = image.astype(np.float64)
    if delta != 0.0 or sat != 1.0:
        hsv = rgb_to_hsv(out)
        hsv[0] = (hsv[0] + delta) % 1.0
        hsv[1] = np.clip(hsv[1] * sat, 0.0, 1.0)
        out = hsv_to_rgb(hsv)
    if con != 1.0:
        mean = out.mean()
        out = (out - mean) * con + mean
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def inject_specular(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                    record: dict | None = None) -> np.ndarray:
    """Adds k axis-aligned elliptical Gaussian highlights to every channel (toward white), then clamps."""
    _, H, W = image.shape
    k = int(rng.integers(cfg.specular_count[0], cfg.specular_count[1] + 1))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    light = np.zeros((H, W))
    spots = []
    base = min(H, W)
    for _ in range(k):
        cy = float(rng.uniform(0, H))
        cx = float(rng.uniform(0, W))
        sy = float(rng.uniform(*cfg.specular_sigma_frac)) * base
        sx = float(rng.uniform(*cfg.specular_sigma_frac)) * base
        amp = float(rng.uniform(*cfg.specular_amplitude))
        light += amp * np.exp(-((yy - cy) ** 2 / (2 * sy * sy) + (xx - cx) ** 2 / (2 * sx * sx)))
        spots.append({"cy": cy, "cx": cx, "sigma_y": sy, "sigma_x": sx, "amplitude": amp})
    if record is not None:
        record["specular"] = spots
    return np.clip(image + light[None].astype(image.dtype), 0.0, 1.0)


def gaussian_iso_noise(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                       record: dict | None = None) -> np.ndarray:
    sigma = float(rng.uniform(*cfg.noise_sigma_range))
    if record is not None:
        record["noise_sigma"] = sigma
    noise = rng.normal(0.0, sigma, size=image.shape)
    return np.clip(image + noise.astype(image.dtype), 0.0, 1.0)


# --- geometric ops (image and mask together) ---

def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, :, ::-1].copy(), sample.mask[:, ::-1].copy(), dict(sample.meta))


def rescale(sample: Sample, scale: float) -> Sample:
    H, W = sample.size
    new_h = max(1, int(round(H * scale)))
    new_w = max(1, int(round(W * scale)))
    if (new_h, new_w) == (H, W):
        return sample
    image = np.clip(upsample_bilinear(sample.image, new_h, new_w), 0.0, 1.0)
    mask = resize_nearest(sample.mask, new_h, new_w)
    return Sample(image, mask, dict(sample.meta))


def crop_or_pad(sample: Sample, crop: tuple[int, int], rng: np.random.Generator, ignore_label: int,
                record: dict | None = None) -> Sample:
    """Random crop to `crop`; dims smaller than the crop are padded bottom/right (zeros, ignore_label)."""
    ch, cw = crop
    H, W = sample.size
    ph, pw = max(ch, H), max(cw, W)
    image, mask = sample.image, sample.mask
    if (ph, pw) != (H, W):
        image = np.zeros((3, ph, pw), dtype=sample.image.dtype)
        image[:, :H, :W] = sample.image
        mask = np.full((ph, pw), ignore_label, dtype=sample.mask.dtype)
        mask[:H, :W] = sample.mask
    top = int(rng.integers(0, ph - ch + 1))
    left = int(rng.integers(0, pw - cw + 1))
    if record is not None:
        record.update(crop_top=top, crop_left=left, padded=[ph - H, pw - W])
    return Sample(image[:, top:top + ch, left:left + cw].copy(), mask[top:top + ch, left:left + cw].copy(), dict(sample.meta))


def apply_with_record(sample: Sample, cfg: AugmentConfig, sample_id: int) -> tuple[Sample, dict]:
    rng = sample_rng(cfg.seed, sample_id)
    record: dict = {"sample_id": int(sample_id)}

    scale = float(rng.uniform(*cfg.scale_range))
    record["scale"] = scale
    out = rescale(sample, scale)
    out = crop_or_pad(out, cfg.crop, rng, cfg.ignore_label, record)
    flip = bool(rng.random() < cfg.flip_p)
    record["flip"] = flip
    if flip:
        out = hflip(out)

    image = photometric_jitter(out.image, rng, cfg, record)
    specular = bool(rng.random() < cfg.specular_p)
    record["specular_applied"] = specular
    if specular:
        image = inject_specular(image, rng, cfg, record)
    if cfg.noise_p > 0:
        noisy = bool(rng.random() < cfg.noise_p)
        record["noise_applied"] = noisy
        if noisy:
            image = gaussian_iso_noise(image, rng, cfg, record)
    return Sample(np.clip(image, 0.0, 1.0), out.mask, dict(out.meta)), record


def apply(sample: Sample, cfg: AugmentConfig, sample_id: int) -> Sample:
    return apply_with_record(sample, cfg, sample_id)[0]


def identity_config(size: tuple[int, int], **overrides) -> AugmentConfig:
    """A config whose pipeline leaves a sample of `size` untouched."""
    base = AugmentConfig(scale_range=(1.0, 1.0), crop=tuple(size), flip_p=0.0, hue_delta=0.0,
                         saturation_range=(1.0, 1.0), contrast_range=(1.0, 1.0), specular_p=0.0, noise_p=0.0)
    return replace(base, **overrides)
