"""Training-time augmentation applied jointly to an image and its label mask.

Transforms run in a fixed order (brightness/contrast, shift-scale,
rotation, motion blur), each with its own probability.  Photometric ops
touch the image only; geometric ops resample the mask with nearest
neighbour and fill exposed areas with zeros / background.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from ..errors import ConfigError


@dataclass
class AugmentConfig:
    p_brightness: float = 0.5
    p_shift_scale: float = 0.5
    p_rotate: float = 0.5
    p_blur: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    shift: float = 0.1
    scale: tuple = (0.9, 1.1)
    rotate_deg: float = 10.0
    blur_sizes: tuple = (3, 5, 7)

    def __post_init__(self):
        self.scale = tuple(self.scale)
        self.blur_sizes = tuple(int(k) for k in self.blur_sizes)
        for name in ("p_brightness", "p_shift_scale", "p_rotate", "p_blur"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if any(k < 1 or k % 2 == 0 for k in self.blur_sizes):
            raise ConfigError("blur kernel sizes must be odd")
        if self.scale[0] <= 0 or self.scale[0] > self.scale[1]:
            raise ConfigError(f"bad scale range {self.scale}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale"] = list(self.scale)
        d["blur_sizes"] = list(self.blur_sizes)
        return d

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_brightness=0.0, p_shift_scale=0.0, p_rotate=0.0, p_blur=0.0)


def brightness_contrast(image, alpha: float, beta: float):
    """``alpha * image + beta`` clipped to [0, 1]."""
    return np.clip(alpha * image + beta, 0.0, 1.0).astype(image.dtype)


def _affine(image, mask, matrix, offset):
    img = np.stack([ndimage.affine_transform(c, matrix, offset, order=1, mode="constant", cval=0.0) for c in image])
    lab = ndimage.affine_transform(mask, matrix, offset, order=0, mode="constant", cval=0)
    return img.astype(image.dtype), lab.astype(mask.dtype)


def _about_center(shape, matrix, translate=(0.0, 0.0)):
    """Offset so that ``matrix`` acts around the image centre, then shifts by ``translate``."""
    c = (np.asarray(shape, dtype=float) - 1) / 2
    return c - matrix @ (c + np.asarray(translate))


def shift_scale(image, mask, dy: float, dx: float, scale: float):
    """Translate by ``(dy, dx)`` pixels and zoom by ``scale`` about the centre."""
    m = np.eye(2) / scale
    return _affine(image, mask, m, _about_center(mask.shape, m, (dy, dx)))


def rotate(image, mask, degrees: float):
    t = np.deg2rad(degrees)
    m = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
    return _affine(image, mask, m, _about_center(mask.shape, m))


def motion_kernel(size: int, angle: float) -> np.ndarray:
    """Normalised line kernel of odd ``size`` through the centre at ``angle`` radians."""
    k = np.zeros((size, size))
    r = size // 2
    t = np.linspace(-r, r, 4 * size)
    ys = np.clip(np.rint(r + t * np.sin(angle)).astype(int), 0, size - 1)
    xs = np.clip(np.rint(r + t * np.cos(angle)).astype(int), 0, size - 1)
    k[ys, xs] = 1.0
    return k / k.sum()


def motion_blur(image, size: int, angle: float):
    k = motion_kernel(size, angle)
    # edge replication keeps constant images constant
    return np.stack([ndimage.convolve(c, k, mode="nearest") for c in image]).astype(image.dtype)


def augment(image: np.ndarray, mask: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Randomly transform a ``(3, H, W)`` image and ``(H, W)`` mask; inputs are not modified."""
    img, lab = image, mask
    h, w = mask.shape
    if rng.random() < cfg.p_brightness:
        alpha = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        beta = rng.uniform(-cfg.brightness, cfg.brightness)
        img = brightness_contrast(img, alpha, beta)
    if rng.random() < cfg.p_shift_scale:
        dy = rng.uniform(-cfg.shift, cfg.shift) * h
        dx = rng.uniform(-cfg.shift, cfg.shift) * w
        img, lab = shift_scale(img, lab, dy, dx, rng.uniform(*cfg.scale))
    if rng.random() < cfg.p_rotate:
        img, lab = rotate(img, lab, rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
    if rng.random() < cfg.p_blur:
        img = motion_blur(img, int(rng.choice(cfg.blur_sizes)), rng.uniform(0, np.pi))
    return img, lab
