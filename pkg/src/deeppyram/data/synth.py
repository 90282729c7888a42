"""Synthetic surgical-scene segmentation data.

Each image contains a large low-contrast disk with a blurred rim (cornea
stand-in), a textured inner disk with colour jitter (pupil), a
semi-transparent polygon (lens) and 1-3 thin specular bars entering from
outside the frame (instruments).  Label layering, bottom to top:
background, cornea, pupil, lens, instrument.  The lens only receives its
own label when five classes are requested; otherwise it is an unlabelled
transparent overlay.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy import ndimage

from ..errors import ConfigError

CLASS_NAMES = ("background", "cornea", "pupil", "instrument", "lens")


@dataclass
class SegSample:
    """Image ``(3, H, W)`` float32 in [0, 1] and integer label mask ``(H, W)``."""

    image: np.ndarray
    mask: np.ndarray
    ident: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ConfigError(f"image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ConfigError(f"mask {self.mask.shape} does not match image {self.image.shape}")


@dataclass
class SynthSpec:
    """Image size, class count and the geometric sampling ranges (fractions of the short side)."""

    height: int = 64
    width: int = 64
    num_classes: int = 4
    cornea_radius: tuple = (0.30, 0.42)
    center_jitter: float = 0.08
    pupil_ratio: tuple = (0.42, 0.62)
    lens_ratio: tuple = (0.75, 1.05)
    lens_alpha: tuple = (0.15, 0.35)
    instruments: tuple = (1, 3)
    instrument_tip: tuple = (0.0, 0.30)
    instrument_width: tuple = (0.05, 0.09)
    rim_blur: tuple = (1.0, 2.5)

    def __post_init__(self):
        if self.height < 64 or self.width < 64:
            raise ConfigError(f"synthetic images must be at least 64x64, got {self.height}x{self.width}")
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")

    @property
    def class_names(self) -> tuple:
        return CLASS_NAMES[: self.num_classes]


@dataclass
class Geometry:
    """Shape parameters of one scene, in pixel units."""

    center: tuple
    cornea_r: float
    pupil_r: float
    lens_center: tuple
    lens_r: float
    lens_rotation: float
    lens_sides: int
    bars: List[tuple] = field(default_factory=list)  # (tip_y, tip_x, angle, half_width)

    def lens_vertices(self) -> np.ndarray:
        ang = self.lens_rotation + 2 * np.pi * np.arange(self.lens_sides) / self.lens_sides
        cy, cx = self.lens_center
        return np.stack([cy + self.lens_r * np.sin(ang), cx + self.lens_r * np.cos(ang)], axis=1)


def sample_geometry(spec: SynthSpec, rng: np.random.Generator) -> Geometry:
    s = min(spec.height, spec.width)
    cy = spec.height / 2 + rng.uniform(-1, 1) * spec.center_jitter * s
    cx = spec.width / 2 + rng.uniform(-1, 1) * spec.center_jitter * s
    rc = rng.uniform(*spec.cornea_radius) * s
    rp = rng.uniform(*spec.pupil_ratio) * rc
    la = rng.uniform(0, 2 * np.pi)
    lo = rng.uniform(0, 0.25) * rp
    lens_center = (cy + lo * np.sin(la), cx + lo * np.cos(la))
    lens_r = rng.uniform(*spec.lens_ratio) * rp
    sides = int(rng.integers(5, 8))
    bars = []
    for _ in range(int(rng.integers(spec.instruments[0], spec.instruments[1] + 1))):
        theta = rng.uniform(0, 2 * np.pi)
        d = rng.uniform(*spec.instrument_tip) * s
        tip = (cy + d * np.sin(theta), cx + d * np.cos(theta))
        # the shaft leaves the frame roughly away from the centre
        angle = theta + rng.uniform(-0.5, 0.5)
        half = 0.5 * rng.uniform(*spec.instrument_width) * s
        bars.append((tip[0], tip[1], angle, half))
    return Geometry((cy, cx), rc, rp, lens_center, lens_r, rng.uniform(0, 2 * np.pi), sides, bars)


def _disk(yy, xx, center, r):
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= r * r


def _polygon(yy, xx, verts):
    """Even-odd point-in-polygon test evaluated at pixel centres."""
    inside = np.zeros(yy.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        y1, x1 = verts[i]
        y2, x2 = verts[(i + 1) % n]
        crosses = (y1 > yy) != (y2 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (yy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xx < xint)
    return inside


def _bar(yy, xx, bar, length):
    ty, tx, angle, half = bar
    uy, ux = np.sin(angle), np.cos(angle)
    along = (yy - ty) * uy + (xx - tx) * ux
    across = -(yy - ty) * ux + (xx - tx) * uy
    return (along >= 0) & (along <= length) & (np.abs(across) <= half), across


def rasterize(geom: Geometry, spec: SynthSpec):
    """Boolean masks (cornea, pupil, lens, instruments) and the bar cross-axis maps."""
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width] + 0.5
    length = 2.0 * (spec.height + spec.width)
    cornea = _disk(yy, xx, geom.center, geom.cornea_r)
    pupil = _disk(yy, xx, geom.center, geom.pupil_r)
    lens = _polygon(yy, xx, geom.lens_vertices())
    bars = [_bar(yy, xx, b, length) for b in geom.bars]
    return cornea, pupil, lens, bars


def _smooth_noise(rng, shape, sigma):
    return ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")


def render(geom: Geometry, spec: SynthSpec, rng: np.random.Generator):
    h, w = spec.height, spec.width
    cornea, pupil, lens, bars = rasterize(geom, spec)

    base = np.array([0.55, 0.30, 0.25]) + rng.uniform(-0.06, 0.06, 3)
    img = base[:, None, None] + 0.05 * _smooth_noise(rng, (3, h, w), (0, 4, 4))

    # low contrast cornea with a blurred rim
    soft = ndimage.gaussian_filter(cornea.astype(float), rng.uniform(*spec.rim_blur))
    lift = rng.uniform(0.07, 0.13) * np.array([1.0, 1.1, 1.2])
    img = img + soft[None] * lift[:, None, None]

    # textured pupil with colour jitter
    tint = np.array([0.45, 0.12, 0.08]) * rng.uniform(0.6, 1.3) + rng.uniform(-0.05, 0.05, 3)
    texture = 0.07 * _smooth_noise(rng, (3, h, w), (0, 1, 1))
    img = np.where(pupil[None], tint[:, None, None] + texture, img)

    # transparent lens
    alpha = rng.uniform(*spec.lens_alpha)
    lens_col = np.array([0.85, 0.90, 0.95])[:, None, None]
    img = np.where(lens[None], (1 - alpha) * img + alpha * lens_col, img)

    # metallic instruments with a specular stripe along the shaft
    for shaft, across in bars:
        half = np.abs(across[shaft]).max() if shaft.any() else 1.0
        grey = rng.uniform(0.55, 0.8)
        shade = grey - 0.15 * np.abs(across) / max(half, 1e-6)
        stripe = 0.35 * np.exp(-((across - rng.uniform(-0.3, 0.3) * half) ** 2) / 0.5)
        metal = np.clip(shade + stripe, 0, 1)
        img = np.where(shaft[None], metal[None] * np.array([1.0, 1.0, 1.05])[:, None, None], img)

    img = img + 0.02 * rng.standard_normal(img.shape)
    image = np.clip(img, 0.0, 1.0).astype(np.float32)

    mask = np.zeros((h, w), dtype=np.uint8)
    mask[cornea] = 1
    if spec.num_classes > 2:
        mask[pupil] = 2
    if spec.num_classes > 4:
        mask[lens] = 4
    if spec.num_classes > 3:
        for shaft, _ in bars:
            mask[shaft] = 3
    return image, mask


def generate_with_geometry(spec: SynthSpec, seed: int, index: int, max_tries: int = 20):
    """One sample and the scene geometry it was rendered from.

    Scenes that leave some class without pixels are redrawn from the
    same random stream.
    """
    rng = np.random.default_rng([seed, index])
    for _ in range(max_tries):
        geom = sample_geometry(spec, rng)
        image, mask = render(geom, spec, rng)
        if all(np.any(mask == k) for k in range(spec.num_classes)):
            return SegSample(image, mask, f"synth_{seed}_{index:05d}"), geom
    raise RuntimeError("could not place every class; check the geometry ranges")


def generate_one(spec: SynthSpec, seed: int, index: int) -> SegSample:
    return generate_with_geometry(spec, seed, index)[0]


def synth_generate(spec: SynthSpec, seed: int, count: int = 1, start: int = 0) -> List[SegSample]:
    """``count`` samples; sample ``i`` depends only on ``(spec, seed, i)``."""
    return [generate_one(spec, seed, i) for i in range(start, start + count)]
