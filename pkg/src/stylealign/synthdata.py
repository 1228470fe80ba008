"""Paired source/target synthetic datasets with known ground truth.

Detection scenes place bright Gaussian echoes at landmark positions over a
dark speckled background (vertebra-like). Segmentation scenes render two
stacked bright bands whose enclosing region is the truth mask
(intima-media-like). Geometry and style are drawn from independent RNG
streams, so changing the style never changes the truth.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError

Task = Literal["detection", "segmentation"]
Domain = Literal["source", "target"]

SOURCE_SPECKLE = 0.25
BLOB_SIGMA = 2.5


@dataclass(frozen=True)
class SceneSpec:
    task: Task = "detection"
    image_size: int = 64
    num_landmarks: int = 4
    band_rows: tuple[int, int] = (26, 38)
    speckle_seed: int = 0
    geometry_jitter: float = 0.05
    pixel_spacing: float = 0.15

    def validate(self) -> None:
        if self.task not in ("detection", "segmentation"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be >= 16")
        if self.num_landmarks < 1:
            raise ConfigurationError("num_landmarks must be >= 1")
        top, bottom = self.band_rows
        if not (0 <= top < bottom < self.image_size):
            raise ConfigurationError(f"band_rows {self.band_rows} outside image")
        if not (0.0 <= self.geometry_jitter < 0.5):
            raise ConfigurationError("geometry_jitter must be in [0, 0.5)")
        if self.pixel_spacing <= 0:
            raise ConfigurationError("pixel_spacing must be positive")


@dataclass(frozen=True)
class StyleParams:
    gamma: float = 1.0
    contrast_scale: float = 1.0
    blur_sigma: float = 0.0
    speckle_strength: float = SOURCE_SPECKLE
    intensity_offset: float = 0.0

    def validate(self) -> None:
        if self.gamma <= 0 or self.contrast_scale <= 0:
            raise ConfigurationError("gamma and contrast_scale must be positive")
        if self.blur_sigma < 0:
            raise ConfigurationError("blur_sigma must be >= 0")
        if not 0.0 <= self.speckle_strength <= 1.0:
            raise ConfigurationError("speckle_strength must be in [0, 1]")
        if not -0.5 <= self.intensity_offset <= 0.5:
            raise ConfigurationError("intensity_offset must be in [-0.5, 0.5]")

    @property
    def is_identity(self) -> bool:
        return self == SOURCE_STYLE


SOURCE_STYLE = StyleParams()
# handheld-like: hazy lifted background, flatter contrast, blurrier, grainier
TARGET_STYLE = StyleParams(contrast_scale=0.6, blur_sigma=1.0, speckle_strength=0.7, intensity_offset=0.2)


@dataclass
class AnnotatedSample:
    """One image with its truth.

    ``landmarks`` is an (K, 2) array of (x, y) pixel positions for detection
    scenes; ``mask`` is a uint8 array shaped like the image for segmentation.
    """

    image: np.ndarray
    domain: Domain
    id: str
    landmarks: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    pixel_spacing: float = 0.15
    meta: dict = field(default_factory=dict)

    @property
    def task(self) -> Task:
        return "detection" if self.landmarks is not None else "segmentation"

    def __post_init__(self) -> None:
        h, w = self.image.shape
        if self.landmarks is not None:
            lm = np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 2)
            if lm.size and (np.any(lm < 0) or np.any(lm[:, 0] > w - 1) or np.any(lm[:, 1] > h - 1)):
                raise ConfigurationError(f"{self.id}: landmark outside image bounds")
            self.landmarks = lm
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise ConfigurationError(f"{self.id}: mask shape {self.mask.shape} != image {self.image.shape}")


def speckle_field(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Unit-mean multiplicative speckle with a ~1 px grain."""
    raw = rng.exponential(1.0, size=shape)
    grain = ndimage.gaussian_filter(raw, 0.7, mode="reflect")
    return grain / grain.mean()


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    tissue = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 8, mode="reflect")
    tissue /= np.abs(tissue).max() + 1e-12
    depth = np.linspace(0.0, 0.04, size)[:, None]
    return 0.14 + 0.04 * tissue + depth


def _landmark_positions(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    k = spec.num_landmarks
    margin = max(4.0, 1.6 * BLOB_SIGMA)
    jit = spec.geometry_jitter * size
    ys = (np.arange(k) + 0.5) * size / k + rng.uniform(-jit, jit, size=k)
    x0 = rng.uniform(0.3 * size, 0.7 * size)
    slope = rng.uniform(-0.25, 0.25)
    xs = x0 + slope * (ys - size / 2) + rng.uniform(-jit, jit, size=k)
    pts = np.stack([xs, ys], axis=1)
    return np.clip(pts, margin, size - 1 - margin)


def _render_detection(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = spec.image_size
    pts = _landmark_positions(spec, rng)
    img = _background(size, rng)
    yy, xx = np.mgrid[0:size, 0:size]
    for x, y in pts:
        amp = rng.uniform(0.6, 0.75)
        sx = BLOB_SIGMA * rng.uniform(1.0, 1.3)
        sy = BLOB_SIGMA * rng.uniform(0.8, 1.0)
        img = img + amp * np.exp(-((xx - x) ** 2 / (2 * sx**2) + (yy - y) ** 2 / (2 * sy**2)))
    return img, pts


def _boundary(size: int, base: float, rng: np.random.Generator, jitter: float) -> np.ndarray:
    cols = np.arange(size)
    phase = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(1.0, 2.0) * size
    wobble = jitter * np.sin(2 * np.pi * cols / period + phase)
    return base + rng.uniform(-jitter, jitter) + wobble


def _render_segmentation(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = spec.image_size
    top, bottom = spec.band_rows
    jit = max(1.0, spec.geometry_jitter * size)
    upper_top = _boundary(size, top, rng, jit)
    thickness = bottom - top
    lower_bot = upper_top + thickness + rng.uniform(-0.2, 0.2) * thickness
    inner = upper_top + rng.uniform(0.3, 0.4) * (lower_bot - upper_top)
    lower_top = upper_top + rng.uniform(0.55, 0.65) * (lower_bot - upper_top)

    rows = np.arange(size)[:, None].astype(np.float64)
    upper = (rows >= upper_top[None, :]) & (rows < inner[None, :])
    lower = (rows >= lower_top[None, :]) & (rows < lower_bot[None, :])
    mask = ((rows >= upper_top[None, :]) & (rows < lower_bot[None, :])).astype(np.uint8)

    img = _background(size, rng)
    # dark lumen above the complex
    img = np.where(rows < upper_top[None, :] - 2, img * 0.5, img)
    img = img + 0.55 * upper + 0.7 * lower + 0.12 * (mask.astype(bool) & ~upper & ~lower)
    img = ndimage.gaussian_filter(img, 0.6, mode="reflect")
    return img, mask


def _photometric(image: np.ndarray, style: StyleParams) -> np.ndarray:
    out = np.power(np.clip(image, 0.0, 1.0), style.gamma)
    if style.contrast_scale != 1.0:
        mean = out.mean()
        out = (out - mean) * style.contrast_scale + mean
    if style.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, style.blur_sigma, mode="reflect")
    return np.clip(out + style.intensity_offset, 0.0, 1.0)


def style_shift(image: np.ndarray, style: StyleParams, seed: int = 0) -> np.ndarray:
    """Re-render a source-style image in another acquisition style.

    Speckle beyond the source level is added multiplicatively before the
    photometric chain (gamma, contrast about the mean, blur, offset, clip).
    Identity parameters return the input unchanged.
    """
    style.validate()
    image = np.asarray(image)
    if style.is_identity:
        return image.copy()
    out = image.astype(np.float64)
    extra = style.speckle_strength - SOURCE_SPECKLE
    if extra > 0:
        rng = np.random.default_rng(seed)
        out = out * (1.0 + extra * (speckle_field(out.shape, rng) - 1.0))
    return _photometric(out, style).astype(np.float32)


def render_sample(spec: SceneSpec, style: StyleParams, seed: int, index: int, domain: Domain) -> AnnotatedSample:
    geom_rng = np.random.default_rng([seed, index, 0])
    if spec.task == "detection":
        clean, pts = _render_detection(spec, geom_rng)
        truth = {"landmarks": pts}
    else:
        clean, mask = _render_segmentation(spec, geom_rng)
        truth = {"mask": mask}
    speckle_rng = np.random.default_rng([spec.speckle_seed, seed, index, 1])
    noisy = clean * (1.0 + style.speckle_strength * (speckle_field(clean.shape, speckle_rng) - 1.0))
    img = _photometric(noisy, style).astype(np.float32)
    return AnnotatedSample(
        image=img, domain=domain, id=f"{domain}_{index:05d}", pixel_spacing=spec.pixel_spacing, **truth
    )


def generate_dataset(
    spec: SceneSpec,
    style: StyleParams,
    count: int,
    seed: int,
    domain: Optional[Domain] = None,
    start: int = 0,
) -> list[AnnotatedSample]:
    """Generate ``count`` annotated samples; a pure function of its arguments."""
    spec.validate()
    style.validate()
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    if domain is None:
        domain = "source" if style.is_identity else "target"
    return [render_sample(spec, style, seed, start + i, domain) for i in range(count)]
