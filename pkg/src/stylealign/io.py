"""On-disk dataset layout and JSON helpers.

A dataset directory holds ``<root>/<domain>/<id>.png`` (16-bit grayscale)
with a ``<id>.json`` sidecar carrying the truth, spacing and domain. Masks
are stored run-length encoded in row-major order.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError
from .synthdata import AnnotatedSample

_SCALE = 65535.0


def rle_encode(mask: np.ndarray) -> list[int]:
    """Alternating run lengths over the flattened mask, starting with zeros."""
    flat = np.asarray(mask).astype(bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=np.uint8)
    pos, value = 0, 0
    for r in runs:
        flat[pos:pos + r] = value
        pos += r
        value ^= 1
    if pos != flat.size:
        raise ValueError(f"run lengths cover {pos} pixels, mask has {flat.size}")
    return flat.reshape(shape)


def write_image(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * _SCALE).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return (arr / 255.0).astype(np.float32)
    return (arr.astype(np.float64) / _SCALE).astype(np.float32)


def write_png8(path, image: np.ndarray) -> None:
    """Preview image, 8-bit; not for round-tripping data."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path)


def save_samples(samples: Iterable[AnnotatedSample], root) -> Path:
    root = Path(root)
    for s in samples:
        d = root / s.domain
        write_image(d / f"{s.id}.png", s.image)
        side = {"id": s.id, "domain": s.domain, "pixel_spacing": s.pixel_spacing, "shape": list(s.image.shape),
                "meta": s.meta}
        if s.landmarks is not None:
            side["landmarks"] = s.landmarks.tolist()
        if s.mask is not None:
            side["mask_rle"] = rle_encode(s.mask)
        (d / f"{s.id}.json").write_text(json.dumps(side))
    return root


def load_sample(png: Path) -> AnnotatedSample:
    image = read_image(png)
    side_path = png.with_suffix(".json")
    side = json.loads(side_path.read_text()) if side_path.exists() else {}
    domain = side.get("domain", png.parent.name)
    if domain not in ("source", "target"):
        raise ConfigurationError(f"{png}: unknown domain {domain!r}")
    landmarks = np.asarray(side["landmarks"], dtype=np.float64).reshape(-1, 2) if "landmarks" in side else None
    mask = rle_decode(side["mask_rle"], image.shape) if "mask_rle" in side else None
    return AnnotatedSample(image, domain, side.get("id", png.stem), landmarks, mask,
                           side.get("pixel_spacing", 0.15), side.get("meta", {}))


def load_samples(path, domain: Optional[str] = None) -> list[AnnotatedSample]:
    """Load one image file, a domain directory, or a dataset root (optionally one domain of it)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.is_file():
        return [load_sample(path)]
    if domain is not None and (path / domain).is_dir():
        path = path / domain
    files = sorted(path.glob("*.png"))
    if not files:
        files = sorted(path.glob("*/*.png"))
    samples = [load_sample(f) for f in files]
    if domain is not None:
        samples = [s for s in samples if s.domain == domain]
    if not samples:
        raise ConfigurationError(f"no images found under {path}")
    return samples


def json_safe(obj):
    """Replace non-finite floats by None and numpy scalars/arrays by plain Python."""
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_safe(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(json_safe(obj), indent=2, sort_keys=True))
    return path
