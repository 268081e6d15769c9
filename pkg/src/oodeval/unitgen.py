"""Synthetic OOD unit-test images.

Each image ``i`` of a suite draws from its own generator seeded with
``splitmix64(base_seed ^ i)``. Within a recipe, image-level parameters are
drawn first (in the order listed in each recipe function), then pixel noise
as one block of ``height * width * 3`` values in row-major HWC order.

Gaussian filtering treats the recipe's sigma as the standard deviation in
pixels, truncates the kernel at radius ``ceil(4 * sigma)`` and reflects at
the borders (``d c b a | a b c d``).
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.signal import oaconvolve

from . import parallel
from .errors import DataError
from .prng import Xoshiro256pp, image_seed

RECIPES = (
    "uniform",
    "gaussian",
    "rademacher",
    "pixel_perm",
    "black",
    "white",
    "grey",
    "monochrome",
    "tricolour",
    "tricolour_primary",
    "hstripes",
    "vstripes",
    "smooth",
    "smooth_plus",
    "smooth_color",
    "smooth_pixel_perm",
    "blobs",
)
NEEDS_SOURCE = frozenset({"pixel_perm", "smooth_pixel_perm"})

GAUSSIAN_SIGMAS = (0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.5)
STRIPE_COUNTS = (4, 5, 7, 10, 15, 20)
SMOOTH_SIGMAS = (10, 15, 25, 40, 60, 85)
SMOOTH_PERM_SIGMAS = (1, 1.5, 2, 3, 4, 6, 8)
BLOB_SIGMAS = (1.5, 2, 2.5, 3, 3.5, 4)
BLOB_ON_PROB = 0.7
BLOB_CUTOFF = 0.75

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm"}


@dataclass(frozen=True)
class RecipeSpec:
    name: str
    width: int = 224
    height: int = 224
    count: int = 400
    base_seed: int = 0
    source_dir: Path | None = None

    def validate(self) -> None:
        if self.name not in RECIPES:
            raise DataError(f"unknown recipe {self.name!r}")
        if self.width < 8 or self.height < 8:
            raise DataError(f"image size must be at least 8x8, got {self.width}x{self.height}")
        if self.count < 1:
            raise DataError(f"count must be >= 1, got {self.count}")
        if not 0 <= self.base_seed < 1 << 64:
            raise DataError("base seed must fit in 64 unsigned bits")
        if self.name in NEEDS_SOURCE:
            if self.source_dir is None:
                raise DataError(f"recipe {self.name!r} needs a source image directory")
            if not source_images(self.source_dir):
                raise DataError(f"no source images found in {self.source_dir}")


def source_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"source directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


# --- filtering ------------------------------------------------------------------


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(4 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_filter(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the two spatial axes of an HWC image."""
    k = gaussian_kernel(sigma)
    r = k.size // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        shape = [1] * out.ndim
        shape[axis] = k.size
        out = oaconvolve(padded, k.reshape(shape), mode="valid", axes=axis)
    return out


def _rescale(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    # exact endpoints, independent of rounding in the division
    out = (x - lo) / (hi - lo)
    out[x == lo] = 0.0
    out[x == hi] = 1.0
    return out


# --- recipes ---------------------------------------------------------------------


def _noise(rng: Xoshiro256pp, h: int, w: int) -> np.ndarray:
    return rng.random(h * w * 3).reshape(h, w, 3)


def _stripes(h: int, w: int, n: int, vertical: bool, colours: np.ndarray) -> np.ndarray:
    img = np.empty((h, w, 3))
    length = w if vertical else h
    for k in range(n):
        a, b = (k * length) // n, ((k + 1) * length) // n
        if vertical:
            img[:, a:b] = colours[k]
        else:
            img[a:b, :] = colours[k]
    return img


def _load_source(path: Path, h: int, w: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            side = min(im.size)
            left = (im.size[0] - side) // 2
            top = (im.size[1] - side) // 2
            im = im.crop((left, top, left + side, top + side)).resize((w, h), Image.BILINEAR)
            return np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read source image {path}: {exc}") from exc


def _pixel_perm(rng: Xoshiro256pp, spec: RecipeSpec, index: int) -> np.ndarray:
    files = source_images(spec.source_dir)
    if not files:
        raise DataError(f"no source images found in {spec.source_dir}")
    src = _load_source(files[index % len(files)], spec.height, spec.width)
    flat = src.reshape(-1, 3)
    return flat[rng.permutation(flat.shape[0])].reshape(src.shape)


def generate_image(spec: RecipeSpec, index: int) -> np.ndarray:
    """Image ``index`` of the suite as an (height, width, 3) float array in [0, 1]."""
    rng = Xoshiro256pp(image_seed(spec.base_seed, index))
    h, w, name = spec.height, spec.width, spec.name

    if name == "uniform":
        img = _noise(rng, h, w)
    elif name == "gaussian":
        sigma = rng.choice(GAUSSIAN_SIGMAS)
        img = 0.5 + sigma * rng.normal(h * w * 3).reshape(h, w, 3)
    elif name == "rademacher":
        img = rng.bernoulli(0.5, h * w * 3).reshape(h, w, 3).astype(np.float64)
    elif name == "pixel_perm":
        img = _pixel_perm(rng, spec, index)
    elif name == "black":
        img = np.zeros((h, w, 3))
    elif name == "white":
        img = np.ones((h, w, 3))
    elif name == "grey":
        img = np.full((h, w, 3), rng.uniform())
    elif name == "monochrome":
        img = np.broadcast_to(rng.random(3), (h, w, 3)).copy()
    elif name in ("tricolour", "tricolour_primary"):
        vertical = rng.uniform() < 0.5
        if name == "tricolour":
            colours = rng.random(9).reshape(3, 3)
        else:
            colours = rng.bernoulli(0.5, 9).reshape(3, 3).astype(np.float64)
        img = _stripes(h, w, 3, vertical, colours)
    elif name in ("hstripes", "vstripes"):
        n = rng.choice(STRIPE_COUNTS)
        colours = rng.random(3 * n).reshape(n, 3)
        img = _stripes(h, w, n, name == "vstripes", colours)
    elif name in ("smooth", "smooth_plus"):
        sigma = rng.choice(SMOOTH_SIGMAS)
        blurred = gaussian_filter(_noise(rng, h, w), sigma)
        if name == "smooth":
            img = _rescale(blurred)
        else:
            img = np.stack([_rescale(blurred[..., c]) for c in range(3)], axis=-1)
    elif name == "smooth_color":
        sigma = rng.choice(SMOOTH_SIGMAS)
        delta = 0.1 + 0.2 * rng.uniform()
        colour = rng.random(3)
        blurred = gaussian_filter(_noise(rng, h, w), sigma)
        img = np.empty_like(blurred)
        for c in range(3):
            ch = blurred[..., c]
            lo, hi = np.quantile(ch, [0.025, 0.975])
            if hi > lo:
                img[..., c] = colour[c] - delta + (ch - lo) * (2 * delta / (hi - lo))
            else:
                img[..., c] = colour[c]
    elif name == "smooth_pixel_perm":
        sigma = rng.choice(SMOOTH_PERM_SIGMAS)
        img = gaussian_filter(_pixel_perm(rng, spec, index), sigma)
    elif name == "blobs":
        sigma = rng.choice(BLOB_SIGMAS)
        on = rng.bernoulli(BLOB_ON_PROB, h * w * 3).reshape(h, w, 3).astype(np.float64)
        img = gaussian_filter(on, sigma)
        img[img < BLOB_CUTOFF] = 0.0
    else:
        raise DataError(f"unknown recipe {name!r}")
    return np.clip(img, 0.0, 1.0)


# --- encoding ------------------------------------------------------------------------


def quantize(img: np.ndarray) -> np.ndarray:
    """Channel bytes ``round(255 * v)``, halves rounded away from zero."""
    scaled = 255.0 * np.asarray(img, dtype=np.float64)
    return np.clip(np.sign(scaled) * np.floor(np.abs(scaled) + 0.5), 0, 255).astype(np.uint8)


def quantize_and_encode(img: np.ndarray) -> bytes:
    """8-bit RGB, non-interlaced PNG bytes."""
    buf = io.BytesIO()
    Image.fromarray(quantize(img)).save(buf, format="PNG", optimize=False, compress_level=1)
    return buf.getvalue()


def image_filename(name: str, index: int) -> str:
    return f"{name}_{index:05d}.png"


def generate_suite(spec: RecipeSpec, out_dir: str | Path) -> dict:
    """Write ``spec.count`` PNGs plus ``manifest.json``; returns the manifest."""
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc

    def render(i: int) -> tuple[str, bytes]:
        return image_filename(spec.name, i), quantize_and_encode(generate_image(spec, i))

    files = []
    for name, blob in parallel.ordered_map(render, spec.count):
        try:
            (out_dir / name).write_bytes(blob)
        except OSError as exc:
            raise DataError(f"cannot write {out_dir / name}: {exc}") from exc
        files.append({"name": name, "sha256": hashlib.sha256(blob).hexdigest()})

    manifest = {
        "recipe": spec.name,
        "seed": spec.base_seed,
        "dims": [spec.width, spec.height],
        "count": spec.count,
        "files": files,
    }
    if spec.source_dir is not None and spec.name in NEEDS_SOURCE:
        manifest["sources"] = [p.name for p in source_images(spec.source_dir)]
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
