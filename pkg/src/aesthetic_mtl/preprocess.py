"""Image preprocessing: letterboxing to the training canvas and multi-patch sampling.

Images are ``(height, width, 3)`` uint8 arrays. Resampling is done by Pillow.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import InvalidInputError

CANVAS = (454, 984)            # height, width
DEFAULT_PATCH = (227, 492)     # half the canvas along each axis
FEATURE_GRID = (16, 32)
STRATEGIES = ("pad-rescale", "mp", "mp-gp")


def as_image(pixels) -> np.ndarray:
    img = np.asarray(pixels)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidInputError(f"image has a zero dimension: {img.shape}")
    if img.dtype != np.uint8:
        raise InvalidInputError(f"expected 8-bit channels, got dtype {img.dtype}")
    return img


def load_image(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"))


def resize(img: np.ndarray, height: int, width: int, resample=Image.BILINEAR) -> np.ndarray:
    if img.shape[:2] == (height, width):
        return img.copy()
    return np.asarray(Image.fromarray(img).resize((width, height), resample=resample))


def fit_size(height: int, width: int, canvas=CANVAS) -> tuple:
    """Largest (h, w) with the source aspect ratio that fits inside ``canvas``."""
    H, W = canvas
    s = min(H / height, W / width)
    return min(H, max(1, round(height * s))), min(W, max(1, round(width * s)))


def pad_and_rescale(pixels, canvas=CANVAS) -> np.ndarray:
    """Scale to fit ``canvas`` keeping the aspect ratio, then center on black."""
    img = as_image(pixels)
    H, W = canvas
    nh, nw = fit_size(img.shape[0], img.shape[1], canvas)
    out = np.zeros((H, W, 3), dtype=np.uint8)
    top, left = (H - nh) // 2, (W - nw) // 2
    out[top:top + nh, left:left + nw] = resize(img, nh, nw)
    return out


class Patch(NamedTuple):
    pixels: np.ndarray
    box: tuple          # (top, left, height, width) in the source image it was cut from
    is_global: bool


def multi_patch(pixels, n_local: int, patch_size=DEFAULT_PATCH, with_global: bool = False,
                n_global: int = 0, seed: int = 0, allow_upscale: bool = True,
                global_scale=(0.6, 1.0)) -> list:
    """Random local crops plus, optionally, rescaled global windows.

    Local patches are cut at native resolution. When the image is smaller than
    ``patch_size`` it is first upscaled by the smallest aspect-preserving factor
    that makes the patch fit (or rejected if ``allow_upscale`` is off); local
    boxes then refer to the upscaled image. Global patches crop a window with the
    patch's aspect ratio covering a random fraction ``global_scale`` of the largest
    such window in the original image, then resize it to ``patch_size``.
    """
    img = as_image(pixels)
    ph, pw = (int(v) for v in patch_size)
    if ph < 1 or pw < 1:
        raise InvalidInputError(f"bad patch size {patch_size}")
    if n_local < 0 or n_global < 0:
        raise InvalidInputError("patch counts must be non-negative")
    rng = np.random.default_rng(seed)

    src = img
    h, w = img.shape[:2]
    if h < ph or w < pw:
        if not allow_upscale:
            raise InvalidInputError(f"patch {ph}x{pw} does not fit in a {h}x{w} image")
        f = max(ph / h, pw / w)
        src = resize(img, max(ph, math.ceil(h * f)), max(pw, math.ceil(w * f)))

    patches = []
    sh, sw = src.shape[:2]
    for _ in range(n_local):
        top = int(rng.integers(0, sh - ph + 1))
        left = int(rng.integers(0, sw - pw + 1))
        patches.append(Patch(src[top:top + ph, left:left + pw].copy(), (top, left, ph, pw), False))

    if with_global:
        lo, hi = global_scale
        max_h = min(h, w * ph / pw)
        for _ in range(n_global):
            u = rng.uniform(lo, hi)
            wh = max(1, min(h, round(u * max_h)))
            ww = max(1, min(w, round(wh * pw / ph)))
            top = int(rng.integers(0, h - wh + 1))
            left = int(rng.integers(0, w - ww + 1))
            window = img[top:top + wh, left:left + ww]
            patches.append(Patch(resize(window, ph, pw), (top, left, wh, ww), True))
    return patches


def image_features(pixels, grid=FEATURE_GRID) -> np.ndarray:
    """Box-downsample to a small grid and flatten to [0, 1] floats."""
    img = as_image(pixels)
    small = resize(img, grid[0], grid[1], resample=Image.BOX)
    return small.astype(float).ravel() / 255.0


def preprocess(pixels, strategy: str = "pad-rescale", *, grid=FEATURE_GRID, patch_size=DEFAULT_PATCH,
               n_local: int = 5, n_global: int = 2, seed: int = 0) -> np.ndarray:
    """Feature rows for one image: one row for pad-rescale, one per patch otherwise."""
    if strategy == "pad-rescale":
        return image_features(pad_and_rescale(pixels), grid)[None, :]
    if strategy in ("mp", "mp-gp"):
        patches = multi_patch(pixels, n_local, patch_size, with_global=strategy == "mp-gp",
                              n_global=n_global, seed=seed)
        return np.stack([image_features(p.pixels, grid) for p in patches])
    raise InvalidInputError(f"unknown preprocessing strategy {strategy!r}; expected one of {STRATEGIES}")
