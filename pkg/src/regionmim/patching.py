"""Patch geometry and organ-mask-guided masking plans.

An image is tiled into non-overlapping square patches in raster order. A
patch is *valid* when its footprint overlaps the organ mask by more than the
overlap threshold. A masking plan partitions the patch indices into a masked
and an unmasked set at a given ratio, either sampling only from the valid set
(region-guided) or from all patches (random baseline).

Plans are pure functions of their inputs: sampling uses a seeded PCG64
generator (``numpy.random.default_rng``), the one PRNG used across the whole
package, so a plan is reproducible from (inputs, sigma, strategy, seed).
All operations here are pure and safe to call from parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ShapeError, StrategyError

REGION = "region"
RANDOM = "random"
STRATEGIES = (REGION, RANDOM)


@dataclass
class ImageGrid:
    """Grayscale (or multi-channel) image, pixels of shape [H, W, C]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3:
            raise ShapeError(f"image pixels must be [H, W, C], got shape {self.pixels.shape}")
        if self.height < 1 or self.width < 1:
            raise ShapeError(f"image extents must be positive, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class MaskImage:
    """Binary organ mask paired with an image; 1 = inside the organ region."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 2:
            raise ShapeError(f"mask bits must be [H, W], got shape {self.bits.shape}")
        if not np.isin(self.bits, (0, 1)).all():
            raise ShapeError("mask bits must be 0 or 1")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass
class PatchGrid:
    """Image split into n flattened patches plus the bookkeeping to invert it."""

    patch_size: int
    height: int
    width: int
    channels: int
    patches: np.ndarray  # [n, T*T*C], each patch row-major with channel last
    coords: np.ndarray   # [n, 2] grid (row, col) per patch, raster order

    @property
    def count(self) -> int:
        return self.patches.shape[0]


@dataclass
class MaskingPlan:
    """Partition of patch indices into masked/unmasked sets at ratio sigma."""

    sigma: float
    strategy: str
    seed: int
    valid: np.ndarray        # sorted indices eligible under region guidance
    masked: np.ndarray       # sorted masked indices, |masked| = masked_count
    unmasked: np.ndarray     # sorted complement
    masked_count: int
    clamped: bool = False

    @property
    def unmasked_count(self) -> int:
        return self.unmasked.size


def split_into_patches(img: ImageGrid, patch_size: int) -> PatchGrid:
    """Tile the image into (H/T)*(W/T) patches of T*T*C values, raster order."""
    t = int(patch_size)
    h, w, c = img.height, img.width, img.channels
    if t < 1 or h % t or w % t:
        raise GeometryError(f"patch size {t} does not tile a {h}x{w} image")
    rows, cols = h // t, w // t
    tiles = img.pixels.reshape(rows, t, cols, t, c).transpose(0, 2, 1, 3, 4)
    patches = np.ascontiguousarray(tiles.reshape(rows * cols, t * t * c))
    grid = np.indices((rows, cols)).reshape(2, -1).T
    return PatchGrid(t, h, w, c, patches, np.ascontiguousarray(grid))


def reassemble_image(pg: PatchGrid, overrides: dict[int, np.ndarray] | None = None) -> ImageGrid:
    """Invert :func:`split_into_patches`, substituting any overridden patches."""
    patches = pg.patches
    if overrides:
        patches = patches.copy()
        for index, values in overrides.items():
            if not 0 <= index < pg.count:
                raise ShapeError(f"override index {index} outside [0, {pg.count})")
            values = np.asarray(values, dtype=np.float64).reshape(-1)
            if values.size != patches.shape[1]:
                raise ShapeError(
                    f"override for patch {index} has {values.size} values, "
                    f"expected {patches.shape[1]}"
                )
            patches[index] = values
    t, c = pg.patch_size, pg.channels
    rows, cols = pg.height // t, pg.width // t
    tiles = patches.reshape(rows, cols, t, t, c).transpose(0, 2, 1, 3, 4)
    return ImageGrid(tiles.reshape(pg.height, pg.width, c))


def compute_valid_set(mask: MaskImage, patch_size: int,
                      overlap_threshold: float = 0.0) -> np.ndarray:
    """Indices of patches whose in-mask pixel fraction strictly exceeds the threshold."""
    t = int(patch_size)
    h, w = mask.height, mask.width
    if t < 1 or h % t or w % t:
        raise GeometryError(f"patch size {t} does not tile a {h}x{w} mask")
    if not 0.0 <= overlap_threshold < 1.0:
        raise ShapeError(f"overlap threshold {overlap_threshold} outside [0, 1)")
    rows, cols = h // t, w // t
    fractions = mask.bits.reshape(rows, t, cols, t).mean(axis=(1, 3)).reshape(-1)
    return np.flatnonzero(fractions > overlap_threshold)


def build_masking_plan(n: int, valid, sigma: float, strategy: str, seed: int) -> MaskingPlan:
    """Sample the masked index set for a patch grid of n patches.

    masked_count = floor(n * sigma). Region-guided sampling draws uniformly
    without replacement from the valid set; when the valid set is smaller than
    masked_count, every valid patch is masked and the plan is flagged clamped.
    The random baseline draws from all n indices.
    """
    if n < 1:
        raise ShapeError(f"patch count must be positive, got {n}")
    if not 0.0 < sigma < 1.0:
        raise ShapeError(f"masking ratio {sigma} outside (0, 1)")
    if strategy not in STRATEGIES:
        raise StrategyError(f"unknown masking strategy {strategy!r}; use one of {STRATEGIES}")
    valid = np.sort(np.asarray(valid, dtype=np.int64).reshape(-1))
    if valid.size and (valid[0] < 0 or valid[-1] >= n):
        raise ShapeError(f"valid indices outside [0, {n})")

    m = math.floor(n * sigma)
    rng = np.random.default_rng(seed)
    clamped = False
    if strategy == REGION:
        if valid.size == 0:
            raise StrategyError("region-guided masking with an empty valid set")
        if valid.size < m:
            masked = valid.copy()
            m = int(valid.size)
            clamped = True
        else:
            masked = np.sort(rng.permutation(valid)[:m])
    else:
        masked = np.sort(rng.permutation(n)[:m])

    unmasked = np.setdiff1d(np.arange(n, dtype=np.int64), masked, assume_unique=True)
    return MaskingPlan(
        sigma=float(sigma),
        strategy=strategy,
        seed=int(seed),
        valid=valid,
        masked=masked.astype(np.int64),
        unmasked=unmasked,
        masked_count=int(m),
        clamped=clamped,
    )
