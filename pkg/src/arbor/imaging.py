"""Image and mask containers, sharpness-based curation and silhouette IoU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import InvalidArgument
from . import io


@dataclass(frozen=True)
class Image:
    """Row-major image with values in [0, 1]; ``pixels`` has shape (h, w, channels)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise InvalidArgument(f"image must be (h, w, 1|3), got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise InvalidArgument("image values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def gray(self) -> "Image":
        if self.channels == 1:
            return self
        # Rec. 601 luma
        return Image(np.clip(self.pixels @ np.array([0.299, 0.587, 0.114]), 0.0, 1.0))

    def rgb(self) -> np.ndarray:
        """Pixels as an (h, w, 3) array, replicating grayscale."""
        if self.channels == 3:
            return self.pixels
        return np.repeat(self.pixels, 3, axis=2)

    @classmethod
    def read(cls, path) -> "Image":
        return cls(io.read_image_array(path))

    def write(self, path) -> None:
        io.write_image_array(path, self.pixels[:, :, 0] if self.channels == 1 else self.pixels)


@dataclass(frozen=True)
class Mask:
    """Soft per-pixel occupancy in [0, 1], shape (h, w)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 3 and v.shape[2] == 1:
            v = v[:, :, 0]
        if v.ndim != 2:
            raise InvalidArgument(f"mask must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0.0 or v.max(initial=0.0) > 1.0:
            raise InvalidArgument("mask values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def binarize(self, thresh: float = 0.5) -> np.ndarray:
        return self.values >= thresh

    @classmethod
    def read(cls, path) -> "Mask":
        arr = io.read_image_array(path)
        if arr.ndim == 3:
            arr = arr.mean(axis=2)
        return cls(arr)

    def write(self, path, thresh: float | None = 0.5) -> None:
        """Write as PGM/PNG; binarized to 0/255 unless ``thresh`` is None."""
        vals = self.values if thresh is None else self.binarize(thresh).astype(np.float64)
        io.write_image_array(path, vals)


def sharpness_score(img: Image, patch_size: int) -> float:
    """Mean over non-overlapping patches of the variance of the Laplacian response.

    Trailing rows/columns that do not fill a whole patch are dropped, and each
    patch's border pixels are excluded so no response straddles two patches.
    """
    if img.channels != 1:
        raise InvalidArgument("sharpness_score expects a grayscale image")
    if patch_size < 3 or patch_size > min(img.width, img.height):
        raise InvalidArgument(f"patch_size must be in [3, {min(img.width, img.height)}], got {patch_size}")
    v = img.pixels[:, :, 0]
    ny, nx = img.height // patch_size, img.width // patch_size
    patches = v[: ny * patch_size, : nx * patch_size].reshape(ny, patch_size, nx, patch_size).transpose(0, 2, 1, 3)
    c = patches[:, :, 1:-1, 1:-1]
    lap = (patches[:, :, :-2, 1:-1] + patches[:, :, 2:, 1:-1]
           + patches[:, :, 1:-1, :-2] + patches[:, :, 1:-1, 2:] - 4.0 * c)
    per_patch = lap.reshape(ny, nx, -1).var(axis=2)
    return float(per_patch.mean())


def curate(imgs, threshold: float, patch_size: int) -> tuple[list[int], list[int]]:
    """Split image indices into (kept, rejected) by sharpness threshold."""
    if threshold < 0:
        raise InvalidArgument("threshold must be >= 0")
    kept, rejected = [], []
    for i, img in enumerate(imgs):
        score = sharpness_score(img if img.channels == 1 else img.gray(), patch_size)
        (kept if score >= threshold else rejected).append(i)
    return kept, rejected


def silhouette_iou(a: Mask, b: Mask, bin_thresh: float = 0.5) -> float:
    """Intersection over union of the two masks binarized at ``bin_thresh``."""
    if a.values.shape != b.values.shape:
        raise InvalidArgument(f"mask shapes differ: {a.values.shape} vs {b.values.shape}")
    if not 0.0 < bin_thresh < 1.0:
        raise InvalidArgument("bin_thresh must lie in (0, 1)")
    A, B = a.binarize(bin_thresh), b.binarize(bin_thresh)
    union = np.count_nonzero(A | B)
    if union == 0:
        return 1.0
    return np.count_nonzero(A & B) / union
