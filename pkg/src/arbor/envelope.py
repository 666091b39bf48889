"""Occupancy extraction from an optimised grid and attraction-marker sampling."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import DegenerateResult, InvalidArgument
from . import io
from . import rng as rngmod
from .render import DensityGrid


@dataclass
class OccupancyVolume:
    """Boolean voxel occupancy over an axis-aligned box (lo, hi) in metres."""

    inside: np.ndarray
    extent: tuple[np.ndarray, np.ndarray]
    warning: str | None = None

    def __post_init__(self):
        self.inside = np.asarray(self.inside, dtype=bool)
        lo, hi = (np.asarray(e, dtype=np.float64).reshape(3) for e in self.extent)
        self.extent = (lo, hi)
        if self.inside.ndim != 3:
            raise InvalidArgument("occupancy must be 3-D")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.inside.shape

    @property
    def voxel_size(self) -> np.ndarray:
        lo, hi = self.extent
        return (hi - lo) / np.array(self.resolution)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.voxel_size))

    @property
    def inside_fraction(self) -> float:
        return float(self.inside.mean()) if self.inside.size else 0.0

    @property
    def inside_volume(self) -> float:
        return float(np.count_nonzero(self.inside)) * self.voxel_volume

    @property
    def grounded(self) -> bool:
        """True if some connected inside-component reaches the bottom voxel layer."""
        if not self.inside.any():
            return False
        labels, _ = ndimage.label(self.inside)
        return bool(np.any(labels[:, :, 0] > 0))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Per-point test: does the point fall in an inside voxel?"""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = self.extent
        idx = np.floor((pts - lo) / self.voxel_size).astype(np.int64)
        res = np.array(self.resolution)
        # points exactly on the upper face belong to the last voxel
        on_hi = np.isclose(pts, hi) & (idx == res)
        idx[on_hi] -= 1
        ok = np.all((idx >= 0) & (idx < res), axis=1)
        out = np.zeros(len(pts), dtype=bool)
        i = idx[ok]
        out[ok] = self.inside[i[:, 0], i[:, 1], i[:, 2]]
        return out

    def centroid(self) -> np.ndarray:
        lo = self.extent[0]
        ijk = np.argwhere(self.inside)
        if ijk.size == 0:
            raise InvalidArgument("empty occupancy has no centroid")
        return lo + (ijk.mean(axis=0) + 0.5) * self.voxel_size


def extract_occupancy(grid: DensityGrid, tau: float | None = None) -> OccupancyVolume:
    """Threshold voxel density at ``tau`` (inside iff density >= tau).

    With ``tau=None`` the threshold is half the 99th-percentile density.
    All-empty and all-full results carry a degenerate-envelope warning.
    """
    density = grid.density
    if tau is None:
        tau = 0.5 * float(np.percentile(density, 99))
    if not tau > 0:
        raise InvalidArgument("tau must be > 0")
    vol = OccupancyVolume(density >= tau, grid.extent)
    if not vol.inside.any():
        vol.warning = "degenerate envelope: no voxel reaches the density threshold"
    elif vol.inside.all():
        vol.warning = "degenerate envelope: every voxel is inside"
    elif not vol.grounded:
        vol.warning = "envelope does not reach the ground layer"
    if vol.warning:
        warnings.warn(vol.warning, DegenerateResult, stacklevel=2)
    return vol


@dataclass
class MarkerSet:
    """Attraction points with a per-point alive flag."""

    points: np.ndarray
    alive: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.alive is None:
            self.alive = np.ones(len(self.points), dtype=bool)
        self.alive = np.asarray(self.alive, dtype=bool).copy()
        if self.alive.shape != (len(self.points),):
            raise InvalidArgument("alive flags must match the number of points")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_alive(self) -> int:
        return int(np.count_nonzero(self.alive))

    def copy(self) -> "MarkerSet":
        return MarkerSet(self.points.copy(), self.alive.copy())

    def write_ply(self, path, only_alive: bool = False) -> None:
        pts = self.points[self.alive] if only_alive else self.points
        io.write_ply(path, pts, comments=["arbor attraction markers"])

    @classmethod
    def read_ply(cls, path) -> "MarkerSet":
        return cls(io.read_ply_points(path))


def sample_markers(vol: OccupancyVolume, density: float = 4000.0, seed: int = 0) -> MarkerSet:
    """Uniform random markers inside the occupied voxels.

    The count is Poisson with mean ``density * inside_volume``; each marker
    picks an inside voxel uniformly and a uniform position within it.
    """
    if not density > 0:
        raise InvalidArgument("marker density must be > 0")
    cells = np.argwhere(vol.inside)
    if len(cells) == 0:
        return MarkerSet(np.zeros((0, 3)))
    gen = rngmod.stream(seed, "envelope.markers")
    n = int(gen.poisson(density * vol.inside_volume))
    pick = cells[gen.integers(len(cells), size=n)]
    offs = gen.random((n, 3))
    pts = vol.extent[0] + (pick + offs) * vol.voxel_size
    return MarkerSet(pts)


# -- run-length occupancy format ----------------------------------------------------
#
#   offset  size  field
#   0       8     magic b"ARBOCC01"
#   8       12    nx, ny, nz          uint32 LE
#   20      48    lo[3], hi[3]        float64 LE
#   68      4     n_runs              uint32 LE
#   72      4*n   run lengths         uint32 LE
#
# Runs cover the voxels in C order (x slowest, z fastest) and alternate
# outside/inside starting with outside; a leading zero-length run is allowed.

OCC_MAGIC = b"ARBOCC01"
_OCC_HEADER = struct.Struct("<8s3I6dI")


def occupancy_to_bytes(vol: OccupancyVolume) -> bytes:
    flat = vol.inside.reshape(-1)
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat.size and flat[0]:
        runs = np.concatenate([[0], runs])
    lo, hi = vol.extent
    head = _OCC_HEADER.pack(OCC_MAGIC, *vol.resolution, *lo.tolist(), *hi.tolist(), len(runs))
    return head + runs.astype("<u4").tobytes()


def occupancy_from_bytes(data: bytes) -> OccupancyVolume:
    magic, nx, ny, nz, *rest = _OCC_HEADER.unpack_from(data)
    if magic != OCC_MAGIC:
        raise InvalidArgument(f"bad occupancy magic {magic!r}")
    ext, n_runs = rest[:6], rest[6]
    runs = np.frombuffer(data, "<u4", n_runs, _OCC_HEADER.size).astype(np.int64)
    if runs.sum() != nx * ny * nz:
        raise InvalidArgument("occupancy runs do not cover the grid")
    values = np.arange(n_runs) % 2 == 1
    flat = np.repeat(values, runs)
    return OccupancyVolume(flat.reshape(nx, ny, nz), (np.array(ext[:3]), np.array(ext[3:])))


def save_occupancy(path, vol: OccupancyVolume) -> None:
    io.atomic_write_bytes(path, occupancy_to_bytes(vol))


def load_occupancy(path) -> OccupancyVolume:
    with open(path, "rb") as fh:
        return occupancy_from_bytes(fh.read())
