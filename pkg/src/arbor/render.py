"""Dense density-grid envelope and differentiable emission-absorption rendering.

The grid stores unconstrained parameters: voxel density is ``softplus(p)`` and
albedo is ``sigmoid(q)``.  Rendering marches a fixed number of equal samples
through the grid's bounding box, trilinearly interpolating voxel values, and
composites over a white background.  Sample-to-voxel interpolation is linear
in the voxel values, so it is precomputed per camera as a sparse matrix and
the backward pass is its transpose.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import expit

from . import InvalidArgument
from . import io
from .imaging import Image, Mask

BACKGROUND = 1.0


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def logit(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


@dataclass
class DensityGrid:
    """Trainable voxel envelope.

    ``density_param`` has shape (nx, ny, nz) and ``albedo_param`` (nx, ny, nz, 3);
    ``extent`` is ``(lo, hi)``, two length-3 arrays giving the box in metres.
    Voxel (i, j, k) is centred at ``lo + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``.
    """

    density_param: np.ndarray
    albedo_param: np.ndarray
    extent: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        self.density_param = np.asarray(self.density_param, dtype=np.float64)
        self.albedo_param = np.asarray(self.albedo_param, dtype=np.float64)
        lo, hi = (np.asarray(e, dtype=np.float64).reshape(3) for e in self.extent)
        self.extent = (lo, hi)
        if self.density_param.ndim != 3:
            raise InvalidArgument("density_param must be 3-D")
        if self.albedo_param.shape != self.density_param.shape + (3,):
            raise InvalidArgument("albedo_param must have shape resolution + (3,)")
        if np.any(hi <= lo):
            raise InvalidArgument("extent must satisfy lo < hi on every axis")
        if not (np.all(np.isfinite(self.density_param)) and np.all(np.isfinite(self.albedo_param))):
            raise InvalidArgument("grid parameters must be finite")

    @classmethod
    def full(cls, resolution=(64, 64, 64), extent=((-1.0, -1.0, 0.0), (1.0, 1.0, 2.0)),
             density: float = 0.5, albedo=(0.5, 0.5, 0.5)) -> "DensityGrid":
        """Uniform grid with the given voxel density (>0) and albedo (in (0, 1))."""
        res = tuple(int(n) for n in resolution)
        p = np.full(res, float(inverse_softplus(density)))
        q = np.broadcast_to(logit(np.asarray(albedo, dtype=np.float64)), res + (3,)).copy()
        return cls(p, q, extent)

    @classmethod
    def from_density(cls, density: np.ndarray, extent, albedo=(0.5, 0.5, 0.5)) -> "DensityGrid":
        """Build a grid whose softplus density equals ``density`` (clamped to >= 1e-12)."""
        density = np.maximum(np.asarray(density, dtype=np.float64), 1e-12)
        albedo = np.asarray(albedo, dtype=np.float64)
        q = np.broadcast_to(logit(np.clip(albedo, 1e-6, 1 - 1e-6)), density.shape + (3,)).copy()
        return cls(inverse_softplus(density), q, extent)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.density_param.shape

    @property
    def density(self) -> np.ndarray:
        return softplus(self.density_param)

    @property
    def albedo(self) -> np.ndarray:
        return expit(self.albedo_param)

    @property
    def voxel_size(self) -> np.ndarray:
        lo, hi = self.extent
        return (hi - lo) / np.array(self.resolution)

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.extent
        return 0.5 * (lo + hi)

    def voxel_centers(self) -> np.ndarray:
        """Array of shape resolution + (3,) with voxel centre coordinates."""
        lo = self.extent[0]
        axes = [lo[d] + (np.arange(n) + 0.5) * self.voxel_size[d] for d, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "DensityGrid":
        return DensityGrid(self.density_param.copy(), self.albedo_param.copy(),
                           (self.extent[0].copy(), self.extent[1].copy()))


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera orbiting the grid centre; azimuth 0 looks along +y, z is up."""

    azimuth: float = 0.0
    elevation: float = 0.0
    radius: float = 5.0
    fov: float = 40.0
    image_size: tuple[int, int] = (64, 64)  # (w, h)

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidArgument("camera radius must be > 0")
        if not 0.0 < self.fov < 180.0:
            raise InvalidArgument("fov must lie in (0, 180) degrees")
        if abs(self.elevation) >= 90.0:
            raise InvalidArgument("elevation must lie in (-90, 90) degrees")
        w, h = self.image_size
        if w < 1 or h < 1:
            raise InvalidArgument("image_size must be positive")
        object.__setattr__(self, "image_size", (int(w), int(h)))

    def offset(self) -> np.ndarray:
        """Camera position relative to the look-at point."""
        az, el = np.radians(self.azimuth), np.radians(self.elevation)
        return self.radius * np.array([np.sin(az) * np.cos(el), -np.cos(az) * np.cos(el), np.sin(el)])

    def rays(self, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ray origin (3,) and unit directions (h, w, 3) for a camera aimed at ``target``."""
        origin = np.asarray(target, dtype=np.float64) + self.offset()
        forward = -self.offset() / self.radius
        right = np.cross(forward, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        w, h = self.image_size
        half = np.tan(np.radians(self.fov) / 2.0)
        xs = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * half * (w / h)
        ys = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * half
        d = forward + xs[None, :, None] * right + ys[:, None, None] * up
        return origin, d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points: np.ndarray, target: np.ndarray) -> np.ndarray:
        """Continuous (col, row) pixel coordinates of world points; NaN behind the camera."""
        pts = np.asarray(points, dtype=np.float64)
        origin = np.asarray(target, dtype=np.float64) + self.offset()
        forward = -self.offset() / self.radius
        right = np.cross(forward, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        rel = pts - origin
        depth = rel @ forward
        w, h = self.image_size
        half = np.tan(np.radians(self.fov) / 2.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            x = (rel @ right) / depth / (half * w / h)
            y = (rel @ up) / depth / half
        col = (x + 1.0) / 2.0 * w
        row = (1.0 - y) / 2.0 * h
        bad = depth <= 0
        return np.stack([np.where(bad, np.nan, col), np.where(bad, np.nan, row)], axis=-1)


def default_pose(grid: DensityGrid, image_size=(64, 64), azimuth=0.0, elevation=0.0, fov=40.0) -> CameraPose:
    """Front-view convention: radius 2.5x the largest extent side."""
    lo, hi = grid.extent
    return CameraPose(azimuth, elevation, 2.5 * float(np.max(hi - lo)), fov, tuple(image_size))


@dataclass
class _RayBundle:
    pixel: np.ndarray  # flat pixel indices of rays that hit the box
    dt: np.ndarray     # (n_hit,) step length per ray
    interp: sparse.csr_matrix   # (n_hit * steps, n_vox)
    interp_t: sparse.csr_matrix
    steps: int
    n_pixels: int


def _trilinear_matrix(points: np.ndarray, lo, voxel, res) -> sparse.csr_matrix:
    """Sparse (n_points, n_vox) matrix of trilinear weights on voxel centres.

    Coordinates outside the outermost centres are clamped, so the field is
    extended as a constant to the box faces.
    """
    n = points.shape[0]
    res = np.asarray(res)
    u = (points - lo) / voxel - 0.5
    u = np.clip(u, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(res - 2, 0))
    f = u - i0
    rows, cols, vals = [], [], []
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                ix = np.minimum(i0[:, 0] + cx, res[0] - 1)
                iy = np.minimum(i0[:, 1] + cy, res[1] - 1)
                iz = np.minimum(i0[:, 2] + cz, res[2] - 1)
                wgt = ((f[:, 0] if cx else 1 - f[:, 0]) * (f[:, 1] if cy else 1 - f[:, 1])
                       * (f[:, 2] if cz else 1 - f[:, 2]))
                rows.append(np.arange(n))
                cols.append((ix * res[1] + iy) * res[2] + iz)
                vals.append(wgt)
    m = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, int(np.prod(res))))
    return m.tocsr()


_BUNDLE_CACHE: "OrderedDict[tuple, _RayBundle]" = OrderedDict()
_BUNDLE_CACHE_SIZE = 8


def _ray_bundle(grid: DensityGrid, pose: CameraPose, steps: int) -> _RayBundle:
    lo, hi = grid.extent
    key = (pose, steps, grid.resolution, tuple(lo), tuple(hi))
    hit = _BUNDLE_CACHE.get(key)
    if hit is not None:
        _BUNDLE_CACHE.move_to_end(key)
        return hit
    center = grid.center
    origin = center + pose.offset()
    if np.all(origin >= lo) and np.all(origin <= hi):
        raise InvalidArgument("camera lies inside the grid extent; increase the pose radius")
    _, dirs = pose.rays(center)
    d = dirs.reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_near = np.maximum(tmin.max(axis=1), 0.0)
    t_far = tmax.min(axis=1)
    pixel = np.flatnonzero(t_far > t_near)
    t_near, t_far, d = t_near[pixel], t_far[pixel], d[pixel]
    dt = (t_far - t_near) / steps
    t = t_near[:, None] + (np.arange(steps) + 0.5)[None, :] * dt[:, None]
    pts = origin + t[:, :, None] * d[:, None, :]
    interp = _trilinear_matrix(pts.reshape(-1, 3), lo, grid.voxel_size, grid.resolution)
    bundle = _RayBundle(pixel, dt, interp, interp.T.tocsr(), steps, dirs.shape[0] * dirs.shape[1])
    _BUNDLE_CACHE[key] = bundle
    if len(_BUNDLE_CACHE) > _BUNDLE_CACHE_SIZE:
        _BUNDLE_CACHE.popitem(last=False)
    return bundle


@dataclass
class RenderOutput:
    """Rendered colour and opacity plus the tape needed for :meth:`backward`."""

    rgb: Image
    mask: Mask
    pose: CameraPose
    _tape: dict = field(repr=False, default_factory=dict)

    def backward(self, grad_rgb=None, grad_mask=None) -> tuple[np.ndarray, np.ndarray]:
        """Vector-Jacobian product: gradients w.r.t. (density_param, albedo_param).

        ``grad_rgb`` has shape (h, w, 3) and ``grad_mask`` (h, w); either may be None.
        """
        tp = self._tape
        bundle: _RayBundle = tp["bundle"]
        res = tp["resolution"]
        n_hit, steps = bundle.pixel.size, bundle.steps
        g_tau = np.zeros((n_hit, steps))
        g_alb = np.zeros((n_hit, steps, 3))
        T_next, T_end, w, alb = tp["T_next"], tp["T_end"], tp["w"], tp["alb"]
        if grad_rgb is not None:
            g = np.asarray(grad_rgb, dtype=np.float64).reshape(-1, 3)[bundle.pixel]
            g_alb = w[:, :, None] * g[:, None, :]
            wa = w[:, :, None] * alb
            # sum_{i>k} w_i a_i via reversed cumulative sum, exclusive
            tail = np.cumsum(wa[:, ::-1], axis=1)[:, ::-1] - wa
            d_c = alb * T_next[:, :, None] - tail - BACKGROUND * T_end[:, None, None]
            g_tau += np.einsum("nsc,nc->ns", d_c, g)
        if grad_mask is not None:
            gm = np.asarray(grad_mask, dtype=np.float64).reshape(-1)[bundle.pixel]
            g_tau += gm[:, None] * T_end[:, None]
        g_sigma = (g_tau * bundle.dt[:, None]).reshape(-1)
        g_density = (bundle.interp_t @ g_sigma).reshape(res)
        g_albedo_vox = (bundle.interp_t @ g_alb.reshape(-1, 3)).reshape(res + (3,))
        g_p = g_density * expit(tp["density_param"])
        a = tp["albedo_vox"]
        g_q = g_albedo_vox * a * (1.0 - a)
        return g_p, g_q


def render(grid: DensityGrid, pose: CameraPose, steps: int = 128) -> RenderOutput:
    """Ray-march ``grid`` from ``pose`` with ``steps`` midpoint samples per ray."""
    if steps < 2:
        raise InvalidArgument("steps must be >= 2")
    bundle = _ray_bundle(grid, pose, steps)
    w_px, h_px = pose.image_size
    n_hit = bundle.pixel.size
    density = grid.density
    albedo = grid.albedo
    sig = (bundle.interp @ density.reshape(-1)).reshape(n_hit, steps)
    alb = (bundle.interp @ albedo.reshape(-1, 3)).reshape(n_hit, steps, 3)
    tau = sig * bundle.dt[:, None]
    cum = np.cumsum(tau, axis=1)
    T_next = np.exp(-cum)
    T_prev = np.exp(-np.concatenate([np.zeros((n_hit, 1)), cum[:, :-1]], axis=1))
    w = T_prev * -np.expm1(-tau)
    T_end = T_next[:, -1]
    rgb = np.full((h_px * w_px, 3), BACKGROUND)
    rgb[bundle.pixel] = np.einsum("ns,nsc->nc", w, alb) + BACKGROUND * T_end[:, None]
    opacity = np.zeros(h_px * w_px)
    opacity[bundle.pixel] = -np.expm1(-cum[:, -1])
    tape = {
        "bundle": bundle, "resolution": grid.resolution, "T_next": T_next, "T_end": T_end,
        "w": w, "alb": alb, "density_param": grid.density_param, "albedo_vox": albedo,
    }
    return RenderOutput(
        Image(np.clip(rgb.reshape(h_px, w_px, 3), 0.0, 1.0)),
        Mask(np.clip(opacity.reshape(h_px, w_px), 0.0, 1.0)),
        pose,
        tape,
    )


def render_views(grid: DensityGrid, n: int, elevation: float = 0.0, steps: int = 128,
                 image_size=(64, 64), radius: float | None = None, fov: float = 40.0) -> list[RenderOutput]:
    """Render ``n`` views at azimuths 0, 360/n, ... with fixed elevation and radius."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    base = default_pose(grid, image_size, fov=fov)
    r = base.radius if radius is None else radius
    return [render(grid, CameraPose(360.0 * i / n, elevation, r, fov, tuple(image_size)), steps)
            for i in range(n)]


# -- checkpoint format ----------------------------------------------------------
#
#   offset  size  field
#   0       8     magic b"ARBGRID1"
#   8       12    nx, ny, nz            uint32 little-endian
#   20      48    lo[3], hi[3]          float64 little-endian
#   68      4*N   density params        float32 little-endian, C order (x, y, z), N = nx*ny*nz
#   ...     12*N  albedo params         float32 little-endian, C order (x, y, z, channel)

GRID_MAGIC = b"ARBGRID1"
_GRID_HEADER = struct.Struct("<8s3I6d")


def grid_to_bytes(grid: DensityGrid) -> bytes:
    lo, hi = grid.extent
    head = _GRID_HEADER.pack(GRID_MAGIC, *grid.resolution, *lo.tolist(), *hi.tolist())
    return (head + grid.density_param.astype("<f4").tobytes(order="C")
            + grid.albedo_param.astype("<f4").tobytes(order="C"))


def grid_from_bytes(data: bytes) -> DensityGrid:
    if len(data) < _GRID_HEADER.size:
        raise InvalidArgument("grid checkpoint truncated")
    magic, nx, ny, nz, *ext = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise InvalidArgument(f"bad grid checkpoint magic {magic!r}")
    n = nx * ny * nz
    if len(data) != _GRID_HEADER.size + 16 * n:
        raise InvalidArgument("grid checkpoint size does not match header")
    off = _GRID_HEADER.size
    p = np.frombuffer(data, "<f4", n, off).reshape(nx, ny, nz).astype(np.float64)
    q = np.frombuffer(data, "<f4", 3 * n, off + 4 * n).reshape(nx, ny, nz, 3).astype(np.float64)
    return DensityGrid(p, q, (np.array(ext[:3]), np.array(ext[3:])))


def save_grid(path, grid: DensityGrid) -> None:
    io.atomic_write_bytes(path, grid_to_bytes(grid))


def load_grid(path) -> DensityGrid:
    with open(path, "rb") as fh:
        return grid_from_bytes(fh.read())
