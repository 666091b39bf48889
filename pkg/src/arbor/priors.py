"""Closed-form stand-ins for the genus-conditioned image prior and the view-conditioned prior.

Both are Gaussian image priors whose means are renderings of simple density
grids, so they plug into the same PAAS machinery as a learned denoiser would.
"""
from __future__ import annotations

import numpy as np

from .distill import DenoiserSpec
from .imaging import Image, Mask
from .render import CameraPose, DensityGrid, default_pose, inverse_softplus, logit, render

# crown half-width and crown base as fractions of the grid's extent, plus foliage colour;
# rough visual estimates per genus, not measured data
GENUS_CROWNS = {
    "Cupressus": (0.22, 0.15, (0.20, 0.35, 0.22)),
    "Magnolia": (0.40, 0.30, (0.22, 0.42, 0.20)),
    "Pinus": (0.35, 0.40, (0.18, 0.36, 0.24)),
    "Ligustrum": (0.42, 0.20, (0.28, 0.45, 0.22)),
    "Cinnamomum": (0.48, 0.30, (0.25, 0.44, 0.18)),
}
_DEFAULT_CROWN = (0.40, 0.30, (0.25, 0.42, 0.22))
TRUNK_COLOUR = (0.35, 0.27, 0.20)


def crown_grid(genus: str, resolution=(32, 32, 32), extent=((-1.0, -1.0, 0.0), (1.0, 1.0, 2.0)),
               density: float = 8.0) -> DensityGrid:
    """Canonical tree for ``genus``: ellipsoidal crown on a thin trunk."""
    half_w, base, colour = GENUS_CROWNS.get(genus, _DEFAULT_CROWN)
    grid = DensityGrid.full(resolution, extent, 1e-3)
    lo, hi = grid.extent
    size = hi - lo
    c = grid.voxel_centers()
    rel = (c - lo) / size  # unit-cube coordinates
    zc = base + 0.5 * (1.0 - base)
    rz = 0.5 * (1.0 - base) * 0.95
    crown = ((rel[..., 0] - 0.5) ** 2 + (rel[..., 1] - 0.5) ** 2) / half_w ** 2 + ((rel[..., 2] - zc) / rz) ** 2 <= 1.0
    trunk = (np.hypot(rel[..., 0] - 0.5, rel[..., 1] - 0.5) <= 0.03) & (rel[..., 2] <= zc)
    dens = np.where(crown | trunk, density, 1e-3)
    alb = np.where(crown[..., None], colour, TRUNK_COLOUR)
    return DensityGrid(inverse_softplus(dens), logit(np.clip(alb, 1e-6, 1 - 1e-6)), grid.extent)


def genus_prior(genus: str, image_size=(32, 32), std: float = 0.5, elevation: float = 15.0,
                resolution=(32, 32, 32), extent=((-1.0, -1.0, 0.0), (1.0, 1.0, 2.0)), steps: int = 64,
                fov: float = 40.0) -> DenoiserSpec:
    """Gaussian image prior centred on a rendering of the genus's canonical crown."""
    grid = crown_grid(genus, resolution, extent)
    mean = render(grid, default_pose(grid, image_size, elevation=elevation, fov=fov), steps).rgb.pixels
    return DenoiserSpec.gaussian(mean.reshape(-1), std, genus=genus)


def revolved_grid(img: Image, mask: Mask, resolution=(32, 32, 32),
                  extent=((-1.0, -1.0, 0.0), (1.0, 1.0, 2.0)), density: float = 8.0,
                  fov: float = 40.0, thresh: float = 0.5) -> DensityGrid:
    """Surface-of-revolution hull of the front-view silhouette.

    A voxel is inside when its radial distance from the vertical axis, laid
    out in the front view's image plane on either side of the axis, projects
    into the mask.  Inside voxels take the mean masked image colour.
    """
    grid = DensityGrid.full(resolution, extent, 1e-3)
    pose = default_pose(grid, (mask.width, mask.height), fov=fov)
    centre = grid.center
    c = grid.voxel_centers()
    rho = np.hypot(c[..., 0] - centre[0], c[..., 1] - centre[1])
    binm = mask.binarize(thresh)
    inside = np.zeros(grid.resolution, dtype=bool)
    for sign in (1.0, -1.0):
        pts = np.stack([centre[0] + sign * rho, np.full_like(rho, centre[1]), c[..., 2]], axis=-1)
        px = pose.project(pts, centre)
        col = np.floor(px[..., 0])
        row = np.floor(px[..., 1])
        ok = np.isfinite(col) & (col >= 0) & (col < mask.width) & (row >= 0) & (row < mask.height)
        hit = np.zeros_like(ok)
        hit[ok] = binm[row[ok].astype(int), col[ok].astype(int)]
        inside |= hit
    colour = img.rgb()[binm].mean(axis=0) if binm.any() else np.array([0.3, 0.45, 0.25])
    dens = np.where(inside, density, 1e-3)
    return DensityGrid.from_density(dens, grid.extent, np.clip(colour, 1e-3, 1 - 1e-3))


def reference_prior(img: Image, mask: Mask, image_size=(32, 32), std: float = 0.5, views: int = 12,
                    elevation: float = 15.0, resolution=(32, 32, 32),
                    extent=((-1.0, -1.0, 0.0), (1.0, 1.0, 2.0)), steps: int = 64,
                    fov: float = 40.0) -> DenoiserSpec:
    """View-conditioned prior: Gaussian around the revolved hull seen from the nearest tabulated azimuth.

    The table holds ``views`` azimuths evenly spaced around the tree (30 degrees
    apart for 12 views), all rendered at ``elevation``.
    """
    grid = revolved_grid(img, mask, resolution, extent, fov=fov)
    radius = default_pose(grid, image_size, fov=fov).radius
    table = {}
    for k in range(views):
        az = 360.0 * k / views
        mean = render(grid, CameraPose(az, elevation, radius, fov, tuple(image_size)), steps).rgb.pixels
        table[az] = DenoiserSpec.gaussian(mean.reshape(-1), std)
    return DenoiserSpec("analytic-gaussian", view_table=table)


def disk_target(size: int = 64, radius_frac: float = 0.28, colour=(0.25, 0.5, 0.2)) -> tuple[Image, Mask]:
    """Synthetic front view: a filled disk on white, and its binary mask."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    m = ((xx - size / 2) ** 2 + (yy - size / 2) ** 2 <= (radius_frac * size) ** 2).astype(np.float64)
    img = np.ones((size, size, 3))
    img[m > 0] = colour
    return Image(img), Mask(m)
