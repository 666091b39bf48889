"""Forestry traits measured on grown skeletons: height, DBH, crown radius, shadow area."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import InvalidArgument, UndefinedTrait
from .growth import LeafSet, TreeSkeleton

BREAST_HEIGHT = 1.37


@dataclass
class PhenotypeReport:
    height: float
    dbh: float | None  # cm; None when the trunk does not reach breast height
    crown_radius: float
    shadow_area_leaf_on: float
    shadow_area_leaf_off: float
    sun_direction: tuple[float, float, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sun_direction"] = list(self.sun_direction)
        return d


def _require_nonempty(skel: TreeSkeleton) -> None:
    if len(skel) == 0:
        raise InvalidArgument("skeleton is empty")


def tree_height(skel: TreeSkeleton) -> float:
    """Highest node above the root, in metres."""
    _require_nonempty(skel)
    return float(skel.positions[:, 2].max() - skel.positions[skel.root, 2])


def trunk_path(skel: TreeSkeleton) -> list[int]:
    """Main stem from the root: at each fork follow the thickest child (ties: lowest index)."""
    kids = skel.children()
    path = [skel.root]
    while kids[path[-1]]:
        ks = kids[path[-1]]
        path.append(max(ks, key=lambda c: (skel.radius[c], -c)))
    return path


def dbh(skel: TreeSkeleton, breast_height: float = BREAST_HEIGHT) -> float:
    """Trunk diameter (cm) at ``breast_height`` above the root, interpolating radius linearly."""
    _require_nonempty(skel)
    path = trunk_path(skel)
    z0 = skel.positions[skel.root, 2]
    target = z0 + breast_height
    for a, b in zip(path[:-1], path[1:]):
        za, zb = skel.positions[a, 2], skel.positions[b, 2]
        lo, hi = min(za, zb), max(za, zb)
        if lo <= target <= hi:
            t = 0.0 if hi == lo else (target - za) / (zb - za)
            r = (1.0 - t) * skel.radius[a] + t * skel.radius[b]
            return 200.0 * float(r)
    raise UndefinedTrait(f"trunk does not cross breast height {breast_height} m")


def crown_radius(skel: TreeSkeleton, leaves: LeafSet | None = None) -> float:
    """Largest horizontal distance of any node or leaf from the vertical axis through the root."""
    _require_nonempty(skel)
    axis = skel.positions[skel.root, :2]
    pts = skel.positions[:, :2]
    if leaves is not None and len(leaves):
        pts = np.vstack([pts, leaves.positions[:, :2]])
    return float(np.sqrt(np.max(np.sum((pts - axis) ** 2, axis=1))))


def _ground_project(p: np.ndarray, sun: np.ndarray, z0: float) -> np.ndarray:
    t = (p[..., 2] - z0) / -sun[2]
    return p[..., :2] + t[..., None] * sun[:2]


def shadow_raster(skel: TreeSkeleton, leaves: LeafSet | None, sun_dir, ground_res: float,
                  ground_z: float | None = None):
    """Boolean ground raster of cells whose sun ray hits a branch or leaf.

    Branches are tapered capsules around each edge; leaves are flat disks.
    Returns ``(raster, origin_xy, ground_res)``; raster[i, j] covers the cell
    with centre ``origin + (i + 0.5, j + 0.5) * ground_res``.
    """
    sun = np.asarray(sun_dir, dtype=np.float64)
    sun = sun / np.linalg.norm(sun)
    if not sun[2] < -1e-9:
        raise InvalidArgument("sun direction must point downward (negative z)")
    if not ground_res > 0:
        raise InvalidArgument("ground_res must be > 0")
    z0 = (skel.positions[skel.root, 2] if len(skel) else 0.0) if ground_z is None else ground_z
    e = skel.edges() if len(skel) else np.zeros((0, 2), np.int64)
    prims = []  # (kind, data, bbox)
    stretch = 1.0 / abs(sun[2])
    for pi, ci in e.tolist():
        a, b = skel.positions[pi], skel.positions[ci]
        ra, rb = skel.radius[pi], skel.radius[ci]
        ga, gb = _ground_project(np.stack([a, b]), sun, z0)
        pad = max(ra, rb) * stretch
        lo = np.minimum(ga, gb) - pad
        hi = np.maximum(ga, gb) + pad
        prims.append(("seg", (a, b, ra, rb), lo, hi))
    if leaves is not None:
        for c, n in zip(leaves.positions, leaves.normals):
            g = _ground_project(c, sun, z0)
            pad = leaves.radius * stretch
            prims.append(("disk", (c, n, leaves.radius), g - pad, g + pad))
    if not prims:
        return np.zeros((0, 0), bool), np.zeros(2), ground_res
    lo = np.min([p[2] for p in prims], axis=0)
    hi = np.max([p[3] for p in prims], axis=0)
    origin = np.floor(lo / ground_res) * ground_res - ground_res
    shape = tuple((np.ceil((hi - origin) / ground_res).astype(int) + 1).tolist())
    raster = np.zeros(shape, dtype=bool)
    for kind, data, plo, phi in prims:
        i0, j0 = np.floor((plo - origin) / ground_res).astype(int)
        i1, j1 = np.ceil((phi - origin) / ground_res).astype(int)
        i0, j0 = max(i0, 0), max(j0, 0)
        i1, j1 = min(i1, shape[0]), min(j1, shape[1])
        if i1 <= i0 or j1 <= j0:
            continue
        xs = origin[0] + (np.arange(i0, i1) + 0.5) * ground_res
        ys = origin[1] + (np.arange(j0, j1) + 0.5) * ground_res
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        g = np.stack([gx, gy, np.full_like(gx, z0)], axis=-1)
        if kind == "seg":
            hit = _ray_hits_capsule(g, sun, *data)
        else:
            hit = _ray_hits_disk(g, sun, *data)
        raster[i0:i1, j0:j1] |= hit
    return raster, origin, ground_res


def _ray_hits_capsule(g, sun, a, b, ra, rb):
    """Does the line through ground points ``g`` along ``sun`` pass within r(t) of segment ab?

    Works in the plane orthogonal to the sun so the test is a 2-D
    point-to-segment distance with radius interpolated along the segment.
    """
    def perp(v):
        return v - (v @ sun)[..., None] * sun

    pa, pb, pg = perp(a), perp(b), perp(g)
    d = pb - pa
    dd = float(d @ d)
    if dd < 1e-18:
        t = np.zeros(pg.shape[:-1])
    else:
        t = np.clip(((pg - pa) @ d) / dd, 0.0, 1.0)
    closest = pa + t[..., None] * d
    r = (1.0 - t) * ra + t * rb
    return np.sum((pg - closest) ** 2, axis=-1) <= r ** 2


def _ray_hits_disk(g, sun, c, n, radius):
    denom = float(sun @ n)
    if abs(denom) < 1e-12:
        return np.zeros(g.shape[:-1], dtype=bool)
    t = ((c - g) @ n) / denom
    x = g + t[..., None] * sun
    return np.sum((x - c) ** 2, axis=-1) <= radius ** 2


def shadow_area(skel: TreeSkeleton, leaves: LeafSet | None, sun_dir, ground_res: float = 0.02,
                ground_z: float | None = None) -> float:
    """Ground area (m^2) shaded by branches and leaves under parallel sunlight ``sun_dir``."""
    raster, _, res = shadow_raster(skel, leaves, sun_dir, ground_res, ground_z)
    return float(np.count_nonzero(raster)) * res * res


def measure(skel: TreeSkeleton, leaves: LeafSet | None = None, sun_dir=(0.0, 0.0, -1.0),
            ground_res: float = 0.02, breast_height: float = BREAST_HEIGHT) -> PhenotypeReport:
    """All traits for one tree; DBH is None when the main stem is shorter than breast height."""
    sun = np.asarray(sun_dir, dtype=np.float64)
    sun = sun / np.linalg.norm(sun)
    try:
        d = dbh(skel, breast_height)
    except UndefinedTrait:
        d = None
    off = shadow_area(skel, None, sun, ground_res)
    on = shadow_area(skel, leaves, sun, ground_res) if leaves is not None and len(leaves) else off
    return PhenotypeReport(tree_height(skel), d, crown_radius(skel, leaves), on, off,
                           tuple(float(v) for v in sun))


def sun_from_angles(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """Unit vector of light travelling from a sun at the given azimuth/elevation."""
    if not 0 < elevation_deg <= 90:
        raise InvalidArgument("sun elevation must lie in (0, 90] degrees")
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return -np.array([math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el)])
