"""Chamfer distance, surface point sampling and geometric branching attributes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import InvalidArgument
from . import rng as rngmod
from .growth import TreeSkeleton

CHAMFER_CONVENTION = "mean squared NN distance a->b plus mean squared NN distance b->a"


def _cloud(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise InvalidArgument("point cloud is empty")
    if not np.all(np.isfinite(p)):
        raise InvalidArgument("point cloud has non-finite coordinates")
    return p


def normalize_cloud(points) -> np.ndarray:
    """Centre on the bounding-box centre and scale to unit bounding-box diagonal."""
    p = _cloud(points)
    lo, hi = p.min(axis=0), p.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    return (p - 0.5 * (lo + hi)) / (diag if diag > 0 else 1.0)


def chamfer(a, b, normalize: bool = False) -> float:
    """Symmetric Chamfer distance under :data:`CHAMFER_CONVENTION`.

    With ``normalize`` each cloud is first mapped to unit bounding-box diagonal
    around its own centre (this breaks rigid-motion invariance for rotations).
    """
    a, b = _cloud(a), _cloud(b)
    if normalize:
        a, b = normalize_cloud(a), normalize_cloud(b)
    da, _ = cKDTree(b).query(a, k=1)
    db, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(da ** 2)) + float(np.mean(db ** 2))


def sample_points(skel: TreeSkeleton, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points uniform by area on the lateral surfaces of the skeleton's tapered cylinders."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if len(skel) == 0:
        raise InvalidArgument("skeleton is empty")
    e = skel.edges()
    gen = rngmod.stream(seed, "metrics.sample_points")
    if len(e) == 0:
        return np.repeat(skel.positions[:1], n, axis=0)
    a, b = skel.positions[e[:, 0]], skel.positions[e[:, 1]]
    ra, rb = skel.radius[e[:, 0]], skel.radius[e[:, 1]]
    length = np.linalg.norm(b - a, axis=1)
    slant = np.sqrt(length ** 2 + (ra - rb) ** 2)
    area = np.pi * (ra + rb) * slant
    weights = area if area.sum() > 0 else length
    if weights.sum() <= 0:
        return np.repeat(skel.positions[:1], n, axis=0)
    seg = gen.choice(len(e), size=n, p=weights / weights.sum())
    u = gen.random(n)
    phi = gen.uniform(0.0, 2 * np.pi, n)
    r0, r1 = ra[seg], rb[seg]
    # axial position has density proportional to r(t) = r0 + dr * t; invert its CDF
    # in the cancellation-free form t = 2c / (r0 + sqrt(r0^2 + 2 dr c)), c = u (r0 + dr / 2)
    dr = r1 - r0
    c = u * (r0 + 0.5 * dr)
    den = r0 + np.sqrt(np.maximum(r0 ** 2 + 2.0 * dr * c, 0.0))
    t = np.where(den > 0, 2.0 * c / np.where(den > 0, den, 1.0), u)
    t = np.clip(t, 0.0, 1.0)
    axis = (b - a)[seg]
    ln = np.linalg.norm(axis, axis=1, keepdims=True)
    u_ax = np.where(ln > 0, axis / np.where(ln > 0, ln, 1.0), [0.0, 0.0, 1.0])
    helper = np.where(np.abs(u_ax[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    p1 = np.cross(u_ax, helper)
    p1 /= np.linalg.norm(p1, axis=1, keepdims=True)
    p2 = np.cross(u_ax, p1)
    r = r0 + dr * t
    ring = np.cos(phi)[:, None] * p1 + np.sin(phi)[:, None] * p2
    return a[seg] + t[:, None] * axis + r[:, None] * ring


@dataclass
class BranchAttributes:
    straightness: list[float] = field(default_factory=list)
    tortuosity: list[float] = field(default_factory=list)
    branch_length: list[float] = field(default_factory=list)
    junction_angles: list[float] = field(default_factory=list)
    segment_ratios: list[float] = field(default_factory=list)

    @property
    def n_branches(self) -> int:
        return len(self.straightness)

    def summary(self, bins: int = 10) -> dict:
        """Mean, std and fixed-range histogram per attribute (empty lists give None stats)."""
        ranges = {
            "straightness": (0.0, 1.0), "tortuosity": (1.0, 3.0), "branch_length": None,
            "junction_angles": (0.0, 180.0), "segment_ratios": (0.0, 3.0),
        }
        out = {"n_branches": self.n_branches}
        for name, rng in ranges.items():
            vals = np.sort(np.asarray(getattr(self, name), dtype=np.float64))
            if vals.size == 0:
                out[name] = {"mean": None, "std": None, "hist": [0] * bins}
                continue
            rng = rng if rng is not None else (0.0, float(vals.max()) if vals.max() > 0 else 1.0)
            hist, _ = np.histogram(np.clip(vals, *rng), bins=bins, range=rng)
            out[name] = {"mean": float(vals.mean()), "std": float(vals.std()), "hist": hist.tolist()}
        return out

    def feature_vector(self) -> list[float]:
        """Flat vector of means and stds in a fixed attribute order (NaN where undefined)."""
        s = self.summary()
        vec = []
        for name in ("straightness", "tortuosity", "branch_length", "junction_angles", "segment_ratios"):
            vec += [math.nan if s[name]["mean"] is None else s[name]["mean"],
                    math.nan if s[name]["std"] is None else s[name]["std"]]
        return vec


def _angle_deg(u: np.ndarray, v: np.ndarray) -> float | None:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return None
    return math.degrees(math.acos(float(np.clip(u @ v / (nu * nv), -1.0, 1.0))))


def branch_attributes(skel: TreeSkeleton) -> BranchAttributes:
    """Split the skeleton into branches between forks/tips and measure them.

    A branch is a maximal chain starting at the root or a fork and ending at
    a fork or tip.  Junction angles are measured at every non-root node with
    children, between the incoming segment and each outgoing one.  Segment
    ratios are child internode length over parent internode length.
    """
    if len(skel) == 0:
        raise InvalidArgument("skeleton is empty")
    out = BranchAttributes()
    if len(skel) == 1:
        return out
    kids = skel.children()
    pos = skel.positions
    for start in skel.topological_order():
        if not (skel.parent[start] < 0 or len(kids[start]) > 1):
            continue
        for first in kids[start]:
            chain = [start, first]
            while len(kids[chain[-1]]) == 1:
                chain.append(kids[chain[-1]][0])
            seg = np.linalg.norm(np.diff(pos[chain], axis=0), axis=1)
            path = float(seg.sum())
            chord = float(np.linalg.norm(pos[chain[-1]] - pos[chain[0]]))
            if path <= 0:
                continue
            out.branch_length.append(path)
            out.straightness.append(chord / path)
            out.tortuosity.append(path / chord if chord > 0 else math.inf)
    for i in range(len(skel)):
        p = skel.parent[i]
        if p < 0 or not kids[i]:
            continue
        incoming = pos[i] - pos[p]
        lin = float(np.linalg.norm(incoming))
        for c in kids[i]:
            outgoing = pos[c] - pos[i]
            ang = _angle_deg(incoming, outgoing)
            if ang is not None:
                out.junction_angles.append(ang)
            if lin > 0:
                out.segment_ratios.append(float(np.linalg.norm(outgoing)) / lin)
    return out
