"""Genus-conditioned space colonization inside a marker-filled envelope.

Markers attract the nearest node that perceives them (within
``perception_radius`` and inside the node's perception cone); every attracted
node sprouts one internode toward the mean marker direction plus tropism, and
markers within ``kill_distance`` of a node are consumed.  Radii follow the
pipe model ``r_parent**n == sum(r_child**n)``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import DegenerateResult, InvalidArgument
from . import io
from . import rng as rngmod
from .envelope import MarkerSet, OccupancyVolume

UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class GenusParams:
    name: str
    perception_radius: float
    perception_angle: float
    kill_distance: float
    internode_length: float
    branching_angle: float
    pipe_exponent: float = 2.0
    tip_radius: float = 0.005
    tropism: tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_steps: int = 200

    def __post_init__(self):
        if not self.internode_length > 0:
            raise InvalidArgument("internode_length must be > 0")
        if not 0 < self.kill_distance < self.perception_radius:
            raise InvalidArgument("need 0 < kill_distance < perception_radius")
        if self.pipe_exponent < 1:
            raise InvalidArgument("pipe_exponent must be >= 1")
        if not 0 < self.perception_angle <= 180 or not 0 < self.branching_angle <= 180:
            raise InvalidArgument("angles must lie in (0, 180] degrees")
        if self.tip_radius <= 0:
            raise InvalidArgument("tip_radius must be > 0")
        object.__setattr__(self, "tropism", tuple(float(t) for t in self.tropism))

    def scaled(self, factor: float) -> "GenusParams":
        """Same genus with all lengths multiplied by ``factor``."""
        return replace(self, perception_radius=self.perception_radius * factor,
                       kill_distance=self.kill_distance * factor,
                       internode_length=self.internode_length * factor,
                       tip_radius=self.tip_radius * factor)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


# Artifact-specific estimates for the five benchmark genera, sized for trees a
# few metres tall.  These are not measured values.
GENUS_PRESETS: dict[str, GenusParams] = {
    "Cupressus": GenusParams("Cupressus", 0.60, 70.0, 0.20, 0.10, 35.0, 2.0, 0.004, (0.0, 0.0, 0.25), 250),
    "Magnolia": GenusParams("Magnolia", 0.75, 90.0, 0.25, 0.12, 55.0, 2.0, 0.005, (0.0, 0.0, 0.05), 250),
    "Pinus": GenusParams("Pinus", 0.80, 90.0, 0.25, 0.14, 70.0, 2.2, 0.005, (0.0, 0.0, -0.05), 250),
    "Ligustrum": GenusParams("Ligustrum", 0.55, 90.0, 0.18, 0.08, 50.0, 2.0, 0.004, (0.0, 0.0, 0.10), 300),
    "Cinnamomum": GenusParams("Cinnamomum", 0.80, 100.0, 0.26, 0.13, 65.0, 2.0, 0.005, (0.0, 0.0, 0.0), 250),
}


def genus_params(name: str) -> GenusParams:
    try:
        return GENUS_PRESETS[name]
    except KeyError:
        raise InvalidArgument(f"unknown genus {name!r}; known: {sorted(GENUS_PRESETS)}") from None


# -- obstacles ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    kind: str = field(default="box", init=False)

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise InvalidArgument("box needs lo <= hi")

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def to_dict(self) -> dict:
        return {"kind": "box", "min": list(self.lo), "max": list(self.hi)}


@dataclass(frozen=True)
class Wall:
    """Solid half-space ``{x : (x - point) . normal < 0}``; the unit normal faces free space."""

    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    kind: str = field(default="wall", init=False)

    def __post_init__(self):
        if not math.isclose(float(np.linalg.norm(self.normal)), 1.0, rel_tol=1e-9):
            raise InvalidArgument("wall normal must be a unit vector")

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return (pts - self.point) @ np.asarray(self.normal) < 0

    def to_dict(self) -> dict:
        return {"kind": "wall", "point": list(self.point), "normal": list(self.normal)}


@dataclass(frozen=True)
class EnvelopeObstacle:
    """Another tree's occupied volume."""

    volume: OccupancyVolume = field(compare=False)
    kind: str = field(default="envelope", init=False)

    def contains(self, pts) -> np.ndarray:
        return self.volume.contains(pts)


def obstacle_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "box":
        return Box(tuple(d["min"]), tuple(d["max"]))
    if kind == "wall":
        return Wall(tuple(d["point"]), tuple(d["normal"]))
    if kind == "envelope":
        from .envelope import load_occupancy

        return EnvelopeObstacle(load_occupancy(d["path"]))
    raise InvalidArgument(f"unknown obstacle kind {kind!r}")


def _blocked(obstacles, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(pts), dtype=bool)
    for ob in obstacles:
        out |= ob.contains(pts)
    return out


# -- skeleton -----------------------------------------------------------------------------

@dataclass
class TreeSkeleton:
    """Rooted branching graph; ``parent[i] == -1`` marks the root."""

    positions: np.ndarray
    parent: np.ndarray
    radius: np.ndarray
    step: np.ndarray
    genus: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.parent = np.asarray(self.parent, dtype=np.int64).reshape(n)
        self.radius = np.asarray(self.radius, dtype=np.float64).reshape(n)
        self.step = np.asarray(self.step, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def root(self) -> int:
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise InvalidArgument(f"skeleton has {len(roots)} roots")
        return int(roots[0])

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(len(self))]
        for i, p in enumerate(self.parent.tolist()):
            if p >= 0:
                kids[p].append(i)
        return kids

    def edges(self) -> np.ndarray:
        """(m, 2) array of (parent, child) index pairs in child order."""
        child = np.flatnonzero(self.parent >= 0)
        return np.stack([self.parent[child], child], axis=1)

    def topological_order(self) -> list[int]:
        kids = self.children()
        order, stack = [], [self.root]
        while stack:
            i = stack.pop()
            order.append(i)
            stack.extend(reversed(kids[i]))
        return order

    def validate(self) -> None:
        """Check single root, in-range parents, acyclicity and monotone creation steps."""
        n = len(self)
        if n == 0:
            return
        self.root  # raises unless exactly one root
        if np.any(self.parent >= n):
            raise InvalidArgument("parent index out of range")
        # union-find over edges: a cycle shows up as an edge joining one set
        uf = list(range(n))

        def find(a):
            while uf[a] != a:
                uf[a] = uf[uf[a]]
                a = uf[a]
            return a

        for c, p in enumerate(self.parent.tolist()):
            if p < 0:
                continue
            ra, rb = find(c), find(p)
            if ra == rb:
                raise InvalidArgument("skeleton contains a cycle")
            uf[ra] = rb
        if len({find(i) for i in range(n)}) != 1:
            raise InvalidArgument("skeleton is not connected")
        if len(self.topological_order()) != n:
            raise InvalidArgument("skeleton nodes unreachable from root")
        bad = (self.parent >= 0) & (self.step < self.step[np.maximum(self.parent, 0)])
        if np.any(bad):
            raise InvalidArgument("creation_step decreases along a path")

    def subset(self, keep: np.ndarray) -> "TreeSkeleton":
        """Induced sub-skeleton on a parent-closed node mask, reindexed."""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.cumsum(keep) - 1
        parent = self.parent[keep]
        parent = np.where(parent >= 0, new_index[np.maximum(parent, 0)], -1)
        return TreeSkeleton(self.positions[keep], parent, self.radius[keep], self.step[keep],
                            self.genus, self.seed, dict(self.meta))

    def copy(self) -> "TreeSkeleton":
        return TreeSkeleton(self.positions.copy(), self.parent.copy(), self.radius.copy(),
                            self.step.copy(), self.genus, self.seed, dict(self.meta))

    def to_json_dict(self) -> dict:
        nodes = [{"p": [float(v) for v in p], "parent": int(par), "r": float(r), "step": int(s)}
                 for p, par, r, s in zip(self.positions, self.parent, self.radius, self.step)]
        return {"nodes": nodes, "genus": self.genus, "seed": int(self.seed)}

    def to_json(self) -> str:
        return io.dumps_json(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, d: dict) -> "TreeSkeleton":
        nodes = d["nodes"]
        return cls(np.array([n["p"] for n in nodes], dtype=np.float64).reshape(-1, 3),
                   [n["parent"] for n in nodes], [n["r"] for n in nodes], [n["step"] for n in nodes],
                   d.get("genus", ""), d.get("seed", 0))

    def save(self, path) -> None:
        io.atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "TreeSkeleton":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def _unit(v: np.ndarray, eps: float = 1e-12):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > eps, v / np.maximum(n, eps), 0.0)


def node_directions(skel: TreeSkeleton) -> np.ndarray:
    """Unit growth direction of each node (from its parent); the root points up."""
    d = np.tile(UP, (len(skel), 1))
    has = skel.parent >= 0
    seg = skel.positions[has] - skel.positions[skel.parent[has]]
    u = _unit(seg)
    ok = np.linalg.norm(u, axis=1) > 0
    idx = np.flatnonzero(has)[ok]
    d[idx] = u[ok]
    return d


def _clamp_to_cone(v: np.ndarray, axis: np.ndarray, half_angle_deg: float) -> np.ndarray:
    """Rotate unit ``v`` toward unit ``axis`` until the angle between them is at most the half-angle."""
    cos_max = math.cos(math.radians(half_angle_deg))
    c = float(np.clip(v @ axis, -1.0, 1.0))
    if c >= cos_max - 1e-12:
        return v
    perp = v - c * axis
    pn = np.linalg.norm(perp)
    if pn < 1e-12:
        # v anti-parallel to axis: pick any perpendicular
        perp = np.cross(axis, [1.0, 0.0, 0.0] if abs(axis[0]) < 0.9 else [0.0, 1.0, 0.0])
        pn = np.linalg.norm(perp)
    perp /= pn
    a = math.radians(half_angle_deg)
    return math.cos(a) * axis + math.sin(a) * perp


def _kill(skel: TreeSkeleton, markers: MarkerSet, params: GenusParams) -> None:
    idx = np.flatnonzero(markers.alive)
    if len(idx) == 0 or len(skel) == 0:
        return
    dist, _ = cKDTree(skel.positions).query(markers.points[idx], k=1)
    markers.alive[idx[dist <= params.kill_distance]] = False


def _attraction(skel: TreeSkeleton, markers: MarkerSet, params: GenusParams, obstacles):
    """Map each perceiving marker to its nearest perceiving node (ties: lowest node index)."""
    cand = np.flatnonzero(markers.alive)
    if obstacles and len(cand):
        cand = cand[~_blocked(obstacles, markers.points[cand])]
    if len(cand) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    node_tree = cKDTree(skel.positions)
    mk_tree = cKDTree(markers.points[cand])
    pairs = node_tree.sparse_distance_matrix(mk_tree, params.perception_radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    ni, mi, dist = pairs["i"].astype(np.int64), pairs["j"].astype(np.int64), pairs["v"]
    # sparse_distance_matrix drops exact zeros; those markers were killed already
    vec = markers.points[cand[mi]] - skel.positions[ni]
    cosang = np.einsum("ij,ij->i", _unit(vec), node_directions(skel)[ni])
    ok = cosang >= math.cos(math.radians(params.perception_angle)) - 1e-12
    ni, mi, dist = ni[ok], mi[ok], dist[ok]
    order = np.lexsort((ni, dist, mi))
    ni, mi = ni[order], mi[order]
    first = np.ones(len(mi), dtype=bool)
    first[1:] = mi[1:] != mi[:-1]
    return ni[first], cand[mi[first]]


def colonize_step(skel: TreeSkeleton, markers: MarkerSet, params: GenusParams, obstacles=(),
                  step: int | None = None) -> tuple[TreeSkeleton, MarkerSet]:
    """One colonization round; returns new skeleton and marker set (inputs untouched).

    Markers already within kill distance are consumed before attraction so
    they cannot spawn growth.  A candidate internode is dropped if its end
    point is inside an obstacle or coincides with an existing child.
    """
    markers = markers.copy()
    if len(skel) == 0:
        return skel.copy(), markers
    _kill(skel, markers, params)
    step = int(skel.step.max()) + 1 if step is None else int(step)
    nodes, mk = _attraction(skel, markers, params, obstacles)
    new_pos, new_parent = [], []
    if len(nodes):
        dirs = node_directions(skel)
        kids = skel.children()
        trop = np.asarray(params.tropism)
        order = np.argsort(nodes, kind="stable")
        nodes, mk = nodes[order], mk[order]
        bounds = np.flatnonzero(np.r_[True, nodes[1:] != nodes[:-1], True])
        for a, b in zip(bounds[:-1], bounds[1:]):
            node = int(nodes[a])
            p = skel.positions[node]
            toward = _unit(markers.points[mk[a:b]] - p)
            v = toward.sum(axis=0)
            if np.linalg.norm(v) < 1e-9:
                v = toward[0]
            v = _unit(_unit(v) + trop)
            if np.linalg.norm(v) < 1e-9:
                continue
            v = _clamp_to_cone(v, dirs[node], params.branching_angle)
            q = p + params.internode_length * v
            if obstacles and _blocked(obstacles, q)[0]:
                continue
            tol = 1e-6 * params.internode_length
            if any(np.linalg.norm(skel.positions[c] - q) < tol for c in kids[node]):
                continue
            new_pos.append(q)
            new_parent.append(node)
    if new_pos:
        k = len(new_pos)
        skel = TreeSkeleton(
            np.vstack([skel.positions, new_pos]),
            np.concatenate([skel.parent, new_parent]),
            np.concatenate([skel.radius, np.full(k, params.tip_radius)]),
            np.concatenate([skel.step, np.full(k, step)]),
            skel.genus, skel.seed, dict(skel.meta),
        )
    else:
        skel = skel.copy()
    _kill(skel, markers, params)
    return skel, markers


def assign_radii(skel: TreeSkeleton, params: GenusParams) -> TreeSkeleton:
    """Pipe-model radii: tips get ``tip_radius``; parents ``(sum r_child**n)**(1/n)``."""
    out = skel.copy()
    if len(out) == 0:
        return out
    n = params.pipe_exponent
    kids = out.children()
    r = np.empty(len(out))
    for i in reversed(out.topological_order()):
        if len(kids[i]) == 1:
            r[i] = r[kids[i][0]]  # exact; the n-th root can round one ulp low
        elif kids[i]:
            r[i] = float(np.sum(r[kids[i]] ** n)) ** (1.0 / n)
        else:
            r[i] = params.tip_radius
    out.radius = r
    return out


def seed_trunk(anchor, markers: MarkerSet, params: GenusParams, obstacles=()) -> tuple[TreeSkeleton, bool]:
    """Chain of step-0 nodes from ``anchor`` toward the alive-marker centroid.

    Stops once the tip is within perception radius of an alive marker (the
    second return value is then True) or when the centroid is reached.
    """
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
    pos = [anchor]
    alive = markers.points[markers.alive]
    if len(alive) == 0:
        return TreeSkeleton(np.array(pos), [-1], [params.tip_radius], [0], params.name), False
    tree = cKDTree(alive)
    target = alive.mean(axis=0)
    reachable = tree.query(anchor, k=1)[0] <= params.perception_radius
    d = target - anchor
    dist = float(np.linalg.norm(d))
    u = d / dist if dist > 0 else UP
    n_max = int(math.ceil(dist / params.internode_length))
    while not reachable and len(pos) <= n_max:
        q = pos[-1] + params.internode_length * u
        if obstacles and _blocked(obstacles, q)[0]:
            break
        pos.append(q)
        reachable = tree.query(q, k=1)[0] <= params.perception_radius
    n = len(pos)
    return TreeSkeleton(np.array(pos), np.arange(n) - 1, np.full(n, params.tip_radius),
                        np.zeros(n, np.int64), params.name), bool(reachable)


class ReachabilityWarning(DegenerateResult):
    """No marker was ever within perception range of the trunk."""


def _grow_history(anchor, markers, params, obstacles, max_steps):
    skel, reachable = seed_trunk(anchor, markers, params, obstacles)
    if not reachable:
        warnings.warn("markers unreachable from the trunk; returning trunk only",
                      ReachabilityWarning, stacklevel=3)
        return skel, markers.copy(), 0, False
    last = 0
    for s in range(1, max_steps + 1):
        n_before = len(skel)
        skel, markers = colonize_step(skel, markers, params, obstacles, step=s)
        if len(skel) == n_before:
            break
        last = s
    return skel, markers, last, True


def grow(anchor, markers: MarkerSet, params: GenusParams, obstacles=(), seed: int = 0,
         return_markers: bool = False):
    """Grow a full tree from ``anchor`` into ``markers`` and assign pipe-model radii.

    With ``return_markers`` the updated marker set is returned as well.
    """
    skel, mk, last, reachable = _grow_history(anchor, markers, params, obstacles, params.max_steps)
    skel = assign_radii(skel, params)
    skel.genus, skel.seed = params.name, int(seed)
    skel.meta.update(reachable=reachable, last_step=last)
    return (skel, mk) if return_markers else skel


def grow_competing(anchors, markers: MarkerSet, params_list, obstacles=(), seed: int = 0):
    """Grow several trees stepping round-robin on one shared marker set.

    Returns ``(skeletons, consumed)`` where ``consumed[k]`` holds the indices of
    markers killed by tree ``k``; the sets are disjoint by construction.
    """
    markers = markers.copy()
    skels, active, consumed = [], [], []
    for a, p in zip(anchors, params_list):
        s, ok = seed_trunk(a, markers, p, obstacles)
        before = markers.alive.copy()
        _kill(s, markers, p)
        skels.append(s)
        active.append(ok)
        consumed.append(list(np.flatnonzero(before & ~markers.alive)))
    for step in range(1, max(p.max_steps for p in params_list) + 1):
        grew = False
        for k, p in enumerate(params_list):
            if not active[k] or step > p.max_steps:
                continue
            before = markers.alive.copy()
            n0 = len(skels[k])
            skels[k], markers = colonize_step(skels[k], markers, p, obstacles, step=step)
            consumed[k].extend(np.flatnonzero(before & ~markers.alive).tolist())
            if len(skels[k]) == n0:
                active[k] = False
            else:
                grew = True
        if not grew:
            break
    out = []
    for s, p in zip(skels, params_list):
        s = assign_radii(s, p)
        s.genus, s.seed = p.name, int(seed)
        out.append(s)
    return out, [np.array(sorted(c), dtype=np.int64) for c in consumed]


def simulate(anchor, markers: MarkerSet, params: GenusParams, snapshot_steps, obstacles=(),
             seed: int = 0) -> list[TreeSkeleton]:
    """Grow once and return the tree as it stood after each requested step.

    Snapshot ``s`` keeps the nodes created at steps ``<= s`` (step 0 is the
    trunk seed) with radii recomputed for that sub-tree.  Requests past the
    final growth step return the final tree with ``meta["beyond_termination"]``.
    """
    steps = [int(s) for s in snapshot_steps]
    if steps != sorted(steps) or any(s < 0 for s in steps):
        raise InvalidArgument("snapshot_steps must be non-negative and sorted ascending")
    horizon = min(params.max_steps, steps[-1]) if steps else 0
    skel, _, last, reachable = _grow_history(anchor, markers, params, obstacles, horizon)
    terminated = not reachable or last < horizon or horizon == params.max_steps
    out = []
    for s in steps:
        snap = assign_radii(skel.subset(skel.step <= s), params)
        snap.genus, snap.seed = params.name, int(seed)
        snap.meta = {"snapshot_step": s, "beyond_termination": bool(terminated and s > last)}
        out.append(snap)
    return out


# -- foliage and meshing ---------------------------------------------------------------------

@dataclass
class LeafSet:
    positions: np.ndarray
    normals: np.ndarray
    radius: float

    def __len__(self) -> int:
        return len(self.positions)

    def write_ply(self, path) -> None:
        io.write_ply(path, self.positions, self.normals, comments=[f"leaf_radius {self.radius!r}"])

    @classmethod
    def read_ply(cls, path, radius: float | None = None) -> "LeafSet":
        from pathlib import Path

        text = Path(path).read_text(encoding="ascii")
        head, body = text.split("end_header\n", 1)
        r = radius
        for line in head.splitlines():
            if line.startswith("comment leaf_radius"):
                r = float(line.split()[2]) if radius is None else radius
        rows = np.array([ln.split() for ln in body.strip().splitlines()], dtype=np.float64).reshape(-1, 6)
        return cls(rows[:, :3], rows[:, 3:], 0.05 if r is None else r)


def _perpendicular(u: np.ndarray) -> np.ndarray:
    a = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    p = np.cross(u, a)
    return p / np.linalg.norm(p)


def attach_foliage(skel: TreeSkeleton, leaf_density: float, leaf_radius: float, seed: int = 0,
                   tip_radius: float | None = None) -> LeafSet:
    """Scatter leaf disks along thin segments (child radius < 2 * tip radius).

    Places ``round(leaf_density * eligible_length)`` leaves, each within
    ``leaf_radius`` of its segment axis, with random orientation.
    """
    if leaf_density < 0:
        raise InvalidArgument("leaf_density must be >= 0")
    e = skel.edges() if len(skel) else np.zeros((0, 2), np.int64)
    if tip_radius is None:
        kids = skel.children() if len(skel) else []
        tips = [i for i, k in enumerate(kids) if not k]
        tip_radius = float(skel.radius[tips].min()) if tips else 0.0
    e = e[skel.radius[e[:, 1]] < 2.0 * tip_radius] if len(e) else e
    a, b = skel.positions[e[:, 0]], skel.positions[e[:, 1]]
    lengths = np.linalg.norm(b - a, axis=1)
    count = int(round(leaf_density * float(lengths.sum())))
    if count == 0 or lengths.sum() <= 0:
        return LeafSet(np.zeros((0, 3)), np.zeros((0, 3)), leaf_radius)
    gen = rngmod.stream(seed, "growth.foliage")
    seg = gen.choice(len(e), size=count, p=lengths / lengths.sum())
    t = gen.random(count)
    phi = gen.uniform(0.0, 2 * np.pi, count)
    off = leaf_radius * gen.random(count)
    axis = (b - a)[seg] / lengths[seg, None]
    pos = np.empty((count, 3))
    for i in range(count):
        u = axis[i]
        p1 = _perpendicular(u)
        p2 = np.cross(u, p1)
        pos[i] = a[seg[i]] + t[i] * (b[seg[i]] - a[seg[i]]) + off[i] * (math.cos(phi[i]) * p1 + math.sin(phi[i]) * p2)
    normals = _unit(gen.standard_normal((count, 3)))
    return LeafSet(pos, normals, leaf_radius)


def export_mesh(skel: TreeSkeleton, sides: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Capped truncated cone per edge; returns (vertices (V, 3), triangles (F, 3)).

    Each edge contributes ``2 * sides + 2`` vertices and ``4 * sides`` triangles.
    """
    if sides < 3:
        raise InvalidArgument("sides must be >= 3")
    e = skel.edges() if len(skel) else np.zeros((0, 2), np.int64)
    if len(e) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), np.int64)
    ang = 2 * np.pi * np.arange(sides) / sides
    verts, faces = [], []
    k = np.arange(sides)
    k1 = (k + 1) % sides
    for j, (pi, ci) in enumerate(e.tolist()):
        a, b = skel.positions[pi], skel.positions[ci]
        ra, rb = skel.radius[pi], skel.radius[ci]
        d = b - a
        ln = np.linalg.norm(d)
        u = d / ln if ln > 0 else UP
        p1 = _perpendicular(u)
        p2 = np.cross(u, p1)
        ring = np.cos(ang)[:, None] * p1 + np.sin(ang)[:, None] * p2
        base = j * (2 * sides + 2)
        verts.append(a + ra * ring)
        verts.append(b + rb * ring)
        verts.append(np.stack([a, b]))
        lo, hi, ca, cb = base + k, base + sides + k, base + 2 * sides, base + 2 * sides + 1
        lo1, hi1 = base + k1, base + sides + k1
        faces.append(np.stack([lo, lo1, hi1], axis=1))
        faces.append(np.stack([lo, hi1, hi], axis=1))
        faces.append(np.stack([np.full(sides, ca), lo1, lo], axis=1))
        faces.append(np.stack([np.full(sides, cb), hi, hi1], axis=1))
    return np.vstack(verts), np.vstack(faces).astype(np.int64)
