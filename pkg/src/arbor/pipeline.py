"""Pipeline configuration and the stage drivers behind the CLI subcommands.

Every stage takes explicit paths and a :class:`PipelineConfig`, writes its
outputs atomically and returns a JSON-serialisable summary.  Randomness is
derived from ``config.seed`` through named sub-streams so each stage is
reproducible on its own.
"""
from __future__ import annotations

import datetime as _dt
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import DegenerateResult, InvalidArgument, __version__
from . import io
from . import rng as rngmod
from .distill import ReconConfig, ReconstructionError, noise_schedule, reconstruct
from .envelope import MarkerSet, OccupancyVolume, extract_occupancy, load_occupancy, sample_markers, save_occupancy
from .growth import (GENUS_PRESETS, GenusParams, LeafSet, TreeSkeleton, attach_foliage, export_mesh, grow,
                     obstacle_from_dict, simulate)
from .imaging import Image, Mask, sharpness_score, silhouette_iou
from .metrics import CHAMFER_CONVENTION, branch_attributes, chamfer, sample_points
from .phenotype import measure, shadow_raster
from .priors import disk_target, genus_prior, reference_prior
from .render import default_pose, load_grid, render, render_views, save_grid

log = logging.getLogger(__name__)

ABLATION_RATIOS = (0.01, 0.1, 1.0, 10.0)


@dataclass
class PriorConfig:
    std: float = 0.5
    views: int = 12


@dataclass
class EnvelopeConfig:
    tau: float | None = None
    marker_density: float = 4000.0   # markers per cubic metre of envelope, in grid units
    tree_height: float | None = 8.0  # metres the grid's vertical extent maps to; None keeps grid units


@dataclass
class GrowthConfig:
    obstacles: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    mesh_sides: int = 8
    leaf_density: float = 30.0  # leaves per metre of thin branch
    leaf_radius: float = 0.04


@dataclass
class MeasureConfig:
    breast_height: float = 1.37
    sun: tuple[float, float, float] = (0.0, 0.0, -1.0)
    ground_res: float = 0.02


@dataclass
class MetricConfig:
    n_points: int = 2048
    normalize: bool = True


@dataclass
class CurateConfig:
    threshold: float = 5e-4
    patch_size: int = 32


_SECTIONS = {
    "recon": ReconConfig, "prior": PriorConfig, "envelope": EnvelopeConfig, "growth": GrowthConfig,
    "measure": MeasureConfig, "metrics": MetricConfig, "curate": CurateConfig,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    genus: str = "Magnolia"
    genus_table: dict = field(default_factory=dict)
    recon: ReconConfig = field(default_factory=ReconConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    envelope: EnvelopeConfig = field(default_factory=EnvelopeConfig)
    growth: GrowthConfig = field(default_factory=GrowthConfig)
    measure: MeasureConfig = field(default_factory=MeasureConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    curate: CurateConfig = field(default_factory=CurateConfig)

    def genera(self) -> dict[str, GenusParams]:
        table = dict(GENUS_PRESETS)
        for name, d in self.genus_table.items():
            base = table.get(name)
            merged = {**(base.to_dict() if base else {}), **d, "name": name}
            merged["tropism"] = tuple(merged.get("tropism", (0.0, 0.0, 0.0)))
            table[name] = GenusParams(**merged)
        return table

    def genus_params(self, name: str | None = None) -> GenusParams:
        name = name or self.genus
        table = self.genera()
        if name not in table:
            raise InvalidArgument(f"genus {name!r} not in the parameter table ({sorted(table)})")
        return table[name]

    def substream_seed(self, name: str) -> int:
        return int(rngmod.stream(self.seed, name).integers(2 ** 31))

    def recon_config(self) -> ReconConfig:
        return replace(self.recon, rng_seed=self.substream_seed("distill"))

    def validate(self) -> None:
        self.genus_params()
        self.recon.validate()

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "genus": self.genus, "genus_table": self.genus_table,
             "recon": self.recon.to_dict()}
        for name in ("prior", "envelope", "growth", "measure", "metrics", "curate"):
            sec = asdict(getattr(self, name))
            d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        kw = {k: d[k] for k in ("seed", "genus", "genus_table") if k in d}
        for name, typ in _SECTIONS.items():
            if name not in d:
                continue
            if typ is ReconConfig:
                kw[name] = ReconConfig.from_dict(d[name])
                continue
            allowed = {f.name for f in fields(typ)}
            bad = set(d[name]) - allowed
            if bad:
                raise InvalidArgument(f"unknown {name} config keys: {sorted(bad)}")
            sec = dict(d[name])
            if name == "measure" and "sun" in sec:
                sec["sun"] = tuple(sec["sun"])
            kw[name] = typ(**sec)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(io.read_json(path))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- curate -------------------------------------------------------------------------------------

IMAGE_SUFFIXES = {".png", ".pgm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _score_file(args):
    path, patch = args
    try:
        img = Image.read(path).gray()
        return str(path), sharpness_score(img, patch), None
    except Exception as exc:  # unreadable or too small: reported, not fatal
        return str(path), None, f"{type(exc).__name__}: {exc}"


def run_curate(in_dir, out_path, cfg: PipelineConfig, jobs: int = 1) -> dict:
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise InvalidArgument(f"{in_dir} is not a directory")
    files = sorted(p for p in in_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    results = _map(_score_file, [(p, cfg.curate.patch_size) for p in files], jobs)
    kept, rejected, skipped, scores = [], [], [], {}
    for path, score, err in results:
        name = Path(path).name
        if err is not None:
            warnings.warn(f"skipping {name}: {err}", RuntimeWarning, stacklevel=2)
            skipped.append({"file": name, "error": err})
            continue
        scores[name] = score
        (kept if score >= cfg.curate.threshold else rejected).append(name)
    manifest = {
        "threshold": cfg.curate.threshold, "patch_size": cfg.curate.patch_size,
        "kept": kept, "rejected": rejected, "skipped": skipped, "scores": scores,
    }
    io.write_json(out_path, manifest)
    return manifest


# -- reconstruct ------------------------------------------------------------------------------

def build_priors(img: Image, mask: Mask, genus: str, cfg: PipelineConfig):
    rc = cfg.recon
    common = dict(image_size=tuple(rc.prior_image_size), std=cfg.prior.std, resolution=tuple(rc.resolution),
                  extent=rc.extent, fov=rc.fov)
    spec2d = genus_prior(genus, **common) if rc.alpha > 0 else None
    spec3d = reference_prior(img, mask, views=cfg.prior.views, **common) if rc.beta > 0 else None
    return spec2d, spec3d


def run_reconstruct(image_path, mask_path, out_dir, cfg: PipelineConfig, genus: str | None = None) -> dict:
    """Fit the envelope grid; writes ``grid.bin``, ``front.png``, ``front_mask.pgm`` and ``manifest.json``."""
    genus = genus or cfg.genus
    cfg.genus_params(genus)
    img, mask = Image.read(image_path), Mask.read(mask_path)
    if (img.height, img.width) != (mask.height, mask.width):
        raise InvalidArgument("image and mask dimensions differ")
    out_dir = Path(out_dir)
    rc = cfg.recon_config()
    spec2d, spec3d = build_priors(img, mask, genus, cfg)
    history: list = []
    manifest = {
        "arbor_version": __version__, "stage": "reconstruct", "created_at": _now(),
        "inputs": {"image": str(image_path), "mask": str(mask_path)}, "genus": genus,
        "seed": cfg.seed, "config": rc.to_dict(),
        "schedule": noise_schedule(rc.sigma_min, rc.sigma_max, rc.sigma_levels).tolist(),
        "history": history,
    }
    try:
        grid = reconstruct(img, mask, genus, spec2d, spec3d, rc, history=history)
    except ReconstructionError as exc:
        manifest.update(status="failed", error=str(exc), failed_iteration=exc.iteration, terms=exc.terms)
        io.write_json(out_dir / "manifest.json", manifest)
        raise
    save_grid(out_dir / "grid.bin", grid)
    front = render(grid, default_pose(grid, (img.width, img.height), fov=rc.fov), rc.steps)
    front.rgb.write(out_dir / "front.png")
    front.mask.write(out_dir / "front_mask.pgm")
    iou = silhouette_iou(front.mask, mask)
    manifest.update(status="ok", front_iou=iou, outputs={"grid": "grid.bin", "front": "front.png"})
    io.write_json(out_dir / "manifest.json", manifest)
    return manifest


# -- ablation --------------------------------------------------------------------------------------

def run_ablate(out_path, cfg: PipelineConfig, image_path=None, mask_path=None, genus: str | None = None,
               ratios=ABLATION_RATIOS) -> list[dict]:
    """Sweep alpha/beta at fixed beta on the disk-fit task (or a given image) and report per ratio."""
    genus = genus or cfg.genus
    if image_path is None:
        img, mask = disk_target()
    else:
        img, mask = Image.read(image_path), Mask.read(mask_path)
    base = cfg.recon_config()
    beta = base.beta if base.beta > 0 else 1.0
    sweep_cfg = replace(cfg, recon=replace(cfg.recon, alpha=1.0, beta=beta))
    spec2d, spec3d = build_priors(img, mask, genus, sweep_cfg)
    rows = []
    for ratio in ratios:
        rc = replace(base, alpha=ratio * beta, beta=beta)
        history: list = []
        grid = reconstruct(img, mask, genus, spec2d, spec3d, rc, history=history)
        front = render(grid, default_pose(grid, (img.width, img.height), fov=rc.fov), rc.steps)
        views = render_views(grid, 4, 15.0, rc.steps, tuple(rc.prior_image_size), fov=rc.fov)
        ref = render_views(_ref_grid(img, mask, rc), 4, 15.0, rc.steps, tuple(rc.prior_image_size), fov=rc.fov)
        novel = [silhouette_iou(v.mask, r.mask) for v, r in zip(views, ref)]
        rows.append({
            "ratio": ratio, "alpha": rc.alpha, "beta": rc.beta, "iterations": rc.iterations,
            "front_iou": silhouette_iou(front.mask, mask),
            "novel_view_iou": float(np.mean(novel)),
            "final_rec_loss": history[-1]["rec"],
            "mean_brightness": float(front.rgb.pixels.mean()),
        })
    io.write_json(out_path, {"task": "disk-fit" if image_path is None else str(image_path),
                             "genus": genus, "rows": rows})
    return rows


def _ref_grid(img, mask, rc):
    from .priors import revolved_grid

    return revolved_grid(img, mask, tuple(rc.resolution), rc.extent, fov=rc.fov)


# -- grow / simulate ------------------------------------------------------------------------------

def _scene_transform(vol: OccupancyVolume, tree_height: float | None):
    """Map grid coordinates to scene metres: ground at z=0, axis through the origin."""
    lo, hi = vol.extent
    scale = 1.0 if tree_height is None else tree_height / float(hi[2] - lo[2])
    centre = 0.5 * (lo + hi)
    shift = np.array([centre[0], centre[1], lo[2]])
    return lambda p: (np.asarray(p) - shift) * scale


def prepare_markers(vol: OccupancyVolume, cfg: PipelineConfig) -> tuple[MarkerSet, np.ndarray]:
    """Sample markers in grid units, move them to scene metres and place the anchor under them."""
    markers = sample_markers(vol, cfg.envelope.marker_density, cfg.substream_seed("envelope"))
    to_scene = _scene_transform(vol, cfg.envelope.tree_height)
    pts = to_scene(markers.points) if len(markers) else markers.points
    scene = MarkerSet(pts)
    if len(scene):
        anchor = np.array([pts[:, 0].mean(), pts[:, 1].mean(), 0.0])
    else:
        anchor = np.zeros(3)
    return scene, anchor


def load_envelope(path, cfg: PipelineConfig) -> OccupancyVolume:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == b"ARBOCC01":
        return load_occupancy(path)
    return extract_occupancy(load_grid(path), cfg.envelope.tau)


def run_grow(envelope_path, out_dir, cfg: PipelineConfig, genus: str | None = None,
             snapshots=None) -> dict:
    """Grow a tree in the envelope; writes skeleton JSON, OBJ mesh, leaves and marker PLYs."""
    genus = genus or cfg.genus
    params = cfg.genus_params(genus)
    out_dir = Path(out_dir)
    vol = load_envelope(envelope_path, cfg)
    save_occupancy(out_dir / "occupancy.rle", vol)
    markers, anchor = prepare_markers(vol, cfg)
    markers.write_ply(out_dir / "markers.ply")
    obstacles = [obstacle_from_dict(o) for o in cfg.growth.obstacles]
    seed = cfg.seed
    if len(markers) == 0:
        warnings.warn("envelope produced no markers", DegenerateResult, stacklevel=2)
    skel, left = grow(anchor, markers, params, obstacles, seed=seed, return_markers=True)
    skel.save(out_dir / "skeleton.json")
    verts, faces = export_mesh(skel, cfg.growth.mesh_sides)
    io.write_obj(out_dir / "tree.obj", verts, faces, comments=[f"arbor {genus} seed {seed}"])
    leaves = attach_foliage(skel, cfg.growth.leaf_density, cfg.growth.leaf_radius,
                            cfg.substream_seed("foliage"), tip_radius=params.tip_radius)
    leaves.write_ply(out_dir / "leaves.ply")
    summary = {
        "genus": genus, "seed": seed, "nodes": len(skel), "markers": len(markers),
        "markers_consumed": int(len(markers) - left.n_alive), "reachable": skel.meta.get("reachable"),
        "last_step": skel.meta.get("last_step"), "leaves": len(leaves), "occupancy_warning": vol.warning,
    }
    steps = cfg.growth.snapshots if snapshots is None else snapshots
    if steps:
        snaps = simulate(anchor, markers, params, sorted(steps), obstacles, seed=seed)
        summary["snapshots"] = []
        for s in snaps:
            name = f"skeleton_step_{s.meta['snapshot_step']:04d}.json"
            s.save(out_dir / "snapshots" / name)
            summary["snapshots"].append({"step": s.meta["snapshot_step"], "file": f"snapshots/{name}",
                                         "nodes": len(s), "beyond_termination": s.meta["beyond_termination"]})
    io.write_json(out_dir / "grow.json", summary)
    return summary


# -- measure ----------------------------------------------------------------------------------------

def run_measure(skeleton_path, out_path, cfg: PipelineConfig, leaves_path=None, sun=None,
                shadow_pgm=None) -> dict:
    skel = TreeSkeleton.load(skeleton_path)
    skel.validate()
    leaves = LeafSet.read_ply(leaves_path) if leaves_path else None
    sun = np.asarray(cfg.measure.sun if sun is None else sun, dtype=np.float64)
    report = measure(skel, leaves, sun, cfg.measure.ground_res, cfg.measure.breast_height)
    out = report.to_dict()
    out["skeleton"] = Path(skeleton_path).name
    out["breast_height"] = cfg.measure.breast_height
    out["ground_res"] = cfg.measure.ground_res
    if report.dbh is None:
        warnings.warn("trunk shorter than breast height; DBH undefined", DegenerateResult, stacklevel=2)
    io.write_json(out_path, out)
    if shadow_pgm:
        raster, _, _ = shadow_raster(skel, leaves, report.sun_direction, cfg.measure.ground_res)
        io.write_pgm(shadow_pgm, raster.T[::-1].astype(np.float64) if raster.size else np.zeros((1, 1)))
    return out


# -- evaluate ----------------------------------------------------------------------------------------

def _evaluate_one(args):
    skel_path, ref_path, n_points, normalize, seed = args
    skel = TreeSkeleton.load(skel_path)
    attrs = branch_attributes(skel)
    row = {"tree": Path(skel_path).name, "nodes": len(skel), "attributes": attrs.summary(),
           "feature_vector": [None if np.isnan(v) else v for v in attrs.feature_vector()]}
    if ref_path is not None:
        ref = io.read_ply_points(ref_path)
        pts = sample_points(skel, n_points, seed)
        row.update(reference=Path(ref_path).name, chamfer=chamfer(pts, ref, normalize=normalize),
                   chamfer_convention=CHAMFER_CONVENTION, normalized=normalize, n_points=n_points)
    return row


def run_evaluate(skeleton_paths, reference_paths, out_path, cfg: PipelineConfig, jobs: int = 1) -> list[dict]:
    """One JSON row per skeleton; references pair with skeletons by position (a single one is shared)."""
    skeleton_paths = list(skeleton_paths)
    refs = list(reference_paths or [])
    if len(refs) == 1:
        refs = refs * len(skeleton_paths)
    if refs and len(refs) != len(skeleton_paths):
        raise InvalidArgument("give one reference cloud, or one per skeleton")
    seed = cfg.substream_seed("metrics")
    tasks = [(str(s), str(refs[i]) if refs else None, cfg.metrics.n_points, cfg.metrics.normalize, seed)
             for i, s in enumerate(skeleton_paths)]
    rows = _map(_evaluate_one, tasks, jobs)
    if str(out_path).endswith(".jsonl"):
        text = "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in rows)
    else:
        text = io.dumps_json(rows)
    io.atomic_write_text(out_path, text)
    return rows
