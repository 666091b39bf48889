import json

import numpy as np
import pytest

from arbor import io
from arbor.cli import main
from arbor.envelope import OccupancyVolume, save_occupancy
from arbor.growth import TreeSkeleton
from arbor.imaging import Image
from arbor.metrics import sample_points
from arbor.pipeline import PipelineConfig
from arbor import InvalidArgument
from arbor.priors import disk_target

from conftest import chain

EXTENT = ((-1.0, -1.0, 0.0), (1.0, 1.0, 2.0))


def tree_occupancy(res=16):
    """Crown ball on a trunk column, touching the ground layer."""
    c = (np.arange(res) + 0.5) / res
    x, y, z = np.meshgrid(c * 2 - 1, c * 2 - 1, c * 2, indexing="ij")
    crown = x ** 2 + y ** 2 + (z - 1.3) ** 2 <= 0.6 ** 2
    trunk = (np.hypot(x, y) <= 0.15) & (z <= 1.3)
    return OccupancyVolume(crown | trunk, EXTENT)


@pytest.fixture
def cfg_path(tmp_path):
    cfg = {
        "seed": 7,
        "recon": {"resolution": [12, 12, 12], "steps": 24, "iterations": 4, "prior_image_size": [8, 8]},
        "prior": {"views": 4},
        "envelope": {"marker_density": 300.0, "tree_height": 4.0},
        "growth": {"leaf_density": 5.0},
        "metrics": {"n_points": 200},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def occ_path(tmp_path):
    path = tmp_path / "env.rle"
    save_occupancy(path, tree_occupancy())
    return path


def test_defaults_echo_prior_weights(capsys):
    assert main(["defaults"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    r = cfg["recon"]
    assert (r["lambda_rgb"], r["lambda_mask"], r["alpha"], r["beta"], r["lr"]) == (5.0, 20.0, 1.0, 8.0, 0.001)


def test_config_roundtrip_and_validation():
    cfg = PipelineConfig()
    assert PipelineConfig.from_dict(json.loads(io.dumps_json(cfg.to_dict()))).to_dict() == cfg.to_dict()
    with pytest.raises(InvalidArgument):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(InvalidArgument):
        PipelineConfig.from_dict({"growth": {"bogus": 1}})
    with pytest.raises(InvalidArgument):
        PipelineConfig(genus="Quercus").validate()
    custom = PipelineConfig(genus="Quercus", genus_table={"Quercus": {
        "perception_radius": 0.5, "perception_angle": 90, "kill_distance": 0.1, "internode_length": 0.1,
        "branching_angle": 45}})
    custom.validate()
    tuned = PipelineConfig(genus_table={"Pinus": {"internode_length": 0.2}}).genus_params("Pinus")
    assert tuned.internode_length == 0.2 and tuned.perception_radius == 0.8


def test_reconstruct_writes_grid_and_manifest(tmp_path, cfg_path):
    img, mask = disk_target(16)
    img.write(tmp_path / "img.png")
    mask.write(tmp_path / "mask.pgm")
    out = tmp_path / "rec"
    assert main(["reconstruct", str(tmp_path / "img.png"), "--mask", str(tmp_path / "mask.pgm"), "--out", str(out),
                 "--config", str(cfg_path)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["status"] == "ok" and m["seed"] == 7
    assert (m["config"]["lambda_rgb"], m["config"]["alpha"], m["config"]["beta"]) == (5.0, 1.0, 8.0)
    assert len(m["schedule"]) == 50 and m["history"][0]["iteration"] == 0
    assert {"rec", "prior2d", "prior3d"} <= set(m["history"][0])
    assert (out / "grid.bin").read_bytes()[:8] == b"ARBGRID1"


def test_reconstruct_missing_mask_exits_2(tmp_path):
    img, _ = disk_target(16)
    img.write(tmp_path / "img.png")
    assert main(["reconstruct", str(tmp_path / "img.png"), "--mask", str(tmp_path / "nope.pgm"),
                 "--out", str(tmp_path / "r")]) == 2


def test_unknown_genus_exits_2(tmp_path, occ_path):
    assert main(["grow", str(occ_path), "--genus", "Quercus", "--out", str(tmp_path / "g")]) == 2


def test_output_equal_to_input_exits_2(tmp_path):
    skel = tmp_path / "s.json"
    chain([[0, 0, 0], [0, 0, 2]]).save(skel)
    assert main(["measure", str(skel), "--out", str(skel)]) == 2


def test_curate_manifest(tmp_path):
    d = tmp_path / "imgs"
    d.mkdir()
    yy, xx = np.mgrid[0:32, 0:32]
    Image(((xx + yy) % 2).astype(float)).write(d / "b_sharp.png")
    Image(np.full((32, 32), 0.4)).write(d / "a_flat.pgm")
    (d / "c_broken.png").write_bytes(b"not an image")
    out = tmp_path / "curate.json"
    with pytest.warns(RuntimeWarning):
        from arbor.pipeline import run_curate
        m = run_curate(d, out, PipelineConfig.from_dict({"curate": {"threshold": 1e-6, "patch_size": 16}}))
    assert m["kept"] == ["b_sharp.png"] and m["rejected"] == ["a_flat.pgm"]
    assert m["skipped"][0]["file"] == "c_broken.png"
    assert m["scores"]["b_sharp.png"] > m["scores"]["a_flat.pgm"] == 0.0
    assert main(["curate", str(d), "--out", str(out), "--threshold", "0", "--patch-size", "16"]) == 0
    assert json.loads(out.read_text())["kept"] == ["a_flat.pgm", "b_sharp.png"]


def test_curate_empty_dir(tmp_path):
    (tmp_path / "e").mkdir()
    assert main(["curate", str(tmp_path / "e"), "--out", str(tmp_path / "c.json")]) == 0
    m = json.loads((tmp_path / "c.json").read_text())
    assert m["kept"] == [] and m["rejected"] == []


def test_grow_outputs(tmp_path, cfg_path, occ_path):
    out = tmp_path / "g"
    assert main(["grow", str(occ_path), "--out", str(out), "--config", str(cfg_path)]) == 0
    for name in ("skeleton.json", "tree.obj", "markers.ply", "leaves.ply", "occupancy.rle", "grow.json"):
        assert (out / name).exists(), name
    skel = TreeSkeleton.load(out / "skeleton.json")
    skel.validate()
    summary = json.loads((out / "grow.json").read_text())
    assert summary["nodes"] == len(skel) > 20
    assert summary["markers_consumed"] >= 0.9 * summary["markers"]


def test_grow_respects_wall(tmp_path, occ_path):
    cfg = {"envelope": {"marker_density": 300.0, "tree_height": 4.0},
           "growth": {"obstacles": [{"kind": "wall", "point": [0.3, 0, 0], "normal": [-1, 0, 0]}]}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["grow", str(occ_path), "--out", str(tmp_path / "g"), "--config", str(tmp_path / "c.json")]) == 0
    skel = TreeSkeleton.load(tmp_path / "g" / "skeleton.json")
    assert len(skel) > 10
    assert np.all(skel.positions[:, 0] <= 0.3)


def test_simulate_snapshots(tmp_path, cfg_path, occ_path):
    out = tmp_path / "s"
    assert main(["simulate", str(occ_path), "--out", str(out), "--config", str(cfg_path),
                 "--snapshots", "0,3,6,5000"]) == 0
    summary = json.loads((out / "grow.json").read_text())
    snaps = [TreeSkeleton.load(out / s["file"]) for s in summary["snapshots"]]
    assert (snaps[0].step == 0).all()
    for early, late in zip(snaps, snaps[1:]):
        assert np.array_equal(late.positions[: len(early)], early.positions)
    assert summary["snapshots"][-1]["beyond_termination"] is True
    assert main(["simulate", str(occ_path), "--out", str(out)]) == 2


def test_measure_cylinder_and_cone(tmp_path):
    z = np.linspace(0, 10, 11)
    chain(np.c_[np.zeros(11), np.zeros(11), z], radius=0.1).save(tmp_path / "cyl.json")
    chain(np.c_[np.zeros(11), np.zeros(11), z], radius=0.2 * (1 - z / 10)).save(tmp_path / "cone.json")
    assert main(["measure", str(tmp_path / "cyl.json"), "--out", str(tmp_path / "cyl_p.json"),
                 "--shadow-pgm", str(tmp_path / "shadow.pgm")]) == 0
    assert json.loads((tmp_path / "cyl_p.json").read_text())["dbh"] == 20.0
    assert (tmp_path / "shadow.pgm").read_bytes()[:2] == b"P5"
    assert main(["measure", str(tmp_path / "cone.json"), "--out", str(tmp_path / "cone_p.json")]) == 0
    assert json.loads((tmp_path / "cone_p.json").read_text())["dbh"] == pytest.approx(34.52)


def test_measure_leaf_on_vs_off(tmp_path, cfg_path, occ_path):
    assert main(["grow", str(occ_path), "--out", str(tmp_path / "g"), "--config", str(cfg_path)]) == 0
    assert main(["measure", str(tmp_path / "g" / "skeleton.json"), "--leaves", str(tmp_path / "g" / "leaves.ply"),
                 "--sun-angles", "30,60", "--out", str(tmp_path / "p.json"), "--config", str(cfg_path)]) == 0
    rep = json.loads((tmp_path / "p.json").read_text())
    assert rep["shadow_area_leaf_on"] >= rep["shadow_area_leaf_off"] > 0


def test_strict_escalates_degenerate_results(tmp_path):
    chain([[0, 0, 0], [0, 0, 1.0]]).save(tmp_path / "short.json")
    args = ["measure", str(tmp_path / "short.json"), "--out", str(tmp_path / "p.json")]
    assert main(args) == 0
    assert json.loads((tmp_path / "p.json").read_text())["dbh"] is None
    assert main(args + ["--strict"]) == 1


def test_strict_on_empty_envelope(tmp_path):
    save_occupancy(tmp_path / "empty.rle", OccupancyVolume(np.zeros((4, 4, 4), bool), EXTENT))
    args = ["grow", str(tmp_path / "empty.rle"), "--out", str(tmp_path / "g")]
    assert main(args) == 0
    assert main(args + ["--strict"]) == 1


def test_bad_sun_exits_2(tmp_path):
    chain([[0, 0, 0], [0, 0, 2.0]]).save(tmp_path / "s.json")
    assert main(["measure", str(tmp_path / "s.json"), "--sun", "1,0,0", "--out", str(tmp_path / "p.json")]) == 2


def test_evaluate_identity_and_two_point(tmp_path):
    skel = chain([[0, 0, 0], [0, 0, 1], [0.3, 0, 1.5]], radius=[0.05, 0.03, 0.01])
    skel.save(tmp_path / "t.json")
    seed = PipelineConfig().substream_seed("metrics")
    io.write_ply(tmp_path / "ref.ply", sample_points(skel, 2048, seed))
    assert main(["evaluate", str(tmp_path / "t.json"), "--reference", str(tmp_path / "ref.ply"),
                 "--out", str(tmp_path / "m.json")]) == 0
    row = json.loads((tmp_path / "m.json").read_text())[0]
    assert row["chamfer"] == 0.0 and row["normalized"] is True
    assert row["chamfer_convention"].startswith("mean squared")

    chain([[0, 0, 0]]).save(tmp_path / "pt.json")
    io.write_ply(tmp_path / "one.ply", np.array([[1.0, 0.0, 0.0]]))
    assert main(["evaluate", str(tmp_path / "pt.json"), "--reference", str(tmp_path / "one.ply"), "--raw",
                 "--out", str(tmp_path / "m2.jsonl")]) == 0
    rows = [json.loads(line) for line in (tmp_path / "m2.jsonl").read_text().splitlines()]
    assert rows[0]["chamfer"] == 2.0 and rows[0]["normalized"] is False


def test_evaluate_straight_chain_attributes(tmp_path):
    chain(np.c_[np.zeros(5), np.zeros(5), np.arange(5.0)]).save(tmp_path / "c.json")
    assert main(["evaluate", str(tmp_path / "c.json"), "--out", str(tmp_path / "m.json")]) == 0
    row = json.loads((tmp_path / "m.json").read_text())[0]
    assert row["attributes"]["straightness"]["mean"] == 1.0
    assert row["feature_vector"][:4] == [1.0, 0.0, 1.0, 0.0]
    assert "chamfer" not in row


def test_evaluate_parallel_matches_serial(tmp_path, monkeypatch):
    gen = np.random.default_rng(0)
    paths = []
    for k in range(4):
        pts = np.cumsum(gen.normal(size=(8, 3)), axis=0)
        chain(pts, radius=0.05).save(tmp_path / f"t{k}.json")
        paths.append(str(tmp_path / f"t{k}.json"))
    io.write_ply(tmp_path / "ref.ply", gen.normal(size=(100, 3)))
    base = paths + ["--reference", str(tmp_path / "ref.ply")]
    assert main(["evaluate", *base, "--out", str(tmp_path / "serial.jsonl")]) == 0
    assert main(["evaluate", *base, "--jobs", "3", "--out", str(tmp_path / "par.jsonl")]) == 0
    monkeypatch.setenv("ARBOR_JOBS", "2")
    assert main(["evaluate", *base, "--out", str(tmp_path / "env.jsonl")]) == 0
    serial = (tmp_path / "serial.jsonl").read_bytes()
    assert serial == (tmp_path / "par.jsonl").read_bytes() == (tmp_path / "env.jsonl").read_bytes()
    assert len(serial.splitlines()) == 4
    monkeypatch.setenv("ARBOR_JOBS", "many")
    assert main(["evaluate", *base, "--out", str(tmp_path / "bad.jsonl")]) == 2


def test_evaluate_reference_count_mismatch(tmp_path):
    chain([[0, 0, 0], [0, 0, 1]]).save(tmp_path / "a.json")
    chain([[0, 0, 0], [0, 0, 2]]).save(tmp_path / "b.json")
    io.write_ply(tmp_path / "r.ply", np.zeros((1, 3)))
    args = ["evaluate", str(tmp_path / "a.json"), str(tmp_path / "b.json"), "--reference", str(tmp_path / "r.ply"),
            "--reference", str(tmp_path / "r.ply"), "--reference", str(tmp_path / "r.ply"),
            "--out", str(tmp_path / "m.json")]
    assert main(args) == 2
