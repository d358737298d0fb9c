import json
import struct
from dataclasses import replace

import numpy as np
import pytest

from repsq import geometry as geo
from repsq import io
from repsq.cli import EXIT_CHECK, EXIT_INPUT, EXIT_OK, EXIT_OUTPUT, EXIT_USAGE, build_parser, main
from repsq.fitter import FitConfig, fit_shape, toy_cloud, toy_config


@pytest.fixture
def points(rng):
    return rng.uniform(-2, 3, size=(80, 3)) * np.array([1.0, 2.0, 0.5])


def write_ply_ascii(path, pts, with_faces=False):
    lines = ["ply", "format ascii 1.0", "comment test", f"element vertex {len(pts)}", "property float x", "property float y", "property float z", "property uchar red"]
    if with_faces:
        lines += ["element face 1", "property list uchar int vertex_indices"]
    lines.append("end_header")
    lines += [f"{x:.17g} {y:.17g} {z:.17g} 7" for x, y, z in pts]
    if with_faces:
        lines.append("3 0 1 2")
    path.write_text("\n".join(lines) + "\n")


def write_ply_binary(path, pts):
    header = f"ply\nformat binary_little_endian 1.0\nelement vertex {len(pts)}\nproperty double x\nproperty double y\nproperty double z\nproperty int flag\nend_header\n"
    body = b"".join(struct.pack("<dddi", *p, 1) for p in pts)
    path.write_bytes(header.encode() + body)


def test_normalization_is_exact(points):
    cloud = io.normalize(points)
    assert np.linalg.norm(cloud.points.mean(axis=0)) < 1e-9
    extent = (cloud.points.max(0) - cloud.points.min(0)).max()
    assert abs(extent - 1) < 1e-9
    assert np.allclose(cloud.raw_points, points, atol=1e-12)


def test_formats_agree(tmp_path, points):
    io.write_xyz(tmp_path / "a.xyz", points)
    write_ply_ascii(tmp_path / "a.ply", points, with_faces=True)
    write_ply_binary(tmp_path / "b.ply", points)
    (tmp_path / "a.obj").write_text("# comment\n" + "".join(f"v {x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in points) + "f 1 2 3\n")
    ref = io.load_point_cloud(tmp_path / "a.xyz")
    for name in ("a.ply", "b.ply", "a.obj"):
        other = io.load_point_cloud(tmp_path / name)
        assert np.array_equal(other.points, ref.points), name
        assert other.scale == ref.scale


def test_small_box_corner_file(tmp_path):
    corners = np.array([[x, y, z] for x in (0, 2) for y in (0, 1) for z in (0, 1)], dtype=float)
    io.write_xyz(tmp_path / "c.xyz", np.tile(corners, (4, 1)))
    cloud = io.load_point_cloud(tmp_path / "c.xyz")
    assert np.allclose(cloud.points.max(0) - cloud.points.min(0), [1.0, 0.5, 0.5])
    assert np.allclose(cloud.centroid, [1.0, 0.5, 0.5])


def test_distinct_load_errors(tmp_path, points):
    bad = points.copy()
    bad[7, 2] = np.nan
    io.write_xyz(tmp_path / "nan.xyz", bad)
    with pytest.raises(io.NonFiniteError):
        io.load_point_cloud(tmp_path / "nan.xyz")
    io.write_xyz(tmp_path / "few.xyz", points[:10])
    with pytest.raises(io.TooFewPointsError):
        io.load_point_cloud(tmp_path / "few.xyz")
    (tmp_path / "junk.xyz").write_text("1 2 three\n")
    with pytest.raises(io.CloudParseError):
        io.load_point_cloud(tmp_path / "junk.xyz")
    (tmp_path / "junk.ply").write_text("not a ply\n")
    with pytest.raises(io.CloudParseError):
        io.load_point_cloud(tmp_path / "junk.ply")
    with pytest.raises(io.CloudParseError):
        io.load_point_cloud(tmp_path / "missing.xyz")
    with pytest.raises(io.CloudParseError):
        io.load_point_cloud(tmp_path / "x.stl")


@pytest.fixture(scope="module")
def fitted():
    pts = toy_cloud(64, 0) * 2.5 + np.array([1.0, -2.0, 0.5])
    cloud = io.normalize(pts, "toy")
    res = fit_shape(cloud.points, toy_config(total_steps=8))
    mask = np.array([True, False, True, True])
    return replace(res, existence_mask=mask), cloud


def test_export_files(tmp_path, fitted):
    res, cloud = fitted
    written = io.export_result(res, cloud, tmp_path / "out", "toy")
    labels = io.read_labels(written["instance_labels"])
    assert len(labels) == len(cloud.points)
    assert np.array_equal(labels, res.instance_labels)
    assert np.array_equal(io.read_labels(written["semantic_labels"]), res.semantic_labels)
    for kind in ("ins", "sem", "rep"):
        objs = geo.read_obj_objects(written[f"{kind}_mesh"])
        assert sorted(objs) == ["primitive_0", "primitive_2", "primitive_3"]


def test_report_round_trips_to_meshes(tmp_path, fitted):
    res, cloud = fitted
    written = io.export_result(res, cloud, tmp_path, "toy")
    report = json.loads(open(written["report"]).read())
    assert report["existence_mask"] == [True, False, True, True]
    assert FitConfig.from_dict(report["config"]) == res.config
    for kind in ("ins", "sem", "rep"):
        recs = report["primitives"][kind]
        theta = io.params_from_records(recs)
        verts = io.mesh_from_params(theta)
        objs = geo.read_obj_objects(written[f"{kind}_mesh"])
        for rec, v in zip(recs, verts):
            assert np.abs(objs[f"primitive_{rec['index']}"] - v).max() < 1e-6
    # denormalized meshes are the normalized ones mapped back to the source frame
    norm = res.mesh_vertices("ins")[2]
    assert np.allclose(cloud.denormalize(norm), io.mesh_from_params(io.params_from_records(report["primitives"]["ins"]))[1], atol=1e-9)


def test_export_to_unwritable_location(tmp_path, fitted):
    res, cloud = fitted
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(io.ExportError):
        io.export_result(res, cloud, blocker, "toy")


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps = 40\nseed = 3\nlambda2 = 0.5\nbackend = pointwise-mlp\nexport_meshes = no\ninputs = a.xyz, b.xyz\n")
    run = io.build_run_config(io.read_config_file(cfg), {"seed": 9})
    assert run.fit.total_steps == 40
    assert run.fit.seed == 9
    assert run.fit.loss.lambda2 == 0.5
    assert run.fit.backend == "pointwise-mlp"
    assert run.export_meshes is False
    assert run.inputs == ["a.xyz", "b.xyz"]
    with pytest.raises(ValueError):
        io.build_run_config({"nonsense": "1"})


def test_cli_defaults_equal_fit_config():
    d = FitConfig()
    helptext = build_parser()._subparsers._group_actions[0].choices["fit"].format_help()
    for frag in (f"default {d.max_primitives})", f"default {d.max_semantics})", f"default {d.samples_per_primitive})", f"default {d.total_steps})"):
        assert frag in helptext
    assert io.build_run_config().fit == d


def test_cli_fit_and_eval(tmp_path, capsys):
    pts = toy_cloud(64, 1)
    io.write_xyz(tmp_path / "s.xyz", pts)
    out = tmp_path / "d"
    code = main(["fit", "--input", str(tmp_path / "s.xyz"), "--out", str(out), "--steps", "3", "--seed", "7", "--primitives", "4", "--semantics", "2"])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary[0]["status"] == "ok"
    assert {p.name for p in out.iterdir()} == {"s.instance.labels", "s.semantic.labels", "s.ins.obj", "s.sem.obj", "s.rep.obj", "s.json"}
    report = json.loads((out / "s.json").read_text())
    assert report["config"]["seed"] == 7 and report["config"]["total_steps"] == 3

    code = main(["eval", "--pred", str(out / "s.instance.labels"), "--gt", str(out / "s.semantic.labels"), "--points", str(tmp_path / "s.xyz"), "--metrics", "miou,nmi,dbi"])
    assert code == EXIT_OK
    block = json.loads(capsys.readouterr().out)
    assert set(block) == {"miou", "nmi", "dbi"}

    io.write_xyz(tmp_path / "t.xyz", pts[::-1])
    main(["eval", "--pred-points", str(tmp_path / "s.xyz"), "--gt-points", str(tmp_path / "t.xyz"), "--metrics", "cd,emd"])
    block = json.loads(capsys.readouterr().out)
    assert block["cd"] == pytest.approx(0, abs=1e-20) and block["emd"] == pytest.approx(0, abs=1e-12)


def test_cli_config_file(tmp_path, capsys):
    io.write_xyz(tmp_path / "s.xyz", toy_cloud(64, 2))
    (tmp_path / "run.cfg").write_text(f"inputs = {tmp_path / 's.xyz'}\nsteps = 2\nprimitives = 4\nsemantics = 2\nexport_meshes = false\n")
    code = main(["fit", "--config", str(tmp_path / "run.cfg"), "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    assert not (tmp_path / "o" / "s.ins.obj").exists()
    assert (tmp_path / "o" / "s.json").exists()


def test_cli_error_codes(tmp_path, capsys):
    assert main(["nonsense"]) == EXIT_USAGE
    assert main(["fit", "--steps", "x"]) == EXIT_USAGE
    assert main(["fit", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["fit", "--input", str(tmp_path / "none.xyz")]) == EXIT_INPUT
    io.write_xyz(tmp_path / "few.xyz", np.ones((5, 3)))
    assert main(["fit", "--input", str(tmp_path / "few.xyz")]) == EXIT_INPUT
    io.write_xyz(tmp_path / "ok.xyz", toy_cloud(64, 0))
    (tmp_path / "blocker").write_text("")
    assert main(["fit", "--input", str(tmp_path / "ok.xyz"), "--out", str(tmp_path / "blocker"), "--steps", "1", "--primitives", "2", "--semantics", "1"]) == EXIT_OUTPUT
    assert main(["eval", "--metrics", "miou"]) == EXIT_USAGE
    assert main(["eval", "--metrics", "bogus"]) == EXIT_USAGE
    assert main(["gradcheck", "--tolerance", "1e-30"]) == EXIT_CHECK


def test_cli_demo_is_deterministic(capsys):
    assert main(["demo", "--seed", "7", "--steps", "6"]) == EXIT_OK
    first = capsys.readouterr().out
    assert main(["demo", "--seed", "7", "--steps", "6"]) == EXIT_OK
    assert capsys.readouterr().out == first
    assert "time" not in first
    assert json.loads(first)["status"] == "ok"
