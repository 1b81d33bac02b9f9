"""CLI subcommands end to end in a scratch directory."""

import json

import numpy as np
import pytest

from bevsplat.cli import main, save_primitives, write_ppm
from bevsplat.geometry import BevGridSpec
from bevsplat.synth import make_point_field
from bevsplat.tensor_io import load_tensor


@pytest.fixture
def workdir(tmp_path):
    cfg = {
        "camera": {"kind": "panorama", "width": 96, "height": 32},
        "grid": {"size": 64, "beta": 0.546875},
        "match": {"search_radius": 12},
        "cam_height": 1.6,
        "feature_dim": 8,
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    spec = {
        "seed": 5, "grid_size": 64, "beta": 0.546875, "search_range_m": 6.0,
        "image_height": 32, "image_width": 96, "feature_dim": 8,
        "n_boxes": 5, "extent": 26.0,
    }
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    return tmp_path


def test_scene_localize_roundtrip(workdir):
    assert main(["scene", "--spec", str(workdir / "spec.json"), "--out", str(workdir / "g")]) == 0
    assert main([
        "localize", "--sat", str(workdir / "g" / "satellite.bvt"),
        "--ground-dir", str(workdir / "g"), "--config", str(workdir / "cfg.json"),
        "--out", str(workdir / "result.json"),
        "--save-similarity", str(workdir / "sim.bvt"),
    ]) == 0
    result = json.loads((workdir / "result.json").read_text())
    planted = json.loads((workdir / "g" / "scene.json").read_text())["planted_m"]
    est = result["offset_m"]
    assert np.hypot(est[0] - planted[0], est[1] - planted[1]) < 1.1
    meta = json.loads((workdir / "sim.bvt.json").read_text())
    assert meta["r"] == 12


def test_render_and_empty_render(workdir):
    grid = BevGridSpec.centered(64, 0.546875)
    save_primitives(workdir / "p.bvt", make_point_field(0, grid, points_per_cell=1, feature_dim=8))
    assert main([
        "render", "--primitives", str(workdir / "p.bvt"),
        "--grid", str(workdir / "cfg.json"), "--out", str(workdir / "rend"), "--ppm",
    ]) == 0
    f_bev = load_tensor(workdir / "rend" / "f_bev.bvt")
    assert f_bev.shape == (8, 64, 64) and np.abs(f_bev).max() > 0
    assert (workdir / "rend" / "c_bev.ppm").read_text().startswith("P3\n64 64\n255\n")

    (workdir / "empty.bvt").write_bytes(b"")
    assert main([
        "render", "--primitives", str(workdir / "empty.bvt"),
        "--grid", str(workdir / "cfg.json"), "--out", str(workdir / "rend0"),
    ]) == 0
    assert not load_tensor(workdir / "rend0" / "f_bev.bvt").any()
    np.testing.assert_array_equal(load_tensor(workdir / "rend0" / "final_t.bvt"), 1.0)


def test_baseline_commands(workdir):
    main(["scene", "--spec", str(workdir / "spec.json"), "--out", str(workdir / "g")])
    for method, mask in (("ipm", "valid.bvt"), ("direct", "occupancy.bvt")):
        out = workdir / f"base_{method}"
        assert main([
            "baseline", "--method", method, "--ground-dir", str(workdir / "g"),
            "--config", str(workdir / "cfg.json"), "--out", str(out),
        ]) == 0
        assert load_tensor(out / "bev.bvt").shape == (8, 64, 64)
        assert load_tensor(out / mask).shape == (64, 64)


def test_gradcheck_command_exit_codes():
    assert main(["gradcheck", "--seed", "1", "--splats", "32", "--dim", "4",
                 "--samples", "4"]) == 0


def test_synth_command(workdir):
    assert main([
        "synth", "--spec", str(workdir / "spec.json"), "--n", "2",
        "--pipeline", "bevsplat", "--out", str(workdir / "summary.json"),
    ]) == 0
    summary = json.loads((workdir / "summary.json").read_text())
    assert summary["n_scenes"] == 2
    lines = (workdir / "summary.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2 and "error_m" in lines[0]


def test_optimize_command(workdir):
    assert main([
        "optimize", "--spec", str(workdir / "spec.json"), "--steps", "2",
        "--lr", "1e-2", "--lambda1", "1", "--negatives", "2",
        "--out", str(workdir / "trace.json"),
    ]) == 0
    payload = json.loads((workdir / "trace.json").read_text())
    assert len(payload["trace"]) == 3  # initial state plus two steps
    assert payload["lambda1"] == 1


def test_bench_command_small():
    assert main(["bench", "--splats", "500", "--size", "32", "--threads", "2",
                 "--dim", "4"]) == 0


def test_usage_errors(workdir, capsys):
    with pytest.raises(SystemExit) as err:
        main(["nonsense"])
    assert err.value.code == 2
    assert main([
        "localize", "--sat", str(workdir / "missing.bvt"),
        "--ground-dir", str(workdir), "--config", str(workdir / "cfg.json"),
        "--out", str(workdir / "r.json"),
    ]) == 2
    bad = workdir / "bad.json"
    bad.write_text("{not json")
    assert main([
        "render", "--primitives", str(workdir / "missing.bvt"),
        "--grid", str(bad), "--out", str(workdir / "x"),
    ]) == 2


def test_ppm_writer(tmp_path):
    path = tmp_path / "img.ppm"
    write_ppm(path, np.array([[0.0, 0.5], [1.0, 0.25]]))
    text = path.read_text().split()
    assert text[:4] == ["P3", "2", "2", "255"]
    assert text[4:7] == ["0", "0", "0"]
    assert text[10:13] == ["255", "255", "255"]


def test_env_var_thread_fallback(monkeypatch):
    from bevsplat._threads import resolve_threads

    monkeypatch.setenv("BEVSPLAT_THREADS", "1")
    assert resolve_threads(None) == 1
    monkeypatch.delenv("BEVSPLAT_THREADS")
    assert resolve_threads(4) <= 4
