import csv
import json
import os

import numpy as np
import pytest

from elastodyn.cli import main


@pytest.fixture()
def scene_file(tmp_path):
    scene = {
        "field": {
            "kind": "analytic",
            "primitives": [
                {"shape": "box", "center": [0, 0, 0],
                 "half_extents": [0.5, 0.5, 0.5], "falloff": 0.2}
            ],
        },
        "sampling": {"r_bar": 0.22, "kappa": 2.0, "seed": 3, "n_kernels": 4,
                     "m_extra_ips": 4},
        "material": {"model": "neo_hookean", "E": 1000.0, "nu": 0.3, "rho": 100.0},
        "dynamics": {"dt": 0.02},
        "camera": {"position": [0, -2.5, 0.8], "look_at": [0, 0, 0],
                   "width": 48, "height": 48},
        "render": {"step_scale": 1.0},
    }
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(scene))
    return path


def test_build_then_run(tmp_path, scene_file, capsys):
    sidecar = tmp_path / "scene.samp"
    assert main(["build", "--scene", str(scene_file), "--out", str(sidecar)]) == 0
    out = capsys.readouterr().out
    assert "kernels=4" in out and "ips=8" in out
    assert sidecar.exists()

    outdir = tmp_path / "frames"
    rc = main(["run", "--scene", str(scene_file), "--sidecar", str(sidecar),
               "--frames", "2", "--out", str(outdir)])
    assert rc == 0
    assert (outdir / "000000.png").exists()
    assert (outdir / "000002.png").exists()
    with open(outdir / "stats.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "newton_iters", "energy", "kinetic",
                       "volume_ratio", "assembly_ms", "solve_ms",
                       "warp_render_ms"]
    assert len(rows) == 3


def test_build_deterministic(tmp_path, scene_file):
    s1, s2 = tmp_path / "a.samp", tmp_path / "b.samp"
    assert main(["build", "--scene", str(scene_file), "--out", str(s1)]) == 0
    assert main(["build", "--scene", str(scene_file), "--out", str(s2)]) == 0
    assert s1.read_bytes() == s2.read_bytes()


def test_run_zero_frames(tmp_path, scene_file):
    outdir = tmp_path / "frames"
    rc = main(["run", "--scene", str(scene_file), "--frames", "0",
               "--out", str(outdir)])
    assert rc == 0
    assert (outdir / "000000.png").exists()
    assert not (outdir / "000001.png").exists()
    with open(outdir / "stats.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1  # header only

    runs = sorted(os.listdir(outdir))
    assert runs == ["000000.png", "stats.csv"]


def test_run_deterministic(tmp_path, scene_file):
    outs = []
    for name in ("r1", "r2"):
        outdir = tmp_path / name
        assert main(["run", "--scene", str(scene_file), "--frames", "2",
                     "--out", str(outdir)]) == 0
        outs.append(outdir)
    for fname in ("000000.png", "000002.png"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
    # stats are identical except the wall-clock timing columns
    for row_a, row_b in zip(_rows(outs[0]), _rows(outs[1])):
        assert row_a[:5] == row_b[:5]


def _rows(outdir):
    with open(outdir / "stats.csv") as fh:
        return list(csv.reader(fh))


def test_config_error_exit_code(tmp_path, scene_file, capsys):
    raw = json.loads(scene_file.read_text())
    raw["sampling"]["n_kernels"] = 10**6
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(raw))
    rc = main(["build", "--scene", str(bad), "--out", str(tmp_path / "x.samp")])
    assert rc == 2
    assert "n_kernels" in capsys.readouterr().err


def test_unknown_key_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"field": {}, "sampling": {}, "material": {},
                               "dynamics": {}, "extra": 1}))
    rc = main(["build", "--scene", str(bad), "--out", str(tmp_path / "x.samp")])
    assert rc == 2
    assert "extra" in capsys.readouterr().err


def test_missing_scene_exit_code(tmp_path, capsys):
    rc = main(["build", "--scene", str(tmp_path / "none.json"),
               "--out", str(tmp_path / "x.samp")])
    assert rc == 2
