import json
import subprocess
import sys

import numpy as np
import pytest

from wvd import io
from wvd.cli import main
from wvd.geometry import CameraExtrinsics

TINY = """[scene]
n_videos = 2
[trajectory]
n_frames = 3
resolution = 16
[train]
steps = 3
batch_size = 2
embed_dim = 16
n_layers = 1
n_heads = 2
[sample]
n_steps = 3
w = 1.0
"""


def tree_bytes(d):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.cfg").write_text(TINY)
    assert main(["gen-data", "--config", str(root / "c.cfg"), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "c.cfg"), "--data", str(root / "data"),
                 "--out", str(root / "m.ckpt")]) == 0
    return root


def test_gen_data_deterministic(workspace, tmp_path):
    cfg = str(workspace / "c.cfg")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    a, b = tree_bytes(workspace / "data"), tree_bytes(tmp_path / "again")
    assert a == b
    assert {"manifest.json", "video_0000/cloud.ply", "video_0001/frame_02_xyz.wvdr"} <= set(a)
    assert main(["gen-data", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "other")]) == 0
    assert tree_bytes(tmp_path / "other") != a


def test_eval_identical_prediction(workspace, tmp_path):
    d = workspace / "data" / "video_0000" / "frame_00_depth.wvdr"
    out = tmp_path / "r.json"
    assert main(["eval", "--pred", str(d), "--gt", str(d), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["depth_metrics"][0]["abs_rel"] == 0.0
    assert rep["depth_metrics"][0]["delta_1_25"] == 1.0


def test_usage_errors_exit_one(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["eval", "--pred", "x"]) == 1
    assert "--gt" in capsys.readouterr().err


def test_runtime_errors_exit_two(workspace, tmp_path):
    bad = tmp_path / "bad.wvdr"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["eval", "--pred", str(bad), "--gt", str(bad)]) == 2
    assert main(["eval", "--pred", str(tmp_path / "missing"), "--gt", str(bad)]) == 2
    (tmp_path / "u.cfg").write_text("[train]\nunknown = 1\n")
    assert main(["gen-data", "--config", str(tmp_path / "u.cfg"), "--out", str(tmp_path / "o")]) == 2


def test_post_opt_and_est_cams_gt_bypass(workspace, tmp_path):
    v = workspace / "data" / "video_0001"
    assert main(["post-opt", "--xyz", str(v / "frame_01_xyz.wvdr"), "--out", str(tmp_path / "po")]) == 0
    depth = io.read_raster(tmp_path / "po" / "depth.wvdr")[..., 0]
    gt = io.read_raster(v / "frame_01_depth.wvdr")[..., 0]
    m = gt > 0
    assert np.abs(depth[m] - gt[m]).max() / gt[m].min() < 1e-4
    assert main(["est-cams", "--gt-xyz", "--video", str(v), "--out", str(tmp_path / "ec")]) == 0
    rep = json.loads((tmp_path / "ec" / "report.json").read_text())
    assert max(e["rotation_deg"] for e in rep["pose_errors"]) < 0.01


def test_model_subcommands_run(workspace, tmp_path):
    cfg, ck = str(workspace / "c.cfg"), str(workspace / "m.ckpt")
    v = workspace / "data" / "video_0000"
    assert main(["sample", "--config", cfg, "--ckpt", ck, "--n-frames", "2", "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "cloud.ply").exists()
    # an untrained model may produce geometry that cannot be solved; both outcomes map to defined exit codes
    for argv in (["depth-mono", "--rgb", str(v / "frame_00_rgb.wvdr"), "--out", str(tmp_path / "dm")],
                 ["depth-video", "--video", str(v), "--out", str(tmp_path / "dv")],
                 ["est-cams", "--video", str(v), "--out", str(tmp_path / "ec")]):
        code = main([argv[0], "--config", cfg, "--ckpt", ck] + argv[1:])
        assert code in (0, 2)
        if code == 0:
            assert json.loads((tmp_path / argv[-1].split("/")[-1] / "report.json").read_text())["task"] == argv[0]


def test_camera_control_subcommands(workspace, tmp_path):
    cfg, ck = str(workspace / "c.cfg"), str(workspace / "m.ckpt")
    v = workspace / "data" / "video_0000"
    cams = {"relative": True,
            "cameras": [{"intrinsics": io.read_json(v / "cameras.json")[0]["intrinsics"],
                         "extrinsics": CameraExtrinsics.identity().to_dict()}] * 2}
    (tmp_path / "cams.json").write_text(json.dumps(cams))
    for name, extra in (("cam-control", []), ("progressive", ["--window", "1"])):
        code = main([name, "--config", cfg, "--ckpt", ck, "--rgb", str(v / "frame_00_rgb.wvdr"),
                     "--cameras", str(tmp_path / "cams.json"), "--out", str(tmp_path / name)] + extra)
        assert code in (0, 2)


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "wvd.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
