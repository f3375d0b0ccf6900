import argparse
import itertools
import json
import os
import socket
import subprocess
import sys

import numpy as np
import pytest

from holotele.cli import Settings, build_parser, main, read_config
from holotele.imageio import write_image, write_mask


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


class TestConfig:
    def test_read_config(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nwindow-us = 1234\nthreshold=40 # trailing\n\n  fov =  60\n")
        assert read_config(p) == {"window_us": "1234", "threshold": "40", "fov": "60"}

    def test_bad_line(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("just words\n")
        with pytest.raises(ValueError):
            read_config(p)

    @pytest.mark.parametrize("flag,env,cfg", list(itertools.product([False, True], repeat=3)))
    def test_precedence_matrix(self, flag, env, cfg):
        args = argparse.Namespace(threshold=11.0 if flag else None)
        environ = {"HOLOTELE_THRESHOLD": "22"} if env else {}
        config = {"threshold": "33"} if cfg else {}
        got = Settings(args, config, environ).threshold
        want = 11.0 if flag else 22.0 if env else 33.0 if cfg else 25.0
        assert got == want and isinstance(got, float)

    def test_env_through_main(self, tmp_path, capsys, monkeypatch):
        pred, gt = tmp_path / "p", tmp_path / "g"
        pred.mkdir()
        gt.mkdir()
        m = np.zeros((8, 8), bool)
        m[2:5, 2:5] = True
        p = np.zeros((8, 8), bool)
        p[3:7, 3:7] = True
        write_mask(pred / "in000001.png", p)
        write_mask(gt / "in000001.png", m)
        cfg = tmp_path / "c.cfg"
        cfg.write_text("f1 = literal\n")
        code, out, _ = run(capsys, "--config", str(cfg), "eval", "--pred", str(pred), "--gt", str(gt))
        literal = last_json(out)["f1"]
        monkeypatch.setenv("HOLOTELE_F1", "harmonic")
        code, out, _ = run(capsys, "--config", str(cfg), "eval", "--pred", str(pred), "--gt", str(gt))
        assert code == 0 and last_json(out)["f1"] == pytest.approx(2 * literal)


class TestErrors:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["eval", "--no-such-flag"])
        assert info.value.code != 0
        assert "usage" in capsys.readouterr().err

    def test_machine_readable_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--pred", str(tmp_path / "nope"), "--gt", str(tmp_path / "nope2"))
        assert code == 1
        line = json.loads(err.strip().splitlines()[-1])
        assert line["stage"] == "eval" and {"error", "message"} <= set(line)

    def test_missing_required(self, capsys):
        code, _, err = run(capsys, "calibrate")
        assert code == 1 and "--wand" in json.loads(err.strip().splitlines()[-1])["message"]

    def test_every_subcommand_has_help(self):
        parser = build_parser()
        for cmd in ("gen", "calibrate", "extract-background", "segment", "eval", "fuse", "render", "hub", "node"):
            with pytest.raises(SystemExit) as info:
                parser.parse_args([cmd, "--help"])
            assert info.value.code == 0


def test_eval_identical_is_perfect(tmp_path, capsys, rng):
    d = tmp_path / "m"
    d.mkdir()
    for i in range(3):
        write_mask(d / f"in{i:06d}.png", rng.random((10, 12)) < 0.3)
    code, out, _ = run(capsys, "eval", "--pred", str(d), "--gt", str(d), "--csv", str(tmp_path / "r.csv"))
    assert code == 0 and last_json(out)["f1"] == 1.0
    assert (tmp_path / "r.csv").read_text().startswith("category,")


def test_background_and_segment(tmp_path, capsys, rng):
    frames = tmp_path / "frames"
    frames.mkdir()
    bg = rng.integers(0, 100, (30, 40, 3), dtype=np.uint8)
    for i in range(7):
        f = bg.copy()
        f[10:17, 5 * i:5 * i + 5] = 250
        write_image(frames / f"in{i:06d}.png", f)
    code, _, _ = run(capsys, "extract-background", "--in", str(frames), "--out", str(tmp_path / "bg.png"))
    assert code == 0
    code, out, _ = run(capsys, "segment", "--in", str(frames), "--bg", str(tmp_path / "bg.png"),
                       "--out", str(tmp_path / "masks"), "--iters", "2")
    assert code == 0 and last_json(out)["frames"] == 7
    from holotele.imageio import read_mask

    m = read_mask(tmp_path / "masks" / "in000003.png")
    assert m.sum() == 35 and m[10:17, 15:20].all()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen -> calibrate -> fuse -> render on a zero-noise scene."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["--seed", "5", "gen", "--out", str(data), "--frames", "2", "--color-scale", "0.25",
                 "--object", "person", "--intensity-sigma", "0"]) == 0
    assert main(["calibrate", "--wand", str(data / "wand.csv"), "--clouds", str(data / "calib_clouds"),
                 "--out", str(root / "rig.calib.json")]) == 0
    return root, data


def test_pipeline_rmse(pipeline):
    root, _ = pipeline
    rig = json.loads((root / "rig.calib.json").read_text())
    assert max(c["rmse"] for c in rig["cameras"]) < 1e-6


def test_fuse_and_render(pipeline, capsys):
    root, data = pipeline
    capsys.readouterr()
    code, out, _ = run(capsys, "fuse", "--seq", str(data / "seq"), "--calib", str(root / "rig.calib.json"),
                       "--frame", "1", "--out", str(root / "m.ply"), "--mask-source", "gt")
    assert code == 0 and last_json(out)["points"] > 1000
    code, out, _ = run(capsys, "render", "--model", str(root / "m.ply"), "--model", str(root / "m.ply"),
                       "--calib", str(root / "rig.calib.json"), "--out", str(root / "frames"),
                       "--canvas", "600x600")
    assert code == 0 and last_json(out)["frames"] == 2
    assert sorted(p.name for p in (root / "frames").glob("frame_*")) == ["frame_000000.png", "frame_000001.png"]


def test_fuse_missing_frame(pipeline, capsys):
    root, data = pipeline
    code, _, err = run(capsys, "fuse", "--seq", str(data / "seq"), "--frame", "99", "--out", str(root / "x.ply"))
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["error"] == "MissingFrame"


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_hub_and_nodes_processes(pipeline, tmp_path):
    _, data = pipeline
    seq = data / "seq"
    exe = [sys.executable, "-m", "holotele.cli"]
    env = {**os.environ, "HOLOTELE_WINDOW_US": "50000"}
    for c in (1, 2, 3, 4):
        subprocess.run(exe + ["node", "--source", str(seq), "--camera-id", str(c), "--mask-source", "gt",
                              "--record", str(tmp_path / f"n{c}.bin")], check=True, env=env, capture_output=True)
    port = _free_port()
    hub = subprocess.Popen(exe + ["hub", "--listen", f"127.0.0.1:{port}", "--calib", str(seq / "rig.calib.json"),
                                  "--nodes", "4", "--timeout-s", "5", "--canvas", "300x300",
                                  "--out", str(tmp_path / "out"), "--format", "ppm"],
                           env=env, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    nodes = [subprocess.Popen(exe + ["node", "--replay", str(tmp_path / f"n{c}.bin"), "--camera-id", str(c),
                                     "--hub", f"127.0.0.1:{port}"], env=env, stdout=subprocess.PIPE,
                              stderr=subprocess.PIPE, text=True) for c in (1, 2, 3, 4)]
    for n in nodes:
        out, err = n.communicate(timeout=120)
        assert n.returncode == 0, err
        assert last_json(out)["frames"] == 2
    out, err = hub.communicate(timeout=120)
    assert hub.returncode == 0, err
    stats = last_json(out)
    assert stats["groups"] == 2 and stats["dropped"] == 0
    assert len(list((tmp_path / "out").glob("frame_*.ppm"))) == 2
