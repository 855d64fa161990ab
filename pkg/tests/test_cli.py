import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose
from PIL import Image

import mpguide.cli as cli
from mpguide.cli import main, stats_path
from mpguide.imageio import read_pfm, tonemap, write_pfm, write_png

from conftest import SCENE_DIR


@pytest.fixture
def scene_file(tmp_path):
    text = (SCENE_DIR / "ghost_slab.toml").read_text().replace("resolution = [48, 48]",
                                                               "resolution = [6, 5]")
    p = tmp_path / "ghost.toml"
    p.write_text(text)
    return p


# [TRIVIAL]
def test_render_writes_pfm_png_and_stats(scene_file, tmp_path):
    out = tmp_path / "out.pfm"
    code = main(["--scene", str(scene_file), "--spp", "8", "--seed", "3", "--threads", "2",
                 "-o", str(out), "--png"])
    assert code == 0
    img = read_pfm(out)
    assert img.shape == (5, 6, 3)
    assert np.all(np.isfinite(img)) and np.all(img >= 0.0)
    assert (tmp_path / "out.png").exists()
    stats = stats_path(out).read_text()
    items = dict(line.split(": ", 1) for line in stats.splitlines())
    assert items["mode"] == "mpg" and items["spp"] == "8" and items["seed"] == "3"
    assert items["threads"] == "2" and items["resolution"] == "6 5"
    assert "walk_success_rate" in items


# [TRIVIAL]
def test_same_seed_gives_identical_files(scene_file, tmp_path):
    a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
    for out, threads in ((a, "1"), (b, "3")):
        assert main(["--scene", str(scene_file), "--spp", "8", "--seed", "9", "--threads", threads,
                     "-o", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


# [TRIVIAL]
def test_bundled_scene_by_name(tmp_path, monkeypatch):
    seen = {}

    def fake_run(scene, *args):
        seen["scene"] = scene
        raise RuntimeError("stop")

    monkeypatch.setattr(cli, "run", fake_run)
    assert main(["--scene", "mirror", "-o", str(tmp_path / "m.pfm")]) == 2
    assert seen["scene"].has_specular


# [TRIVIAL]
@pytest.mark.parametrize("argv", [
    ["--spp", "4"],
    ["--scene", "slab", "-o", "x.pfm", "--spp", "0"],
    ["--scene", "slab", "-o", "x.pfm", "--mode", "bdpt"],
    ["--scene", "slab", "-o", "x.pfm", "--train-fraction", "1.0"],
    ["--scene", "slab", "-o", "x.pfm", "--threads", "0"],
    ["--scene", "slab", "-o", "x.pfm", "--bogus"],
    ["--scene", "no_such_scene", "-o", "x.pfm"],
    ["--scene", "missing.toml", "-o", "x.pfm"],
])
def test_bad_input_exits_with_one(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "x.pfm").exists()


# [TRIVIAL]
def test_invalid_scene_file_exits_with_one(scene_file, tmp_path, capsys):
    scene_file.write_text(scene_file.read_text().replace("ior = 1.5", "ior = 0.2"))
    assert main(["--scene", str(scene_file), "-o", str(tmp_path / "x.pfm")]) == 1
    assert "IOR" in capsys.readouterr().err


# [TRIVIAL]
def test_internal_error_exits_with_two(scene_file, tmp_path, monkeypatch, capsys):
    def broken(*args, **kwargs):
        raise ArithmeticError("boom")

    monkeypatch.setattr(cli, "run", broken)
    assert main(["--scene", str(scene_file), "-o", str(tmp_path / "x.pfm")]) == 2
    assert "internal error" in capsys.readouterr().err


# [TRIVIAL]
def test_help_exits_with_zero(capsys):
    assert main(["--help"]) == 0
    assert "--train-fraction" in capsys.readouterr().out


# [TRIVIAL]
def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "mpguide", "--spp", "2"], capture_output=True, text=True)
    assert r.returncode == 1
    assert "--scene" in r.stderr


# [DERIVED]
def test_one_pixel_pfm_payload(tmp_path):
    p = tmp_path / "one.pfm"
    write_pfm(p, np.array([[[1.0, 0.5, 0.25]]]))
    data = p.read_bytes()
    assert data[:11] == b"PF\n1 1\n-1.0"
    assert data[12:] == np.array([1.0, 0.5, 0.25], dtype="<f4").tobytes()


# [DERIVED]
def test_pfm_rows_run_bottom_to_top(tmp_path):
    img = np.zeros((2, 3, 3), dtype=np.float32)
    img[0, :, 0] = 1.0  # top row red
    p = tmp_path / "rows.pfm"
    write_pfm(p, img)
    data = p.read_bytes()
    payload = np.frombuffer(data[len(b"PF\n3 2\n-1.0\n"):], dtype="<f4").reshape(2, 3, 3)
    assert not payload[0].any() and np.all(payload[1, :, 0] == 1.0)
    assert_allclose(read_pfm(p), img, rtol=0, atol=0)


# [TRIVIAL]
def test_pfm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((7, 5, 3)).astype(np.float32) * 100.0
    p = tmp_path / "r.pfm"
    write_pfm(p, img)
    assert read_pfm(p).tobytes() == img.tobytes()
    with pytest.raises(ValueError):
        write_pfm(p, np.zeros((2, 2)))


# [DERIVED]
def test_tonemap_values():
    img = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [7.5, -1.0, 0.5]]])
    out = tonemap(img)
    assert out.dtype == np.uint8
    assert out[0, 0].tolist() == [0, 0, 0]
    assert out[0, 1].tolist() == [255, 0, 0]
    assert out[0, 2].tolist() == [255, 0, round(0.5 ** (1.0 / 2.2) * 255.0)]


# [TRIVIAL]
def test_png_file(tmp_path):
    p = tmp_path / "t.png"
    write_png(p, np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]]))
    with Image.open(p) as im:
        assert im.mode == "RGB" and im.size == (2, 1)
        assert np.asarray(im).tolist() == [[[0, 0, 0], [255, 0, 0]]]
