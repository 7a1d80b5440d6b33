import numpy as np
import pytest
from PIL import Image

from quasinormal import pfg
from quasinormal.errors import ParseFailure
from quasinormal.grid import Grid, VectorField


def test_grid_round_trip_is_float32_exact(tmp_path):
    rng = np.random.default_rng(0)
    g = Grid(rng.normal(size=(5, 3)), (0.5, 2.0))
    pfg.write_grid(tmp_path / "g.pfg", g)
    back = pfg.read_grid(tmp_path / "g.pfg")
    assert back.spacing == (0.5, 2.0)
    assert np.array_equal(back.data, g.data.astype(np.float32).astype(np.float64))


def test_layout_is_x_fastest_channel_major(tmp_path):
    data = np.arange(12.0).reshape(2, 2, 3)  # (channels, x, y)
    f = VectorField(data)
    pfg.write_field(tmp_path / "f.pfg", f)
    raw = (tmp_path / "f.pfg").read_bytes()
    header, body = raw.split(b"\n\n", 1)
    assert header.decode().splitlines() == ["PFG1", "dims: 2 2 3", "spacing: 1.0 1.0",
                                            "channels: 2"]
    values = np.frombuffer(body, dtype="<f4")
    # channel 0 first; within it x varies fastest
    assert values[:6].tolist() == [0.0, 3.0, 1.0, 4.0, 2.0, 5.0]
    assert values[6:].tolist() == [6.0, 9.0, 7.0, 10.0, 8.0, 11.0]
    assert np.array_equal(pfg.read_field(tmp_path / "f.pfg").data, data)


def test_3d_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    f = VectorField(rng.normal(size=(3, 4, 3, 2)).astype(np.float32), (1.0, 1.5, 2.0))
    pfg.write_field(tmp_path / "f.pfg", f)
    assert np.array_equal(pfg.read_field(tmp_path / "f.pfg").data, f.data)


def test_truncated_file_raises(tmp_path):
    pfg.write_grid(tmp_path / "g.pfg", Grid(np.ones((4, 4))))
    raw = (tmp_path / "g.pfg").read_bytes()
    (tmp_path / "t.pfg").write_bytes(raw[:-3])
    with pytest.raises(ParseFailure):
        pfg.read_grid(tmp_path / "t.pfg")
    (tmp_path / "h.pfg").write_bytes(b"PFG1\ndims: 2 4")
    with pytest.raises(ParseFailure):
        pfg.read_grid(tmp_path / "h.pfg")


def test_bad_magic_and_channel_count(tmp_path):
    (tmp_path / "bad.pfg").write_bytes(b"PFG2\ndims: 1 1\nspacing: 1.0\nchannels: 1\n\n\0\0\0\0")
    with pytest.raises(ParseFailure):
        pfg.read_grid(tmp_path / "bad.pfg")
    pfg.write_field(tmp_path / "f.pfg", VectorField.zeros((3, 3)))
    with pytest.raises(ParseFailure):
        pfg.read_grid(tmp_path / "f.pfg")


def test_pgm_input_rescaled(tmp_path):
    pixels = np.array([[0, 51, 255], [102, 204, 0]], dtype=np.uint8)  # rows = y
    Image.fromarray(pixels, mode="L").save(tmp_path / "a.pgm")
    g = pfg.read_grid(tmp_path / "a.pgm")
    assert g.dims == (3, 2)
    assert np.allclose(g.data, pixels.T / 255.0)


def test_read_stack_sorted(tmp_path):
    for name, v in (("b.pfg", 2.0), ("a.pfg", 1.0), ("c.txt", 0.0)):
        if name.endswith(".pfg"):
            pfg.write_grid(tmp_path / name, Grid(np.full((2, 2), v)))
        else:
            (tmp_path / name).write_text("x")
    paths, images = pfg.read_stack(tmp_path)
    assert [p.name for p in paths] == ["a.pfg", "b.pfg"]
    assert [im.data[0, 0] for im in images] == [1.0, 2.0]
