import json

import numpy as np
import pytest

from raki_noise.io import append_csv, load_tensor, read_pgm16, save_tensor, write_csv, write_json, write_pgm16

from conftest import crandn


def test_tensor_roundtrip_and_layout(tmp_path, rng):
    x = crandn(rng, 3, 4, 2)
    paths = save_tensor(tmp_path / "a", x, "kspace", seed=5, description="test")
    assert [p.suffix for p in paths] == [".bin", ".json"]
    meta = json.loads((tmp_path / "a.json").read_text())
    assert meta == {"shape": [3, 4, 2], "domain": "kspace", "dtype": "c128", "seed": 5, "description": "test"}
    raw = np.frombuffer((tmp_path / "a.bin").read_bytes(), "<f8")
    # x fastest, real/imag interleaved
    assert raw[0] == x[0, 0, 0].real and raw[1] == x[0, 0, 0].imag
    assert raw[2] == x[1, 0, 0].real
    y, _ = load_tensor(tmp_path / "a.bin")
    assert np.array_equal(x, y)


def test_real_tensor_and_size_check(tmp_path):
    save_tensor(tmp_path / "r", np.arange(6.0).reshape(2, 3), "image")
    y, meta = load_tensor(tmp_path / "r")
    assert meta["dtype"] == "f64" and np.array_equal(y, np.arange(6.0).reshape(2, 3))
    (tmp_path / "r.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError, match="sidecar"):
        load_tensor(tmp_path / "r")


def test_json_and_csv(tmp_path):
    write_json(tmp_path / "m.json", {"b": np.float64(1.5), "a": np.arange(2), "c": float("inf")})
    assert json.loads((tmp_path / "m.json").read_text()) == {"a": [0, 1], "b": 1.5, "c": "inf"}
    write_csv(tmp_path / "t.csv", ["x", "y"], [(1, 0.1), (2, 0.2)])
    append_csv(tmp_path / "u.csv", ["x"], [1])
    append_csv(tmp_path / "u.csv", ["x"], [2])
    assert (tmp_path / "u.csv").read_text().split() == ["x", "1", "2"]
    assert (tmp_path / "t.csv").read_text().splitlines()[1] == "1,0.1"


def test_pgm16_roundtrip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm16(tmp_path / "i.pgm", img)
    back = read_pgm16(tmp_path / "i.pgm")
    assert back.shape == (3, 4)
    assert back[0, 0] == 0 and back[-1, -1] == 65535
    with pytest.raises(ValueError):
        write_pgm16(tmp_path / "j.pgm", np.zeros(3))
