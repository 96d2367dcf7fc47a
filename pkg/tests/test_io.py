import hashlib
import struct

import numpy as np
import pytest

from fusedit.io import read_frames, read_latent_cache, write_frames, write_latent_cache, write_manifest


def test_frames_roundtrip(tmp_path):
    x = np.random.default_rng(0).integers(0, 256, (3, 8, 8, 3)) / 255.0
    paths = write_frames(x, tmp_path)
    assert [p.name for p in paths] == ["00000.png", "00001.png", "00002.png"]
    np.testing.assert_allclose(read_frames(tmp_path), x, atol=1e-12)


def test_frames_sorted_numerically(tmp_path):
    x = np.stack([np.full((4, 4, 3), v / 255) for v in (10, 20, 30)])
    for i, name in enumerate(["f2.png", "f10.png", "f1.png"]):
        write_frames(x[i : i + 1], tmp_path, pattern=name)
    got = read_frames(tmp_path)[:, 0, 0, 0] * 255
    np.testing.assert_allclose(got, [30, 10, 20])


def test_missing_and_mixed(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        read_frames(tmp_path / "nowhere")
    write_frames(np.zeros((1, 4, 4, 3)), tmp_path, pattern="a{:d}.png")
    write_frames(np.zeros((1, 6, 6, 3)), tmp_path, pattern="b{:d}.png")
    with pytest.raises(ValueError):
        read_frames(tmp_path)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_latent_cache_roundtrip(tmp_path, dtype):
    traj = np.random.default_rng(1).standard_normal((51, 2, 12, 4, 4)).astype(dtype)
    p = write_latent_cache(tmp_path / "c.lat", traj)
    back, header = read_latent_cache(p)
    assert back.dtype == dtype and header["steps"] == 51 and header["shape"] == (2, 12, 4, 4)
    np.testing.assert_array_equal(back, traj)
    raw = p.read_bytes()
    assert raw[:4] == b"FLAT"
    assert struct.unpack_from("<I", raw, 8)[0] == 51
    assert len(raw) == 12 + 16 + traj.nbytes


def test_latent_cache_is_byte_stable(tmp_path):
    traj = np.arange(24, dtype=np.float64).reshape(2, 1, 12, 1, 1)
    a = write_latent_cache(tmp_path / "a.lat", traj).read_bytes()
    b = write_latent_cache(tmp_path / "b.lat", traj.copy()).read_bytes()
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()


def test_latent_cache_rejects_corruption(tmp_path):
    p = write_latent_cache(tmp_path / "c.lat", np.zeros((2, 3)))
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(ValueError, match="payload"):
        read_latent_cache(p)
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ValueError, match="magic"):
        read_latent_cache(p)
    with pytest.raises(ValueError):
        write_latent_cache(tmp_path / "i.lat", np.zeros((2, 3), dtype=np.int32))


def test_manifest_serializes_numpy(tmp_path):
    p = write_manifest(tmp_path / "m.json", {"b": np.float32(1.5), "a": np.arange(2), "p": tmp_path})
    text = p.read_text()
    assert text.index('"a"') < text.index('"b"') and "1.5" in text
