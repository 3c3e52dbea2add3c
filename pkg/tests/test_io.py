import numpy as np
import pytest
from PIL import Image

from stereo_consistency.data import generate_corpus
from stereo_consistency.io import (
    DisparityFormatError,
    load_archive,
    read_corpus,
    read_disparity,
    save_archive,
    write_corpus,
    write_disparity,
)


def test_pfm_roundtrip_exact(tmp_path):
    grid = np.random.default_rng(0).uniform(0, 200, (17, 23)).astype(np.float32)
    write_disparity(grid, tmp_path / "d.pfm")
    assert np.array_equal(read_disparity(tmp_path / "d.pfm"), grid)


def test_pfm_big_endian(tmp_path):
    grid = np.arange(6, dtype=np.float32).reshape(2, 3)
    payload = np.flipud(grid).astype(">f4").tobytes()
    (tmp_path / "b.pfm").write_bytes(b"Pf\n3 2\n1.0\n" + payload)
    assert np.array_equal(read_disparity(tmp_path / "b.pfm"), grid)


def test_pfm_bad_header(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P5\n3 2\n-1\n")
    with pytest.raises(DisparityFormatError) as exc:
        read_disparity(tmp_path / "x.pfm")
    assert exc.value.offset == 0
    (tmp_path / "y.pfm").write_bytes(b"Pf\n3 2\n-1\n" + b"\0" * 8)
    with pytest.raises(DisparityFormatError) as exc:
        read_disparity(tmp_path / "y.pfm")
    assert exc.value.offset == len(b"Pf\n3 2\n-1\n")


def test_kitti_value_and_invalid(tmp_path):
    grid = np.array([[1.5, np.nan], [0.0, 255.99]])
    write_disparity(grid, tmp_path / "k.png", "kitti-png16")
    raw = np.asarray(Image.open(tmp_path / "k.png"))
    assert raw[0, 0] == 384 and raw[0, 1] == 0
    back = read_disparity(tmp_path / "k.png")
    assert back[0, 0] == 1.5
    assert np.isnan(back[0, 1])
    # zero disparity stores 0, which reads back as invalid by convention
    assert np.isnan(back[1, 0])


def test_kitti_roundtrip_tolerance(tmp_path):
    grid = np.random.default_rng(1).uniform(0.01, 255, (20, 30))
    write_disparity(grid, tmp_path / "k.png")
    back = read_disparity(tmp_path / "k.png")
    assert np.max(np.abs(back - grid)) <= 1 / 256


def test_kitti_rejects_range(tmp_path):
    with pytest.raises(ValueError):
        write_disparity(np.array([[256.0]]), tmp_path / "k.png")


def test_kitti_wrong_bit_depth(tmp_path):
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / "e.png")
    with pytest.raises(DisparityFormatError) as exc:
        read_disparity(tmp_path / "e.png")
    assert exc.value.offset == 24


def test_corpus_roundtrip(tmp_path):
    samples = generate_corpus(0, 2, height=32, width=32, max_disp=16)
    write_corpus(samples, tmp_path)
    back = read_corpus(tmp_path)
    assert [s.sample_id for s in back] == [s.sample_id for s in samples]
    for a, b in zip(samples, back):
        assert np.array_equal(a.disparity_left, b.disparity_left)
        assert np.array_equal(a.occlusion_left, b.occlusion_left)
        assert np.max(np.abs(a.left_image - b.left_image)) <= 0.5 / 255 + 1e-6


def test_archive_byte_stable(tmp_path):
    arrays = {"b": np.arange(5.0), "a": np.eye(2)}
    save_archive(tmp_path / "1.npz", arrays, {"x": 1})
    save_archive(tmp_path / "2.npz", dict(reversed(list(arrays.items()))), {"x": 1})
    assert (tmp_path / "1.npz").read_bytes() == (tmp_path / "2.npz").read_bytes()
    loaded, manifest = load_archive(tmp_path / "1.npz")
    assert manifest == {"x": 1}
    assert np.array_equal(loaded["a"], np.eye(2))
