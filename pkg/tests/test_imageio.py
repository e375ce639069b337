"""Netpbm (P5/P6) decoding and mask/grayscale encoding."""

from __future__ import annotations

import numpy as np
import pytest

from bitunet.errors import FormatError, ShapeError
from bitunet.imageio import read_image, write_gray, write_mask


def test_read_p5_basic(tmp_path):
    raster = bytes(range(6))
    (tmp_path / "img.pgm").write_bytes(b"P5\n3 2\n255\n" + raster)
    img = read_image(tmp_path / "img.pgm")
    assert img.shape == (1, 2, 3, 1)
    assert img.dtype == np.float64
    assert np.allclose(img.reshape(-1), np.arange(6) / 255.0)


def test_read_p6_basic(tmp_path):
    raster = bytes(range(2 * 2 * 3))
    (tmp_path / "img.ppm").write_bytes(b"P6\n2 2\n255\n" + raster)
    img = read_image(tmp_path / "img.ppm")
    assert img.shape == (1, 2, 2, 3)
    assert img[0, 0, 0, 2] == 2 / 255.0


def test_read_header_comments_and_whitespace(tmp_path):
    data = b"P5 # magic\n# a full comment line\n  3\t2 # extent\n255\n" + bytes(6)
    (tmp_path / "img.pgm").write_bytes(data)
    assert read_image(tmp_path / "img.pgm").shape == (1, 2, 3, 1)


def test_read_sixteen_bit_big_endian(tmp_path):
    values = np.array([[0, 1000], [40000, 65535]], dtype=">u2")
    (tmp_path / "img.pgm").write_bytes(b"P5\n2 2\n65535\n" + values.tobytes())
    img = read_image(tmp_path / "img.pgm")
    assert np.allclose(img.reshape(-1), values.astype(np.float64).reshape(-1) / 65535.0)
    assert img.max() == 1.0


def test_read_intermediate_maxval(tmp_path):
    (tmp_path / "img.pgm").write_bytes(b"P5\n1 1\n100\n" + bytes([50]))
    assert read_image(tmp_path / "img.pgm")[0, 0, 0, 0] == 0.5


@pytest.mark.parametrize(
    "data,needle",
    [
        (b"P3\n1 1\n255\n0", "magic"),
        (b"P5\n0 1\n255\n", "positive"),
        (b"P5\nx 1\n255\n", "decimal"),
        (b"P5\n1 1\n70000\n\x00\x00", "65535"),
        (b"P5\n2 2\n255\n\x00\x00", "truncated"),
        (b"P5\n2 2", "truncated header"),
        (b"", "truncated header"),
    ],
    ids=["magic", "zero-extent", "non-numeric", "maxval", "short-raster", "short-header", "empty"],
)
def test_read_rejects_malformed(tmp_path, data, needle):
    (tmp_path / "img.pgm").write_bytes(data)
    with pytest.raises(FormatError, match=needle):
        read_image(tmp_path / "img.pgm")


def test_read_errors_carry_byte_offsets(tmp_path):
    (tmp_path / "img.pgm").write_bytes(b"P5\n3 2\n255\n" + bytes(3))
    with pytest.raises(FormatError, match="byte"):
        read_image(tmp_path / "img.pgm")


def test_write_mask_round_trip(tmp_path):
    mask = np.array([[0, 1, 1], [1, 0, 0]], dtype=np.uint8)
    write_mask(tmp_path / "m.pgm", mask)
    img = read_image(tmp_path / "m.pgm")
    assert img.shape == (1, 2, 3, 1)
    assert np.array_equal(img[0, :, :, 0], mask.astype(np.float64))


def test_write_mask_accepts_singleton_axes(tmp_path):
    mask = np.zeros((1, 2, 3, 1), dtype=np.uint8)
    mask[0, 1, 2, 0] = 1
    write_mask(tmp_path / "m.pgm", mask)
    img = read_image(tmp_path / "m.pgm")
    assert img[0, 1, 2, 0] == 1.0


def test_write_mask_rejects_multichannel(tmp_path):
    with pytest.raises(ShapeError):
        write_mask(tmp_path / "m.pgm", np.zeros((2, 3, 3), dtype=np.uint8))


def test_write_gray_rounds_half_away_from_zero(tmp_path):
    # 0.5/255 boundaries: x*255 + 0.5 floors to the nearer level
    img = np.array([[0.0, 1 / 510], [1.0, 0.999]])
    write_gray(tmp_path / "g.pgm", img)
    raw = (tmp_path / "g.pgm").read_bytes()[-4:]
    assert list(raw) == [0, 1, 255, 255]


def test_write_gray_clips_out_of_range(tmp_path):
    write_gray(tmp_path / "g.pgm", np.array([[-0.5, 1.5], [0.0, 1.0]]))
    assert list((tmp_path / "g.pgm").read_bytes()[-4:]) == [0, 255, 0, 255]
