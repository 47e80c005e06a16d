import numpy as np
import pytest

from retina_grader.errors import DataError, ParseError
from retina_grader.imageio import decode_netpbm, encode_netpbm, read_image, write_image
from retina_grader.morph import GrayImage


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = GrayImage(rng.integers(0, 256, (7, 5, 3)) / 255.0)
    path = tmp_path / "a.ppm"
    write_image(path, img)
    assert read_image(path) == img
    assert path.read_bytes().startswith(b"P6\n5 7\n255\n")
    assert encode_netpbm(read_image(path)) == path.read_bytes()


def test_gray_pgm_and_comments():
    data = b"P5 # comment\n# another\n3 2\n# mid\n10\n" + bytes([0, 5, 10, 10, 5, 0])
    img = decode_netpbm(data)
    assert img.channels == 1
    assert img.plane(0).tolist() == [[0.0, 0.5, 1.0], [1.0, 0.5, 0.0]]


def test_exactly_one_whitespace_after_maxval():
    # the raster may begin with a byte that looks like whitespace
    data = b"P5\n2 1\n255\n" + bytes([32, 9])
    assert decode_netpbm(data).plane(0).tolist() == [[32 / 255, 9 / 255]]


@pytest.mark.parametrize("data", [
    b"P3\n1 1\n255\n0 0 0",
    b"P6\n2 2\n255\n" + bytes(11),
    b"P6\n0 2\n255\n",
    b"P6\n1 1\n65535\n" + bytes(6),
    b"P6\n1 1\n0\n" + bytes(3),
    b"P5\n1 1\n10\n" + bytes([11]),
    b"P6\nx 1\n255\n" + bytes(3),
    b"P6\n1",
])
def test_malformed_headers(data):
    with pytest.raises(ParseError):
        decode_netpbm(data, "x.ppm")


def test_missing_file_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        read_image(tmp_path / "nope.ppm")


def test_png_through_pillow(tmp_path):
    pil = pytest.importorskip("PIL.Image")
    arr = np.random.default_rng(1).integers(0, 256, (4, 6, 3)).astype(np.uint8)
    pil.fromarray(arr).save(tmp_path / "a.png")
    assert np.array_equal(read_image(tmp_path / "a.png").values, arr / 255.0)
