"""Binary netpbm (P5 gray / P6 RGB) reading and writing.

Header grammar accepted by :func:`decode_netpbm`::

    magic    := "P5" | "P6"
    header   := magic sep width sep height sep maxval ws1
    sep      := (whitespace | comment)+
    comment  := "#" <any bytes up to and including LF or CR>
    ws1      := exactly one whitespace byte (space, TAB, LF, VT, FF, CR)
    width, height := ASCII decimal >= 1
    maxval   := ASCII decimal in 1..255

The raster follows ``ws1`` as ``height * width * channels`` bytes, row-major,
channel-interleaved. Bytes after the raster are ignored. Samples map to
``byte / maxval``. The writer always emits ``P6\\n<w> <h>\\n255\\n`` (or P5)
followed by ``round(value * 255)``.

Other formats (PNG, JPEG, TIFF) go through Pillow when it is installed.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError, ParseError
from .morph import GrayImage

_WS = b" \t\n\v\f\r"
NETPBM_SUFFIXES = (".ppm", ".pgm", ".pnm")


def _read_token(data: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos] == 0x23:  # '#': comment runs to end of line
            while pos < n and data[pos] not in b"\n\r":
                pos += 1
            pos += 1
        elif data[pos] in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WS and data[pos] != 0x23:
        pos += 1
    if start == pos:
        raise ParseError("truncated netpbm header", path)
    return data[start:pos], pos


def _int_field(tok: bytes, what: str, path) -> int:
    if not tok.isdigit():
        raise ParseError(f"netpbm {what} is not a decimal integer: {tok!r}", path)
    return int(tok)


def decode_netpbm(data: bytes, path=None) -> GrayImage:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"not a binary netpbm image (magic {magic!r})", path)
    channels = 3 if magic == b"P6" else 1
    pos = 2
    if len(data) < 3 or (data[2] not in _WS and data[2] != 0x23):
        raise ParseError("netpbm magic must be followed by whitespace", path)
    tok, pos = _read_token(data, pos, path)
    width = _int_field(tok, "width", path)
    tok, pos = _read_token(data, pos, path)
    height = _int_field(tok, "height", path)
    tok, pos = _read_token(data, pos, path)
    maxval = _int_field(tok, "maxval", path)
    if width < 1 or height < 1:
        raise ParseError(f"netpbm size must be >= 1x1, got {width}x{height}", path)
    if not 1 <= maxval <= 255:
        raise ParseError(f"only 8-bit netpbm is supported (maxval {maxval})", path)
    if pos >= len(data) or data[pos] not in _WS:
        raise ParseError("netpbm maxval must be followed by one whitespace byte", path)
    pos += 1
    count = width * height * channels
    raster = data[pos : pos + count]
    if len(raster) != count:
        raise ParseError(f"netpbm raster truncated: {len(raster)} of {count} bytes", path)
    values = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    if values.max(initial=0) > maxval:
        raise ParseError("netpbm sample exceeds maxval", path)
    return GrayImage(values.astype(np.float64) / maxval)


def encode_netpbm(img: GrayImage) -> bytes:
    if img.channels == 3:
        magic = b"P6"
    elif img.channels == 1:
        magic = b"P5"
    else:
        raise DataError(f"netpbm stores 1 or 3 channels, not {img.channels}")
    raster = np.rint(img.values * 255.0).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + raster.tobytes()


def _read_with_pillow(path) -> GrayImage:
    try:
        from PIL import Image
    except ImportError:
        raise DataError(
            f"{path}: only PPM/PGM are supported without Pillow (pip install 'artifact[png]')"
        ) from None
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot decode image: {exc}", path) from None
    return GrayImage(arr)


def read_image(path) -> GrayImage:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(2)
            if head in (b"P5", b"P6"):
                return decode_netpbm(head + fh.read(), path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such image") from None
    except IsADirectoryError:
        raise DataError(f"{path}: is a directory") from None
    if path.lower().endswith(NETPBM_SUFFIXES):
        raise ParseError(f"not a binary netpbm image (magic {head!r})", path)
    return _read_with_pillow(path)


def write_image(path, img: GrayImage):
    data = encode_netpbm(img)
    with open(path, "wb") as fh:
        fh.write(data)
