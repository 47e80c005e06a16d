"""Binary and grayscale morphology plus the image preprocessing pipeline.

Binary images model a subset of the integer plane seen through a finite
window. ``BinaryImage.outside`` is the membership of every pixel beyond the
window: images built from pictures have ``outside=False``, so an erosion
whose structuring element pokes past the border fails there, and a dilation
gains nothing from beyond it. ``complement`` flips the outside value too,
which is what makes ``erode(A, B) == ~dilate(~A, reflect(B))`` hold exactly
right up to the border.

Structuring-element offsets are ``(row - anchor_y, col - anchor_x)`` over its
set cells. Erosion keeps ``p`` iff ``p + d`` is in A for every offset ``d``;
dilation is the Minkowski sum, setting ``x`` iff ``x - d`` is in A for some
``d``, so a lone pixel dilates into the element's own footprint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import RetinaGraderError, ShapeError, UsageError
from .tensor import Tensor

LUMA = (0.299, 0.587, 0.114)
STAGES = ("resize", "normalize", "erode", "dilate", "open", "close")


@dataclass(frozen=True, eq=False)
class BinaryImage:
    bits: np.ndarray
    outside: bool = False

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.size == 0:
            raise ShapeError(f"binary image must be a non-empty 2-D grid, got shape {bits.shape}")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "outside", bool(self.outside))

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    def __eq__(self, other):
        if not isinstance(other, BinaryImage):
            return NotImplemented
        return self.outside == other.outside and np.array_equal(self.bits, other.bits)

    def __le__(self, other):
        """Subset test."""
        return bool(np.all(~self.bits | other.bits)) and (not self.outside or other.outside)

    def __invert__(self):
        return complement(self)

    def _u8(self):
        return self.bits.view(np.uint8)


@dataclass(frozen=True, eq=False)
class StructuringElement:
    bits: np.ndarray
    anchor: tuple  # (x, y): column, row

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.size == 0:
            raise ShapeError("structuring element must be a non-empty 2-D grid")
        if not bits.any():
            raise ShapeError("structuring element needs at least one set cell")
        ax, ay = (int(v) for v in self.anchor)
        if not (0 <= ax < bits.shape[1] and 0 <= ay < bits.shape[0]):
            raise ShapeError(f"anchor {(ax, ay)} outside a {bits.shape[1]}x{bits.shape[0]} element")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "anchor", (ax, ay))

    @classmethod
    def square(cls, size=3):
        return cls(np.ones((size, size), dtype=bool), (size // 2, size // 2))

    @classmethod
    def cross(cls, size=3):
        bits = np.zeros((size, size), dtype=bool)
        bits[size // 2, :] = True
        bits[:, size // 2] = True
        return cls(bits, (size // 2, size // 2))

    @classmethod
    def parse(cls, text):
        """``square:N``, ``cross:N`` (centre anchor) or ``bits:ROW/ROW/...@X,Y``.

        ``bits:010/111/010@1,1`` is a 3x3 cross anchored at column 1, row 1.
        """
        text = text.strip().lower()
        if text.startswith("bits:"):
            try:
                rows, anchor = text[5:].split("@")
                grid = np.array([[ch == "1" for ch in row] for row in rows.split("/")])
                if any(ch not in "01" for ch in rows.replace("/", "")) or grid.ndim != 2:
                    raise ValueError
                ax, ay = (int(v) for v in anchor.split(","))
            except ValueError:
                raise UsageError(f"malformed structuring element {text!r}") from None
            return cls(grid, (ax, ay))
        try:
            kind, size = text.split(":")
            size = int(size)
        except ValueError:
            raise UsageError(f"structuring element must look like 'square:3', got {text!r}") from None
        if size < 1:
            raise UsageError("structuring element size must be >= 1")
        if kind == "square":
            return cls.square(size)
        if kind == "cross":
            return cls.cross(size)
        raise UsageError(f"unknown structuring element kind {kind!r}")

    def to_text(self):
        rows = "/".join("".join("1" if b else "0" for b in row) for row in self.bits)
        return f"bits:{rows}@{self.anchor[0]},{self.anchor[1]}"

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]

    def offsets(self):
        ax, ay = self.anchor
        ys, xs = np.nonzero(self.bits)
        return list(zip((ys - ay).tolist(), (xs - ax).tolist()))

    def reflect(self):
        """Point reflection through the anchor: offsets d become -d."""
        ax, ay = self.anchor
        return StructuringElement(self.bits[::-1, ::-1], (self.width - 1 - ax, self.height - 1 - ay))

    def is_symmetric(self):
        r = self.reflect()
        return r.anchor == self.anchor and np.array_equal(r.bits, self.bits)

    def __eq__(self, other):
        if not isinstance(other, StructuringElement):
            return NotImplemented
        return self.anchor == other.anchor and np.array_equal(self.bits, other.bits)

    def _u8(self):
        return self.bits.view(np.uint8)


def complement(a: BinaryImage) -> BinaryImage:
    return BinaryImage(~a.bits, not a.outside)


def erode(a: BinaryImage, b: StructuringElement) -> BinaryImage:
    ax, ay = b.anchor
    out = kernels.binary_erode(a._u8(), b._u8(), ay, ax, a.outside)
    return BinaryImage(out.view(bool), a.outside)


def dilate(a: BinaryImage, b: StructuringElement) -> BinaryImage:
    ax, ay = b.anchor
    out = kernels.binary_dilate(a._u8(), b._u8(), ay, ax, a.outside)
    return BinaryImage(out.view(bool), a.outside)


def _compose(a: BinaryImage, b: StructuringElement, first, second) -> BinaryImage:
    # The intermediate result can differ from ``outside`` just beyond the
    # border, so both steps run on a canvas padded by the element's extent.
    py, px = b.height, b.width
    canvas = BinaryImage(np.pad(a.bits, ((py, py), (px, px)), constant_values=a.outside), a.outside)
    out = second(first(canvas, b), b)
    return BinaryImage(out.bits[py : py + a.height, px : px + a.width], out.outside)


def opening(a: BinaryImage, b: StructuringElement) -> BinaryImage:
    """Erosion then dilation."""
    return _compose(a, b, erode, dilate)


def closing(a: BinaryImage, b: StructuringElement) -> BinaryImage:
    """Dilation then erosion."""
    return _compose(a, b, dilate, erode)


# ``open``/``close`` read naturally at call sites (morph.open(a, b)).
open = opening  # noqa: A001
close = closing


# -------------------------------------------------------------- gray images


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Intensity image, values in [0, 1], stored [height, width, channels]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.size == 0:
            raise ShapeError(f"gray image must be [h, w] or [h, w, c], got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise UsageError("gray image values must lie in [0, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def plane(self, c=0):
        return np.ascontiguousarray(self.values[:, :, c])


def luminance(img: GrayImage) -> np.ndarray:
    if img.channels == 1:
        return img.plane(0)
    if img.channels != 3:
        raise ShapeError(f"luminance needs 1 or 3 channels, got {img.channels}")
    v = img.values
    return LUMA[0] * v[:, :, 0] + LUMA[1] * v[:, :, 1] + LUMA[2] * v[:, :, 2]


def threshold(img: GrayImage, t: float, outside: bool = False) -> BinaryImage:
    """Foreground where luminance >= t (inclusive)."""
    if not 0.0 < t < 1.0:
        raise UsageError(f"threshold must be strictly inside (0, 1), got {t}")
    return BinaryImage(luminance(img) >= t, outside)


def gray_morph(img: GrayImage, b: StructuringElement, mode: str) -> GrayImage:
    """Flat min (erode) or max (dilate) filter over the element's support.

    Beyond the border erosion sees 1 and dilation sees 0, so neither is
    biased by the edge. Thresholding therefore commutes with these when the
    binary side uses ``outside=True`` for erosion and ``outside=False`` for
    dilation.
    """
    if img.channels != 1:
        raise ShapeError(f"gray_morph needs a single-channel image, got {img.channels} channels")
    ax, ay = b.anchor
    plane = img.plane(0)
    if mode == "erode":
        out = kernels.gray_erode(plane, b._u8(), ay, ax, 1.0)
    elif mode == "dilate":
        out = kernels.gray_dilate(plane, b._u8(), ay, ax, 0.0)
    else:
        raise UsageError(f"mode must be 'erode' or 'dilate', not {mode!r}")
    return GrayImage(out)


def _per_channel(img: GrayImage, b: StructuringElement, mode: str) -> GrayImage:
    planes = [gray_morph(GrayImage(img.plane(c)), b, mode).plane(0) for c in range(img.channels)]
    return GrayImage(np.stack(planes, axis=2))


def _sample_coords(n_in, n_out):
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize(img: GrayImage, w: int, h: int) -> GrayImage:
    """Bilinear resize with corner-aligned sampling.

    Output pixel i samples source coordinate ``i * (n_in - 1) / (n_out - 1)``;
    a single output pixel samples the centre ``(n_in - 1) / 2``.
    """
    if w < 1 or h < 1:
        raise UsageError(f"target size must be >= 1x1, got {w}x{h}")
    if (w, h) == (img.width, img.height):
        return img
    v = img.values
    ys = _sample_coords(img.height, h)
    xs = _sample_coords(img.width, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = v[y0][:, x0] * (1 - fx) + v[y0][:, x1] * fx
    bottom = v[y1][:, x0] * (1 - fx) + v[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return GrayImage(np.clip(out, 0.0, 1.0))


def normalize(img: GrayImage) -> GrayImage:
    """Per-channel min-max stretch to [0, 1]; constant channels are left alone."""
    v = img.values
    lo = v.min(axis=(0, 1), keepdims=True)
    hi = v.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    flat = span == 0
    out = np.where(flat, v, (v - lo) / np.where(flat, 1.0, span))
    return GrayImage(np.clip(out, 0.0, 1.0))


@dataclass(frozen=True)
class PreprocSpec:
    target_size: tuple = (128, 128)  # (w, h)
    threshold: float = 0.5
    se: StructuringElement = field(default_factory=StructuringElement.square)
    order: tuple = ("resize", "normalize", "erode", "dilate")

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        object.__setattr__(self, "target_size", tuple(int(v) for v in self.target_size))
        if not self.order:
            raise UsageError("preprocessing order must name at least one stage")
        bad = [s for s in self.order if s not in STAGES]
        if bad:
            raise UsageError(f"unknown preprocessing stage(s) {bad}; choose from {list(STAGES)}")
        if not 0.0 < self.threshold < 1.0:
            raise UsageError("preprocessing threshold must be strictly inside (0, 1)")
        if min(self.target_size) < 1:
            raise UsageError("target size must be >= 1x1")

    @classmethod
    def from_values(cls, width=128, height=128, threshold=0.5, se="square:3", order=None):
        kwargs = {}
        if order is not None:
            kwargs["order"] = tuple(order)
        return cls((width, height), threshold, StructuringElement.parse(se), **kwargs)


def preprocess(img: GrayImage, spec: PreprocSpec) -> Tensor:
    """Run ``spec.order`` and return a [channels, h, w] tensor in [0, 1]."""
    for i, stage in enumerate(spec.order):
        try:
            if stage == "resize":
                img = resize(img, *spec.target_size)
            elif stage == "normalize":
                img = normalize(img)
            elif stage in ("erode", "dilate"):
                img = _per_channel(img, spec.se, stage)
            elif stage == "open":
                img = _per_channel(_per_channel(img, spec.se, "erode"), spec.se, "dilate")
            elif stage == "close":
                img = _per_channel(_per_channel(img, spec.se, "dilate"), spec.se, "erode")
        except RetinaGraderError as exc:
            raise type(exc)(f"preprocessing stage {i} ({stage}): {exc}") from None
    return Tensor(np.ascontiguousarray(img.values.transpose(2, 0, 1)))


def binarize(img: GrayImage, spec: PreprocSpec) -> BinaryImage:
    """Threshold at ``spec.threshold`` and apply a binary opening with ``spec.se``."""
    return opening(threshold(img, spec.threshold), spec.se)
