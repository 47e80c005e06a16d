"""Dataset manifests, stratified splitting and synthetic fundus images.

File formats (UTF-8, LF line endings, no quoting):

  manifest   ``id,image_path,grade,excluded`` then one row per sample;
             grade in 0..4 (severity names accepted on input), excluded 0/1;
             relative image paths resolve against the manifest's directory.
  splits     ``id,split`` with split in train/val/test.
  exclusions one sample id per line; blank lines ignored.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable

import numpy as np

from .errors import DataError, ParseError, StratificationError, UsageError
from .imageio import write_image
from .morph import GrayImage
from .tensor import Rng, derive_seed

MANIFEST_HEADER = ["id", "image_path", "grade", "excluded"]
SPLITS_HEADER = ["id", "split"]
SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"


class Severity(IntEnum):
    NONE = 0
    MILD = 1
    MODERATE = 2
    SEVERE = 3
    PROLIFERATIVE = 4

    @classmethod
    def parse(cls, text) -> "Severity":
        s = str(text).strip()
        if s.isdigit():
            value = int(s)
            if 0 <= value <= 4:
                return cls(value)
            raise ValueError(f"grade {value} outside 0..4")
        try:
            return cls[s.upper()]
        except KeyError:
            raise ValueError(f"unknown severity {s!r}") from None

    @property
    def label(self):
        return self.name.lower()


@dataclass(frozen=True)
class FundusSample:
    id: str
    image_path: str
    grade: Severity
    excluded: bool = False
    split: str = UNASSIGNED

    def __post_init__(self):
        object.__setattr__(self, "grade", Severity(self.grade))
        if self.split not in SPLITS + (UNASSIGNED,):
            raise UsageError(f"sample {self.id}: unknown split {self.split!r}")
        if self.excluded and self.split != UNASSIGNED:
            raise UsageError(f"sample {self.id}: excluded samples cannot be assigned to a split")


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple
    source_tag: str = "manifest"
    seed: int | None = None
    root: str = "."

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DataError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self):
        return len(self.samples)

    def resolve(self, sample: FundusSample) -> str:
        if os.path.isabs(sample.image_path):
            return sample.image_path
        return os.path.join(self.root, sample.image_path)

    def assignable(self):
        return [s for s in self.samples if not s.excluded]

    def split_samples(self, split: str):
        """Non-excluded samples assigned to ``split``."""
        return [s for s in self.samples if s.split == split and not s.excluded]

    def grade_counts(self, split: str | None = None):
        pool = self.assignable() if split is None else self.split_samples(split)
        counts = [0] * len(Severity)
        for s in pool:
            counts[s.grade] += 1
        return counts

    def with_splits(self, assignment: dict, seed: int | None = None) -> "DatasetManifest":
        known = {s.id: s for s in self.samples}
        for sid in assignment:
            if sid not in known:
                raise DataError(f"split file names unknown sample {sid!r}")
            if known[sid].excluded:
                raise DataError(f"split file assigns excluded sample {sid!r}")
        samples = [replace(s, split=assignment.get(s.id, UNASSIGNED)) for s in self.samples]
        return replace(self, samples=tuple(samples), seed=self.seed if seed is None else seed)

    def split_assignment(self):
        return {s.id: s.split for s in self.samples if s.split != UNASSIGNED}


# ------------------------------------------------------------------ file I/O


def _read_lines(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except IsADirectoryError:
        raise DataError(f"{path}: is a directory") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8: {exc}", path) from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_manifest(path, source_tag=None, splits_path=None) -> DatasetManifest:
    path = os.fspath(path)
    lines = _read_lines(path)
    if not lines or lines[0].rstrip("\r").split(",") != MANIFEST_HEADER:
        raise ParseError(f"header must be {','.join(MANIFEST_HEADER)!r}", path, 1)
    samples = []
    seen = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line.endswith("\r"):
            raise ParseError("CR line endings are not allowed", path, lineno)
        fields = line.split(",")
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, found {len(fields)}", path, lineno)
        sid, image_path, grade, excluded = fields
        if not sid:
            raise ParseError("empty id", path, lineno)
        if not image_path:
            raise ParseError("empty image_path", path, lineno)
        if sid in seen:
            raise ParseError(f"duplicate id {sid!r} (first on line {seen[sid]})", path, lineno)
        seen[sid] = lineno
        try:
            sev = Severity.parse(grade)
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
        if excluded not in ("0", "1"):
            raise ParseError(f"excluded must be 0 or 1, got {excluded!r}", path, lineno)
        samples.append(FundusSample(sid, image_path, sev, excluded == "1"))
    tag = source_tag or os.path.splitext(os.path.basename(path))[0]
    manifest = DatasetManifest(tuple(samples), tag, None, os.path.dirname(os.path.abspath(path)))
    if splits_path is not None:
        manifest = manifest.with_splits(load_splits(splits_path))
    return manifest


def save_manifest(manifest: DatasetManifest, path):
    rows = [",".join(MANIFEST_HEADER)]
    for s in manifest.samples:
        for value in (s.id, s.image_path):
            if "," in value or "\n" in value:
                raise DataError(f"sample {s.id!r}: commas/newlines cannot be stored in a manifest")
        rows.append(f"{s.id},{s.image_path},{int(s.grade)},{int(s.excluded)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


def load_splits(path) -> dict:
    path = os.fspath(path)
    lines = _read_lines(path)
    if not lines or lines[0] != ",".join(SPLITS_HEADER):
        raise ParseError(f"header must be {','.join(SPLITS_HEADER)!r}", path, 1)
    out = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 2:
            raise ParseError(f"expected 2 fields, found {len(fields)}", path, lineno)
        sid, split = fields
        if split not in SPLITS:
            raise ParseError(f"split must be one of {SPLITS}, got {split!r}", path, lineno)
        if sid in out:
            raise ParseError(f"duplicate id {sid!r}", path, lineno)
        out[sid] = split
    return out


def save_splits(manifest: DatasetManifest, path):
    rows = [",".join(SPLITS_HEADER)]
    rows += [f"{s.id},{s.split}" for s in manifest.samples if s.split != UNASSIGNED]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


def load_exclusions(path) -> list[str]:
    return [line.strip() for line in _read_lines(os.fspath(path)) if line.strip()]


def apply_exclusions(m: DatasetManifest, ids: Iterable[str]):
    """Flag ``ids`` as excluded (and unassigned). Returns (manifest, newly excluded).

    Unknown ids only warn: exclusion lists may predate manifest edits.
    """
    wanted = set(ids)
    known = {s.id for s in m.samples}
    missing = sorted(wanted - known)
    if missing:
        warnings.warn(f"exclusion list names {len(missing)} unknown id(s): {missing[:5]}", stacklevel=2)
    newly = 0
    samples = []
    for s in m.samples:
        if s.id in wanted:
            if not s.excluded:
                newly += 1
            s = replace(s, excluded=True, split=UNASSIGNED)
        samples.append(s)
    return replace(m, samples=tuple(samples)), newly


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0
    test_fraction: float = 0.0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise UsageError(f"train fraction must be strictly inside (0, 1), got {self.train_fraction}")
        if not 0.0 <= self.test_fraction < 1.0 - self.train_fraction:
            raise UsageError("test fraction must leave room for a validation split")
        if not self.stratified:
            raise UsageError("only stratified splitting is supported")

    @property
    def val_fraction(self):
        return 1.0 - self.train_fraction - self.test_fraction


_EPS = 1e-9


def _train_counts(sizes, fraction):
    """Largest-remainder apportionment of ``fraction`` of each group.

    Each group gets floor(n * fraction) or one more, the extras going to the
    largest remainders (ties to the lower grade) so the total matches
    round(sum(n) * fraction). Counts are then kept within [1, n - 1].
    """
    exact = [n * fraction for n in sizes]
    floors = [math.floor(x + _EPS) for x in exact]
    total = math.floor(sum(exact) + 0.5 + _EPS)
    leftover = max(0, total - sum(floors))
    order = sorted(range(len(sizes)), key=lambda g: (-(exact[g] - floors[g]), g))
    counts = list(floors)
    for g in order:
        if leftover == 0:
            break
        if exact[g] - floors[g] > _EPS:
            counts[g] += 1
            leftover -= 1
    return [min(max(c, 1), n - 1) for c, n in zip(counts, sizes)]


def stratified_split(m: DatasetManifest, cfg: SplitConfig) -> DatasetManifest:
    """Assign every non-excluded sample to train/val(/test) within its grade."""
    groups = {g: [s for s in m.assignable() if s.grade == g] for g in Severity}
    for g, members in groups.items():
        if len(members) < 2:
            raise StratificationError(
                f"grade {int(g)} ({g.label}) has {len(members)} usable sample(s); need at least 2"
            )
    sizes = [len(groups[g]) for g in Severity]
    train = _train_counts(sizes, cfg.train_fraction)
    rng = Rng(cfg.seed)
    assignment = {}
    for g in Severity:
        members = groups[g]
        n = len(members)
        n_test = min(math.floor(n * cfg.test_fraction + _EPS), n - train[g] - 1)
        order = rng.permutation(n)
        for rank, k in enumerate(order):
            if rank < train[g]:
                split = "train"
            elif rank < train[g] + n_test:
                split = "test"
            else:
                split = "val"
            assignment[members[k].id] = split
    return m.with_splits(assignment, seed=cfg.seed)


# ----------------------------------------------------------- synthetic data


@dataclass
class Lesion:
    kind: str  # "exudate" (bright) or "hemorrhage" (dark)
    x: float
    y: float
    radius: float


@dataclass
class FundusLayout:
    grade: Severity
    center: tuple
    radius: float
    optic_disc: tuple
    optic_radius: float
    lesions: list = field(default_factory=list)


RETINA_RGB = np.array([0.62, 0.30, 0.14])
OPTIC_RGB = np.array([0.97, 0.86, 0.62])
EXUDATE_RGB = np.array([0.98, 0.93, 0.45])
HEMORRHAGE_RGB = np.array([0.22, 0.04, 0.03])
LESION_RADIUS = 0.042  # fraction of the shorter image side
LESION_RADIUS_JITTER = 0.006
LESION_SPREAD = 0.7  # lesions fall within this fraction of the retina radius
_SPACING_ATTEMPTS = 2000


def lesion_count_range(grade) -> tuple[int, int]:
    """Inclusive lesion-count range for a grade: none for grade 0, else [2g, 3g+1]."""
    g = int(grade)
    if g == 0:
        return (0, 0)
    return (2 * g, 3 * g + 1)


def _size(size):
    return (size, size) if isinstance(size, int) else tuple(size)


def layout_fundus(grade, rng: Rng, size=(128, 128)) -> FundusLayout:
    """Draw the geometry of a synthetic fundus (no pixels)."""
    w, h = _size(size)
    if w < 64 or h < 64:
        raise UsageError(f"synthetic fundus needs at least 64x64 pixels, got {w}x{h}")
    grade = Severity(grade)
    s = min(w, h)
    cx = w / 2 + (rng.random() - 0.5) * 0.04 * s
    cy = h / 2 + (rng.random() - 0.5) * 0.04 * s
    radius = s * (0.44 + 0.03 * rng.random())
    side = -1.0 if rng.random() < 0.5 else 1.0
    od = (cx + side * 0.55 * radius, cy + (rng.random() - 0.5) * 0.2 * radius)
    od_r = s * (0.075 + 0.015 * rng.random())
    lo, hi = lesion_count_range(grade)
    count = rng.integers(lo, hi + 1) if hi > 0 else 0
    lesions = []
    attempts = 0
    while len(lesions) < count:
        attempts += 1
        ang = 2 * math.pi * rng.random()
        dist = LESION_SPREAD * radius * math.sqrt(rng.random())
        x, y = cx + dist * math.cos(ang), cy + dist * math.sin(ang)
        r = s * (LESION_RADIUS + LESION_RADIUS_JITTER * rng.random())
        kind = "exudate" if rng.random() < 0.5 else "hemorrhage"
        if math.hypot(x - od[0], y - od[1]) < od_r + r + 2:
            continue
        # keep blobs apart so each stays countable after preprocessing; a crowded
        # draw gives up on spacing rather than on the count
        if attempts <= _SPACING_ATTEMPTS and any(
            math.hypot(x - o.x, y - o.y) < r + o.radius + 2 for o in lesions
        ):
            continue
        lesions.append(Lesion(kind, x, y, r))
    return FundusLayout(grade, (cx, cy), radius, od, od_r, lesions)


def render_fundus(layout: FundusLayout, rng: Rng, size=(128, 128)) -> GrayImage:
    w, h = _size(size)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    cx, cy = layout.center
    rr = np.hypot(xx - cx, yy - cy) / layout.radius
    img = np.zeros((h, w, 3))
    inside = rr <= 1.0
    shade = 1.0 - 0.35 * rr ** 2
    img[inside] = (RETINA_RGB[None, :] * shade[inside][:, None])
    od_mask = np.hypot(xx - layout.optic_disc[0], yy - layout.optic_disc[1]) <= layout.optic_radius
    img[od_mask & inside] = OPTIC_RGB
    for les in layout.lesions:
        m = (np.hypot(xx - les.x, yy - les.y) <= les.radius) & inside
        img[m] = EXUDATE_RGB if les.kind == "exudate" else HEMORRHAGE_RGB
    noise = (rng.uniform(h * w * 3).reshape(h, w, 3) - 0.5) * 0.04
    img = np.where(inside[:, :, None], img + noise, 0.0)
    # quantise now so the in-memory image equals what a PPM round trip yields
    return GrayImage(np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0)


def synth_fundus(grade, rng: Rng, size=(128, 128)) -> GrayImage:
    """Synthetic fundus photograph whose lesion count tracks ``grade``."""
    layout = layout_fundus(grade, rng, size)
    return render_fundus(layout, rng, size)


def generate_synthetic_dataset(per_grade: int, seed: int, directory, size=(128, 128)) -> DatasetManifest:
    """Write ``5 * per_grade`` PPM images plus ``manifest.csv`` into ``directory``.

    Sample k uses ``Rng(seed XOR k)``, so any subset can be regenerated alone.
    """
    if per_grade < 2:
        raise UsageError(f"per-grade count must be >= 2, got {per_grade}")
    directory = os.fspath(directory)
    img_dir = os.path.join(directory, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {img_dir}: {exc}") from None
    samples = []
    for g in Severity:
        for j in range(per_grade):
            k = int(g) * per_grade + j
            sid = f"syn{k:05d}"
            rel = f"images/{sid}.ppm"
            img = synth_fundus(g, Rng(derive_seed(seed, k)), size)
            try:
                write_image(os.path.join(directory, rel), img)
            except OSError as exc:
                raise DataError(f"cannot write {rel}: {exc}") from None
            samples.append(FundusSample(sid, rel, g))
    manifest = DatasetManifest(tuple(samples), "synthetic", seed, os.path.abspath(directory))
    save_manifest(manifest, os.path.join(directory, "manifest.csv"))
    return manifest
