"""Sonar image corpora: loading, stratified splits, normalization, resizing
and random "wild" patch extraction from unlabeled seabed imagery."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import networkx as nx
import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SIZE = (96, 96)
SPLIT_TAGS = ("train", "val", "test", "all")
IMAGE_SUFFIXES = (".png",)


class SonarDataError(ValueError):
    """Raised for malformed corpora, bad split requests and similar input errors."""


@dataclass(frozen=True)
class SonarImage:
    pixels: np.ndarray
    class_label: str | None = None
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise SonarDataError(f"{self.source_id or 'image'}: expected a non-empty 2-D grid, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray) -> "SonarImage":
        return SonarImage(pixels, self.class_label, self.source_id)


@dataclass(frozen=True)
class LabeledDataset:
    """Ordered, immutable collection of sonar images.

    ``class_names`` fixes the integer encoding of labels: ``labels()[i]`` is
    the index of image *i*'s class in ``class_names`` (or -1 if unlabeled).
    """

    images: tuple[SonarImage, ...]
    class_names: tuple[str, ...] = ()
    split_tag: str = "all"

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.split_tag not in SPLIT_TAGS:
            raise SonarDataError(f"unknown split tag {self.split_tag!r}")
        known = set(self.class_names)
        for img in self.images:
            if img.class_label is not None and img.class_label not in known:
                raise SonarDataError(f"{img.source_id}: label {img.class_label!r} not in class_names")

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, i: int) -> SonarImage:
        return self.images[i]

    @property
    def source_ids(self) -> list[str]:
        return [img.source_id for img in self.images]

    def labels(self) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.class_names)}
        return np.array([index.get(img.class_label, -1) if img.class_label is not None else -1
                         for img in self.images], dtype=np.int64)

    def stack(self) -> np.ndarray:
        """Pixels of all images as an ``(N, H, W)`` float32 array."""
        if not self.images:
            return np.zeros((0, *IMAGE_SIZE), dtype=np.float32)
        return np.stack([img.pixels for img in self.images]).astype(np.float32, copy=False)

    def subset(self, indices: Iterable[int], split_tag: str | None = None) -> "LabeledDataset":
        return LabeledDataset(tuple(self.images[i] for i in indices), self.class_names,
                              split_tag or self.split_tag)

    def map(self, fn) -> "LabeledDataset":
        return LabeledDataset(tuple(fn(img) for img in self.images), self.class_names, self.split_tag)

    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.class_names}
        for img in self.images:
            if img.class_label is not None:
                counts[img.class_label] += 1
        return counts


@dataclass(frozen=True)
class NormalizationStats:
    pixel_mean: float

    def __post_init__(self):
        if not 0.0 <= self.pixel_mean <= 255.0:
            raise SonarDataError(f"pixel mean {self.pixel_mean} outside [0, 255]")


# ---------------------------------------------------------------------------
# loading

def _read_grayscale(path: Path, strict: bool) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "I;16", "I", "F"):
                arr = np.asarray(im, dtype=np.float32)
                if mode == "I;16":
                    arr = arr / 257.0
                return arr
            if mode in ("LA", "RGB", "RGBA", "P"):
                if strict:
                    raise SonarDataError(f"{path}: not a single-channel image (mode {mode})")
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
                logger.warning("%s: %s image converted to grayscale by channel averaging", path, mode)
                return rgb.mean(axis=2)
            raise SonarDataError(f"{path}: unsupported image mode {mode}")
    except SonarDataError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise SonarDataError(f"{path}: cannot decode image ({exc})") from exc


def load_dataset(root_path: str | Path, strict_grayscale: bool = False) -> LabeledDataset:
    """Load ``<root>/<class_name>/<image>.png`` into a dataset.

    Classes and files are ordered lexicographically so that two loads of the
    same tree give identical datasets. A class directory without images is
    kept in ``class_names`` (with a warning).
    """
    root = Path(root_path)
    if not root.is_dir():
        raise SonarDataError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise SonarDataError(f"dataset root {root} has no class directories")

    images: list[SonarImage] = []
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            logger.warning("class directory %s holds no images", cdir)
        for f in files:
            px = _read_grayscale(f, strict_grayscale)
            images.append(SonarImage(px, cdir.name, f.relative_to(root).as_posix()))
    return LabeledDataset(tuple(images), tuple(d.name for d in class_dirs), "all")


def load_source_images(directory: str | Path, strict_grayscale: bool = False) -> list[SonarImage]:
    """Every PNG directly inside ``directory`` (any size), unlabeled."""
    d = Path(directory)
    if not d.is_dir():
        raise SonarDataError(f"source directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    return [SonarImage(_read_grayscale(f, strict_grayscale), None, f.name) for f in files]


def save_dataset(ds: LabeledDataset, root_path: str | Path) -> None:
    """Write a dataset back out in the directory-per-class layout (8-bit PNG)."""
    root = Path(root_path)
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ds.images):
        rel = img.source_id if img.source_id.endswith(".png") else f"{img.class_label or 'unlabeled'}/{i:06d}.png"
        out = root / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.clip(np.rint(img.pixels), 0, 255).astype(np.uint8), mode="L").save(out)


# ---------------------------------------------------------------------------
# splitting

def _split_totals(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    # test = ceil, val = floor, train = remainder
    test = math.ceil(n * fractions[2] - 1e-9)
    val = math.floor(n * fractions[1] + 1e-9)
    return n - val - test, val, test


def _controlled_rounding(counts: Sequence[int], fractions: Sequence[float],
                         totals: Sequence[int], names: Sequence[str]) -> np.ndarray:
    """Integer (class x split) allocation with each cell the floor or ceil of
    its quota ``count * fraction`` and margins equal to ``counts``/``totals``.

    Solved as a min-cost flow; ties go to the cells with the largest
    fractional remainders.
    """
    quotas = np.outer(np.asarray(counts, dtype=float), np.asarray(fractions, dtype=float))
    base = np.floor(quotas + 1e-9).astype(int)
    frac = quotas - base
    row_extra = np.asarray(counts) - base.sum(axis=1)
    col_extra = np.asarray(totals) - base.sum(axis=0)
    if row_extra.sum() != col_extra.sum() or (col_extra < 0).any():
        raise SonarDataError("split totals incompatible with class sizes")

    g = nx.DiGraph()
    for c, r in enumerate(row_extra):
        g.add_node(("c", c), demand=-int(r))
    for s, k in enumerate(col_extra):
        g.add_node(("s", s), demand=int(k))
    for c in range(len(counts)):
        for s in range(len(fractions)):
            if frac[c, s] > 1e-9:
                g.add_edge(("c", c), ("s", s), capacity=1, weight=-int(round(frac[c, s] * 1e6)))
    try:
        flow = nx.min_cost_flow(g)
    except nx.NetworkXUnfeasible as exc:
        raise SonarDataError(f"no stratified allocation exists for classes {list(names)}") from exc
    alloc = base.copy()
    for c in range(len(counts)):
        for s, f in flow[("c", c)].items():
            alloc[c, s[1]] += f
    return alloc


def split_dataset(ds: LabeledDataset, fractions: Sequence[float] = (0.70, 0.15, 0.15),
                  seed: int = 0) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified train/val/test split.

    Split sizes are fixed globally (test rounded up, val rounded down, train
    takes the rest) and distributed over classes so every class gets the
    floor or ceiling of its proportional share. Within a class the members
    of each split are drawn with a seeded shuffle; each output keeps the
    input order.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SonarDataError(f"split fractions must be three non-negative reals summing to 1, got {fractions}")

    groups: dict[str | None, list[int]] = {}
    for i, img in enumerate(ds.images):
        groups.setdefault(img.class_label, []).append(i)
    keys = [k for k in ds.class_names if k in groups]
    if None in groups:
        keys.append(None)

    slots = sum(f > 0 for f in fractions)
    for k in keys:
        if len(groups[k]) < slots:
            raise SonarDataError(f"class {k!r} has {len(groups[k])} images, fewer than the {slots} split slots")

    totals = _split_totals(len(ds), fractions)
    alloc = _controlled_rounding([len(groups[k]) for k in keys], fractions, totals, [str(k) for k in keys])

    assignment = np.empty(len(ds), dtype=np.int8)
    for ci, k in enumerate(keys):
        members = np.asarray(groups[k])
        rng = np.random.default_rng([seed, ci])
        order = members[rng.permutation(len(members))]
        n_train, n_val = alloc[ci, 0], alloc[ci, 1]
        assignment[order[:n_train]] = 0
        assignment[order[n_train:n_train + n_val]] = 1
        assignment[order[n_train + n_val:]] = 2

    return tuple(ds.subset(np.flatnonzero(assignment == s).tolist(), tag)
                 for s, tag in enumerate(("train", "val", "test")))  # type: ignore[return-value]


def write_split_manifest(path: str | Path, splits: Sequence[LabeledDataset]) -> None:
    lines = []
    for part in splits:
        lines.extend(f"{img.source_id}\t{part.split_tag}\n" for img in part.images)
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_split_manifest(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rel, tag = line.split("\t")
        except ValueError:
            raise SonarDataError(f"{path}:{n}: expected 'relative_path<TAB>split'") from None
        if tag not in SPLIT_TAGS:
            raise SonarDataError(f"{path}:{n}: unknown split {tag!r}")
        out[rel] = tag
    return out


def apply_split_manifest(ds: LabeledDataset, manifest: dict[str, str]) -> tuple[LabeledDataset, ...]:
    missing = [img.source_id for img in ds.images if img.source_id not in manifest]
    if missing:
        raise SonarDataError(f"{len(missing)} images absent from split manifest, e.g. {missing[0]}")
    return tuple(ds.subset([i for i, img in enumerate(ds.images) if manifest[img.source_id] == tag], tag)
                 for tag in ("train", "val", "test"))


# ---------------------------------------------------------------------------
# normalization and resizing

def compute_pixel_mean(ds: LabeledDataset) -> NormalizationStats:
    if len(ds) == 0:
        raise SonarDataError("cannot compute a pixel mean over an empty dataset")
    total = sum(float(img.pixels.sum(dtype=np.float64)) for img in ds.images)
    count = sum(img.pixels.size for img in ds.images)
    return NormalizationStats(total / count)


def normalize(img: SonarImage, stats: NormalizationStats) -> SonarImage:
    return img.with_pixels(img.pixels - np.float32(stats.pixel_mean))


def denormalize(img: SonarImage, stats: NormalizationStats) -> SonarImage:
    return img.with_pixels(img.pixels + np.float32(stats.pixel_mean))


def resize(img: SonarImage, target: tuple[int, int] = IMAGE_SIZE) -> SonarImage:
    """Bilinear resize to ``target`` = (height, width)."""
    h, w = int(target[0]), int(target[1])
    if h <= 0 or w <= 0:
        raise SonarDataError(f"resize target must be positive, got {target}")
    if img.pixels.shape == (h, w):
        return img.with_pixels(img.pixels.copy())
    out = Image.fromarray(img.pixels, mode="F").resize((w, h), Image.BILINEAR)
    return img.with_pixels(np.asarray(out, dtype=np.float32))


# ---------------------------------------------------------------------------
# wild patches

def extract_wild_patches(sources: Sequence[SonarImage], patch_size: tuple[int, int] = IMAGE_SIZE,
                         count: int = 63000, seed: int = 0) -> LabeledDataset:
    """Cut ``count`` unlabeled patches at uniformly random positions.

    Each patch position is drawn uniformly over the union of all valid
    top-left corners of all eligible sources, so larger sources contribute
    proportionally more patches.
    """
    ph, pw = patch_size
    if count < 0:
        raise SonarDataError("patch count must be non-negative")
    eligible = []
    for src in sources:
        if src.height < ph or src.width < pw:
            logger.warning("skipping %s: %dx%d smaller than patch %dx%d",
                           src.source_id, src.height, src.width, ph, pw)
            continue
        eligible.append(src)
    if not eligible:
        raise SonarDataError("no source image is large enough for the requested patch size")

    n_pos = np.array([(s.height - ph + 1) * (s.width - pw + 1) for s in eligible], dtype=np.int64)
    rng = np.random.default_rng(seed)
    flat = rng.integers(0, n_pos.sum(), size=count)
    bounds = np.cumsum(n_pos)
    src_idx = np.searchsorted(bounds, flat, side="right")
    offsets = flat - np.concatenate(([0], bounds[:-1]))[src_idx]

    patches = []
    for k, (si, off) in enumerate(zip(src_idx, offsets)):
        src = eligible[si]
        y, x = divmod(int(off), src.width - pw + 1)
        patches.append(SonarImage(src.pixels[y:y + ph, x:x + pw].copy(), None,
                                  f"{src.source_id}@{y},{x}#{k}"))
    return LabeledDataset(tuple(patches), (), "all")
