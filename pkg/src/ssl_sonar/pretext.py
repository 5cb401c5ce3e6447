"""Pretext-task sample generators: rotations, jigsaw puzzles and Gaussian
corruption, plus the random shift/flip augmentation used while pretraining.

Training-facing collections are lazy ``torch.utils.data.Dataset`` objects:
item *i* is a pure function of (source image, index, seed, epoch), so the
expanded datasets never have to be held in memory.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from torch.utils.data import Dataset

from .sonar_data import LabeledDataset, SonarImage

# quarter turns (counter-clockwise) -> rotation label
ROTATION_LABELS = {0: 1, 1: 2, 2: 3, 3: 4}
ROTATION_ANGLES = {k: 90 * k for k in ROTATION_LABELS}

GRID = 3
NUM_TILES = GRID * GRID
TILE_SIZE = 32
JIGSAW_IMAGE_SIZE = GRID * TILE_SIZE
MAX_PERMUTATIONS = math.factorial(NUM_TILES)

NOISE_SIGMAS = (0.100, 0.125, 0.150, 0.175, 0.200)
PERMUTATION_COUNTS = (5, 10, 15, 20)
SHIFT_FRACTION = 0.1


class PretextError(ValueError):
    pass


@dataclass(frozen=True)
class RotationSample:
    image: SonarImage
    rotation_label: int


@dataclass(frozen=True)
class PermutationSet:
    permutations: tuple[tuple[int, ...], ...]
    seed: int

    def __len__(self) -> int:
        return len(self.permutations)

    def __getitem__(self, i: int) -> tuple[int, ...]:
        return self.permutations[i]

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "permutations": [list(p) for p in self.permutations]})

    @classmethod
    def from_json(cls, text: str) -> "PermutationSet":
        obj = json.loads(text)
        perms = tuple(tuple(int(v) for v in p) for p in obj["permutations"])
        for p in perms:
            if sorted(p) != list(range(NUM_TILES)):
                raise PretextError(f"not a permutation of 0..{NUM_TILES - 1}: {p}")
        if len(set(perms)) != len(perms):
            raise PretextError("duplicate permutations in set")
        return cls(perms, int(obj["seed"]))


@dataclass(frozen=True)
class JigsawSample:
    tiles: np.ndarray  # (9, 32, 32)
    permutation_label: int


@dataclass(frozen=True)
class CorruptedPair:
    noisy: SonarImage
    clean: SonarImage
    sigma: float


# ---------------------------------------------------------------------------
# rotation

def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, SonarImage) else np.asarray(img)


def rotate(img: SonarImage, quarter_turns: int) -> SonarImage:
    """Exact counter-clockwise rotation by ``90 * quarter_turns`` degrees."""
    if quarter_turns not in ROTATION_LABELS:
        raise PretextError(f"quarter_turns must be in 0..3, got {quarter_turns}")
    if img.height != img.width:
        raise PretextError(f"{img.source_id}: rotation needs a square image, got {img.height}x{img.width}")
    return img.with_pixels(np.ascontiguousarray(np.rot90(img.pixels, quarter_turns)))


# ---------------------------------------------------------------------------
# augmentation

def augment_array(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = x.shape
    # magnitude ~ U(0, 0.1 * size); direction is a fair coin per axis
    s_h = rng.uniform(0.0, SHIFT_FRACTION * h) * rng.choice((-1.0, 1.0))
    s_w = rng.uniform(0.0, SHIFT_FRACTION * w) * rng.choice((-1.0, 1.0))
    out = ndimage.shift(x, (s_h, s_w), order=1, mode="constant", cval=0.0, prefilter=False)
    if rng.random() < 0.5:
        out = out[::-1, :]
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(img: SonarImage, seed: int) -> SonarImage:
    """Random shift (zero fill) followed by independent up-down / left-right flips."""
    return img.with_pixels(augment_array(img.pixels, np.random.default_rng(seed)))


# ---------------------------------------------------------------------------
# jigsaw

def sample_permutations(P: int, seed: int = 0) -> PermutationSet:
    """Draw ``P`` distinct permutations of the 9 tiles; entry 0 is the identity."""
    if not 1 <= P <= MAX_PERMUTATIONS:
        raise PretextError(f"number of permutations must be in [1, {MAX_PERMUTATIONS}], got {P}")
    identity = tuple(range(NUM_TILES))
    rng = np.random.default_rng(seed)
    if P > MAX_PERMUTATIONS // 2:
        rest = [p for p in itertools.permutations(range(NUM_TILES)) if p != identity]
        chosen = rng.choice(len(rest), size=P - 1, replace=False)
        return PermutationSet((identity, *(rest[i] for i in chosen)), seed)
    seen = {identity}
    perms = [identity]
    while len(perms) < P:
        p = tuple(int(v) for v in rng.permutation(NUM_TILES))
        if p not in seen:
            seen.add(p)
            perms.append(p)
    return PermutationSet(tuple(perms), seed)


def _check_perm(perm: Sequence[int]) -> None:
    if len(perm) != NUM_TILES or sorted(perm) != list(range(NUM_TILES)):
        raise PretextError(f"not a permutation of 0..{NUM_TILES - 1}: {perm}")


def grid_cells(x: np.ndarray) -> np.ndarray:
    """Row-major 3x3 grid cells of a 96x96 array -> (9, 32, 32)."""
    if x.shape != (JIGSAW_IMAGE_SIZE, JIGSAW_IMAGE_SIZE):
        raise PretextError(f"jigsaw input must be {JIGSAW_IMAGE_SIZE}x{JIGSAW_IMAGE_SIZE}, got {x.shape}")
    return x.reshape(GRID, TILE_SIZE, GRID, TILE_SIZE).transpose(0, 2, 1, 3).reshape(NUM_TILES, TILE_SIZE, TILE_SIZE)


def shuffle_patches(img, perm: Sequence[int]) -> np.ndarray:
    """Tile ``i`` of the result is grid cell ``perm[i]`` of the input."""
    _check_perm(perm)
    return grid_cells(_pixels(img))[list(perm)].copy()


def unshuffle_patches(tiles: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    """Invert :func:`shuffle_patches` and stitch the cells back into an image."""
    _check_perm(perm)
    cells = np.empty_like(tiles)
    cells[list(perm)] = tiles
    return cells.reshape(GRID, GRID, TILE_SIZE, TILE_SIZE).transpose(0, 2, 1, 3).reshape(
        JIGSAW_IMAGE_SIZE, JIGSAW_IMAGE_SIZE)


# ---------------------------------------------------------------------------
# noise

def corrupt_gaussian(img: SonarImage, sigma: float, seed: int) -> CorruptedPair:
    if sigma < 0:
        raise PretextError(f"noise sigma must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=img.pixels.shape) if sigma > 0 else 0.0
    noisy = (img.pixels + noise).astype(np.float32)
    return CorruptedPair(img.with_pixels(noisy), img, float(sigma))


# ---------------------------------------------------------------------------
# datasets

Transform = Callable[[np.ndarray], np.ndarray]


class _PretextDataset(Dataset):
    """Shared plumbing: source images, an input transform and optional augmentation."""

    expansion = 1

    def __init__(self, ds: LabeledDataset, transform: Transform | None = None,
                 augment_seed: int | None = None):
        self.source = ds
        self.transform = transform
        self.augment_seed = augment_seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.source) * self.expansion

    def _source_pixels(self, src_index: int, item_index: int) -> np.ndarray:
        x = self.source[src_index].pixels
        if self.transform is not None:
            x = self.transform(x)
        if self.augment_seed is not None:
            x = augment_array(x, np.random.default_rng([self.augment_seed, self.epoch, item_index]))
        return x

    @property
    def true_labels(self) -> np.ndarray:
        return np.repeat(self.source.labels(), self.expansion)


class RotationDataset(_PretextDataset):
    """Four rotated copies of every source image; targets are 0-based class
    indices (``rotation_label - 1``)."""

    expansion = 4

    def sample(self, i: int) -> RotationSample:
        src, k = divmod(i, 4)
        return RotationSample(rotate(self.source[src], k), ROTATION_LABELS[k])

    def pretext_labels(self) -> np.ndarray:
        return np.tile(np.array([ROTATION_LABELS[k] for k in range(4)]), len(self.source))

    def __getitem__(self, i: int):
        src, k = divmod(i, 4)
        x = self._source_pixels(src, i)
        if x.shape[0] != x.shape[1]:
            raise PretextError(f"{self.source[src].source_id}: rotation needs a square image")
        x = np.ascontiguousarray(np.rot90(x, k), dtype=np.float32)
        return torch.from_numpy(x)[None], ROTATION_LABELS[k] - 1


def make_rotation_dataset(ds: LabeledDataset, transform: Transform | None = None,
                          augment_seed: int | None = None) -> RotationDataset:
    for img in ds.images:
        if img.height != img.width:
            raise PretextError(f"{img.source_id}: rotation needs a square image, got {img.height}x{img.width}")
    return RotationDataset(ds, transform, augment_seed)


class JigsawDataset(_PretextDataset):
    """``len(perms)`` shuffled copies of every source image; item *i* uses
    image ``i // P`` and permutation ``i % P``, shaped ``(9, 1, 32, 32)``."""

    def __init__(self, ds, perms: PermutationSet, transform=None, augment_seed=None):
        super().__init__(ds, transform, augment_seed)
        self.perms = perms
        self.expansion = len(perms)

    def sample(self, i: int) -> JigsawSample:
        src, p = divmod(i, self.expansion)
        return JigsawSample(shuffle_patches(self.source[src], self.perms[p]), p)

    def pretext_labels(self) -> np.ndarray:
        return np.tile(np.arange(self.expansion), len(self.source))

    def __getitem__(self, i: int):
        src, p = divmod(i, self.expansion)
        tiles = shuffle_patches(self._source_pixels(src, i), self.perms[p])
        return torch.from_numpy(tiles.astype(np.float32))[:, None], p


def make_jigsaw_dataset(ds: LabeledDataset, perms: PermutationSet, transform: Transform | None = None,
                        augment_seed: int | None = None) -> JigsawDataset:
    if len(perms) == 0:
        raise PretextError("permutation set is empty")
    for img in ds.images:
        if img.pixels.shape != (JIGSAW_IMAGE_SIZE, JIGSAW_IMAGE_SIZE):
            raise PretextError(f"{img.source_id}: jigsaw needs {JIGSAW_IMAGE_SIZE}x{JIGSAW_IMAGE_SIZE} images")
    return JigsawDataset(ds, perms, transform, augment_seed)


class DenoisingDataset(_PretextDataset):
    """Clean (input, target) pairs; the corruption itself happens inside the
    autoencoder's noise layer so a fresh draw is taken every step."""

    def __getitem__(self, i: int):
        x = torch.from_numpy(np.ascontiguousarray(self._source_pixels(i, i), dtype=np.float32))[None]
        return x, x


def make_denoising_dataset(ds: LabeledDataset, transform: Transform | None = None) -> DenoisingDataset:
    return DenoisingDataset(ds, transform, None)


class ClassificationDataset(_PretextDataset):
    """True-label targets, for the supervised control runs."""

    def __init__(self, ds, transform=None, augment_seed=None):
        super().__init__(ds, transform, augment_seed)
        self._labels = ds.labels()
        if (self._labels < 0).any():
            raise PretextError("supervised training needs every image labeled")

    def __getitem__(self, i: int):
        x = np.ascontiguousarray(self._source_pixels(i, i), dtype=np.float32)
        return torch.from_numpy(x)[None], int(self._labels[i])


def make_corrupted_pairs(ds: LabeledDataset, sigma: float, seed: int = 0) -> list[CorruptedPair]:
    return [corrupt_gaussian(img, sigma, seed + i) for i, img in enumerate(ds.images)]


# ---------------------------------------------------------------------------
# materialization

def _png_bytes(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.clip(np.rint(x), 0, 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def write_pretext_archive(dataset: _PretextDataset, path: str | Path) -> int:
    """Write raw-domain pretext samples to a zip of PNGs plus ``labels.csv``.

    Rotation and jigsaw samples store the (shuffled) image and the pretext
    label. Returns the number of samples written.
    """
    rows = []
    true = dataset.true_labels
    names = dataset.source.class_names
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i in range(len(dataset)):
            true_label = names[true[i]] if true[i] >= 0 else ""
            name = f"samples/{i:07d}.png"
            if isinstance(dataset, RotationDataset):
                s = dataset.sample(i)
                zf.writestr(name, _png_bytes(s.image.pixels))
                rows.append((name, s.rotation_label, true_label))
            elif isinstance(dataset, JigsawDataset):
                s = dataset.sample(i)
                # tiles laid out row-major in their shuffled order
                stitched = unshuffle_patches(s.tiles, tuple(range(NUM_TILES)))
                zf.writestr(name, _png_bytes(stitched))
                rows.append((name, s.permutation_label, true_label))
            else:
                raise PretextError(f"cannot materialize {type(dataset).__name__}; use write_corrupted_archive")
        zf.writestr("labels.csv", _csv_text(rows))
    return len(rows)


def write_corrupted_archive(pairs: Sequence[CorruptedPair], path: str | Path) -> int:
    """Noisy images with ``pretext_label`` pointing at the clean counterpart."""
    rows = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, pair in enumerate(pairs):
            noisy, clean = f"noisy/{i:07d}.png", f"clean/{i:07d}.png"
            zf.writestr(noisy, _png_bytes(pair.noisy.pixels))
            zf.writestr(clean, _png_bytes(pair.clean.pixels))
            rows.append((noisy, clean, pair.clean.class_label or ""))
        zf.writestr("labels.csv", _csv_text(rows))
    return len(rows)


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("path", "pretext_label", "true_label"))
    w.writerows(rows)
    return buf.getvalue()
