import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from ssl_sonar.sonar_data import (LabeledDataset, NormalizationStats, SonarDataError, SonarImage,
                                  apply_split_manifest, compute_pixel_mean, denormalize, extract_wild_patches,
                                  load_dataset, normalize, read_split_manifest, resize, save_dataset,
                                  split_dataset, write_split_manifest)

from conftest import WATERTANK_COUNTS


def _tiny(counts: dict[str, int], size=(4, 4)) -> LabeledDataset:
    imgs = []
    for name, n in counts.items():
        for i in range(n):
            imgs.append(SonarImage(np.full(size, i, np.float32), name, f"{name}/{i:05d}.png"))
    return LabeledDataset(tuple(imgs), tuple(sorted(counts)))


def _split_oracle(n: int, fractions) -> tuple[int, int, int]:
    # independent recomputation with exact rationals
    from fractions import Fraction
    f = [Fraction(x).limit_denominator(1000) for x in fractions]
    test = math.ceil(n * f[2])
    val = math.floor(n * f[1])
    return n - val - test, val, test


# ---------------------------------------------------------------------------
# loading

def _write_png(path, arr, mode="L"):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path)


def test_load_orders_lexicographically_and_counts_files(tmp_path):
    for cls, n in (("b", 3), ("a", 2)):
        for i in range(n):
            _write_png(tmp_path / cls / f"{9 - i}.png", np.full((8, 8), i, np.uint8))
    ds = load_dataset(tmp_path)
    assert ds.class_names == ("a", "b")
    assert len(ds) == 5
    assert ds.source_ids == ["a/8.png", "a/9.png", "b/7.png", "b/8.png", "b/9.png"]
    assert ds.labels().tolist() == [0, 0, 1, 1, 1]


def test_empty_class_kept_with_warning(tmp_path, caplog):
    _write_png(tmp_path / "full" / "x.png", np.zeros((8, 8), np.uint8))
    (tmp_path / "empty").mkdir()
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(tmp_path)
    assert "empty" in ds.class_names and ds.class_counts()["empty"] == 0
    assert any("holds no images" in r.message for r in caplog.records)


def test_missing_or_empty_root_is_fatal(tmp_path):
    with pytest.raises(SonarDataError):
        load_dataset(tmp_path / "nope")
    with pytest.raises(SonarDataError):
        load_dataset(tmp_path)


def test_rgb_is_averaged_with_warning_or_rejected_when_strict(tmp_path, caplog):
    rgb = np.zeros((4, 4, 3), np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 30, 60, 90
    _write_png(tmp_path / "c" / "rgb.png", rgb, "RGB")
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(tmp_path)
    assert np.allclose(ds[0].pixels, 60.0)
    with pytest.raises(SonarDataError, match="rgb.png"):
        load_dataset(tmp_path, strict_grayscale=True)


def test_undecodable_file_named_in_error(tmp_path):
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "broken.png").write_bytes(b"not a png")
    with pytest.raises(SonarDataError, match="broken.png"):
        load_dataset(tmp_path)


def test_save_load_roundtrip(tmp_path, shapes4):
    save_dataset(shapes4, tmp_path)
    back = load_dataset(tmp_path)
    assert back.source_ids == shapes4.source_ids
    assert back.class_names == shapes4.class_names
    np.testing.assert_array_equal(back.stack(), np.rint(shapes4.stack()))


# ---------------------------------------------------------------------------
# splitting

def test_object_corpus_split_sizes():
    ds = _tiny(WATERTANK_COUNTS, (1, 1))
    assert len(ds) == 2627
    tr, va, te = split_dataset(ds, (0.70, 0.15, 0.15), seed=0)
    assert (len(tr), len(va), len(te)) == (1838, 394, 395) == _split_oracle(2627, (0.7, 0.15, 0.15))


def test_exact_fraction_split():
    tr, va, te = split_dataset(_tiny({"a": 10}), (0.8, 0.1, 0.1))
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_same_seed_same_manifest(tmp_path):
    ds = _tiny(WATERTANK_COUNTS, (1, 1))
    write_split_manifest(tmp_path / "a.tsv", split_dataset(ds, seed=7))
    write_split_manifest(tmp_path / "b.tsv", split_dataset(ds, seed=7))
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    write_split_manifest(tmp_path / "c.tsv", split_dataset(ds, seed=8))
    assert (tmp_path / "a.tsv").read_bytes() != (tmp_path / "c.tsv").read_bytes()


def test_manifest_roundtrip(tmp_path):
    ds = _tiny({"a": 7, "b": 9})
    parts = split_dataset(ds, seed=3)
    write_split_manifest(tmp_path / "m.tsv", parts)
    again = apply_split_manifest(ds, read_split_manifest(tmp_path / "m.tsv"))
    assert [p.source_ids for p in again] == [p.source_ids for p in parts]


def test_split_rejects_tiny_class():
    with pytest.raises(SonarDataError, match="'b'"):
        split_dataset(_tiny({"a": 10, "b": 2}))


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(3, 60), min_size=1, max_size=8), seed=st.integers(0, 2**31 - 1),
       fr=st.sampled_from([(0.7, 0.15, 0.15), (0.8, 0.1, 0.1), (0.6, 0.2, 0.2), (0.5, 0.25, 0.25)]))
def test_split_partition_and_stratification(counts, seed, fr):
    ds = _tiny({f"c{i}": n for i, n in enumerate(counts)}, (1, 1))
    parts = split_dataset(ds, fr, seed)
    ids = [set(p.source_ids) for p in parts]
    assert set().union(*ids) == set(ds.source_ids)
    assert sum(len(s) for s in ids) == len(ds)
    assert tuple(len(p) for p in parts) == _split_oracle(len(ds), fr)
    for part, f in zip(parts, fr):
        got = part.class_counts()
        for name, n in zip(ds.class_names, [counts[int(c[1:])] for c in ds.class_names]):
            assert abs(got[name] - n * f) <= 1.0 + 1e-9


# ---------------------------------------------------------------------------
# normalization and resizing

def test_pixel_mean_examples():
    zero = LabeledDataset((SonarImage(np.zeros((3, 3)), None, "z"),))
    assert compute_pixel_mean(zero).pixel_mean == 0.0
    hundred = LabeledDataset((SonarImage(np.full((5, 5), 100.0), None, "h"),))
    assert compute_pixel_mean(hundred).pixel_mean == 100.0
    with pytest.raises(SonarDataError):
        compute_pixel_mean(LabeledDataset(()))


def test_normalize_examples():
    stats = NormalizationStats(84.5)
    img = SonarImage(np.array([[84.5, 0.0]]), None, "p")
    np.testing.assert_array_equal(normalize(img, stats).pixels, [[0.0, -84.5]])
    np.testing.assert_array_equal(normalize(img, NormalizationStats(0.0)).pixels, img.pixels)


@given(st.floats(0, 255), st.lists(st.floats(0, 255, width=32), min_size=1, max_size=50))
def test_normalize_denormalize_roundtrip(mu, vals):
    img = SonarImage(np.array([vals], np.float32), None, "r")
    stats = NormalizationStats(mu)
    np.testing.assert_allclose(denormalize(normalize(img, stats), stats).pixels, img.pixels, atol=1e-4)


def test_resize_examples():
    x = SonarImage(np.random.default_rng(0).uniform(0, 255, (96, 96)), None, "x")
    np.testing.assert_array_equal(resize(x).pixels, x.pixels)
    const = SonarImage(np.full((192, 192), 37.0), None, "c")
    np.testing.assert_allclose(resize(const).pixels, 37.0, atol=1e-4)
    assert resize(SonarImage(np.zeros((48, 96)), None, "r")).pixels.shape == (96, 96)
    with pytest.raises(SonarDataError):
        resize(x, (0, 96))


# ---------------------------------------------------------------------------
# wild patches

def test_wild_patch_count_and_split():
    src = [SonarImage(np.random.default_rng(0).uniform(0, 255, (120, 140)), None, "big")]
    patches = extract_wild_patches(src, count=63000, seed=0)
    assert len(patches) == 63000
    tagged = LabeledDataset(tuple(SonarImage(p.pixels[:1, :1], "w", f"w/{i}") for i, p in
                                  enumerate(patches.images)), ("w",))
    tr, va, te = split_dataset(tagged, (0.8, 0.2, 0.0))
    assert (len(tr), len(va), len(te)) == (50400, 12600, 0)


def test_single_corner_gives_identical_patches():
    src = SonarImage(np.random.default_rng(1).uniform(0, 255, (96, 96)), None, "one")
    out = extract_wild_patches([src], (96, 96), 3, seed=5)
    for p in out.images:
        np.testing.assert_array_equal(p.pixels, src.pixels)


def test_wild_patches_deterministic_and_skip_small(caplog):
    big = SonarImage(np.random.default_rng(2).uniform(0, 255, (130, 100)), None, "big")
    small = SonarImage(np.zeros((50, 50)), None, "small")
    with caplog.at_level(logging.WARNING):
        a = extract_wild_patches([small, big], count=20, seed=9)
    assert any("small" in r.message for r in caplog.records)
    b = extract_wild_patches([small, big], count=20, seed=9)
    np.testing.assert_array_equal(a.stack(), b.stack())
    assert a.source_ids == b.source_ids
    with pytest.raises(SonarDataError):
        extract_wild_patches([small], count=1)
