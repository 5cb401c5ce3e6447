"""Synthetic stand-ins for sonar corpora, used by tests and smoke runs.

``make_shape_dataset`` draws labeled 96x96 images of simple bright objects
with acoustic shadows over a speckled seabed. Objects have a preferred
orientation (shadow cast away from the sensor at the top), so rotation is
predictable. ``make_seabed_textures`` draws large isotropic texture with
no orientation cue at all.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .sonar_data import IMAGE_SIZE, LabeledDataset, SonarImage

SHAPE_CLASSES = ("disc", "bar", "ring", "cross", "square", "triangle", "pair", "tee",
                 "ell", "diamond", "blob", "arc")


def _seabed(rng: np.random.Generator, shape, smooth: float = 1.5) -> np.ndarray:
    base = ndimage.gaussian_filter(rng.standard_normal(shape), smooth)
    base /= base.std() + 1e-8
    speckle = rng.gamma(4.0, 0.25, size=shape)
    return (40.0 + 12.0 * base) * speckle


def _mask(name: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    if name == "disc":
        return dy ** 2 + dx ** 2 <= r ** 2
    if name == "bar":
        return (np.abs(dy) <= r * 0.25) & (np.abs(dx) <= r * 1.3)
    if name == "ring":
        d = np.sqrt(dy ** 2 + dx ** 2)
        return (d <= r) & (d >= r * 0.6)
    if name == "cross":
        return ((np.abs(dy) <= r * 0.2) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.2) & (np.abs(dy) <= r))
    if name == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if name == "triangle":
        return (dy <= r * 0.8) & (dy >= -r * 0.8) & (np.abs(dx) <= (dy + r * 0.8) * 0.6)
    if name == "pair":
        return ((dy ** 2 + (dx - r * 0.7) ** 2) <= (r * 0.4) ** 2) | ((dy ** 2 + (dx + r * 0.7) ** 2) <= (r * 0.4) ** 2)
    if name == "tee":
        return ((np.abs(dy + r * 0.6) <= r * 0.2) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.2) & (np.abs(dy) <= r))
    if name == "ell":
        return ((np.abs(dx + r * 0.6) <= r * 0.2) & (np.abs(dy) <= r)) | ((np.abs(dy - r * 0.8) <= r * 0.2) & (np.abs(dx) <= r))
    if name == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if name == "arc":
        d = np.sqrt(dy ** 2 + dx ** 2)
        return (d <= r) & (d >= r * 0.7) & (dy <= 0)
    if name == "blob":
        return (dy / 0.6) ** 2 + (dx / 1.2) ** 2 <= r ** 2
    raise ValueError(f"unknown shape {name!r}")


def render_object(name: str, rng: np.random.Generator, size=IMAGE_SIZE) -> np.ndarray:
    h, w = size
    img = _seabed(rng, size)
    r = rng.uniform(0.12, 0.2) * min(h, w)
    cy = rng.uniform(0.35, 0.5) * h
    cx = rng.uniform(0.35, 0.65) * w
    obj = _mask(name, h, w, cy, cx, r)
    # shadow: the object's footprint projected downward (away from the sensor)
    shadow = np.zeros_like(obj)
    for off in range(1, int(r * 1.5)):
        shadow[off:] |= obj[:-off]
    shadow &= ~obj
    img = np.where(shadow, img * 0.15, img)
    img = np.where(obj, img + rng.uniform(120, 180), img)
    return np.clip(img, 0, 255).astype(np.float32)


def make_shape_dataset(per_class: int | dict[str, int] = 20, num_classes: int = 4, seed: int = 0,
                       size=IMAGE_SIZE, split_tag: str = "all") -> LabeledDataset:
    """Labeled synthetic corpus; ``per_class`` may map class name to count."""
    if isinstance(per_class, dict):
        counts = per_class
        names = tuple(per_class)
    else:
        if not 1 <= num_classes <= len(SHAPE_CLASSES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPE_CLASSES)}]")
        names = SHAPE_CLASSES[:num_classes]
        counts = {n: per_class for n in names}
    rng = np.random.default_rng(seed)
    images = []
    for name in names:
        for i in range(counts[name]):
            images.append(SonarImage(render_object(name, rng, size), name, f"{name}/{i:05d}.png"))
    images.sort(key=lambda im: im.source_id)  # same order a reload from disk gives
    return LabeledDataset(tuple(images), tuple(sorted(names)), split_tag)


def make_seabed_textures(count: int = 4, size=(512, 512), seed: int = 0) -> list[SonarImage]:
    """Large isotropic seabed images without any orientation cue."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        img = np.clip(_seabed(rng, size, smooth=rng.uniform(1.0, 3.0)), 0, 255).astype(np.float32)
        out.append(SonarImage(img, None, f"seabed_{i:03d}"))
    return out
