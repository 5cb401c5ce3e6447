"""Fixed embeddings from named hidden layers of frozen models."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .models import INPUT_SHAPE, ModelError, ModelHandle, rebind_extractor_input, run_to_layer
from .pretrain import make_transform
from .sonar_data import LabeledDataset

CSV_MAX_DIM = 1024


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    values: np.ndarray
    layer_name: str
    model_ref: str
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise EmbeddingError(f"embedding matrix must be 2-D, got shape {v.shape}")
        if len(self.sample_ids) != v.shape[0]:
            raise EmbeddingError(f"{len(self.sample_ids)} sample ids for {v.shape[0]} rows")
        if not np.isfinite(v).all():
            raise EmbeddingError(f"non-finite values in embeddings of layer {self.layer_name!r}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def rows(self, indices) -> np.ndarray:
        return self.values[np.asarray(indices, dtype=np.int64)]


def _flatten_rows(out: torch.Tensor) -> np.ndarray:
    # channels-last, then row-major: a 12x12x8 map becomes [y][x][c]
    if out.dim() == 4:
        out = out.permute(0, 2, 3, 1)
    return out.reshape(out.shape[0], -1).numpy()


def prepare_for_extraction(model: ModelHandle) -> ModelHandle:
    """Jigsaw networks are probed through their tile extractor rebound to
    whole images; other families are used as-is."""
    if model.spec.family == "jigsaw":
        return rebind_extractor_input(model, INPUT_SHAPE)
    return model


def input_transform(model: ModelHandle):
    pre = model.meta.get("preprocessing")
    if pre is None:
        return None
    return make_transform(pre["pixel_mean"], pre.get("scale", 1.0))


@torch.no_grad()
def extract_embeddings(model: ModelHandle, layer: str, images: LabeledDataset, batch_size: int = 64,
                       model_ref: str | None = None) -> EmbeddingMatrix:
    """Row *i* is the flattened activation of ``layer`` for image *i*.

    Runs in inference mode; preprocessing recorded in ``model.meta`` is
    applied to raw pixels. Parameters and the module's mode are restored.
    """
    if layer not in model.layer_names:
        raise EmbeddingError(f"unknown layer {layer!r}; valid layers: {', '.join(model.layer_names)}")
    target = prepare_for_extraction(model)
    try:
        mod = target.layer(layer)
    except ModelError as exc:
        raise EmbeddingError(str(exc)) from exc
    tf = input_transform(model)
    net = target.module
    was = net.training
    net.eval()
    chunks = []
    try:
        for start in range(0, len(images), batch_size):
            px = [img.pixels for img in images.images[start:start + batch_size]]
            x = np.stack([tf(p) if tf else p for p in px]).astype(np.float32)
            out = run_to_layer(net, mod, torch.from_numpy(x)[:, None])
            chunks.append(_flatten_rows(out))
    finally:
        net.train(was)
    if not chunks:
        raise EmbeddingError("no images to embed")
    ref = model_ref or model.meta.get("model_ref") or f"{model.spec.family}:{model.spec.spec_hash()[:12]}"
    return EmbeddingMatrix(np.concatenate(chunks).astype(np.float32), layer, ref, tuple(images.source_ids))


def save_embeddings(emb: EmbeddingMatrix, path: str | Path) -> Path:
    """``<path>.npz`` (array ``values``) plus ``<path>.json`` sidecar."""
    base = Path(path).with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    np.savez(base.with_suffix(".npz"), values=emb.values)
    side = {"layer_name": emb.layer_name, "model_ref": emb.model_ref, "sample_ids": list(emb.sample_ids),
            "shape": list(emb.shape)}
    base.with_suffix(".json").write_text(json.dumps(side, indent=1))
    return base.with_suffix(".npz")


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    base = Path(path).with_suffix("")
    with np.load(base.with_suffix(".npz")) as z:
        values = z["values"]
    side = json.loads(base.with_suffix(".json").read_text())
    return EmbeddingMatrix(values, side["layer_name"], side["model_ref"], tuple(side["sample_ids"]))


def export_csv(emb: EmbeddingMatrix, path: str | Path) -> None:
    n, d = emb.shape
    if d > CSV_MAX_DIM:
        raise EmbeddingError(f"CSV export supports at most {CSV_MAX_DIM} columns, embedding has {d}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"f{j}" for j in range(d)])
        for sid, row in zip(emb.sample_ids, emb.values):
            w.writerow([sid] + [repr(float(v)) for v in row])
