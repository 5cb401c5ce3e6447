"""Training loop, pretext evaluation and checkpoint I/O."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset

from .models import ModelHandle, build_backbone, build_from_spec, build_jigsaw, ArchitectureSpec
from .pretext import ClassificationDataset
from .sonar_data import LabeledDataset, NormalizationStats

logger = logging.getLogger(__name__)

LOSSES = ("categorical-cross-entropy", "mse", "mae")
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_metric", "seconds")


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 128
    loss: str = "categorical-cross-entropy"
    augmentation: bool = True
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-7
    select: str = "final"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.select not in ("final", "best-val"):
            raise ValueError(f"select must be 'final' or 'best-val', got {self.select!r}")
        self.betas = tuple(self.betas)


def default_train_config(task: str, family: str | None = None, **overrides) -> TrainConfig:
    """Optimization recipe per pretext task (Adam, lr 1e-3, batch 128)."""
    if task in ("rotnet", "supervised"):
        base = dict(epochs=220 if family == "mobilenet" else 200, loss="categorical-cross-entropy",
                    augmentation=True)
    elif task == "dae":
        base = dict(epochs=200, loss="mse", augmentation=False)
    elif task == "jigsaw":
        base = dict(epochs=20, loss="categorical-cross-entropy", augmentation=True)
    else:
        raise ValueError(f"unknown task {task!r}")
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epoch)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in zip(self.epoch, self.train_loss, self.val_loss, self.val_metric, self.seconds):
            w.writerow(row)
        return buf.getvalue()


# ---------------------------------------------------------------------------

def _is_classification(cfg: TrainConfig) -> bool:
    return cfg.loss == "categorical-cross-entropy"


def _loss_fn(name: str):
    return {"categorical-cross-entropy": F.cross_entropy, "mse": F.mse_loss, "mae": F.l1_loss}[name]


def _batches(data: Dataset, order, batch_size: int):
    for start in range(0, len(order), batch_size):
        items = [data[int(i)] for i in order[start:start + batch_size]]
        xs, ys = zip(*items)
        x = torch.stack(xs)
        y = torch.stack(ys) if isinstance(ys[0], torch.Tensor) else torch.tensor(ys, dtype=torch.long)
        yield x, y


def _preflight(handle: ModelHandle, data: Dataset, cfg: TrainConfig) -> None:
    x, y = next(_batches(data, [0], 1))
    module = handle.module
    was = module.training
    module.eval()
    try:
        with torch.no_grad():
            out = module(x)
    except Exception as exc:
        raise TrainingError(f"model rejects input of shape {tuple(x.shape)}: {exc}") from exc
    finally:
        module.train(was)
    if _is_classification(cfg):
        n_cls = out.shape[-1]
        max_label = max(int(data[i][1]) for i in range(0, len(data), max(1, len(data) // 64)))
        if out.dim() != 2 or max_label >= n_cls:
            raise TrainingError(f"model has {n_cls} outputs but targets reach label {max_label}")
    elif out.shape != y.shape:
        raise TrainingError(f"reconstruction shape {tuple(out.shape)} != target shape {tuple(y.shape)}")


@torch.no_grad()
def _evaluate(handle: ModelHandle, data: Dataset, cfg: TrainConfig, batch_size: int = 256) -> dict:
    module = handle.module
    was = module.training
    module.eval()
    loss_fn = _loss_fn(cfg.loss)
    total_loss = total_sq = total_abs = 0.0
    correct = n = n_el = 0
    try:
        for x, y in _batches(data, range(len(data)), batch_size):
            out = module(x)
            total_loss += float(loss_fn(out, y, reduction="sum"))
            if _is_classification(cfg):
                correct += int((out.argmax(-1) == y).sum())
            else:
                d = (out - y).double()
                total_sq += float((d ** 2).sum())
                total_abs += float(d.abs().sum())
                n_el += d.numel()
            n += x.shape[0]
    finally:
        module.train(was)
    if _is_classification(cfg):
        return {"loss": total_loss / n, "accuracy": correct / n, "n": n}
    # reduction="sum" for elementwise losses sums over elements
    return {"loss": total_loss / n_el, "mse": total_sq / n_el, "mae": total_abs / n_el, "n": n}


def train_pretext(model: ModelHandle, data: Dataset, cfg: TrainConfig, val: Dataset | None = None,
                  run_dir: str | Path | None = None,
                  loss_hook: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], None] | None = None,
                  log_every: int = 1) -> tuple[ModelHandle, TrainHistory]:
    """Train ``model`` in place on (input, target) pairs with Adam.

    Batches are drawn in a seeded order; datasets exposing ``set_epoch``
    get a fresh augmentation draw per epoch. ``loss_hook(output, target,
    inputs)`` is invoked on every training batch before the update.
    """
    if len(data) == 0:
        raise TrainingError("training data is empty")
    _preflight(model, data, cfg)
    module = model.module
    loss_fn = _loss_fn(cfg.loss)
    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    hist = TrainHistory()
    best_state, best_score = None, -math.inf

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            for ds in (data, val):
                if ds is not None and hasattr(ds, "set_epoch"):
                    ds.set_epoch(epoch)
            module.train()
            gen = torch.Generator().manual_seed(cfg.seed * 100003 + epoch)
            order = torch.randperm(len(data), generator=gen).tolist()
            total, count = 0.0, 0
            for b, (x, y) in enumerate(_batches(data, order, cfg.batch_size)):
                out = module(x)
                loss = loss_fn(out, y)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
                if loss_hook is not None:
                    loss_hook(out, y, x)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * x.shape[0]
                count += x.shape[0]
            if val is not None and len(val):
                ev = _evaluate(model, val, cfg)
                val_loss = ev["loss"]
                val_metric = ev["accuracy"] if _is_classification(cfg) else ev["mae"]
                score = val_metric if _is_classification(cfg) else -val_loss
                if cfg.select == "best-val" and score > best_score:
                    best_score, best_state = score, copy.deepcopy(module.state_dict())
            else:
                val_loss = val_metric = float("nan")
            hist.epoch.append(epoch)
            hist.train_loss.append(total / count)
            hist.val_loss.append(val_loss)
            hist.val_metric.append(val_metric)
            hist.seconds.append(time.perf_counter() - t0)
            if log_every and epoch % log_every == 0:
                logger.info("epoch %d/%d train_loss %.5f val_loss %.5f val_metric %.4f (%.1fs)", epoch,
                            cfg.epochs, hist.train_loss[-1], val_loss, val_metric, hist.seconds[-1])

    if best_state is not None:
        module.load_state_dict(best_state)
    module.eval()
    model.meta["train_config"] = asdict(cfg)
    model.meta["optimizer"] = {"name": "adam", "lr": cfg.lr, "betas": list(cfg.betas), "eps": cfg.eps}
    if run_dir is not None:
        write_run(run_dir, model, hist, cfg)
    return model, hist


def evaluate_pretext(model: ModelHandle, test: Dataset, cfg: TrainConfig | None = None) -> dict:
    """Accuracy for classification tasks; MSE and MAE for reconstruction.

    Runs in inference mode, so an autoencoder's noise layer is inactive and
    reconstruction is scored on clean inputs.
    """
    if len(test) == 0:
        raise TrainingError("test set is empty")
    if cfg is None:
        cfg = TrainConfig(loss="mse" if model.spec.family == "dae" else "categorical-cross-entropy")
    return _evaluate(model, test, cfg)


def train_supervised_control(family: str, w: int | None, ds: LabeledDataset, cfg: TrainConfig,
                             transform=None, val: LabeledDataset | None = None,
                             run_dir: str | Path | None = None, seed: int = 0):
    """Same recipe as pretext training, with the true classes as targets.

    ``family="jigsaw"`` trains the jigsaw tile extractor on whole 96x96
    images through a single-tile decision head.
    """
    n_cls = len(ds.class_names)
    if n_cls < 2:
        raise TrainingError("supervised control needs at least two classes")
    aug = cfg.seed if cfg.augmentation else None
    if family == "jigsaw":
        h, wd = ds[0].pixels.shape
        model = build_jigsaw(n_cls, seed=seed, num_tiles=1, tile_shape=(h, wd, 1))
        train_data = _TileView(ClassificationDataset(ds, transform, aug))
        val_data = _TileView(ClassificationDataset(val, transform, None)) if val is not None else None
    else:
        model = build_backbone(family, w, n_cls, seed=seed)
        train_data = ClassificationDataset(ds, transform, aug)
        val_data = ClassificationDataset(val, transform, None) if val is not None else None
    return train_pretext(model, train_data, cfg, val_data, run_dir)


class _TileView(Dataset):
    """Present single images as a one-tile jigsaw input ``(1, C, H, W)``."""

    def __init__(self, inner):
        self.inner = inner

    def __len__(self):
        return len(self.inner)

    def set_epoch(self, epoch):
        self.inner.set_epoch(epoch)

    def __getitem__(self, i):
        x, y = self.inner[i]
        return x[None], y


# ---------------------------------------------------------------------------
# checkpoints and run directories

def save_checkpoint(model: ModelHandle, path: str | Path) -> None:
    """Zip archive: ``spec.json``, ``spec.sha256``, ``meta.json`` and
    ``params.npz`` holding every parameter and buffer by state-dict name."""
    arrays = {k: v.detach().cpu().numpy() for k, v in model.module.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("spec.json", json.dumps(model.spec.to_dict(), sort_keys=True, indent=1))
        zf.writestr("spec.sha256", model.spec.spec_hash())
        zf.writestr("meta.json", json.dumps(_jsonable(model.meta), sort_keys=True, indent=1))
        zf.writestr("params.npz", buf.getvalue())


def load_checkpoint(path: str | Path, expected_spec: ArchitectureSpec | None = None) -> ModelHandle:
    try:
        with zipfile.ZipFile(path) as zf:
            spec_d = json.loads(zf.read("spec.json"))
            stored_hash = zf.read("spec.sha256").decode().strip()
            meta = json.loads(zf.read("meta.json"))
            params = np.load(io.BytesIO(zf.read("params.npz")))
            arrays = {k: params[k] for k in params.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    spec = ArchitectureSpec.from_dict(spec_d)
    if spec.spec_hash() != stored_hash:
        raise CheckpointError(f"{path}: spec hash mismatch, file is corrupt")
    if expected_spec is not None and expected_spec.spec_hash() != stored_hash:
        raise CheckpointError(f"{path}: holds a {spec.family} network, not the expected {expected_spec.family} spec")
    handle = build_from_spec(spec)
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    try:
        handle.module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the stored spec ({exc})") from exc
    handle.module.eval()
    handle.meta = meta
    return handle


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_run(run_dir: str | Path, model: ModelHandle, hist: TrainHistory, cfg: TrainConfig,
              extra_config: dict | None = None) -> Path:
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    config = {"train": asdict(cfg), "architecture": model.spec.to_dict(), "meta": _jsonable(model.meta)}
    if extra_config:
        config["experiment"] = _jsonable(extra_config)
    (run / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))
    (run / "history.csv").write_text(hist.to_csv())
    save_checkpoint(model, run / "checkpoint.bin")
    return run


def write_metrics(run_dir: str | Path, metrics: dict) -> None:
    Path(run_dir, "metrics.json").write_text(json.dumps(_jsonable(metrics), indent=1, sort_keys=True))


def preprocessing_meta(stats: NormalizationStats, scale: float = 1.0) -> dict:
    return {"pixel_mean": float(stats.pixel_mean), "scale": float(scale)}


def make_transform(pixel_mean: float, scale: float = 1.0):
    """Raw pixels -> model input: ``(x - pixel_mean) * scale``."""
    mean, s = np.float32(pixel_mean), np.float32(scale)

    def transform(x: np.ndarray) -> np.ndarray:
        return (x - mean) * s
    return transform
