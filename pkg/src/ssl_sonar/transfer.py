"""Few-shot linear probe: spc subsampling, linear SVM, repeated trials."""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVC

from .embeddings import EmbeddingMatrix, extract_embeddings
from .models import ModelHandle
from .sonar_data import LabeledDataset

logger = logging.getLogger(__name__)

SPC_GRID = (10, 20, 30, 40, 50, 80, 110, 140, 170, 200)
TRIAL_COLUMNS = ("model_ref", "pretraining", "layer", "spc", "trial", "accuracy")
AGGREGATE_COLUMNS = ("model_ref", "pretraining", "layer", "spc", "mean", "std", "repeats")
BASELINE_LAYER = "NA"


class TransferError(ValueError):
    pass


@dataclass
class ProbeConfig:
    spc_grid: tuple[int, ...] = SPC_GRID
    repeats: int = 10
    svm_C: float = 1.0
    seed_base: int = 0
    standardize: bool = True
    max_iter: int = 20000
    jobs: int = 1

    def __post_init__(self):
        self.spc_grid = tuple(int(s) for s in self.spc_grid)
        if not self.spc_grid or min(self.spc_grid) < 1:
            raise TransferError(f"spc values must be >= 1, got {self.spc_grid}")
        if self.repeats < 1:
            raise TransferError(f"repeats must be >= 1, got {self.repeats}")
        if not self.svm_C > 0:
            raise TransferError(f"svm_C must be positive, got {self.svm_C}")


@dataclass
class TransferResult:
    model_ref: str
    layer_name: str
    spc: int
    accuracies: list[float]
    pretraining: str = ""
    mean_accuracy: float = field(init=False)
    std_accuracy: float = field(init=False)
    single_trial: bool = field(init=False)

    def __post_init__(self):
        acc = np.asarray(self.accuracies, dtype=np.float64)
        if acc.size == 0:
            raise TransferError("a transfer result needs at least one trial")
        if ((acc < 0) | (acc > 100)).any():
            raise TransferError("accuracies must be percentages in [0, 100]")
        self.accuracies = [float(a) for a in acc]
        self.mean_accuracy = float(acc.mean())
        self.single_trial = acc.size == 1
        self.std_accuracy = 0.0 if self.single_trial else float(acc.std(ddof=1))


# ---------------------------------------------------------------------------

def subsample_indices(labels: np.ndarray, spc: int, seed: int) -> np.ndarray:
    """Indices of ``spc`` samples per class, uniform without replacement,
    returned in ascending order."""
    if spc <= 0:
        raise TransferError(f"spc must be positive, got {spc}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picked = []
    for cls in np.unique(labels[labels >= 0]):
        members = np.flatnonzero(labels == cls)
        if len(members) <= spc:
            if len(members) < spc:
                warnings.warn(f"class {cls} has only {len(members)} samples (< spc={spc}); using all of them",
                              stacklevel=2)
            picked.append(members)
        else:
            picked.append(rng.choice(members, size=spc, replace=False))
    return np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)


def subsample_spc(train: LabeledDataset, spc: int, seed: int) -> LabeledDataset:
    return train.subset(subsample_indices(train.labels(), spc, seed).tolist())


class RowSpaceProjection(TransformerMixin, BaseEstimator):
    """Coordinates in an orthonormal basis of the training rows' span.

    An L2-regularized linear SVM's weight vector lies in the span of its
    training samples, and the dual problem only sees their inner products,
    which this map preserves exactly. With far fewer samples than features
    (wide conv activations) fitting in ``n`` instead of ``d`` dimensions
    gives the same classifier at a fraction of the cost. Leaves inputs with
    ``d <= n`` untouched.
    """

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        self.basis_ = np.linalg.qr(X.T)[0] if X.shape[1] > X.shape[0] else None
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X if self.basis_ is None else X @ self.basis_


def fit_linear_svm(X, y, C: float = 1.0, standardize: bool = True, max_iter: int = 20000):
    """One-vs-rest soft-margin linear SVM (hinge loss, L2 penalty).

    With ``standardize`` the features are scaled per dimension by statistics
    of this training fold only.
    """
    X = X.values if isinstance(X, EmbeddingMatrix) else np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise TransferError(f"feature matrix {X.shape} does not match {y.shape[0]} labels")
    if not np.isfinite(X).all():
        raise TransferError("non-finite features")
    if len(np.unique(y)) < 2:
        raise TransferError("SVM fitting needs at least two classes")
    svm = LinearSVC(C=C, loss="hinge", dual=True, max_iter=max_iter, random_state=0)
    steps = [StandardScaler()] if standardize else []
    clf = make_pipeline(*steps, RowSpaceProjection(), svm)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(X, y)
    return clf


def _accuracy(clf, X, y) -> float:
    return 100.0 * float(np.mean(clf.predict(X) == y))


def probe_embeddings(train_X: np.ndarray, train_y: np.ndarray, test_X: np.ndarray, test_y: np.ndarray,
                     cfg: ProbeConfig, model_ref: str, layer: str, pretraining: str = "") -> list[TransferResult]:
    """Run the repeated-trial protocol on precomputed features.

    Only rows picked by the subsample ever reach the SVM; the test matrix is
    used in full for scoring.
    """
    if len(test_y) == 0:
        raise TransferError("test set is empty")

    def trial(spc: int, t: int) -> float:
        idx = subsample_indices(train_y, spc, cfg.seed_base + t)
        clf = fit_linear_svm(train_X[idx], train_y[idx], cfg.svm_C, cfg.standardize, cfg.max_iter)
        return _accuracy(clf, test_X, test_y)

    jobs = [(spc, t) for spc in cfg.spc_grid for t in range(cfg.repeats)]
    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            accs = list(pool.map(lambda j: trial(*j), jobs))
    else:
        accs = [trial(*j) for j in jobs]
    out = []
    for i, spc in enumerate(cfg.spc_grid):
        r = TransferResult(model_ref, layer, spc, accs[i * cfg.repeats:(i + 1) * cfg.repeats], pretraining)
        if r.single_trial:
            logger.warning("spc=%d: single trial, std reported as 0", spc)
        out.append(r)
    return out


def evaluate_transfer(model: ModelHandle, layer: str, train: LabeledDataset, test: LabeledDataset,
                      cfg: ProbeConfig, model_ref: str | None = None, pretraining: str = "",
                      batch_size: int = 64) -> list[TransferResult]:
    """Embed both sets once, then probe every spc in ``cfg.spc_grid``."""
    tr = extract_embeddings(model, layer, train, batch_size, model_ref)
    te = extract_embeddings(model, layer, test, batch_size, model_ref)
    return probe_embeddings(tr.values, train.labels(), te.values, test.labels(), cfg, tr.model_ref, layer,
                            pretraining or model.meta.get("pretraining", ""))


def raw_pixel_features(ds: LabeledDataset, pixel_mean: float = 0.0) -> np.ndarray:
    return (ds.stack() - np.float32(pixel_mean)).reshape(len(ds), -1)


def baseline_raw_svm(train: LabeledDataset, test: LabeledDataset, cfg: ProbeConfig,
                     pixel_mean: float = 0.0) -> list[TransferResult]:
    """Same protocol with mean-subtracted raw pixels as features."""
    return probe_embeddings(raw_pixel_features(train, pixel_mean), train.labels(),
                            raw_pixel_features(test, pixel_mean), test.labels(), cfg,
                            "baseline:raw", BASELINE_LAYER, "none")


@dataclass(frozen=True)
class BaselineDiff:
    model_ref: str
    layer_name: str
    spc: int
    accuracy: float
    baseline: float

    @property
    def difference(self) -> float:
        return round(self.accuracy - self.baseline, 10)


def compare_to_baseline(results: Sequence[TransferResult], baseline: Sequence[TransferResult]) -> list[BaselineDiff]:
    base = {b.spc: b.mean_accuracy for b in baseline}
    out = []
    for r in results:
        if r.spc not in base:
            raise TransferError(f"no baseline at spc={r.spc}; baseline has {sorted(base)}")
        out.append(BaselineDiff(r.model_ref, r.layer_name, r.spc, r.mean_accuracy, base[r.spc]))
    return out


def best_per_model(results: Sequence[TransferResult], spc: int) -> list[TransferResult]:
    """Highest-mean layer per model_ref at one spc."""
    best: dict[str, TransferResult] = {}
    for r in results:
        if r.spc == spc and (r.model_ref not in best or r.mean_accuracy > best[r.model_ref].mean_accuracy):
            best[r.model_ref] = r
    return list(best.values())


# ---------------------------------------------------------------------------
# CSV and Markdown

def write_trials_csv(results: Sequence[TransferResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_COLUMNS)
        for r in results:
            for t, a in enumerate(r.accuracies):
                w.writerow([r.model_ref, r.pretraining, r.layer_name, r.spc, t, repr(a)])


def write_aggregate_csv(results: Sequence[TransferResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_COLUMNS)
        for r in results:
            w.writerow([r.model_ref, r.pretraining, r.layer_name, r.spc, repr(r.mean_accuracy),
                        repr(r.std_accuracy), len(r.accuracies)])


def read_trials_csv(path: str | Path) -> list[TransferResult]:
    """Rebuild results from a trials CSV, keeping first-seen group order."""
    groups: dict[tuple, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRIAL_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise TransferError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            key = (row["model_ref"], row["pretraining"], row["layer"], int(row["spc"]))
            groups.setdefault(key, []).append((int(row["trial"]), float(row["accuracy"])))
    out = []
    for (ref, pre, layer, spc), trials in groups.items():
        out.append(TransferResult(ref, layer, spc, [a for _, a in sorted(trials)], pre))
    return out


def comparison_markdown(diffs: Sequence[BaselineDiff]) -> str:
    lines = ["| Model | Layer | spc | Accuracy (%) | Baseline (%) | Difference to Baseline |",
             "|---|---|---:|---:|---:|---:|"]
    for d in diffs:
        lines.append(f"| {d.model_ref} | {d.layer_name} | {d.spc} | {d.accuracy:.2f} | {d.baseline:.2f} "
                     f"| {d.difference:+.2f} |")
    return "\n".join(lines) + "\n"


def write_comparison_csv(diffs: Sequence[BaselineDiff], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_ref", "layer", "spc", "accuracy", "baseline", "difference"])
        for d in diffs:
            w.writerow([d.model_ref, d.layer_name, d.spc, f"{d.accuracy:.4f}", f"{d.baseline:.4f}",
                        f"{d.difference:+.4f}"])
