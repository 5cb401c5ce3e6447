"""Pipelines tying data, pretext tasks, training and probing together."""

from __future__ import annotations

import json
import logging
import math
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import yaml

from .config import ExperimentConfig, load_config
from .embeddings import EmbeddingError
from .models import (DEFAULT_PROBE_LAYERS, CODE_SIZES, DEFAULT_WIDTHS, ROTNET_FAMILIES, build_backbone,
                     build_dae, build_jigsaw)
from .pretext import (PERMUTATION_COUNTS, NOISE_SIGMAS, ClassificationDataset, make_denoising_dataset,
                      make_jigsaw_dataset, make_rotation_dataset, sample_permutations)
from .pretrain import (_TileView, evaluate_pretext, load_checkpoint, make_transform,
                       preprocessing_meta, train_pretext, write_metrics, write_run)
from .sonar_data import (LabeledDataset, NormalizationStats, apply_split_manifest, compute_pixel_mean, load_dataset,
                         read_split_manifest, save_dataset, split_dataset, write_split_manifest)
from .transfer import (SPC_GRID, ProbeConfig, TransferResult, baseline_raw_svm, compare_to_baseline, comparison_markdown,
                       evaluate_transfer, best_per_model, write_aggregate_csv, write_comparison_csv,
                       write_trials_csv)

logger = logging.getLogger(__name__)

DAE_SCALE = 1.0 / 255.0


def model_ref_for(cfg: ExperimentConfig) -> tuple[str, str]:
    """``(model_ref, pretraining)``; model_ref is ``group:variant``."""
    if cfg.task == "dae":
        return f"dae:c{cfg.c}_s{cfg.sigma:g}", "ssl"
    if cfg.task == "jigsaw":
        return f"jigsaw:P{cfg.P}", "ssl"
    if cfg.task == "supervised":
        return ("jigsaw:sl" if cfg.family == "jigsaw" else f"{cfg.family}:sl"), "sl"
    return f"{cfg.family}:ssl", "ssl"


def load_splits(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    ds = load_dataset(cfg.data_root, cfg.strict_grayscale)
    if cfg.split_manifest is not None:
        return apply_split_manifest(ds, read_split_manifest(cfg.split_manifest))
    return split_dataset(ds, cfg.fractions, cfg.split_seed)


def run_pretrain(cfg: ExperimentConfig) -> Path:
    """Train one configured model; returns its run directory."""
    train, val, test = load_splits(cfg)
    if len(train) == 0:
        raise ValueError("training split is empty")
    run = Path(cfg.output_dir) / cfg.run_id
    run.mkdir(parents=True, exist_ok=True)
    write_split_manifest(run / "split.tsv", (train, val, test))
    stats = NormalizationStats(cfg.mean_override) if cfg.mean_override is not None else compute_pixel_mean(train)
    tcfg = cfg.train
    aug = tcfg.seed if tcfg.augmentation else None
    scale = DAE_SCALE if cfg.task == "dae" else 1.0
    tf = make_transform(stats.pixel_mean, scale)
    extra = {}

    if cfg.task == "rotnet":
        model = build_backbone(cfg.family, cfg.w, 4, seed=cfg.seed)
        data, v, t = (make_rotation_dataset(train, tf, aug), make_rotation_dataset(val, tf),
                      make_rotation_dataset(test, tf))
    elif cfg.task == "dae":
        model = build_dae(cfg.c, cfg.sigma, seed=cfg.seed)
        data, v, t = (make_denoising_dataset(train, tf), make_denoising_dataset(val, tf),
                      make_denoising_dataset(test, tf))
    elif cfg.task == "jigsaw":
        perms = sample_permutations(cfg.P, cfg.seed)
        (run / "permutations.json").write_text(perms.to_json())
        extra["permutations"] = [list(p) for p in perms.permutations]
        model = build_jigsaw(cfg.P, seed=cfg.seed)
        data, v, t = (make_jigsaw_dataset(train, perms, tf, aug), make_jigsaw_dataset(val, perms, tf),
                      make_jigsaw_dataset(test, perms, tf))
    else:
        n_cls = len(train.class_names)
        if cfg.family == "jigsaw":
            model = build_jigsaw(n_cls, seed=cfg.seed, num_tiles=1, tile_shape=(96, 96, 1))
            wrap = _TileView
        else:
            model = build_backbone(cfg.family, cfg.w, n_cls, seed=cfg.seed)
            wrap = lambda d: d  # noqa: E731
        data = wrap(ClassificationDataset(train, tf, aug))
        v, t = wrap(ClassificationDataset(val, tf)), wrap(ClassificationDataset(test, tf))

    ref, pretraining = model_ref_for(cfg)
    model.meta.update({"preprocessing": preprocessing_meta(stats, scale), "task": cfg.task, "model_ref": ref,
                       "pretraining": pretraining, "run_id": cfg.run_id, **extra})
    model, hist = train_pretext(model, data, tcfg, v if len(v) else None)
    write_run(run, model, hist, tcfg, cfg.resolved())
    held_out = t if len(t) else v
    metrics = {"run_id": cfg.run_id, "task": cfg.task, "model_ref": ref, "pretraining": pretraining,
               "family": model.spec.family, "param_count": model.param_count,
               "split_sizes": [len(train), len(val), len(test)], "pretext_samples": len(data),
               "final_train_loss": hist.train_loss[-1], "epochs": len(hist)}
    if len(held_out):
        metrics["test"] = evaluate_pretext(model, held_out, tcfg)
    write_metrics(run, metrics)
    logger.info("run %s finished: %s", cfg.run_id, metrics.get("test"))
    return run


def probe_layers(model_family: str, layers: Sequence[str] | None) -> list[str]:
    return list(layers) if layers else list(DEFAULT_PROBE_LAYERS.get(model_family, ()))


def run_probe(checkpoint: str | Path, train: LabeledDataset, test: LabeledDataset, probe: ProbeConfig,
              layers: Sequence[str] | None = None) -> list[TransferResult]:
    model = load_checkpoint(checkpoint)
    out = []
    for layer in probe_layers(model.spec.family, layers):
        if layer not in model.layer_names:
            raise EmbeddingError(f"unknown layer {layer!r}; valid layers: {', '.join(model.layer_names)}")
        out.extend(evaluate_transfer(model, layer, train, test, probe))
    return out


def write_results(results_dir: str | Path, results: Sequence[TransferResult],
                  baseline: Sequence[TransferResult] = ()) -> Path:
    d = Path(results_dir)
    d.mkdir(parents=True, exist_ok=True)
    allr = list(results) + list(baseline)
    write_trials_csv(allr, d / "trials.csv")
    write_aggregate_csv(allr, d / "aggregate.csv")
    if baseline and results:
        spcs = {b.spc for b in baseline}
        diffs = compare_to_baseline([r for spc in sorted(spcs) for r in best_per_model(results, spc)], baseline)
        (d / "comparison.md").write_text(comparison_markdown(diffs))
        write_comparison_csv(diffs, d / "comparison.csv")
    return d


# ---------------------------------------------------------------------------
# full grid

def scaled_grid(scale: float) -> dict:
    """Experiment grid; ``scale < 1`` shrinks epochs, widths and sweeps."""
    if not 0 < scale <= 1:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    full = scale >= 1
    widths = {f: (w if full else max(4, 2 * round(w * scale / 2))) for f, w in DEFAULT_WIDTHS.items()}
    return {
        "widths": widths,
        "sigmas": NOISE_SIGMAS if full else (0.125,),
        "codes": CODE_SIZES if full else (128,),
        "perms": PERMUTATION_COUNTS if full else (5, 10),
        "epoch_scale": scale,
        "repeats": 10 if full else max(3, round(10 * scale)),
    }


def grid_configs(data_root: Path, out: Path, scale: float = 1.0, seed: int = 0) -> list[dict]:
    g = scaled_grid(scale)
    runs_dir = str(out / "runs")

    def epochs(task, family=None):
        from .pretrain import default_train_config
        return max(1, math.ceil(default_train_config(task, family).epochs * g["epoch_scale"]))

    base = {"data": {"root": str(data_root), "split_seed": seed}, "output_dir": runs_dir, "seed": seed}
    cfgs = []
    for fam in ROTNET_FAMILIES:
        w = g["widths"][fam]
        cfgs.append({**base, "task": "rotnet", "family": fam, "w": w, "train": {"epochs": epochs("rotnet", fam)}})
        cfgs.append({**base, "task": "supervised", "family": fam, "w": w,
                     "train": {"epochs": epochs("supervised", fam)}})
    for s in g["sigmas"]:
        for c in g["codes"]:
            cfgs.append({**base, "task": "dae", "c": c, "sigma": s, "train": {"epochs": epochs("dae")}})
    for P in g["perms"]:
        cfgs.append({**base, "task": "jigsaw", "P": P, "train": {"epochs": epochs("jigsaw")}})
    cfgs.append({**base, "task": "supervised", "family": "jigsaw", "train": {"epochs": epochs("jigsaw")}})
    return cfgs


def make_synthetic_corpora(root: Path, scale: float = 1.0, seed: int = 0) -> tuple[Path, Path]:
    from .synthetic import make_shape_dataset
    per = max(12, round(240 * scale))
    wt, tt = root / "watertank", root / "turntable"
    if not wt.is_dir():
        save_dataset(make_shape_dataset(per, 11, seed), wt)
    if not tt.is_dir():
        save_dataset(make_shape_dataset(per, 12, seed + 1), tt)
    return wt, tt


def _pretrain_subprocess(cfg_path: Path) -> None:
    subprocess.run([sys.executable, "-m", "ssl_sonar.cli", "pretrain", "--config", str(cfg_path)], check=True)


def reproduce(out: str | Path, data_root: str | Path | None = None, scale: float = 1.0, jobs: int = 1,
              synthetic: bool = False, seed: int = 0, spc_grid: Sequence[int] | None = None) -> Path:
    """Pretrain the whole grid on the object corpus, probe every run on the
    transfer corpus, add the raw-pixel baseline and render the report."""
    from .report import render_report
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if synthetic:
        wt, tt = make_synthetic_corpora(out / "data", scale, seed)
    else:
        if data_root is None:
            raise ValueError("a dataset root is required unless synthetic data is requested")
        wt, tt = Path(data_root) / "watertank", Path(data_root) / "turntable"
        for p in (wt, tt):
            if not p.is_dir():
                raise FileNotFoundError(f"expected dataset directory {p}")

    cfg_dir = out / "configs"
    cfg_dir.mkdir(exist_ok=True)
    paths = []
    for raw in grid_configs(wt, out, scale, seed):
        cfg = load_config_from_dict(raw)
        p = cfg_dir / f"{cfg.run_id}.yaml"
        p.write_text(yaml.safe_dump(raw, sort_keys=True))
        paths.append(p)
    todo = [p for p in paths if not (out / "runs" / p.stem / "metrics.json").is_file()]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            list(pool.map(_pretrain_subprocess, todo))
    else:
        for p in todo:
            run_pretrain(load_config(p))

    g = scaled_grid(scale)
    probe = ProbeConfig(spc_grid=tuple(spc_grid or SPC_GRID), repeats=g["repeats"], seed_base=seed, jobs=jobs)
    tds = load_dataset(tt)
    t_train, _, t_test = split_dataset(tds, (0.70, 0.15, 0.15), seed)
    write_split_manifest(out / "turntable_split.tsv", split_dataset(tds, (0.70, 0.15, 0.15), seed))
    results = []
    for p in paths:
        results.extend(run_probe(out / "runs" / p.stem / "checkpoint.bin", t_train, t_test, probe))
    baseline = baseline_raw_svm(t_train, t_test, probe, compute_pixel_mean(t_train).pixel_mean)
    write_results(out / "results", results, baseline)
    render_report([out / "results", out / "runs"], out / "report", spcs=(max(probe.spc_grid),))
    summary = {"scale": scale, "synthetic": synthetic, "runs": [p.stem for p in paths],
               "probe": {"repeats": probe.repeats, "spc_grid": list(probe.spc_grid)}}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return out


def load_config_from_dict(raw: dict) -> ExperimentConfig:
    from .config import validate_config
    return validate_config(raw, ".", check_paths=True)
