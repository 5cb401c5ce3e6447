"""Acceptance suite: one test per criterion, each recording a verdict line.

Criteria 1-7 are property checks that need no training. Criteria 8-11 need
the public object and turntable corpora: point ``SSL_SONAR_REPRO_DIR`` at a
finished ``ssl-sonar reproduce-paper`` output directory, or point
``SSL_SONAR_DATA`` at a root holding ``watertank/`` and ``turntable/`` to run
the grid here (``SSL_SONAR_SCALE`` shrinks it). Without either they report
NOT RUN and skip.
"""

import json
import math
import os
import statistics
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, WATERTANK_COUNTS
from ssl_sonar.models import (CODE_SIZES, DEFAULT_WIDTHS, ROTNET_FAMILIES, build_backbone, build_dae,
                              build_jigsaw, rebind_extractor_input, run_to_layer)
from ssl_sonar.models.base import GaussianNoise
from ssl_sonar.pretext import (PERMUTATION_COUNTS, NOISE_SIGMAS, make_jigsaw_dataset, make_rotation_dataset,
                               rotate, sample_permutations, shuffle_patches, unshuffle_patches)
from ssl_sonar.pretrain import TrainConfig, evaluate_pretext, make_transform, train_pretext
from ssl_sonar.sonar_data import (LabeledDataset, SonarImage, compute_pixel_mean, extract_wild_patches,
                                  split_dataset)
from ssl_sonar.synthetic import make_seabed_textures, make_shape_dataset
from ssl_sonar.transfer import (ProbeConfig, TransferResult, evaluate_transfer, fit_linear_svm, read_trials_csv,
                                subsample_indices)
from test_models import _grad_check
from test_transfer import XOR_X, XOR_Y, _xor_linear_oracle


def _verdict(n, title: str, failures: list[str], detail: str = "") -> None:
    status = "PASS" if not failures else "FAIL"
    line = f"[{status}] criterion {n}: {title}" + (f" ({detail})" if detail else "")
    if failures:
        line += " -- " + "; ".join(failures)
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert not failures, line


def _not_run(n, title: str, why: str) -> None:
    line = f"[NOT RUN] criterion {n}: {title} -- {why}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    pytest.skip(why)


# ---------------------------------------------------------------------------
# property suite

def test_criterion_01_data_expansion():
    failures = []
    shared = np.zeros((96, 96), np.float32)
    imgs = tuple(SonarImage(shared, c, f"{c}/{i:05d}.png") for c, n in WATERTANK_COUNTS.items() for i in range(n))
    ds = LabeledDataset(imgs, tuple(sorted(WATERTANK_COUNTS)))
    train, val, test = split_dataset(ds, (0.70, 0.15, 0.15), 0)
    sizes = (len(train), len(val), len(test))
    if sizes != (1838, 394, 395):
        failures.append(f"split sizes {sizes}")
    for part in (train, val, test):
        if len(make_rotation_dataset(part)) != 4 * len(part):
            failures.append(f"rotation size for {part.split_tag}")
    expected = {5: 1975, 10: 3950, 15: 5925, 20: 7900}
    got = {P: len(make_jigsaw_dataset(test, sample_permutations(P, 0))) for P in PERMUTATION_COUNTS}
    if got != expected:
        failures.append(f"jigsaw sizes {got}")
    _verdict(1, "data-expansion exactness", failures, f"splits {sizes}, jigsaw {got}")


def test_criterion_02_rotation_group():
    rng = np.random.default_rng(2)
    failures = []
    for i in range(100):
        x = SonarImage(rng.integers(0, 256, (96, 96)).astype(np.float32), None, f"r{i}")
        rots = [rotate(x, k) for k in range(4)]
        four = x
        for _ in range(4):
            four = rotate(four, 1)
        if four.pixels.tobytes() != x.pixels.tobytes():
            failures.append(f"image {i}: four quarter turns are not the identity")
        for k in range(4):
            for j in range(4):
                if rotate(rots[k], j).pixels.tobytes() != rots[(k + j) % 4].pixels.tobytes():
                    failures.append(f"image {i}: rot{k} then rot{j} != rot{(k + j) % 4}")
            if not np.array_equal(np.sort(rots[k].pixels, axis=None), np.sort(x.pixels, axis=None)):
                failures.append(f"image {i}: pixel multiset changed by rot{k}")
    _verdict(2, "rotation group", failures[:5], "100 images, all 16 compositions")


def test_criterion_03_jigsaw_inverse():
    rng = np.random.default_rng(3)
    failures = []
    for i in range(1000):
        x = rng.integers(0, 256, (96, 96)).astype(np.float32)
        p = tuple(int(v) for v in rng.permutation(9))
        if unshuffle_patches(shuffle_patches(x, p), p).tobytes() != x.tobytes():
            failures.append(f"pair {i} perm {p}")
    for P in PERMUTATION_COUNTS + (100, 1000):
        for seed in range(5):
            ps = sample_permutations(P, seed)
            if len(set(ps.permutations)) != P:
                failures.append(f"P={P} seed={seed} has repeats")
    _verdict(3, "jigsaw inverse and distinct permutations", failures[:5], "1000 pairs")


def test_criterion_04_noise_statistics():
    failures, parts = [], []
    torch.manual_seed(4)
    for sigma in NOISE_SIGMAS:
        layer = GaussianNoise(sigma).train()
        d = layer(torch.zeros(8, 1, 96, 96)).double()
        n = d.numel()
        sd, mean = float(d.std()), float(d.mean())
        parts.append(f"s={sigma}: std {sd:.4f}")
        if not 0.9 * sigma <= sd <= 1.1 * sigma:
            failures.append(f"sigma {sigma}: std {sd}")
        if abs(mean) > 5 * sigma / math.sqrt(n):
            failures.append(f"sigma {sigma}: mean {mean}")
    _verdict(4, "noise statistics", failures, ", ".join(parts))


def test_criterion_05_shapes_and_sharing():
    failures = []
    x = torch.randn(2, 1, 96, 96, generator=torch.Generator().manual_seed(5))
    counts = {}
    for fam in ROTNET_FAMILIES:
        for k in (4, 11):
            m = build_backbone(fam, DEFAULT_WIDTHS[fam], k)
            m.module.eval()
            with torch.no_grad():
                if m(x).shape != (2, k):
                    failures.append(f"{fam} arity {k}")
        counts[fam] = m.param_count
    j = build_jigsaw(10)
    j.module.eval()
    tiles = torch.randn(3, 9, 1, 32, 32)
    perm = torch.tensor([8, 0, 3, 5, 1, 7, 2, 6, 4])
    with torch.no_grad():
        if not torch.equal(j.module.tile_features(tiles[:, perm]), j.module.tile_features(tiles)[:, perm]):
            failures.append("jigsaw tile equivariance")
    for c in CODE_SIZES:
        d = build_dae(c)
        d.module.eval()
        with torch.no_grad():
            if run_to_layer(d.module, d.layer("encoder_code"), x).shape != (2, c):
                failures.append(f"dae code {c}")
    ext = rebind_extractor_input(build_jigsaw(5), (32, 32, 1)).param_count
    dae = build_dae(128).param_count
    anchors = [("jigsaw extractor", ext, 6e3), ("dae c=128", dae, 2e5)]
    anchors += [(fam, counts[fam], 1e6) for fam in ("resnet20", "mobilenet", "densenet121", "squeezenet")]
    for name, n, a in anchors:
        if not a / 2 <= n <= 2 * a:
            failures.append(f"{name} has {n} parameters, anchor {a:g}")
    detail = ", ".join(f"{name} {n}" for name, n, _ in anchors) + f"; minixception {counts['minixception']} (no anchor)"
    _verdict(5, "model shapes, sharing and parameter anchors", failures, detail)


def test_criterion_06_gradient_check():
    failures, parts = [], []
    torch.manual_seed(6)
    cases = [(fam, build_backbone(fam, 8, 4), torch.randn(1, 1, 32, 32)) for fam in ROTNET_FAMILIES]
    cases += [("dae", build_dae(8, 0.1), torch.randn(1, 1, 96, 96)),
              ("jigsaw", build_jigsaw(5), torch.randn(1, 9, 1, 32, 32))]
    for name, m, x in cases:
        err = _grad_check(m, x)
        parts.append(f"{name} {err:.1e}")
        if err > 1e-3:
            failures.append(f"{name} rel err {err}")
    _verdict(6, "finite-difference gradient check", failures, ", ".join(parts))


def test_criterion_07_probe_protocol():
    failures = []
    rng = np.random.default_rng(7)
    for trial in range(200):
        k = int(rng.integers(2, 12))
        sizes = rng.integers(1, 60, k)
        spc = int(rng.integers(1, 60))
        labels = rng.permutation(np.concatenate([np.full(n, c) for c, n in enumerate(sizes)]))
        if spc > sizes.min():
            continue  # short classes warn and are covered by the unit tests
        idx = subsample_indices(labels, spc, trial)
        hist = np.bincount(labels[idx], minlength=k)
        if not (hist == spc).all() or len(set(idx.tolist())) != len(idx):
            failures.append(f"trial {trial}: histogram {hist.tolist()} for spc {spc}")
    for _ in range(200):
        accs = list(rng.uniform(0, 100, int(rng.integers(1, 15))))
        r = TransferResult("m", "l", 10, accs)
        sd = 0.0 if len(accs) == 1 else statistics.stdev(accs)
        if abs(r.mean_accuracy - statistics.fmean(accs)) > 1e-9 or abs(r.std_accuracy - sd) > 1e-9:
            failures.append(f"aggregate mismatch on {accs}")
    oracle = _xor_linear_oracle()
    best = max(np.mean(fit_linear_svm(XOR_X, XOR_Y, C, standardize=s).predict(XOR_X) == XOR_Y)
               for C in (0.01, 1.0, 100.0) for s in (True, False))
    if oracle != 0.75 or best > oracle:
        failures.append(f"xor: svm {best}, oracle {oracle}")
    _verdict(7, "probe protocol", failures[:5], f"xor svm {100 * best:.0f}% <= {100 * oracle:.0f}%")


# ---------------------------------------------------------------------------
# reproduction suite

@pytest.fixture(scope="module")
def reproduction():
    done = os.environ.get("SSL_SONAR_REPRO_DIR")
    if done:
        root = Path(done)
    elif os.environ.get("SSL_SONAR_DATA"):
        from ssl_sonar.experiments import reproduce
        out = Path(os.environ.get("SSL_SONAR_RUNS", "runs")) / "reproduction"
        root = reproduce(out, os.environ["SSL_SONAR_DATA"], float(os.environ.get("SSL_SONAR_SCALE", "1.0")))
    else:
        return None
    metrics = [json.loads(p.read_text()) for p in sorted((root / "runs").glob("*/metrics.json"))]
    results = read_trials_csv(root / "results" / "trials.csv")
    return {"root": root, "metrics": {m["model_ref"]: m for m in metrics}, "results": results}


NO_DATA = "object/turntable corpora unavailable; set SSL_SONAR_REPRO_DIR or SSL_SONAR_DATA"


def _best(results, spc, pred):
    rs = [r for r in results if r.spc == spc and pred(r)]
    return max(rs, key=lambda r: r.mean_accuracy) if rs else None


def _rotnet_ssl(r):
    return r.pretraining == "ssl" and r.model_ref.split(":")[0] in ROTNET_FAMILIES


@pytest.mark.reproduction
def test_criterion_08_pretext_metrics(reproduction):
    title = "pretext metrics (rotation >= 94%, jigsaw P=5 >= 94%, DAE MSE <= 0.04)"
    if reproduction is None:
        _not_run(8, title, NO_DATA)
    m = reproduction["metrics"]
    failures, parts = [], []
    for ref, key, ok in (("resnet20:ssl", "accuracy", lambda v: v >= 0.94),
                         ("jigsaw:P5", "accuracy", lambda v: v >= 0.94),
                         ("dae:c128_s0.125", "mse", lambda v: v <= 0.04)):
        v = m.get(ref, {}).get("test", {}).get(key)
        parts.append(f"{ref} {key}={v}")
        if v is None or not ok(v):
            failures.append(f"{ref} {key}={v}")
    _verdict(8, title, failures, ", ".join(parts))


@pytest.mark.reproduction
def test_criterion_09_transfer_at_200(reproduction):
    title = "transfer at 200 spc"
    if reproduction is None:
        _not_run(9, title, NO_DATA)
    res = reproduction["results"]
    failures = []
    rot = _best(res, 200, lambda r: r.model_ref == "resnet20:ssl")
    jig = _best(res, 200, lambda r: r.model_ref == "jigsaw:P10" and r.layer_name == "dropout_1")
    base = _best(res, 200, lambda r: r.pretraining == "none")
    if rot is None or rot.mean_accuracy < 94.5:
        failures.append(f"resnet20 ssl best {rot and rot.mean_accuracy}")
    if jig is None or jig.mean_accuracy < 94.5:
        failures.append(f"jigsaw P10 dropout_1 {jig and jig.mean_accuracy}")
    if base is None or abs(base.mean_accuracy - 95.67) > 2.5:
        failures.append(f"baseline {base and base.mean_accuracy}")
    detail = ", ".join(f"{r.model_ref}/{r.layer_name} {r.mean_accuracy:.2f}" for r in (rot, jig, base) if r)
    _verdict(9, title, failures, detail)


@pytest.mark.reproduction
def test_criterion_10_orderings(reproduction):
    title = "orderings: DAE below Jigsaw and RotNet, SSL-vs-SL gap <= 2.5 pts"
    if reproduction is None:
        _not_run(10, title, NO_DATA)
    res = reproduction["results"]
    dae = _best(res, 200, lambda r: r.model_ref.startswith("dae:"))
    jig = _best(res, 200, lambda r: r.model_ref.startswith("jigsaw:P"))
    jig_sl = _best(res, 200, lambda r: r.model_ref == "jigsaw:sl")
    rot = _best(res, 200, _rotnet_ssl)
    rot_sl = _best(res, 200, lambda r: r.pretraining == "sl" and r.model_ref.split(":")[0] in ROTNET_FAMILIES)
    failures = []
    if None in (dae, jig, jig_sl, rot, rot_sl):
        failures.append("missing model groups at 200 spc")
    else:
        if not dae.mean_accuracy < jig.mean_accuracy:
            failures.append(f"DAE {dae.mean_accuracy:.2f} !< Jigsaw {jig.mean_accuracy:.2f}")
        if not dae.mean_accuracy < rot.mean_accuracy:
            failures.append(f"DAE {dae.mean_accuracy:.2f} !< RotNet {rot.mean_accuracy:.2f}")
        for name, ssl, sl in (("RotNet", rot, rot_sl), ("Jigsaw", jig, jig_sl)):
            if abs(sl.mean_accuracy - ssl.mean_accuracy) > 2.5:
                failures.append(f"{name} gap {sl.mean_accuracy - ssl.mean_accuracy:.2f}")
    _verdict(10, title, failures)


@pytest.mark.reproduction
def test_criterion_11_low_shot_variance(reproduction):
    title = "std at 10 spc exceeds std at 200 spc"
    if reproduction is None:
        _not_run(11, title, NO_DATA)
    by_key = {}
    for r in reproduction["results"]:
        by_key.setdefault((r.model_ref, r.layer_name), {})[r.spc] = r
    failures = []
    for key, rs in sorted(by_key.items()):
        if 10 in rs and 200 in rs and not rs[10].std_accuracy > rs[200].std_accuracy:
            failures.append(f"{key}: {rs[10].std_accuracy:.2f} <= {rs[200].std_accuracy:.2f}")
    _verdict(11, title, failures[:10], f"{len(by_key)} (model, layer) pairs")


# ---------------------------------------------------------------------------
# wild-pretraining substitute

@pytest.mark.slow
def test_wild_smoke_pipeline():
    title = "wild substitute: seabed patches -> RotNet -> probe"
    failures = []
    patches = extract_wild_patches(make_seabed_textures(4, (384, 384), seed=8), (96, 96), 400, seed=8)
    n_train = int(0.8 * len(patches))
    train, test = patches.subset(range(n_train)), patches.subset(range(n_train, len(patches)))
    tf = make_transform(compute_pixel_mean(train).pixel_mean)
    model = build_backbone("resnet20", 8, 4, seed=8)
    cfg = TrainConfig(epochs=3, batch_size=64, seed=8)
    model, hist = train_pretext(model, make_rotation_dataset(train, tf, augment_seed=8), cfg, log_every=0)
    model.meta["preprocessing"] = {"pixel_mean": compute_pixel_mean(train).pixel_mean, "scale": 1.0}
    acc = evaluate_pretext(model, make_rotation_dataset(test, tf))["accuracy"]
    if len(hist) != 3 or not all(np.isfinite(hist.train_loss)):
        failures.append("training did not complete")
    if abs(acc - 0.25) > 0.15:
        failures.append(f"rotation accuracy {acc:.3f} not near chance")
    obj_train, obj_test = make_shape_dataset(10, 4, seed=9), make_shape_dataset(5, 4, seed=10)
    res = evaluate_transfer(model, "flatten", obj_train, obj_test, ProbeConfig((2, 5), repeats=2), "resnet20:wild")
    if [r.spc for r in res] != [2, 5] or not all(0 <= a <= 100 for r in res for a in r.accuracies):
        failures.append("probe did not complete")
    _verdict("W", title, failures, f"held-out rotation accuracy {100 * acc:.1f}%, "
             f"probe {', '.join(f'{r.spc} spc {r.mean_accuracy:.1f}%' for r in res)}")
