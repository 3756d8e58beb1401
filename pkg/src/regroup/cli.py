"""Operator surface: train fixture models, build ensembles, calibrate k,
generate attacks, evaluate, and report.

Every subcommand accepts --config CONFIG.json supplying defaults for its
flags; explicit flags win. One global seed drives all stochastic stages
through derived per-sample streams. Exit codes: 0 success, 2 validation
error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import attacks, core, dataio, engine
from .errors import FormatError, ValidationError


# ---------------------------------------------------------------------------
# shared plumbing


def parse_eps(text) -> float:
    """Budget convention: plain integers are on the /255 scale (so "16" means
    16/255), fractional values are already on [0,1]."""
    s = str(text).strip()
    try:
        if "." not in s and "e" not in s.lower():
            value = int(s) / 255.0
        else:
            value = float(s)
    except ValueError:
        raise ValidationError(f"cannot parse epsilon {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"epsilon {value} outside [0,1]")
    return value


def eps_display(eps: float) -> str:
    return f"{eps:.6f} ({eps * 255:.2f}/255)"


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as f:
            loaded = json.load(f)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _require(resolved: dict, *keys):
    missing = [k for k in keys if resolved.get(k) is None]
    if missing:
        raise ValidationError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _load_dataset(images, labels, provenance) -> dataio.LabeledDataset:
    return dataio.load_mnist(images, labels, provenance)


def _ordered_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _correct_indices(model, ds) -> np.ndarray:
    """Indices of samples the softmax classifies correctly, dataset order."""
    preds = []
    for s in range(0, len(ds), 256):
        preds.append(engine.forward_logits(model, ds.images[s:s + 256]).argmax(axis=1))
    preds = np.concatenate(preds)
    return np.flatnonzero(preds == ds.labels)


# ---------------------------------------------------------------------------
# train


TRAIN_DEFAULTS = {
    "images": None, "labels": None, "test_images": None, "test_labels": None,
    "out": None, "arch": "small-cnn", "classes": 10, "epochs": 5,
    "learning_rate": 0.1, "batch_size": 64, "seed": 0,
}


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    _require(cfg, "images", "labels", "out")
    train = _load_dataset(cfg["images"], cfg["labels"], "train")
    if cfg["arch"] not in engine.ARCHITECTURES:
        raise ValidationError(f"unknown architecture {cfg['arch']!r}")
    input_shape = train.images.shape[1:]
    model = engine.ARCHITECTURES[cfg["arch"]](input_shape, cfg["classes"], seed=cfg["seed"])
    model = engine.train_sgd(model, train.images, train.labels, cfg["epochs"],
                             cfg["learning_rate"], cfg["batch_size"], cfg["seed"])
    dataio.save_model(model, cfg["out"])
    print(f"saved model: {cfg['out']}")
    print(f"train accuracy: {engine.accuracy(model, train.images, train.labels):.4f}")
    if cfg["test_images"] and cfg["test_labels"]:
        test = _load_dataset(cfg["test_images"], cfg["test_labels"], "test")
        print(f"test accuracy: {engine.accuracy(model, test.images, test.labels):.4f}")
    return 0


# ---------------------------------------------------------------------------
# build


BUILD_DEFAULTS = {
    "model": None, "images": None, "labels": None, "out": None,
    "quota": 50, "delta": 1e-6,
}


def cmd_build(args) -> int:
    cfg = _resolve(args, BUILD_DEFAULTS)
    _require(cfg, "model", "images", "labels", "out")
    model = dataio.load_model(cfg["model"])
    train = _load_dataset(cfg["images"], cfg["labels"], "train")
    ens = core.build_ensemble(model, train.images, train.labels, cfg["quota"], cfg["delta"])
    dataio.save_ensemble(ens, cfg["out"])
    total = int(ens.class_counts.sum())
    print(f"saved ensemble: {cfg['out']}  (delta={ens.delta:g}, quota={cfg['quota']})")
    print(f"samples consumed: {total}")
    for y in range(ens.num_classes):
        print(f"  class {y}: {int(ens.class_counts[y])}")
    for warning in ens.warnings:
        print(f"warning: {warning}")
    return 0


# ---------------------------------------------------------------------------
# calibrate


CALIBRATE_DEFAULTS = {
    "model": None, "ensemble": None, "images": None, "labels": None,
    "out": None, "threshold": 0.75, "limit": None, "sweep": False,
    "build_images": None, "build_labels": None,
}


def cmd_calibrate(args) -> int:
    cfg = _resolve(args, CALIBRATE_DEFAULTS)
    _require(cfg, "model", "ensemble", "images", "labels")
    if not 0.0 < cfg["threshold"] < 1.0:
        raise ValidationError(f"threshold must be in (0,1), got {cfg['threshold']}")
    model = dataio.load_model(cfg["model"])
    ens = dataio.load_ensemble(cfg["ensemble"])
    calib = _load_dataset(cfg["images"], cfg["labels"], "test")
    images, labels = calib.images, calib.labels
    if cfg["limit"]:
        images, labels = images[:cfg["limit"]], labels[:cfg["limit"]]

    if cfg["build_images"] and cfg["build_labels"]:
        build = _load_dataset(cfg["build_images"], cfg["build_labels"], "train")
        ens.build_fingerprints = {core._fingerprint(img) for img in build.images}

    result = core.per_layer_accuracy(ens, model, images, labels)
    k = core.select_k(result.accuracies, cfg["threshold"])
    print(f"calibration samples: {result.used} used, {result.skipped} skipped "
          f"(not correctly classified)")
    if result.in_sample is None:
        print("in-sample overlap with build set: unknown "
              "(pass --build-images/--build-labels to check)")
    elif result.in_sample:
        print(f"warning: {result.in_sample} calibration samples overlap the build data")
    else:
        print("in-sample overlap with build set: none")
    print("per-layer accuracy (two-voter Borda, shallow to deep):")
    for ordinal, acc in enumerate(result.accuracies):
        marker = " *" if ordinal >= ens.n_layers - k else ""
        print(f"  votable layer {ordinal + 1}/{ens.n_layers} "
              f"(model layer {ens.layer_indices[ordinal]}): {acc:.4f}{marker}")
    print(f"selected k = {k} (threshold {cfg['threshold']})")

    if cfg["sweep"]:
        keep = []
        for j in range(len(images)):
            trace = engine.forward_with_trace(model, images[j])
            if int(trace.softmax.argmax()) == int(labels[j]):
                keep.append((trace, int(labels[j])))
        print("aggregated accuracy by k (clean, correctly classified):")
        for kk in range(1, ens.n_layers + 1):
            hits = sum(core.regroup_predict(ens, trace, kk, "both").prediction == y
                       for trace, y in keep)
            print(f"  k={kk}: {hits / len(keep):.4f}")

    ens.selected_k = k
    out = cfg["out"] or cfg["ensemble"]
    dataio.save_ensemble(ens, out)
    print(f"saved ensemble with selected k: {out}")
    return 0


# ---------------------------------------------------------------------------
# attack


ATTACK_DEFAULTS = {
    "model": None, "images": None, "labels": None, "out": None,
    "method": "pgd", "eps": "0.1", "step_size": 0.01, "iters": 40,
    "count": 1000, "seed": 0, "random_start": True, "targeted": False,
    "min_confidence": 0.9, "spsa_batch": 64, "spsa_perturbation": 0.01,
    "spsa_learning_rate": 0.01, "jobs": 1, "include_misclassified": False,
}


def cmd_attack(args) -> int:
    cfg = _resolve(args, ATTACK_DEFAULTS)
    _require(cfg, "model", "images", "labels", "out")
    model = dataio.load_model(cfg["model"])
    ds = _load_dataset(cfg["images"], cfg["labels"], "test")
    eps = parse_eps(cfg["eps"])
    config = attacks.AttackConfig(
        method=cfg["method"], eps=eps, step_size=cfg["step_size"],
        max_iter=cfg["iters"], random_start=cfg["random_start"],
        targeted=cfg["targeted"], min_confidence=cfg["min_confidence"],
        spsa_perturbation=cfg["spsa_perturbation"], spsa_batch=cfg["spsa_batch"],
        spsa_learning_rate=cfg["spsa_learning_rate"], seed=cfg["seed"])
    config.validate()

    if cfg["include_misclassified"]:
        indices = np.arange(len(ds))
    else:
        indices = _correct_indices(model, ds)
    indices = indices[:cfg["count"]]
    if len(indices) == 0:
        raise ValidationError("no source samples to attack")

    def one(i: int) -> attacks.AdversarialRecord:
        return attacks.run_attack(model, ds.images[i], int(ds.labels[i]), config, index=int(i))

    records = _ordered_map(one, [int(i) for i in indices], cfg["jobs"])
    n_s = len(attacks.filter_successful(records))
    dataio.save_adversarial_set(records, cfg["out"])
    print(f"attack: {cfg['method']}  eps = {eps_display(eps)}  sources = {len(records)}")
    print(f"#S = {n_s}")
    print(f"saved adversarial set: {cfg['out']}")
    return 0


# ---------------------------------------------------------------------------
# eval


EVAL_DEFAULTS = {
    "model": None, "ensemble": None, "adversarial": None,
    "images": None, "labels": None, "correct_only": False, "limit": None,
    "mode": "both", "k": None, "report": None, "attack_name": None,
}


def _rankings(scores: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(len(scores)), -scores))


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    _require(cfg, "model", "ensemble", "report")
    if cfg["mode"] not in ("pos", "neg", "both", "all"):
        raise ValidationError(f"mode must be pos/neg/both/all, got {cfg['mode']!r}")
    model = dataio.load_model(cfg["model"])
    ens = dataio.load_ensemble(cfg["ensemble"])
    k = cfg["k"] if cfg["k"] is not None else ens.selected_k
    if k is None:
        raise ValidationError("no k: calibrate the ensemble or pass --k")

    if cfg["adversarial"]:
        records = dataio.load_adversarial_set(cfg["adversarial"])
        kept = attacks.filter_successful(records)
        samples = [(r.image, r.true_label) for r in kept]
        dataset_name = os.path.basename(cfg["adversarial"])
        attack_name = cfg["attack_name"] or "adversarial"
        if not samples:
            raise ValidationError("adversarial set has no successful records")
    else:
        _require(cfg, "images", "labels")
        ds = _load_dataset(cfg["images"], cfg["labels"], "test")
        indices = np.arange(len(ds))
        if cfg["correct_only"]:
            indices = _correct_indices(model, ds)
        if cfg["limit"]:
            indices = indices[:cfg["limit"]]
        samples = [(ds.images[i], int(ds.labels[i])) for i in indices]
        dataset_name = os.path.basename(cfg["images"])
        attack_name = cfg["attack_name"] or "none"
        if not samples:
            raise ValidationError("no samples to evaluate")

    modes = ("pos", "neg", "both") if cfg["mode"] == "all" else (cfg["mode"],)
    rows = []
    for mode in modes:
        smax_hits1 = smax_hits5 = rg_hits1 = rg_hits5 = 0
        smax_time = rg_time = 0.0
        for image, label in samples:
            t0 = time.perf_counter()
            logits = engine.forward_logits(model, image[None])[0]
            smax_time += time.perf_counter() - t0
            order = _rankings(logits)
            smax_hits1 += int(order[0] == label)
            smax_hits5 += int(label in order[:5])

            t0 = time.perf_counter()
            trace = engine.forward_with_trace(model, image)
            tally = core.regroup_predict(ens, trace, k, mode)
            rg_time += time.perf_counter() - t0
            rg_hits1 += int(tally.prediction == label)
            rg_hits5 += int(label in tally.class_order[:5])
        n = len(samples)
        rows.append(dataio.ReportRow(
            dataset=dataset_name, attack=attack_name, n_samples=n,
            smax_top1=smax_hits1 / n, smax_top5=smax_hits5 / n,
            regroup_top1=rg_hits1 / n, regroup_top5=rg_hits5 / n,
            mode=mode, k=int(k),
            smax_seconds=smax_time / n, regroup_seconds=rg_time / n))

    digest = config_hash(cfg)
    base = cfg["report"]
    tsv_path, json_path = base + ".tsv", base + ".json"
    dataio.write_report(rows, tsv_path, json_path, digest)
    print(f"config hash: {digest}")
    for row in rows:
        print(f"[{row.mode}] n={row.n_samples}  "
              f"smax top1/top5 = {row.smax_top1:.4f}/{row.smax_top5:.4f}  "
              f"regroup top1/top5 = {row.regroup_top1:.4f}/{row.regroup_top5:.4f}  "
              f"k={row.k}  time/sample smax={row.smax_seconds * 1e3:.2f}ms "
              f"regroup={row.regroup_seconds * 1e3:.2f}ms")
    print(f"saved report: {tsv_path}, {json_path}")
    return 0


# ---------------------------------------------------------------------------
# infer


INFER_DEFAULTS = {
    "model": None, "image": None, "ensemble": None, "k": None, "mode": "both",
}


def cmd_infer(args) -> int:
    cfg = _resolve(args, INFER_DEFAULTS)
    _require(cfg, "model", "image")
    model = dataio.load_model(cfg["model"])
    image = np.load(cfg["image"])
    if image.shape != tuple(model.input_shape):
        raise ValidationError(
            f"image shape {image.shape} does not match model input {tuple(model.input_shape)}")
    trace = engine.forward_with_trace(model, np.asarray(image, dtype=np.float64))
    order = _rankings(trace.logits)
    payload = {
        "logits": trace.logits.tolist(),
        "softmax": trace.softmax.tolist(),
        "smax_prediction": int(order[0]),
        "smax_top5": [int(c) for c in order[:5]],
    }
    if cfg["ensemble"]:
        ens = dataio.load_ensemble(cfg["ensemble"])
        k = cfg["k"] if cfg["k"] is not None else (ens.selected_k or ens.n_layers)
        tally = core.regroup_predict(ens, trace, k, cfg["mode"])
        payload["tally"] = {
            "scores": tally.scores.tolist(),
            "prediction": tally.prediction,
            "class_order": tally.class_order.tolist(),
            "k": tally.k,
            "mode": tally.mode,
        }
    json.dump(payload, sys.stdout, indent=2)
    print()
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regroup",
                                     description="rank-aggregated generative-classifier defense toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    boolft = argparse.BooleanOptionalAction

    p = sub.add_parser("train", help="train the fixture CNN on an IDX dataset")
    p.add_argument("--config")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--test-images", dest="test_images")
    p.add_argument("--test-labels", dest="test_labels")
    p.add_argument("--out")
    p.add_argument("--arch", choices=sorted(engine.ARCHITECTURES))
    p.add_argument("--classes", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build", help="build the layer-wise generative ensemble")
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--out")
    p.add_argument("--quota", type=int)
    p.add_argument("--delta", type=float)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("calibrate", help="per-layer accuracy table and k selection")
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--ensemble")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float)
    p.add_argument("--limit", type=int)
    p.add_argument("--sweep", action="store_true", default=None)
    p.add_argument("--build-images", dest="build_images")
    p.add_argument("--build-labels", dest="build_labels")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("attack", help="generate a seeded adversarial set")
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--out")
    p.add_argument("--method", choices=sorted(attacks.METHODS))
    p.add_argument("--eps")
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--random-start", dest="random_start", action=boolft)
    p.add_argument("--targeted", action=boolft)
    p.add_argument("--min-confidence", dest="min_confidence", type=float)
    p.add_argument("--spsa-batch", dest="spsa_batch", type=int)
    p.add_argument("--spsa-perturbation", dest="spsa_perturbation", type=float)
    p.add_argument("--spsa-learning-rate", dest="spsa_learning_rate", type=float)
    p.add_argument("--jobs", type=int)
    p.add_argument("--include-misclassified", dest="include_misclassified", action=boolft)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="softmax vs rank-aggregated accuracy report")
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--ensemble")
    p.add_argument("--adversarial")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--correct-only", dest="correct_only", action=boolft)
    p.add_argument("--limit", type=int)
    p.add_argument("--mode", choices=("pos", "neg", "both", "all"))
    p.add_argument("--k", type=int)
    p.add_argument("--report")
    p.add_argument("--attack-name", dest="attack_name")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="single image: logits, softmax, full tally dump")
    p.add_argument("--config")
    p.add_argument("--model")
    p.add_argument("--image")
    p.add_argument("--ensemble")
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=("pos", "neg", "both"))
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
