"""Experiment drivers behind the CLI subcommands.

Every command writes its artifacts into ``config.output_dir`` together with a
``manifest.json`` recording the config, its digest, the seed, artifact hashes
and the wall time. Apart from ``wall_time_seconds`` every byte written is a
function of the config alone.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .attacks import attack_campaign, success_rate, write_campaign_csv
from .config import DATASET_KEYS, ConfigError, ExperimentConfig
from .data import RawDataset, load_mnist_idx, stratified_indices, subset
from .metrics import (accuracy, accuracy_variation, confidence, gradient_histogram,
                      mean_max_probability, robustness, write_json, write_rows_csv)
from .model import Model, architecture, load_model, save_model
from .training import LabeledDataset, derive_seed, distill, train

log = logging.getLogger(__name__)

EPOCH_FIELDS = ("stage", "epoch", "train_loss", "test_accuracy")
SWEEP_FIELDS = ("kind", "temperature", "accuracy", "accuracy_variation", "teacher_accuracy",
                "attack_success_rate", "robustness", "robustness_coverage",
                "median_gradient_amplitude", "median_gradient_bin", "mean_confidence",
                "mean_max_probability_at_T", "error")


@dataclass(frozen=True)
class Datasets:
    train: RawDataset
    test: RawDataset


def load_datasets(config: ExperimentConfig, need_train: bool = True) -> Datasets:
    keys = DATASET_KEYS if need_train else DATASET_KEYS[2:]
    for key in keys:
        value = getattr(config, key)
        if not value:
            raise ConfigError(key, f"--{key.replace('_', '-')} is required")
        if not Path(value).is_file():
            raise ConfigError(key, f"--{key.replace('_', '-')}: file not found: {value}")
    test = load_mnist_idx(config.test_images, config.test_labels)
    if config.test_count is not None:
        test = subset(test, config.test_count, derive_seed(config.seed, "test-subset"))
    train_set = None
    if need_train:
        train_set = load_mnist_idx(config.train_images, config.train_labels)
        if config.train_count is not None:
            train_set = subset(train_set, config.train_count,
                               derive_seed(config.seed, "train-subset"))
    return Datasets(train_set, test)


def attack_sample_ids(config: ExperimentConfig, test: RawDataset) -> np.ndarray:
    return stratified_indices(test.labels, min(config.attack_samples, len(test)),
                              derive_seed(config.seed, "attack-samples"))


def gradient_sample_ids(config: ExperimentConfig, test: RawDataset) -> np.ndarray:
    return stratified_indices(test.labels, min(config.gradient_samples, len(test)),
                              derive_seed(config.seed, "gradient-samples"))


def distill_seed(config: ExperimentConfig, temperature: float) -> int:
    return derive_seed(config.seed, "distill", repr(float(temperature)))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(config: ExperimentConfig, command: str, artifacts: list, started: float,
                   extra: Optional[dict] = None) -> Path:
    out = Path(config.output_dir)
    cfg = config.to_dict()
    cfg.pop("output_dir")
    cfg.pop("workers")
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_sha256": config.digest(),
        "seed": config.seed,
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
        "wall_time_seconds": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    return write_json(manifest, out / "manifest.json")


def _labeled(raw: RawDataset) -> LabeledDataset:
    return LabeledDataset.from_raw(raw)


def _epoch_logger(rows: list, stage: str):
    def record(row):
        rows.append({"stage": row.get("stage", stage), **row})
        log.info("%s epoch %d loss %.4f acc %s", rows[-1]["stage"], row["epoch"],
                 row["train_loss"], row.get("test_accuracy"))
    return record


def cmd_train(config: ExperimentConfig) -> dict:
    started = time.perf_counter()
    data = load_datasets(config)
    out = _out(config)
    spec = architecture(config.architecture)
    rows: list = []
    model = train(spec, _labeled(data.train), config.train_config(),
                  eval_set=_labeled(data.test), on_epoch=_epoch_logger(rows, "train"))
    artifacts = [save_model(model, out / "model.bin"),
                 write_rows_csv(rows, EPOCH_FIELDS, out / "train_metrics.csv")]
    write_manifest(config, "train", artifacts, started)
    return {"model": str(out / "model.bin"),
            "accuracy": accuracy(model, data.test.images, data.test.labels)}


def cmd_distill(config: ExperimentConfig) -> dict:
    started = time.perf_counter()
    data = load_datasets(config)
    out = _out(config)
    spec = architecture(config.architecture)
    t = config.temperature
    rows: list = []
    teacher, student = distill(spec, _labeled(data.train),
                               config.train_config(t, distill_seed(config, t)),
                               eval_set=_labeled(data.test), on_epoch=_epoch_logger(rows, ""))
    acc_t = accuracy(teacher, data.test.images, data.test.labels)
    acc_s = accuracy(student, data.test.images, data.test.labels)
    comparison = [{"temperature": t, "teacher_accuracy": acc_t, "distilled_accuracy": acc_s,
                   "variation": accuracy_variation(acc_t, acc_s)}]
    artifacts = [
        save_model(teacher, out / "teacher.bin"),
        save_model(student, out / "distilled.bin"),
        write_rows_csv(rows, EPOCH_FIELDS, out / "distill_metrics.csv"),
        write_rows_csv(comparison, list(comparison[0]), out / "comparison.csv"),
    ]
    write_manifest(config, "distill", artifacts, started)
    return comparison[0]


def attack_summary(model: Model, test: RawDataset, ids: np.ndarray,
                   config: ExperimentConfig):
    results = attack_campaign(model, test.images[ids], test.labels[ids], config.max_features,
                              feature_value=config.feature_value,
                              saliency_variant=config.saliency_variant, sample_ids=ids)
    successes = [r for r in results if r.success]
    report = robustness(results, int(np.prod(test.images.shape[1:])))
    summary = {
        "total": len(results),
        "successes": len(successes),
        "success_rate": success_rate(results),
        "mean_features_changed": (float(np.mean([r.features_changed for r in successes]))
                                  if successes else None),
        "robustness": report.to_dict(),
    }
    return results, summary


def cmd_attack(config: ExperimentConfig, model_path) -> dict:
    started = time.perf_counter()
    if not Path(model_path).is_file():
        raise ConfigError("model", f"MODEL: file not found: {model_path}")
    data = load_datasets(config, need_train=False)
    out = _out(config)
    model = load_model(model_path)
    ids = attack_sample_ids(config, data.test)
    results, summary = attack_summary(model, data.test, ids, config)
    artifacts = [write_campaign_csv(results, out / "campaign.csv"),
                 write_json(summary, out / "attack_summary.json")]
    write_manifest(config, "attack", artifacts, started,
                   {"model_sha256": _sha256(Path(model_path))})
    return summary


def evaluation(model: Model, test: RawDataset, config: ExperimentConfig) -> dict:
    hist = gradient_histogram(model, test.images[gradient_sample_ids(config, test)])
    return {
        "accuracy": accuracy(model, test.images, test.labels),
        "mean_confidence": confidence(model, test.images, test.labels),
        "training_temperature": model.temperature,
        "mean_max_probability_at_T": mean_max_probability(model, test.images, model.temperature),
        "gradient_histogram": hist.to_dict(),
    }


def cmd_evaluate(config: ExperimentConfig, model_path) -> dict:
    started = time.perf_counter()
    if not Path(model_path).is_file():
        raise ConfigError("model", f"MODEL: file not found: {model_path}")
    data = load_datasets(config, need_train=False)
    out = _out(config)
    report = evaluation(load_model(model_path), data.test, config)
    hist = report["gradient_histogram"]
    rows = [{"bin": i, "range": label, "count": c}
            for i, (label, c) in enumerate(zip(hist["bin_labels"], hist["counts"]))]
    artifacts = [write_json(report, out / "evaluation.json"),
                 write_rows_csv(rows, ("bin", "range", "count"), out / "gradient_histogram.csv")]
    write_manifest(config, "evaluate", artifacts, started,
                   {"model_sha256": _sha256(Path(model_path))})
    return report


def _row_metrics(model: Model, data: Datasets, config: ExperimentConfig) -> dict:
    ids = attack_sample_ids(config, data.test)
    _, summary = attack_summary(model, data.test, ids, config)
    ev = evaluation(model, data.test, config)
    rb = summary["robustness"]
    return {
        "accuracy": ev["accuracy"],
        "attack_success_rate": summary["success_rate"],
        "robustness": rb["robustness"],
        "robustness_coverage": rb["coverage"],
        "median_gradient_amplitude": ev["gradient_histogram"]["median_amplitude"],
        "median_gradient_bin": ev["gradient_histogram"]["median_bin"],
        "mean_confidence": ev["mean_confidence"],
        "mean_max_probability_at_T": ev["mean_max_probability_at_T"],
        "gradient_histogram": ev["gradient_histogram"]["counts"],
        "attack": summary,
    }


def _sweep_row(config: ExperimentConfig, temperature: Optional[float]) -> dict:
    """One sweep row; ``temperature=None`` is the undistilled baseline."""
    data = load_datasets(config)
    spec = architecture(config.architecture)
    models_dir = Path(config.output_dir) / "models"
    if temperature is None:
        model = train(spec, _labeled(data.train), config.train_config(1.0))
        row = {"kind": "baseline", "temperature": 1.0, "teacher_accuracy": None}
        save_model(model, models_dir / "baseline.bin")
    else:
        seed = distill_seed(config, temperature)
        teacher, model = distill(spec, _labeled(data.train), config.train_config(temperature, seed))
        row = {"kind": "distilled", "temperature": temperature,
               "teacher_accuracy": accuracy(teacher, data.test.images, data.test.labels)}
        save_model(model, models_dir / f"distilled_T{temperature:g}.bin")
    row.update(_row_metrics(model, data, config))
    row["error"] = None
    return row


def _safe_row(config: ExperimentConfig, temperature: Optional[float]):
    """Returns (row, seconds); failures become a row carrying the error."""
    started = time.perf_counter()
    try:
        row = _sweep_row(config, temperature)
    except Exception as exc:  # recorded per row; the sweep goes on
        log.error("sweep row T=%s failed: %s", temperature, exc)
        row = {"kind": "baseline" if temperature is None else "distilled",
               "temperature": 1.0 if temperature is None else temperature,
               "error": f"{type(exc).__name__}: {exc}",
               "traceback": traceback.format_exc()}
    return row, round(time.perf_counter() - started, 3)


def cmd_sweep(config: ExperimentConfig) -> dict:
    started = time.perf_counter()
    load_datasets(config)  # fail fast on bad paths before any training
    out = _out(config)
    (out / "models").mkdir(exist_ok=True)
    jobs = [None] + list(config.temperatures)
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            done = list(pool.map(_safe_row, [config] * len(jobs), jobs))
    else:
        done = [_safe_row(config, t) for t in jobs]
    rows = [row for row, _ in done]
    row_times = {("baseline" if t is None else f"T{t:g}"): secs for t, (_, secs) in zip(jobs, done)}
    baseline = rows[0]
    for row in rows[1:]:
        if row.get("error") is None and baseline.get("error") is None:
            row["accuracy_variation"] = accuracy_variation(baseline["accuracy"], row["accuracy"])
    baseline["accuracy_variation"] = 0.0 if baseline.get("error") is None else None
    report = {"baseline": baseline, "rows": rows[1:],
              "temperatures": list(config.temperatures),
              "config_sha256": config.digest()}
    artifacts = [write_rows_csv(rows, SWEEP_FIELDS, out / "sweep.csv"),
                 write_json(report, out / "sweep.json")]
    artifacts += sorted((out / "models").glob("*.bin"))
    write_manifest(config, "sweep", artifacts, started, {"row_wall_time_seconds": row_times})
    return report


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
