"""Evaluation quantities: robustness, gradient-amplitude histograms,
confidence and accuracy."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import Model, mean_abs_input_gradients, predict

# Lower edges of the 10 amplitude bins; bin k covers [EDGES[k], EDGES[k+1]).
# Index 0 is the smallest-amplitude bin (< 1e-40), index 9 is >= 1e-3.
GRADIENT_BIN_EDGES = (0.0, 1e-40, 1e-35, 1e-30, 1e-25, 1e-20, 1e-15, 1e-10, 1e-6, 1e-3)
GRADIENT_BIN_LABELS = ("<1e-40", "[1e-40,1e-35)", "[1e-35,1e-30)", "[1e-30,1e-25)",
                       "[1e-25,1e-20)", "[1e-20,1e-15)", "[1e-15,1e-10)", "[1e-10,1e-6)",
                       "[1e-6,1e-3)", ">=1e-3")


@dataclass(frozen=True)
class RobustnessReport:
    per_sample_min_perturbation: dict  # sample_id -> fraction, or None when never defeated
    robustness: Optional[float]  # mean over covered samples; None without coverage
    coverage: int
    sample_count: int
    input_dimension: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_sample_min_perturbation"] = {
            str(k): v for k, v in sorted(self.per_sample_min_perturbation.items())}
        return d


def robustness(attack_results, input_dimension: int) -> RobustnessReport:
    """Mean over samples of the smallest changed-feature fraction that reached
    any target. Samples with no successful target are left out of the mean
    and counted through ``coverage``.
    """
    if not attack_results:
        raise ValueError("robustness needs at least one attack result")
    best: dict = defaultdict(lambda: None)
    for r in attack_results:
        current = best[r.sample_id]
        if r.success:
            frac = r.features_changed / input_dimension
            best[r.sample_id] = frac if current is None else min(current, frac)
        else:
            best[r.sample_id] = current
    covered = sorted(v for v in best.values() if v is not None)
    rho = float(np.mean(covered)) if covered else None
    return RobustnessReport(dict(best), rho, len(covered), len(best), input_dimension)


def gradient_bin(amplitude: float) -> int:
    return int(np.searchsorted(GRADIENT_BIN_EDGES, amplitude, side="right") - 1)


@dataclass(frozen=True)
class GradientHistogram:
    bin_edges: tuple
    counts: tuple
    sample_count: int
    amplitudes: tuple  # per-sample mean |J|, in sample order

    @property
    def median_bin(self) -> int:
        """Bin holding the lower median sample."""
        cumulative = np.cumsum(self.counts)
        return int(np.searchsorted(cumulative, (self.sample_count + 1) // 2))

    @property
    def median_amplitude(self) -> float:
        return float(np.median(self.amplitudes))

    def to_dict(self) -> dict:
        return {
            "bin_edges": list(self.bin_edges),
            "bin_labels": list(GRADIENT_BIN_LABELS),
            "counts": list(self.counts),
            "sample_count": self.sample_count,
            "median_bin": self.median_bin,
            "median_amplitude": self.median_amplitude,
        }


def gradient_histogram(model: Model, samples) -> GradientHistogram:
    """Bins each sample by its mean |dF_i/dX_j| at temperature 1."""
    samples = np.asarray(samples, dtype=np.float32)
    if len(samples) == 0:
        raise ValueError("gradient_histogram needs at least one sample")
    amps = mean_abs_input_gradients(model, samples)
    counts = np.zeros(len(GRADIENT_BIN_EDGES), dtype=np.int64)
    for a in amps:
        counts[gradient_bin(a)] += 1
    return GradientHistogram(GRADIENT_BIN_EDGES, tuple(int(c) for c in counts),
                             len(amps), tuple(float(a) for a in amps))


def _probs_at_test_time(model: Model, inputs, batch: int = 512) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float32)
    return np.concatenate([predict(model, inputs[i:i + batch], 1.0)
                           for i in range(0, len(inputs), batch)])


def confidence(model: Model, inputs, labels) -> float:
    """Mean of max_i F_i(X) at T=1, counting misclassified samples as 0."""
    probs = _probs_at_test_time(model, inputs)
    labels = np.asarray(labels)
    hit = np.argmax(probs, axis=1) == labels
    return float(np.mean(np.where(hit, probs.max(axis=1), 0.0)))


def accuracy(model: Model, inputs, labels) -> float:
    probs = _probs_at_test_time(model, inputs)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def accuracy_variation(baseline: float, distilled: float) -> float:
    """Signed change, distilled minus baseline."""
    return float(distilled) - float(baseline)


def mean_max_probability(model: Model, inputs, temperature: float) -> float:
    inputs = np.asarray(inputs, dtype=np.float32)
    return float(np.mean(predict(model, inputs, temperature).max(axis=1)))


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_rows_csv(rows: Sequence[dict], fields: Sequence[str], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n",
                                extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fields})
    return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
