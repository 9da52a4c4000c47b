"""Adversarial crafting: the Jacobian saliency-map attack (JSMA) and FGSM.

Both follow the same two steps per iteration: estimate input sensitivity
from a derivative of the model, then pick a perturbation from it. All model
evaluation happens at temperature 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE
from .model import Model, classify, forward, input_jacobian

BUDGET_FRACTION = 0.143
VARIANTS = ("pixel-pair", "single-feature")
CAMPAIGN_FIELDS = ("sample_id", "source_class", "target_class", "success",
                   "features_changed", "queries")


def default_budget(input_dimension: int) -> int:
    """ceil(14.3% of the features): 113 of 784 for MNIST."""
    return math.ceil(BUDGET_FRACTION * input_dimension)


@dataclass(frozen=True)
class AttackConfig:
    target_class: int
    max_features: Optional[int] = None  # None -> default_budget(M)
    feature_value: float = 1.0
    saliency_variant: str = "pixel-pair"

    def __post_init__(self):
        if self.saliency_variant not in VARIANTS:
            raise ValueError(f"saliency_variant must be one of {VARIANTS}")
        if self.max_features is not None and self.max_features < 0:
            raise ValueError("max_features must be nonnegative")


@dataclass
class AttackResult:
    success: bool
    features_changed: int
    perturbation: np.ndarray = field(repr=False)
    final_class: int
    queries: int
    target_class: Optional[int] = None
    source_class: Optional[int] = None
    sample_id: Optional[int] = None
    selections: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "source_class": self.source_class,
            "target_class": self.target_class,
            "success": int(self.success),
            "features_changed": self.features_changed,
            "queries": self.queries,
        }


def _split_gradients(jac: np.ndarray, target: int):
    jac = np.asarray(jac, dtype=np.float64)
    toward = jac[target]
    others = np.delete(jac, target, axis=0).sum(axis=0)
    return toward, others


def select_pair(jac: np.ndarray, target: int, available: np.ndarray):
    """Best feature pair (p, q), p < q, by the pair saliency map.

    Pairs whose summed target gradient is positive and summed other-class
    gradient is negative score ``alpha * |beta|``. If none qualifies, the pair
    with the largest raw ``alpha * |beta|`` is taken. Ties go to the
    lexicographically first pair. Returns None with fewer than 2 features left.
    """
    available = np.asarray(available, dtype=bool)
    if available.sum() < 2:
        return None
    toward, others = _split_gradients(jac, target)
    alpha = toward[:, None] + toward[None, :]
    beta = others[:, None] + others[None, :]
    valid = np.triu(available[:, None] & available[None, :], k=1)
    score = alpha * np.abs(beta)
    admissible = valid & (alpha > 0) & (beta < 0)
    chosen = admissible if admissible.any() else valid
    flat = int(np.argmax(np.where(chosen, score, -np.inf)))
    return divmod(flat, available.size)


def select_single(jac: np.ndarray, target: int, available: np.ndarray):
    """Single-feature analogue of :func:`select_pair`; returns ``(p,)`` or None."""
    available = np.asarray(available, dtype=bool)
    if not available.any():
        return None
    alpha, beta = _split_gradients(jac, target)
    score = alpha * np.abs(beta)
    admissible = available & (alpha > 0) & (beta < 0)
    chosen = admissible if admissible.any() else available
    return (int(np.argmax(np.where(chosen, score, -np.inf))),)


def jsma_attack(model: Model, X, config: AttackConfig, *, source_class=None,
                sample_id=None) -> AttackResult:
    """Targeted saliency-map attack; features are set to ``config.feature_value``.

    Features already at that value are never candidates, and a feature is
    perturbed at most once. Stops on reaching the target class or when the
    feature budget is spent.
    """
    n = model.class_count
    if not 0 <= config.target_class < n:
        raise ValueError(f"target_class {config.target_class} outside 0..{n - 1}")
    x0 = ad.as_tensor(X)
    if x0.shape != model.spec.input_shape:
        raise ad.DimensionError("jsma_attack", model.spec.input_shape, x0.shape)
    m = x0.size
    budget = default_budget(m) if config.max_features is None else config.max_features
    if budget > m:
        raise ValueError(f"max_features {budget} exceeds input dimension {m}")
    value = DTYPE(config.feature_value)
    target = config.target_class

    x = x0.reshape(-1).copy()
    available = x != value
    changed = queries = 0
    selections = []
    current = int(classify(model, x.reshape(x0.shape)))
    while current != target and changed < budget:
        pairwise = config.saliency_variant == "pixel-pair" and budget - changed >= 2
        jac = input_jacobian(model, x.reshape(x0.shape), 1.0)
        queries += 1
        picked = None
        if pairwise:
            picked = select_pair(jac, target, available)
        if picked is None:
            picked = select_single(jac, target, available)
        if picked is None:
            break
        idx = list(picked)
        x[idx] = value
        available[idx] = False
        changed += len(idx)
        selections.append(tuple(int(i) for i in idx))
        current = int(classify(model, x.reshape(x0.shape)))

    delta = (x - x0.reshape(-1)).reshape(x0.shape)
    return AttackResult(
        success=current == target,
        features_changed=changed,
        perturbation=delta,
        final_class=current,
        queries=queries,
        target_class=target,
        source_class=source_class,
        sample_id=sample_id,
        selections=selections,
    )


def loss_input_gradient(model: Model, X, true_label: int) -> np.ndarray:
    """d(cross-entropy at T=1)/dX for one sample."""
    x = ad.as_tensor(X)
    g = ad.Graph()
    xn = g.input(x[None], requires_grad=True)
    z = forward(model, g, xn)
    onehot = np.eye(model.class_count, dtype=DTYPE)[[true_label]]
    loss = ad.softmax_cross_entropy(z, onehot, 1.0)
    return ad.backward(g, loss)[xn][0]


def fgsm_attack(model: Model, X, true_label: int, epsilon: float,
                input_range=(0.0, 1.0)) -> AttackResult:
    """One step of ``epsilon * sign(grad)``, clipped to ``input_range``; sign(0) = 0."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    x = ad.as_tensor(X)
    if x.shape != model.spec.input_shape:
        raise ad.DimensionError("fgsm_attack", model.spec.input_shape, x.shape)
    grad = loss_input_gradient(model, x, true_label)
    adv = np.clip(x + DTYPE(epsilon) * np.sign(grad), *input_range).astype(DTYPE)
    final = int(classify(model, adv))
    delta = adv - x
    return AttackResult(
        success=final != true_label,
        features_changed=int(np.count_nonzero(delta)),
        perturbation=delta,
        final_class=final,
        queries=1,
        source_class=int(true_label),
    )


def attack_campaign(model: Model, samples, labels: Sequence[int], budget: Optional[int] = None,
                    *, feature_value: float = 1.0, saliency_variant: str = "pixel-pair",
                    sample_ids: Optional[Iterable[int]] = None) -> list[AttackResult]:
    """JSMA toward every class other than each sample's source class.

    Results are sample-major with targets ascending.
    """
    samples = ad.as_tensor(samples)
    ids = list(range(len(samples))) if sample_ids is None else [int(i) for i in sample_ids]
    if len(ids) != len(samples) or len(labels) != len(samples):
        raise ValueError("samples, labels and sample_ids must have equal lengths")
    results = []
    for sid, x, source in zip(ids, samples, labels):
        source = int(source)
        for target in range(model.class_count):
            if target == source:
                continue
            cfg = AttackConfig(target, budget, feature_value, saliency_variant)
            results.append(jsma_attack(model, x, cfg, source_class=source, sample_id=sid))
    return results


def success_rate(results: Sequence[AttackResult]) -> float:
    if not results:
        raise ValueError("no attack results")
    return sum(r.success for r in results) / len(results)


def write_campaign_csv(results: Sequence[AttackResult], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CAMPAIGN_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in results:
            writer.writerow(r.row())
    return path


def read_campaign_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: int(v) for k, v in row.items()} for row in csv.DictReader(fh)]
