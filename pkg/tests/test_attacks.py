import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defdistill import autodiff as ad
from defdistill.attacks import (AttackConfig, CAMPAIGN_FIELDS, attack_campaign, default_budget,
                                fgsm_attack, jsma_attack, loss_input_gradient, read_campaign_csv,
                                select_pair, select_single, success_rate, write_campaign_csv)
from defdistill.model import LayerSpec, Model, ModelSpec, architecture, classify, init_model


def linear_model(weights, bias=None, shape=None):
    weights = np.asarray(weights, np.float32)
    m, n = weights.shape
    spec = ModelSpec((LayerSpec("dense-linear", units=n), LayerSpec("softmax")),
                     shape or (1, 1, m))
    bias = np.zeros(n, np.float32) if bias is None else np.asarray(bias, np.float32)
    return Model(spec, {"layer0.weight": weights, "layer0.bias": bias})


def brute_force_pair(jac, target, available):
    """Literal search over all pairs with the documented fallback and tie rule."""
    jac = np.asarray(jac, np.float64)
    others = [i for i in range(jac.shape[0]) if i != target]
    best, best_fallback = None, None
    for p, q in itertools.combinations(np.flatnonzero(available), 2):
        alpha = jac[target, p] + jac[target, q]
        beta = sum(jac[i, p] + jac[i, q] for i in others)
        score = alpha * abs(beta)
        if best_fallback is None or score > best_fallback[0]:
            best_fallback = (score, (int(p), int(q)))
        if alpha > 0 and beta < 0 and (best is None or score > best[0]):
            best = (score, (int(p), int(q)))
    chosen = best or best_fallback
    return None if chosen is None else chosen[1]


def test_budget_is_ceiling_of_fraction():
    assert default_budget(784) == 113
    assert default_budget(3072) == math.ceil(0.143 * 3072)


# --- saliency selection ---------------------------------------------------

@pytest.mark.parametrize("seed", range(30))
def test_select_pair_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    jac = rng.normal(size=(4, 36))
    available = rng.random(36) < 0.8
    target = int(rng.integers(4))
    assert select_pair(jac, target, available) == brute_force_pair(jac, target, available)


def test_select_pair_fallback_without_admissible_pairs():
    # every target gradient negative: no pair qualifies, so the raw score decides
    jac = np.array([[-1.0, -2.0, -0.5, -3.0], [1.0, 2.0, 0.5, 3.0]])
    assert select_pair(jac, 0, np.ones(4, bool)) == brute_force_pair(jac, 0, np.ones(4, bool))


def test_select_pair_ties_break_lexicographically():
    jac = np.array([[1.0] * 6, [-1.0] * 6])
    assert select_pair(jac, 0, np.ones(6, bool)) == (0, 1)
    avail = np.array([False, True, False, True, True, True])
    assert select_pair(jac, 0, avail) == (1, 3)


def test_select_pair_needs_two_features():
    jac = np.ones((2, 3))
    assert select_pair(jac, 0, np.array([False, True, False])) is None
    assert select_single(jac, 0, np.array([False, True, False])) == (1,)
    assert select_single(jac, 0, np.zeros(3, bool)) is None


# --- JSMA -----------------------------------------------------------------

def test_already_target_class_needs_no_change():
    model = linear_model(np.eye(4))
    x = np.array([[[0.0, 0.0, 0.9, 0.0]]])
    r = jsma_attack(model, x, AttackConfig(2))
    assert r.success and r.features_changed == 0 and r.queries == 0
    assert not np.any(r.perturbation)


def test_zero_budget_fails_unchanged():
    model = linear_model(np.eye(4))
    x = np.array([[[0.9, 0.0, 0.0, 0.0]]])
    r = jsma_attack(model, x, AttackConfig(3, max_features=0))
    assert not r.success and r.features_changed == 0 and r.final_class == 0


def test_linear_model_attack_raises_target_feature():
    model = linear_model(np.diag([5.0, 5.0, 5.0, 8.0]))
    x = np.array([[[0.6, 0.1, 0.2, 0.0]]])
    r = jsma_attack(model, x, AttackConfig(3, max_features=2))
    assert r.success and r.final_class == 3
    assert 3 in r.selections[0]
    assert r.perturbation.reshape(-1)[3] == pytest.approx(1.0)


def test_budget_one_uses_single_feature():
    model = linear_model(np.eye(4) * 5)
    r = jsma_attack(model, np.array([[[0.6, 0.1, 0.2, 0.0]]]), AttackConfig(3, max_features=1))
    assert r.selections == [(3,)] and r.features_changed == 1


def test_rejects_bad_arguments():
    model = linear_model(np.eye(4))
    with pytest.raises(ValueError, match="target_class"):
        jsma_attack(model, np.zeros((1, 1, 4)), AttackConfig(7))
    with pytest.raises(ad.DimensionError):
        jsma_attack(model, np.zeros((1, 1, 5)), AttackConfig(1))
    with pytest.raises(ValueError, match="exceeds"):
        jsma_attack(model, np.zeros((1, 1, 4)), AttackConfig(1, max_features=5))
    with pytest.raises(ValueError):
        AttackConfig(1, saliency_variant="bogus")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), budget=st.integers(0, 12),
       variant=st.sampled_from(["pixel-pair", "single-feature"]))
def test_jsma_invariants(seed, budget, variant):
    rng = np.random.default_rng(seed)
    model = linear_model(rng.normal(size=(16, 4)), rng.normal(size=4), (1, 4, 4))
    x = rng.random((1, 4, 4)).astype(np.float32)
    x.reshape(-1)[rng.random(16) < 0.2] = 1.0
    target = int(rng.integers(4))
    r = jsma_attack(model, x, AttackConfig(target, budget, 1.0, variant))
    changed = np.flatnonzero(r.perturbation.reshape(-1))
    picked = [i for sel in r.selections for i in sel]
    assert r.features_changed == len(picked) == len(set(picked)) <= budget
    assert set(changed) == set(picked)
    assert r.features_changed == np.count_nonzero(r.perturbation)
    adv = (x + r.perturbation).reshape(-1)
    assert np.all(adv[picked] == 1.0)
    assert np.all((adv >= 0) & (adv <= 1))
    assert not any(x.reshape(-1)[i] == 1.0 for i in picked)
    assert r.final_class == int(classify(model, x + r.perturbation))
    assert r.success == (r.final_class == target)
    if variant == "single-feature":
        assert all(len(sel) == 1 for sel in r.selections)


def test_attacks_leave_model_and_input_untouched(rng):
    model = init_model(architecture("mlp-tiny"), 0)
    before = {k: v.copy() for k, v in model.params.items()}
    x = rng.random((1, 28, 28)).astype(np.float32)
    x_copy = x.copy()
    r = jsma_attack(model, x, AttackConfig(4, max_features=6))
    fgsm_attack(model, x, 3, 0.2)
    assert x.tobytes() == x_copy.tobytes()
    assert all(before[k].tobytes() == model.params[k].tobytes() for k in before)
    if r.success:
        assert int(classify(model, x + r.perturbation)) == 4


def test_jsma_is_deterministic(rng):
    model = init_model(architecture("mlp-tiny"), 0)
    x = rng.random((1, 28, 28))
    a = jsma_attack(model, x, AttackConfig(4, max_features=10))
    b = jsma_attack(model, x, AttackConfig(4, max_features=10))
    assert a.selections == b.selections
    assert a.perturbation.tobytes() == b.perturbation.tobytes()


# --- FGSM -----------------------------------------------------------------

def test_fgsm_zero_epsilon_is_identity(rng):
    model = init_model(architecture("mlp-tiny"), 1)
    x = rng.random((1, 28, 28)).astype(np.float32)
    r = fgsm_attack(model, x, 0, 0.0)
    assert not np.any(r.perturbation) and r.features_changed == 0


def test_fgsm_linear_model_analytic_direction():
    # d(-log softmax_y)/dx = W (p - e_y) for a single linear layer
    w = np.array([[1.0, -1.0], [-2.0, 0.5], [0.0, 0.0]], np.float32)
    model = linear_model(w)
    x = np.array([[[0.5, 0.5, 0.5]]], np.float32)
    z = x.reshape(-1) @ w
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    grad = w @ (p - np.eye(2)[0])
    np.testing.assert_allclose(loss_input_gradient(model, x, 0).reshape(-1), grad, atol=1e-6)
    r = fgsm_attack(model, x, 0, 0.1)
    np.testing.assert_allclose(r.perturbation.reshape(-1), 0.1 * np.sign(grad), atol=1e-7)
    assert r.perturbation.reshape(-1)[2] == 0  # sign(0) = 0


def test_fgsm_clips_to_range():
    model = linear_model(np.array([[1.0, -1.0]], np.float32))
    r = fgsm_attack(model, np.array([[[0.95]]]), 0, 0.5)
    assert (np.array([[[0.95]]]) + r.perturbation).min() >= 0.0
    with pytest.raises(ValueError):
        fgsm_attack(model, np.array([[[0.5]]]), 0, -0.1)


# --- campaigns ------------------------------------------------------------

def test_campaign_covers_every_other_class(tmp_path, rng):
    model = init_model(architecture("mlp-tiny"), 2)
    xs = rng.random((3, 1, 28, 28))
    labels = [1, 5, 9]
    results = attack_campaign(model, xs, labels, 4, sample_ids=[10, 11, 12])
    assert len(results) == 27
    assert [(r.sample_id, r.target_class) for r in results[:3]] == [(10, 0), (10, 2), (10, 3)]
    assert all(r.target_class != r.source_class for r in results)
    rate = success_rate(results)
    assert rate == sum(r.success for r in results) / 27
    path = write_campaign_csv(results, tmp_path / "c.csv")
    assert path.read_text().splitlines()[0] == ",".join(CAMPAIGN_FIELDS)
    rows = read_campaign_csv(path)
    assert rows == [r.row() for r in results]
    again = attack_campaign(model, xs, labels, 4, sample_ids=[10, 11, 12])
    write_campaign_csv(again, tmp_path / "d.csv")
    assert (tmp_path / "c.csv").read_bytes() == (tmp_path / "d.csv").read_bytes()


def test_campaign_length_mismatch_and_empty_rate():
    model = linear_model(np.eye(3))
    with pytest.raises(ValueError):
        attack_campaign(model, np.zeros((2, 1, 1, 3)), [0])
    with pytest.raises(ValueError):
        success_rate([])
