from itertools import permutations

import numpy as np
import pytest

from mpseg.decoder import LayerOutputs
from mpseg.losses import (Assignment, LossWeights, cost_matrix, hungarian,
                          layer_losses, mask_losses)
from mpseg.masks import BinaryMask
from mpseg.synth import Scene
from mpseg.tensor import Tensor


def brute_force_min_cost(cost: np.ndarray) -> float:
    n, m = cost.shape
    if n > m:
        return brute_force_min_cost(cost.T)
    return min(sum(cost[i, p[i]] for i in range(n))
               for p in permutations(range(m), n))


def test_hungarian_zero_diagonal():
    a = hungarian(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert list(a.query_to_gt) == [0, 1]
    assert a.total_cost == 0.0


def test_hungarian_two_permutations():
    a = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert list(a.query_to_gt) == [0, 1]
    assert a.total_cost == 2.0


def test_hungarian_three_by_three():
    c = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    a = hungarian(c)
    assert a.total_cost == 5.0
    assert list(a.query_to_gt) == [1, 0, 2]


def test_hungarian_nonfinite_error():
    with pytest.raises(ValueError):
        hungarian(np.array([[0.0, np.inf], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        hungarian(np.array([[0.0, np.nan], [1.0, 0.0]]))


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(1, 8))
        cost = rng.uniform(-5, 5, size=(n, m))
        a = hungarian(cost)
        expected = brute_force_min_cost(cost)
        assert abs(a.total_cost - expected) < 1e-9, (trial, n, m)
        # structural checks: one-to-one, min(n, m) pairs
        matched = a.query_to_gt[a.query_to_gt >= 0]
        assert len(matched) == min(n, m)
        assert len(set(matched)) == len(matched)


def one_query_scene(h=4, w=4):
    bits = np.zeros((h, w), dtype=bool)
    bits[1:3, 1:3] = True
    return Scene(index=0, height=h, width=w, instances=[(1, BinaryMask(bits))])


def saturated_outputs(scene, n_queries=1, n_layers=2, num_categories=3):
    """Predictions that exactly hit the single GT at every layer."""
    cat, gt = scene.instances[0]
    mask_logits = []
    class_logits = []
    ml = np.where(gt.bits, 20.0, -20.0)[None].repeat(n_queries, axis=0)
    cl = np.full((n_queries, num_categories + 1), -20.0)
    cl[:, cat] = 20.0
    for _ in range(n_layers + 1):
        mask_logits.append(Tensor(ml.copy()))
        class_logits.append(Tensor(cl.copy()))
    return LayerOutputs(mask_logits=mask_logits, class_logits=class_logits,
                        n_match=n_queries)


def test_cost_matrix_perfect_prediction():
    scene = one_query_scene()
    out = saturated_outputs(scene)
    w = LossWeights()
    cm = cost_matrix(out.mask_logits[0].values, out.class_logits[0].values, scene, w)
    assert cm.shape == (1, 1)
    assert abs(cm[0, 0] - (-w.cls)) < 1e-3


def test_cost_matrix_uniform_closed_form():
    scene = one_query_scene()
    w = LossWeights()
    num_categories = 3
    ml = np.zeros((1, 4, 4))
    cl = np.zeros((1, num_categories + 1))
    cm = cost_matrix(ml, cl, scene, w)
    cls_term = -1.0 / (num_categories + 1)
    bce_term = np.log(2.0)
    area = scene.instances[0][1].area
    dice_term = 1.0 - (2 * 0.5 * area + 1.0) / (0.5 * 16 + area + 1.0)
    expected = w.cls * cls_term + w.bce * bce_term + w.dice * dice_term
    assert abs(cm[0, 0] - expected) < 1e-12


def test_cost_matrix_permutation_equivariant():
    rng = np.random.default_rng(1)
    bits1 = np.zeros((4, 4), dtype=bool)
    bits1[0, :2] = True
    bits2 = np.zeros((4, 4), dtype=bool)
    bits2[3, 2:] = True
    scene = Scene(index=0, height=4, width=4,
                  instances=[(0, BinaryMask(bits1)), (2, BinaryMask(bits2))])
    swapped = Scene(index=0, height=4, width=4,
                    instances=[(2, BinaryMask(bits2)), (0, BinaryMask(bits1))])
    ml = rng.uniform(-2, 2, size=(3, 4, 4))
    cl = rng.uniform(-2, 2, size=(3, 4))
    a = cost_matrix(ml, cl, scene, LossWeights())
    b = cost_matrix(ml, cl, swapped, LossWeights())
    assert np.array_equal(a, b[:, [1, 0]])


def test_mask_losses_saturated():
    scene = one_query_scene()
    _, gt = scene.instances[0]
    logits = Tensor(np.where(gt.bits, 20.0, -20.0))
    bce, dice = mask_losses(logits, gt)
    assert bce.values < 1e-6
    assert dice.values < 1e-2


def test_mask_losses_half_probability_hand_value():
    gt = BinaryMask(np.array([[True, True], [False, False]]))
    bce, dice = mask_losses(Tensor(np.zeros((2, 2))), gt)
    assert abs(dice.values - 0.4) < 1e-12
    assert abs(bce.values - np.log(2.0)) < 1e-12


def test_mask_losses_all_negative_hand_value():
    gt = BinaryMask(np.array([[True, True], [False, False]]))
    _, dice = mask_losses(Tensor(np.full((2, 2), -20.0)), gt)
    assert abs(dice.values - 2.0 / 3.0) < 1e-6


def test_layer_losses_perfect_prediction():
    scene = one_query_scene()
    n_layers = 2
    out = saturated_outputs(scene, n_layers=n_layers)
    total, assigns = layer_losses(out, scene, mp_part=None,
                                  mode="per-layer-bipartite", weights=LossWeights())
    assert float(total.values) < 1e-3 * (n_layers + 1)
    assert all(list(a.query_to_gt) == [0] for a in assigns)


def test_layer_losses_fixed_matching_identical_assignments():
    rng = np.random.default_rng(2)
    scene = one_query_scene()
    mask_logits = [Tensor(rng.uniform(-2, 2, size=(3, 4, 4))) for _ in range(4)]
    class_logits = [Tensor(rng.uniform(-2, 2, size=(3, 4))) for _ in range(4)]
    out = LayerOutputs(mask_logits=mask_logits, class_logits=class_logits, n_match=3)
    _, assigns = layer_losses(out, scene, mp_part=None, mode="fixed-last-layer",
                              weights=LossWeights())
    first = list(assigns[0].query_to_gt)
    assert all(list(a.query_to_gt) == first for a in assigns)


def test_layer_losses_consistency_aux_floor():
    scene = one_query_scene()
    n_layers = 3
    out = saturated_outputs(scene, n_layers=n_layers)
    base, _ = layer_losses(out, scene, None, "per-layer-bipartite", LossWeights())
    with_aux, _ = layer_losses(out, scene, None, "consistency-aux", LossWeights())
    aux = float(with_aux.values) - float(base.values)
    assert 0.0 <= aux < 0.02 * n_layers


def test_layer_losses_gt_permutation_invariant():
    rng = np.random.default_rng(3)
    bits1 = np.zeros((4, 4), dtype=bool)
    bits1[0:2, 0:2] = True
    bits2 = np.zeros((4, 4), dtype=bool)
    bits2[2:4, 2:4] = True
    scene = Scene(index=0, height=4, width=4,
                  instances=[(0, BinaryMask(bits1)), (1, BinaryMask(bits2))])
    swapped = Scene(index=0, height=4, width=4,
                    instances=[(1, BinaryMask(bits2)), (0, BinaryMask(bits1))])
    mask_logits = [Tensor(rng.uniform(-2, 2, size=(3, 4, 4))) for _ in range(3)]
    class_logits = [Tensor(rng.uniform(-2, 2, size=(3, 3))) for _ in range(3)]
    out = LayerOutputs(mask_logits=mask_logits, class_logits=class_logits, n_match=3)
    a, _ = layer_losses(out, scene, None, "per-layer-bipartite", LossWeights())
    b, _ = layer_losses(out, swapped, None, "per-layer-bipartite", LossWeights())
    assert abs(float(a.values) - float(b.values)) < 1e-9


def test_layer_losses_finite_and_bounded_below():
    rng = np.random.default_rng(4)
    scene = one_query_scene()
    w = LossWeights()
    mask_logits = [Tensor(rng.uniform(-30, 30, size=(2, 4, 4)), requires_grad=True)
                   for _ in range(3)]
    class_logits = [Tensor(rng.uniform(-30, 30, size=(2, 4)), requires_grad=True)
                    for _ in range(3)]
    out = LayerOutputs(mask_logits=mask_logits, class_logits=class_logits, n_match=2)
    total, _ = layer_losses(out, scene, None, "per-layer-bipartite", w)
    assert np.isfinite(total.values)
    assert float(total.values) >= -w.cls * 2
    total.backward()
    for t in mask_logits + class_logits:
        assert t.grad is not None and np.isfinite(t.grad).all()


def test_mode_validation():
    scene = one_query_scene()
    out = saturated_outputs(scene)
    with pytest.raises(ValueError):
        layer_losses(out, scene, None, "bogus-mode", LossWeights())


def test_assignment_matched_helper():
    a = Assignment(query_to_gt=np.array([2, -1, 0]), total_cost=1.0)
    rows, gts = a.matched()
    assert list(rows) == [0, 2]
    assert list(gts) == [2, 0]
