import math

import numpy as np
import pytest
import torch

from hrdnet.errors import ConfigError, NumericError
from hrdnet.head import (
    BACKGROUND, IGNORE, AnchorTargets, RetinaHead, apply_deltas, assign_targets,
    compute_loss, decode, encode, flatten_predictions, generate_anchors, head_forward,
)


def test_grid_anchor_count_and_centres():
    a = generate_anchors([(2, 2, 8)], scales=(1.0,), ratios=(1.0,))
    assert a.all().tolist() == [[4, 4, 32, 32], [12, 4, 32, 32], [4, 12, 32, 32], [12, 12, 32, 32]]


def test_anchor_count_over_levels():
    shapes = [(s, s, 256 // s) for s in (64, 32, 16, 8, 4)]
    anchors = generate_anchors(shapes)
    assert len(anchors.all()) == 9 * (4096 + 1024 + 256 + 64 + 16) == 49104
    assert anchors.counts()[0] == 9 * 4096 and anchors.per_cell == 9


def test_anchor_shapes_follow_scale_and_ratio():
    a = generate_anchors([(1, 1, 4)], scales=(1.0, 2.0), ratios=(0.5, 2.0)).all()
    area = a[:, 2] * a[:, 3]
    torch.testing.assert_close(area, torch.tensor([256.0, 256.0, 1024.0, 1024.0]))
    torch.testing.assert_close(a[:, 3] / a[:, 2], torch.tensor([0.5, 2.0, 0.5, 2.0]))


def test_empty_scales_rejected():
    with pytest.raises(ConfigError):
        generate_anchors([(1, 1, 4)], scales=())


def test_assign_identical_anchor_is_positive_with_zero_target():
    anchors = torch.tensor([[10.0, 10.0, 8.0, 8.0], [40.0, 40.0, 8.0, 8.0]], dtype=torch.float64)
    t = assign_targets(anchors, [[6, 6, 8, 8]], [2])
    assert t.labels.tolist() == [2, BACKGROUND]
    assert torch.count_nonzero(t.deltas) == 0


def test_assign_without_gt_is_all_background():
    anchors = generate_anchors([(4, 4, 8)]).all()
    t = assign_targets(anchors, np.zeros((0, 4)), [])
    assert t.num_positive == 0 and (t.labels == BACKGROUND).all()


def test_best_anchor_rule_and_ignore_band():
    # IoU of the GT with anchor 0 is 0.3; with anchor 1 it is 0.45 (ignored band) ...
    anchors = torch.tensor([[5.0, 5.0, 10.0, 10.0], [100.0, 100.0, 10.0, 10.0]], dtype=torch.float64)
    t = assign_targets(anchors, [[0, 0, 3, 10]], [0])
    assert t.labels.tolist() == [0, BACKGROUND]  # 0.3 < 0.4 but best for its GT
    gt = [[95, 95, 10, 4.5]]  # IoU 0.45 with anchor 1
    t = assign_targets(anchors, [[0, 0, 10, 10], *gt], [0, 1])
    assert t.labels.tolist() == [0, 1]  # forced again via best anchor
    anchors = torch.cat([anchors, torch.tensor([[100.0, 100.0, 10.0, 10.0]], dtype=torch.float64)])
    t = assign_targets(anchors, gt, [1])
    assert t.labels.tolist() == [BACKGROUND, 1, IGNORE]  # the duplicate stays ignored


def test_encode_decode_round_trip(rng):
    anchors = torch.tensor(np.c_[rng.uniform(0, 100, (50, 2)), rng.uniform(4, 60, (50, 2))])
    boxes = torch.tensor(np.c_[rng.uniform(0, 100, (50, 2)), rng.uniform(1, 80, (50, 2))])
    back = apply_deltas(encode(boxes, anchors), anchors)
    torch.testing.assert_close(back, boxes, atol=1e-6, rtol=0)


def test_decode_size_delta():
    anchor = torch.tensor([[50.0, 50.0, 16.0, 16.0]])
    out = apply_deltas(torch.tensor([[0.0, 0.0, math.log(2), math.log(2)]]), anchor)
    torch.testing.assert_close(out, torch.tensor([[34.0, 34.0, 32.0, 32.0]]))


def _decode_setup(score_logit, deltas=None):
    anchors = generate_anchors([(2, 2, 16)], scales=(1.0,), ratios=(1.0,))
    logits = torch.full((4, 2), -10.0)
    logits[:, 1] = score_logit
    deltas = torch.zeros((4, 4)) if deltas is None else deltas
    return decode(logits, deltas, anchors, (32, 32))


def test_decode_zero_deltas_gives_clipped_anchors():
    dets = _decode_setup(3.0)
    assert len(dets) == 4 and set(dets.labels.tolist()) == {1}
    # 64-pixel anchors centred in a 32x32 image clip to the image
    np.testing.assert_allclose(dets.boxes[0], [0, 0, 32, 32])
    anchors = generate_anchors([(4, 4, 4)], (1.0,), (1.0,))
    inner = decode(torch.full((16, 1), 3.0), torch.zeros((16, 4)), anchors, (32, 32))
    np.testing.assert_allclose(anchors.all()[10], [10, 10, 16, 16])
    np.testing.assert_allclose(inner.boxes[10], [2, 2, 16, 16])  # fully inside: unchanged


def test_decode_filters_low_scores_and_top_k():
    assert len(_decode_setup(-4.0)) == 0  # sigmoid(-4) < 0.05
    anchors = generate_anchors([(4, 4, 8)], (1.0,), (1.0,))
    logits = torch.linspace(-1, 1, 16).reshape(16, 1)
    dets = decode(logits, torch.zeros(16, 4), anchors, (32, 32), pre_nms_top_k=5)
    top5 = torch.sigmoid(logits.reshape(-1)).sort(descending=True).values[:5]
    np.testing.assert_allclose(np.sort(dets.scores)[::-1], top5.numpy(), rtol=1e-6)


def _hand_focal(x, y, gamma=2.0, alpha=0.25):
    p = 1 / (1 + math.exp(-x))
    if y:
        return -alpha * (1 - p) ** gamma * math.log(p)
    return -(1 - alpha) * p ** gamma * math.log(1 - p)


def _hand_smooth_l1(d, beta=0.11):
    return 0.5 * d * d / beta if abs(d) < beta else abs(d) - 0.5 * beta


def test_two_anchor_loss_by_hand():
    logits = torch.tensor([[[0.3, -1.2], [2.0, -0.5]]], dtype=torch.float64)
    deltas = torch.tensor([[[0.05, -0.3, 0.2, 0.0], [9.0, 9.0, 9.0, 9.0]]], dtype=torch.float64)
    target = AnchorTargets(torch.tensor([1, BACKGROUND]),
                           torch.tensor([[0.0, 0.0, 0.0, 0.1], [0.0] * 4], dtype=torch.float64))
    loss = compute_loss(logits, deltas, [target], reg_weight=2.0)
    cls = _hand_focal(0.3, 0) + _hand_focal(-1.2, 1) + _hand_focal(2.0, 0) + _hand_focal(-0.5, 0)
    reg = sum(_hand_smooth_l1(d) for d in (0.05, -0.3, 0.2, -0.1))
    assert loss.num_positive == 1
    assert loss.classification_loss.item() == pytest.approx(cls, rel=1e-12)
    assert loss.regression_loss.item() == pytest.approx(reg, rel=1e-12)
    assert loss.total.item() == pytest.approx(cls + 2.0 * reg, rel=1e-12)


def test_loss_ignores_ignored_anchors_and_handles_no_positives():
    logits = torch.tensor([[[5.0], [0.0]]])
    deltas = torch.ones((1, 2, 4))
    t = AnchorTargets(torch.tensor([IGNORE, BACKGROUND]), torch.zeros((2, 4)))
    loss = compute_loss(logits, deltas, [t])
    assert loss.regression_loss.item() == 0.0
    assert loss.classification_loss.item() == pytest.approx(_hand_focal(0.0, 0))


def test_perfect_predictions_give_near_zero_loss():
    logits = torch.tensor([[[1e4, -1e4], [-1e4, -1e4]]])
    target = AnchorTargets(torch.tensor([0, BACKGROUND]), torch.tensor([[0.1, 0.2, 0.3, 0.4], [0.0] * 4]))
    deltas = target.deltas.unsqueeze(0).clone()
    assert compute_loss(logits, deltas, [target]).total.item() < 1e-3


def test_loss_is_permutation_invariant(rng):
    logits = torch.tensor(rng.normal(size=(1, 30, 3)))
    deltas = torch.tensor(rng.normal(size=(1, 30, 4)))
    labels = torch.tensor(rng.integers(-2, 3, size=30))
    t = AnchorTargets(labels, torch.tensor(rng.normal(size=(30, 4))))
    perm = torch.tensor(rng.permutation(30))
    a = compute_loss(logits, deltas, [t]).total
    b = compute_loss(logits[:, perm], deltas[:, perm], [AnchorTargets(labels[perm], t.deltas[perm])]).total
    torch.testing.assert_close(a, b)


def test_nan_predictions_raise():
    t = AnchorTargets(torch.tensor([0]), torch.zeros((1, 4)))
    with pytest.raises(NumericError):
        compute_loss(torch.tensor([[[float("nan")]]]), torch.zeros((1, 1, 4)), [t])


def test_head_output_shapes_and_flatten_order():
    head = RetinaHead(8, 10, 9, tower_convs=1)
    outs = head_forward(head, [torch.rand(1, 8, 64, 64), torch.rand(1, 8, 4, 4)])
    assert outs[0][0].shape == (1, 90, 64, 64) and outs[1][1].shape == (1, 36, 4, 4)
    # flattening follows (row, column, anchor) to match generate_anchors
    cls = torch.arange(2 * 3 * 2 * 2, dtype=torch.float32).reshape(1, 2 * 3, 2, 2)
    logits, _ = flatten_predictions([(cls, torch.zeros(1, 8, 2, 2))], 3)
    assert logits.shape == (1, 8, 3)
    assert logits[0, 1].tolist() == [12.0, 16.0, 20.0]  # cell (0, 0), anchor 1
    assert logits[0, 2].tolist() == [1.0, 5.0, 9.0]  # cell (0, 1), anchor 0


def test_head_prior_and_channel_check():
    head = RetinaHead(8, 2, 3)
    cls, _ = head([torch.zeros(1, 8, 4, 4)])[0]
    torch.testing.assert_close(torch.sigmoid(cls), torch.full_like(cls, 0.01))
    with pytest.raises(ConfigError):
        head([torch.zeros(1, 4, 4, 4)])
