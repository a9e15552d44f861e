import numpy as np
import pytest
import torch

from hrdnet.ablation import AblationRow, AblationTable, single_stream_config, trend_experiment
from hrdnet.config import HRDNetConfig
from hrdnet.data import SceneSpec, generate_dataset
from hrdnet.errors import ConfigError
from hrdnet.evaluation import EvalReport
from hrdnet.model import HRDNet, forward_output_pyramid, predict

from conftest import tiny_config


def trained_looking_model(**kw):
    """A tiny model whose classifier fires everywhere, so predictions are never empty."""
    model = HRDNet(tiny_config(resolution=(64, 64), **kw))
    with torch.no_grad():
        model.head.cls_out.bias.fill_(2.0)
    return model


def test_output_shapes_match_forward():
    model = HRDNet(tiny_config(levels=3)).eval()
    with torch.no_grad():
        outs = model.pyramid_outputs(torch.rand(1, 3, 128, 96))
        logits, deltas = model(torch.rand(1, 3, 128, 96))
    shapes = model.output_shapes(128, 96)
    assert [tuple(o.shape[-2:]) for o in outs] == [s[:2] for s in shapes]
    assert [s[2] for s in shapes] == [16, 8, 4, 32]
    assert logits.shape == (1, len(model.anchors(128, 96).all()), 3) and deltas.shape[-1] == 4


def test_output_pyramid_wrapper_agrees_with_forward():
    model = HRDNet(tiny_config()).eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        group = forward_output_pyramid(model, x)
        direct = model.pyramid_outputs(x)
    assert all(torch.equal(a, b) for a, b in zip(group.tensors(), direct))
    assert [m.stride for m in group.maps] == [s[2] for s in model.output_shapes(64, 64)]


def test_predict_returns_sorted_boxes_in_source_frame():
    model = trained_looking_model()
    image = np.random.default_rng(0).integers(0, 256, (80, 100, 3), dtype=np.uint8)
    for scales in (None, [0.75, 1.0, 1.25]):
        dets = predict(model, image, scales)
        assert 0 < len(dets) <= model.cfg.head.max_detections
        assert (np.diff(dets.scores) <= 0).all()
        b = dets.boxes
        assert (b[:, :2] >= -1e-6).all()
        assert (b[:, 0] + b[:, 2] <= 100 + 1e-4).all() and (b[:, 1] + b[:, 3] <= 80 + 1e-4).all()


def test_raw_candidates_skip_nms():
    model = trained_looking_model()
    image = np.zeros((64, 64, 3), np.uint8)
    assert len(predict(model, image, raw=True)) > len(predict(model, image))
    with pytest.raises(ConfigError):
        predict(model, image, [1.0, 1.25], raw=True)


def test_single_stream_config():
    cfg = HRDNetConfig()
    single = single_stream_config(cfg, 1)
    assert single.n_streams == 1 and single.resolution == (128, 128)
    assert single.stream_specs[0].stream_index == 0
    assert single.stream_specs[0].blocks_per_stage == [2, 2, 2, 2]
    assert HRDNet(single).parameter_count() < HRDNet(cfg).parameter_count()


def test_ablation_table_format():
    report = EvalReport(0.5, 0.75, 0.25, 0.5, None, None, 0.1, 0.2, 0.3, 0.3)
    table = AblationTable("t", ("ap", "ap_medium"), [AblationRow("a", report, 10)])
    assert table.format().splitlines()[-1].split() == ["a", "50.0", "-"]
    assert table.as_dict()["rows"] == [{"name": "a", "params": 10, "ap": 0.5, "ap_medium": None}]


def test_trend_experiment_structure():
    spec = SceneSpec(image_size=(64, 64), num_classes=3, objects_per_image=(1, 2), object_size_px=(6, 12))
    cfg = tiny_config(resolution=(64, 64)).copy(
        schedule={"total_epochs": 1, "warmup_iters": 1, "decay_epochs": []})
    result = trend_experiment(cfg, generate_dataset(spec, 4, "train"),
                              generate_dataset(spec, 2, "val", index_offset=4), seeds=(0, 1))
    assert len(result.hrdnet_ap_small) == len(result.single_ap_small) == 2
    assert 0 <= result.wins <= 2
    assert {"seed0_aligned_by_depth_ap", "seed0_aligned_by_resolution_ap",
            "mean_hrdnet_ap_small", "mean_single_ap_small"} <= set(result.informational)
