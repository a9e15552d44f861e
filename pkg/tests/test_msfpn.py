import pytest
import torch

from hrdnet.errors import AlignmentError, ConfigError
from hrdnet.msfpn import (
    MSFPN, STRATEGIES, FusionConfig, OutputProjection, fuse_aligned_by_depth,
    fuse_aligned_by_resolution, fuse_simple_fpn, project_outputs, wrap_fused,
)
from hrdnet.streams import FeatureGroup, FeatureMap

from oracles import fusion_edges, reachable, textbook_fpn


def raw_features(n, m, c=4, base=64, batch=1, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    feats = []
    for i in range(n):
        row = []
        for j in range(m):
            side = base // 2 ** i // (4 * 2 ** (m - 1 - j))
            row.append(torch.randn(batch, c, side, side, generator=g, dtype=dtype))
        feats.append(row)
    return feats


def build(n, m, strategy, c=4, extra=1, common=6):
    cfg = FusionConfig(strategy, common, extra)
    fpn = MSFPN([[c] * m for _ in range(n)], cfg).double()
    proj = OutputProjection(m, cfg).double()
    return fpn, proj


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("n", [1, 2, 3])
def test_fused_shapes_match_raw(strategy, n):
    raw = raw_features(n, 3, base=128)
    fpn, proj = build(n, 3, strategy)
    fused = fpn(raw)
    for i in range(n):
        for j in range(3):
            assert fused[i][j].shape == (1, 6, *raw[i][j].shape[-2:])
    outs = proj(fused[0])
    assert [o.shape[-1] for o in outs] == [8, 16, 32, 4]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_single_stream_reduces_to_textbook_fpn(strategy):
    raw = raw_features(1, 4, base=128)
    fpn, proj = build(1, 4, strategy, extra=2)
    ours = proj(fpn(raw)[0])
    ref = textbook_fpn(raw[0], [conv.weight for conv in fpn.lateral[0]],
                       [c.weight for c in proj.smooth], [c.bias for c in proj.smooth],
                       [c.weight for c in proj.extra], [c.bias for c in proj.extra])
    for a, b in zip(ours, ref):
        torch.testing.assert_close(a, b, atol=1e-12, rtol=0)


def test_aligned_by_depth_hand_wired():
    raw = raw_features(2, 2, base=32)
    fpn, _ = build(2, 2, "aligned_by_depth")

    def lat(i, j):
        return torch.nn.functional.conv2d(raw[i][j], fpn.lateral[i][j].weight)

    def up(x):
        return x.repeat_interleave(2, -2).repeat_interleave(2, -1)

    f10 = lat(1, 0)
    f11 = lat(1, 1) + up(f10)
    f00 = lat(0, 0) + up(f10)
    f01 = lat(0, 1) + up(f00) + up(f11)
    fused = fpn(raw)
    for got, want in [(fused[1][0], f10), (fused[1][1], f11), (fused[0][0], f00), (fused[0][1], f01)]:
        torch.testing.assert_close(got, want, atol=1e-12, rtol=0)


def test_aligned_by_resolution_uses_equal_resolution_source():
    raw = raw_features(2, 3, base=64)
    fpn, _ = build(2, 3, "aligned_by_resolution")
    fused = fpn(raw)
    lat = torch.nn.functional.conv2d(raw[0][1], fpn.lateral[0][1].weight)
    up = fused[0][0].repeat_interleave(2, -2).repeat_interleave(2, -1)
    cross = torch.nn.functional.conv2d(fused[1][2], fpn.cross["0_1"].weight)
    torch.testing.assert_close(fused[0][1], lat + up + cross, atol=1e-12, rtol=0)
    # the finest level has no deeper equal-resolution partner
    lat = torch.nn.functional.conv2d(raw[0][2], fpn.lateral[0][2].weight)
    up = fused[0][1].repeat_interleave(2, -2).repeat_interleave(2, -1)
    torch.testing.assert_close(fused[0][2], lat + up, atol=1e-12, rtol=0)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_fusion_is_linear(strategy):
    a, b = raw_features(3, 3, seed=1), raw_features(3, 3, seed=2)
    fpn, _ = build(3, 3, strategy)
    mixed = [[2.0 * x - 0.5 * y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]
    fa, fb, fm = fpn(a), fpn(b), fpn(mixed)
    for i in range(3):
        for j in range(3):
            torch.testing.assert_close(fm[i][j], 2.0 * fa[i][j] - 0.5 * fb[i][j])


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_dependencies_match_reachability(strategy):
    n, m, extra = 3, 3, 2
    raw = raw_features(n, m)
    fpn, proj = build(n, m, strategy, extra=extra)
    with torch.no_grad():
        base = proj(fpn(raw)[0])
        edges = fusion_edges(strategy, n, m, extra)
        for i in range(n):
            for j in range(m):
                bumped = [[x.clone() for x in row] for row in raw]
                bumped[i][j] += torch.randn_like(bumped[i][j])
                outs = proj(fpn(bumped)[0])
                changed = {k for k, (o, b) in enumerate(zip(outs, base)) if not torch.equal(o, b)}
                expect = {node[1] for node in reachable(edges, ("raw", i, j)) if node[0] == "out"}
                assert changed == expect, (i, j)


def test_group_wrappers_and_output_strides():
    raw = raw_features(2, 3)
    strides = [16, 8, 4]
    groups = [FeatureGroup([FeatureMap(x, i, j, s) for j, (x, s) in enumerate(zip(row, strides))])
              for i, row in enumerate(raw)]
    for strategy, fuse in [("aligned_by_depth", fuse_aligned_by_depth),
                           ("aligned_by_resolution", fuse_aligned_by_resolution),
                           ("simple_fpn", fuse_simple_fpn)]:
        fpn, proj = build(2, 3, strategy)
        fused = fuse(groups, fpn)
        assert [g.stream_index for g in fused] == [0, 1]
        out = project_outputs(fused[0], proj)
        assert out.strides == [16, 8, 4, 32]
        assert [m.stride for m in out.by_stride()] == [4, 8, 16, 32]
        assert len(out) == 4 and out.tensors()[3].shape[-1] == 2
    fpn, _ = build(2, 3, "simple_fpn")
    with pytest.raises(ConfigError, match="built for"):
        fuse_aligned_by_depth(groups, fpn)
    assert len(wrap_fused(fpn(raw), strides)) == 2


def test_misaligned_cross_stream_names_indices():
    raw = raw_features(2, 2, base=32)
    raw[1][1] = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    fpn, _ = build(2, 2, "aligned_by_depth")
    with pytest.raises(AlignmentError, match="stream 1, level 1"):
        fpn(raw)


def test_config_validation():
    with pytest.raises(ConfigError, match="strategy"):
        FusionConfig("nope").validate()
    with pytest.raises(ConfigError, match="common_channels"):
        FusionConfig(common_channels=0).validate()
    with pytest.raises(ConfigError, match="alpha"):
        MSFPN([[4]], FusionConfig(), alpha=0.7)
    with pytest.raises(ConfigError):
        MSFPN([[4, 4], [4]], FusionConfig())


def test_simple_fpn_with_other_alpha_resizes_to_target():
    fpn = MSFPN([[4, 4], [4, 4]], FusionConfig("simple_fpn", 4), alpha=0.7)
    raw = [[torch.randn(1, 4, 4, 4), torch.randn(1, 4, 8, 8)],
           [torch.randn(1, 4, 3, 3), torch.randn(1, 4, 6, 6)]]
    fused = fpn(raw)
    assert fused[0][1].shape == (1, 4, 8, 8)
