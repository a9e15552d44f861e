import numpy as np
import pytest
import torch

from hrdnet.config import HRDNetConfig
from hrdnet.msfpn import FusionConfig
from hrdnet.streams import StreamSpec

torch.set_num_threads(1)


def tiny_config(n_streams=2, levels=2, channels=8, strategy="aligned_by_depth",
                extra_levels=1, anchor_scales=(1.0,), **kw) -> HRDNetConfig:
    specs = [StreamSpec(i, [1 + i] * levels, [channels] * levels, channels)
             for i in range(n_streams)]
    return HRDNetConfig(
        n_streams=n_streams, levels=levels, stream_specs=specs,
        fusion=FusionConfig(strategy, channels, extra_levels),
        **kw,
    ).copy(head={"num_classes": 3, "anchor_scales": list(anchor_scales),
                 "anchor_ratios": [0.5, 1.0, 2.0], "tower_convs": 1})


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, title, passed, detail)``; printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, title, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
