"""Ablation drivers: fusion-strategy comparison, HRDNet vs single backbones vs
their ensemble, and the multi-seed resolution/depth trend experiment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import HRDNetConfig
from .data import Dataset
from .evaluation import EvalReport, evaluate_dataset
from .model import predict_dataset
from .msfpn import STRATEGIES
from .postprocess import ensemble_merge
from .streams import StreamSpec
from .training import train_loop

log = logging.getLogger(__name__)

FUSION_COLUMNS = ("ap", "ap50", "ap75")
ENSEMBLE_COLUMNS = ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large")


@dataclass
class AblationRow:
    name: str
    report: EvalReport
    params: int | None = None

    def values(self, columns) -> dict:
        d = self.report.as_dict()
        return {c: d[c] for c in columns}


@dataclass
class AblationTable:
    title: str
    columns: tuple[str, ...]
    rows: list[AblationRow] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"title": self.title, "columns": list(self.columns),
                "rows": [{"name": r.name, "params": r.params, **r.values(self.columns)}
                         for r in self.rows]}

    def format(self) -> str:
        def cell(v):
            return "-" if v is None else f"{100 * v:.1f}"
        width = max([len("variant")] + [len(r.name) for r in self.rows])
        lines = [self.title,
                 f"{'variant':<{width}}  " + "  ".join(f"{c:>9}" for c in self.columns)]
        for r in self.rows:
            vals = r.values(self.columns)
            lines.append(f"{r.name:<{width}}  " + "  ".join(f"{cell(vals[c]):>9}" for c in self.columns))
        return "\n".join(lines)


def single_stream_config(cfg: HRDNetConfig, stream: int) -> HRDNetConfig:
    """The ``stream``-th backbone of ``cfg`` alone, fed the image size it sees inside the pyramid."""
    spec = cfg.stream_specs[stream]
    scale = cfg.alpha ** stream
    d = cfg.to_dict()
    d["n_streams"] = 1
    d["stream_specs"] = [StreamSpec(0, list(spec.blocks_per_stage), list(spec.stage_channels),
                                    spec.stem_channels).__dict__]
    d["resolution"] = [max(1, round(r * scale)) for r in cfg.resolution]
    # a lone stream has nothing to align with
    d["fusion"] = dict(d["fusion"], strategy="simple_fpn")
    return HRDNetConfig.from_dict(d)


def _run(cfg: HRDNetConfig, train_set: Dataset, val_set: Dataset, run_dir, name: str):
    sub = Path(run_dir) / name if run_dir else None
    result = train_loop(cfg, train_set, None, sub)
    report = evaluate_dataset(val_set, predict_dataset(result.model, val_set))
    log.info("%s: %s", name, report.to_json())
    return result.model, report


def fusion_ablation(cfg: HRDNetConfig, train_set: Dataset, val_set: Dataset,
                    run_dir=None) -> AblationTable:
    """Train one model per fusion strategy from the same seed and data."""
    table = AblationTable("MS-FPN style", FUSION_COLUMNS)
    for strategy in STRATEGIES:
        variant = cfg.copy(fusion=dict(cfg.fusion.__dict__, strategy=strategy))
        model, report = _run(variant, train_set, val_set, run_dir, strategy)
        table.rows.append(AblationRow(strategy, report, model.parameter_count()))
    return table


def ensemble_ablation(cfg: HRDNetConfig, train_set: Dataset, val_set: Dataset,
                      run_dir=None) -> AblationTable:
    """HRDNet against each of its backbones trained alone and their pre-NMS ensemble."""
    table = AblationTable("HRDNet vs model ensemble", ENSEMBLE_COLUMNS)
    model, report = _run(cfg, train_set, val_set, run_dir, "hrdnet")
    table.rows.append(AblationRow("hrdnet", report, model.parameter_count()))

    raw, params = [], 0
    for i in range(cfg.n_streams):
        single_cfg = single_stream_config(cfg, i)
        single, report = _run(single_cfg, train_set, val_set, run_dir, f"single_{i}")
        params += single.parameter_count()
        table.rows.append(AblationRow(f"single_{i}@{single_cfg.resolution[0]}", report,
                                      single.parameter_count()))
        raw.append(predict_dataset(single, val_set, raw=True))
    merged = {s.image_id: ensemble_merge([r[s.image_id] for r in raw], cfg.head.nms_iou)
              for s in val_set.samples}
    table.rows.append(AblationRow("ensemble", evaluate_dataset(val_set, merged), params))
    return table


@dataclass
class TrendResult:
    seeds: list[int]
    hrdnet_ap_small: list[float]
    single_ap_small: list[float]
    informational: dict = field(default_factory=dict)

    @property
    def wins(self) -> int:
        return sum(a > b for a, b in zip(self.hrdnet_ap_small, self.single_ap_small))

    def as_dict(self) -> dict:
        return {"seeds": self.seeds, "hrdnet_ap_small": self.hrdnet_ap_small,
                "single_ap_small": self.single_ap_small, "wins": self.wins,
                "informational": self.informational}


def _ap_small(report: EvalReport) -> float:
    return -1.0 if report.ap_small is None else report.ap_small


def trend_experiment(cfg: HRDNetConfig, train_set: Dataset, val_set: Dataset,
                     seeds=(0, 1, 2), compare_alignment: bool = True, run_dir=None) -> TrendResult:
    """Two-stream HRDNet vs its deepest stream alone at the reduced resolution.

    Every seed trains both models with identical data and schedule. With
    ``compare_alignment`` the first seed also trains the aligned-by-resolution
    variant, reported in ``informational`` only.
    """
    result = TrendResult(list(seeds), [], [])
    deep = cfg.n_streams - 1
    for seed in seeds:
        hrd_cfg = cfg.copy(seed=seed)
        _, rep_a = _run(hrd_cfg, train_set, val_set, run_dir, f"seed{seed}_hrdnet")
        _, rep_b = _run(single_stream_config(hrd_cfg, deep), train_set, val_set, run_dir,
                        f"seed{seed}_single")
        result.hrdnet_ap_small.append(_ap_small(rep_a))
        result.single_ap_small.append(_ap_small(rep_b))
        if compare_alignment and seed == seeds[0]:
            result.informational[f"seed{seed}_{hrd_cfg.fusion.strategy}_ap"] = rep_a.ap
            for strategy in ("aligned_by_resolution",):
                if strategy == hrd_cfg.fusion.strategy:
                    continue
                v = hrd_cfg.copy(fusion=dict(hrd_cfg.fusion.__dict__, strategy=strategy))
                _, rep = _run(v, train_set, val_set, run_dir, f"seed{seed}_{strategy}")
                result.informational[f"seed{seed}_{strategy}_ap"] = rep.ap
    result.informational["mean_hrdnet_ap_small"] = float(np.mean(result.hrdnet_ap_small))
    result.informational["mean_single_ap_small"] = float(np.mean(result.single_ap_small))
    return result
