"""SGD training loop with warm-up/step schedule, periodic validation and best-AP checkpointing."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import HRDNetConfig
from .data import Dataset
from .errors import ConfigError, NumericError
from .evaluation import EvalReport, evaluate_dataset
from .geometry import AnnotatedImage, aligned_size, crop_quadrants, resize
from .head import AnchorTargets, LossBundle, assign_targets, compute_loss
from .model import HRDNet, predict_dataset, to_input
from .schedule import Schedule, lr_at

log = logging.getLogger(__name__)


@dataclass
class Batch:
    images: torch.Tensor
    targets: list[AnchorTargets]


def make_optimizer(model: HRDNet, schedule: Schedule) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=schedule.base_lr,
                           momentum=schedule.momentum, weight_decay=schedule.weight_decay)


def training_items(dataset: Dataset, cfg: HRDNetConfig) -> list[tuple[AnnotatedImage, float, float]]:
    """Samples to iterate over, each with its (y, x) resize factor to the model resolution.

    Quadrant patches keep the factor of their parent image so object scale
    is the same as at test time.
    """
    items = []
    for s in dataset.samples:
        fy, fx = cfg.resolution[0] / s.height, cfg.resolution[1] / s.width
        if cfg.train_on_patches:
            items += [(p, fy, fx) for p in crop_quadrants(s)]
            if cfg.mix_full_images:
                items.append((s, fy, fx))
        else:
            items.append((s, fy, fx))
    return items


def make_batch(model: HRDNet, items: list[tuple[AnnotatedImage, float, float]]) -> Batch:
    images, boxes = [], []
    for sample, fy, fx in items:
        size = (max(1, round(sample.height * fy)), max(1, round(sample.width * fx)))
        images.append(resize(to_input(sample.image), size))
        boxes.append(sample.boxes * np.array([fx, fy, fx, fy]))
    h = max(im.shape[-2] for im in images)
    w = max(im.shape[-1] for im in images)
    h, w = aligned_size(h, w, model.divisor)
    batch = torch.zeros((len(images), images[0].shape[0], h, w))
    for k, im in enumerate(images):
        batch[k, :, :im.shape[-2], :im.shape[-1]] = im
    anchors = model.anchors(h, w).all()
    targets = [assign_targets(anchors, b, s.labels) for b, (s, _, _) in zip(boxes, items)]
    return Batch(batch, targets)


def train_step(model: HRDNet, batch: Batch, optimizer: torch.optim.Optimizer, lr: float,
               grad_clip: float | None = None, reg_weight: float = 1.0,
               iteration: int | None = None) -> tuple[LossBundle, torch.optim.Optimizer]:
    """One SGD update; raises :class:`NumericError` on a non-finite loss."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    optimizer.zero_grad()
    logits, deltas = model(batch.images)
    try:
        loss = compute_loss(logits, deltas, batch.targets, reg_weight)
    except NumericError as exc:
        raise NumericError(f"iteration {iteration} (lr={lr:g}): {exc}") from exc
    if not torch.isfinite(loss.total):
        raise NumericError(
            f"non-finite loss at iteration {iteration} (lr={lr:g}): "
            f"cls={float(loss.classification_loss):g} reg={float(loss.regression_loss):g}")
    loss.total.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return loss, optimizer


@dataclass
class TrainResult:
    model: HRDNet
    best_checkpoint: Path | None
    last_checkpoint: Path | None
    history: list[dict] = field(default_factory=list)
    best_report: EvalReport | None = None


def _round(x):
    return None if x is None else round(float(x), 6)


def train_loop(cfg: HRDNetConfig, train_set: Dataset, val_set: Dataset | None = None,
               run_dir=None, resume=None, stop_after_epoch: int | None = None) -> TrainResult:
    """Train ``cfg`` on ``train_set``; validate on ``val_set`` every ``eval_interval`` epochs.

    Writes ``last.npz``, ``best.npz`` and an append-only ``metrics.jsonl``
    into ``run_dir`` when given. ``resume`` continues from a checkpoint
    written by an earlier call.
    """
    if len(train_set) == 0:
        raise ConfigError("data.train: training dataset is empty")
    torch.manual_seed(cfg.seed)
    schedule = cfg.schedule
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)

    if resume:
        model, meta, optimizer = load_checkpoint(resume, lambda m: make_optimizer(m, schedule))
        start_epoch = meta.get("epoch", 0)
        global_iter = meta.get("global_iter", 0)
        best_ap = meta.get("best_ap", -1.0)
    else:
        model = HRDNet(cfg)
        optimizer = make_optimizer(model, schedule)
        start_epoch, global_iter, best_ap = 0, 0, -1.0

    items = training_items(train_set, cfg)
    history: list[dict] = []
    best_path = last_path = None
    best_report = None

    def meta(epoch):
        return {"epoch": epoch, "global_iter": global_iter, "best_ap": best_ap}

    if schedule.total_epochs == 0 and run_dir:
        last_path = save_checkpoint(run_dir / "last.npz", model, optimizer, meta(0))
        best_path = save_checkpoint(run_dir / "best.npz", model, optimizer, meta(0))

    end_epoch = schedule.total_epochs if stop_after_epoch is None else min(
        schedule.total_epochs, stop_after_epoch)
    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(items))
        sums = {"loss": 0.0, "loss_cls": 0.0, "loss_reg": 0.0}
        n_steps = 0
        lr = lr_at(global_iter, epoch, schedule)
        for start in range(0, len(order), cfg.batch_size):
            batch = make_batch(model, [items[k] for k in order[start:start + cfg.batch_size]])
            lr = lr_at(global_iter, epoch, schedule)
            loss, optimizer = train_step(model, batch, optimizer, lr, schedule.grad_clip,
                                         cfg.head.reg_weight, global_iter)
            for k, v in loss.as_dict().items():
                sums[k] += v
            n_steps += 1
            global_iter += 1

        record = {"epoch": epoch + 1, "iters": global_iter, "lr": lr}
        record.update({k: _round(v / max(1, n_steps)) for k, v in sums.items()})
        report = None
        if val_set is not None and ((epoch + 1) % cfg.eval_interval == 0 or epoch + 1 == end_epoch):
            report = evaluate_dataset(val_set, predict_dataset(model, val_set))
            record["val"] = {k: _round(v) for k, v in report.as_dict().items()}
        record["elapsed"] = round(time.perf_counter() - t0, 2)
        history.append(record)
        log.info("epoch %d: %s", epoch + 1, json.dumps(record))

        ap = -1.0 if report is None or report.ap is None else report.ap
        improved = report is not None and ap > best_ap
        if improved:
            best_ap = ap
            best_report = report
        if run_dir:
            with open(run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            last_path = save_checkpoint(run_dir / "last.npz", model, optimizer, meta(epoch + 1))
            if improved or val_set is None or best_path is None:
                best_path = save_checkpoint(run_dir / "best.npz", model, optimizer, meta(epoch + 1))

    return TrainResult(model, best_path, last_path, history, best_report)

