"""Command-line entry points: train, eval, infer, profile, gen-data, ablate.

Every command writes its artifacts under a run directory (``--run-dir``,
default ``runs/<command>-<timestamp>``) next to a snapshot of the resolved
config it ran with.
"""
from __future__ import annotations

import argparse
import json
import logging
import random
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .ablation import ensemble_ablation, fusion_ablation, single_stream_config
from .checkpoint import load_checkpoint
from .config import HRDNetConfig, load_config, save_config
from .data import SceneSpec, generate_dataset, load_annotations, scene_spec_dict, write_dataset
from .errors import ConfigError, HRDNetError
from .evaluation import evaluate_dataset
from .geometry import aligned_size
from .model import HRDNet, input_size, predict, predict_dataset
from .postprocess import save_detections, to_records
from .training import train_loop

log = logging.getLogger("hrdnet")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
PROFILE_WARMUP = 3
PROFILE_ITERS = 20


def set_determinism(seed: int, deterministic: bool) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def make_run_dir(args, command: str) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        path = Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve(path, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def _config(args) -> tuple[HRDNetConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.copy(seed=args.seed)
    return cfg, Path(args.config).resolve().parent


def _datasets(cfg: HRDNetConfig, base: Path, need_val: bool = False):
    if not cfg.data.train:
        raise ConfigError("data.train: path to a training annotation file is required")
    train = load_annotations(_resolve(cfg.data.train, base))
    val = load_annotations(_resolve(cfg.data.val, base)) if cfg.data.val else None
    if need_val and val is None:
        raise ConfigError("data.val: path to a validation annotation file is required")
    return train, val


def _emit(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=1)
    print(text)
    if path is not None:
        path.write_text(text + "\n")


def cmd_train(args) -> int:
    cfg, base = _config(args)
    run_dir = make_run_dir(args, "train")
    save_config(cfg, run_dir / "config.yaml")
    train_set, val_set = _datasets(cfg, base)
    result = train_loop(cfg, train_set, val_set, run_dir)
    summary = {
        "run_dir": str(run_dir),
        "best_checkpoint": str(result.best_checkpoint) if result.best_checkpoint else None,
        "last_checkpoint": str(result.last_checkpoint) if result.last_checkpoint else None,
        "epochs": len(result.history),
        "best": result.best_report.as_dict() if result.best_report else None,
    }
    _emit(summary, run_dir / "summary.json")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    run_dir = make_run_dir(args, "eval")
    save_config(model.cfg, run_dir / "config.yaml")
    dataset = load_annotations(args.dataset)
    scales = model.cfg.test_scales if args.multi_scale else None
    dets = predict_dataset(model, dataset, scales)
    records = []
    for s in dataset.samples:
        records += to_records(s.image_id, dets[s.image_id], s.file_name, dataset.category_ids)
    save_detections(run_dir / "detections.json", records)
    _emit(evaluate_dataset(dataset, dets).as_dict(), run_dir / "report.json")
    return 0


def _image_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"--images: {directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_infer(args) -> int:
    """Detect on every image of a directory; class ids are written 1-based."""
    model, _, _ = load_checkpoint(args.checkpoint)
    run_dir = make_run_dir(args, "infer")
    save_config(model.cfg, run_dir / "config.yaml")
    category_ids = list(range(1, model.cfg.head.num_classes + 1))
    records = []
    files = _image_files(args.images)
    for image_id, path in enumerate(files, start=1):
        image = np.asarray(Image.open(path).convert("RGB"))
        dets = predict(model, image, model.cfg.test_scales if args.multi_scale else None)
        records += to_records(image_id, dets, path.name, category_ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_detections(out, records)
    save_detections(run_dir / "detections.json", records)
    print(f"{len(records)} detections on {len(files)} images -> {out}")
    return 0


def profile_model(cfg: HRDNetConfig, iters: int = PROFILE_ITERS, warmup: int = PROFILE_WARMUP) -> dict:
    """Parameter count and median single-image inference throughput."""
    model = HRDNet(cfg).eval()
    h, w = aligned_size(*input_size(cfg.resolution), model.divisor)
    g = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn((1, cfg.input_channels, h, w), generator=g)
    times = []
    with torch.no_grad():
        for k in range(warmup + iters):
            t0 = time.perf_counter()
            model(x)
            if k >= warmup:
                times.append(time.perf_counter() - t0)
    median = statistics.median(times)
    return {"params": model.parameter_count(), "items_per_second": 1.0 / median,
            "median_seconds": median, "iterations": iters,
            "input_size": list(x.shape[-2:])}


def cmd_profile(args) -> int:
    cfg, _ = _config(args)
    run_dir = make_run_dir(args, "profile")
    save_config(cfg, run_dir / "config.yaml")
    rows = {"hrdnet": profile_model(cfg, args.iters)}
    if cfg.n_streams > 1:
        rows["stream_0"] = profile_model(single_stream_config(cfg, 0), args.iters)
    lines = [f"{'model':<10} {'params':>10} {'items/s':>9}"]
    lines += [f"{k:<10} {v['params']:>10d} {v['items_per_second']:>9.2f}" for k, v in rows.items()]
    print("\n".join(lines))
    (run_dir / "profile.json").write_text(json.dumps(rows, indent=1) + "\n")
    return 0


def cmd_gen_data(args) -> int:
    """Spec file: SceneSpec fields plus ``splits: {name: count}``."""
    doc = yaml.safe_load(Path(args.spec).read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.spec}: expected a mapping")
    splits = doc.pop("splits", {"train": 100, "val": 20})
    unknown = sorted(set(doc) - set(SceneSpec.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    spec = SceneSpec.from_dict(doc)
    spec.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    offset, written = 0, {}
    for split, count in splits.items():
        if int(count) < 0:
            raise ConfigError(f"splits.{split}: count must be >= 0")
        ds = generate_dataset(spec, int(count), split, index_offset=offset)
        written[split] = str(write_dataset(ds, out))
        offset += int(count)
    snapshot = dict(scene_spec_dict(spec), splits=dict(splits))
    (out / "spec.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=False))
    _emit(written)
    return 0


def cmd_ablate(args) -> int:
    cfg, base = _config(args)
    run_dir = make_run_dir(args, "ablate")
    save_config(cfg, run_dir / "config.yaml")
    train_set, val_set = _datasets(cfg, base, need_val=True)
    run = fusion_ablation if args.variants == "fusion" else ensemble_ablation
    table = run(cfg, train_set, val_set, run_dir)
    print(table.format())
    (run_dir / "ablation.json").write_text(json.dumps(table.as_dict(), indent=1) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single thread, deterministic kernels")
    common.add_argument("--run-dir", default=None, help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hrdnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="annotation file")
    p.add_argument("--multi-scale", action="store_true", help="merge the configured test scales")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="detect on a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--multi-scale", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("profile", parents=[common], help="parameter count and items/second")
    p.add_argument("--config", required=True)
    p.add_argument("--iters", type=int, default=PROFILE_ITERS)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ablate", parents=[common], help="fusion or ensemble comparison table")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", choices=("fusion", "ensemble"), required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "iters", PROFILE_ITERS) < PROFILE_ITERS:
        print(f"error: --iters must be >= {PROFILE_ITERS}", file=sys.stderr)
        return 2
    set_determinism(0 if args.seed is None else args.seed, args.deterministic)
    try:
        return args.func(args)
    except HRDNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
