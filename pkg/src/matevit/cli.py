"""``matevit`` command line: train, eval, predict, flops, gradcheck, route-stats.

Every command accepts ``--config`` (a YAML run config; unknown keys are
rejected), ``--seed`` and ``--out``. Flags override the config file.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .data import SyntheticSpec, generate_synthetic, load_all, read_meta
from .errors import CheckpointError, ConfigError, DatasetError, MateVitError
from .metrics import write_metrics_csv
from .model import (MateVitConfig, TrainState, end_to_end_gradcheck, evaluate, fit, load_checkpoint,
                    predict_masks, save_checkpoint)
from .profiling import count_flops, count_params

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

GRADCHECK_TOL = 1e-4


@dataclass
class DataConfig:
    root: str | None = None  # directory in the dataset layout
    synthetic: bool = False
    synthetic_spec: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class RunConfig:
    """A model config plus run options; YAML keys mirror the field names.

    ``model`` keys (``backbone``, ``gate``, ``heads``, ``seed``, ``optimizer``,
    ``schedule``, ``augment``, ``dtype``) sit at the top level next to
    ``data``, ``out``, ``eval_every`` and ``checkpoint``.
    """

    model: MateVitConfig = field(default_factory=MateVitConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/matevit"
    eval_every: int = 10
    checkpoint: str | None = None

    RUN_KEYS = ("data", "out", "eval_every", "checkpoint")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("run config must be a mapping")
        d = dict(d)
        run = {k: d.pop(k) for k in cls.RUN_KEYS if k in d}
        model = MateVitConfig.from_dict(d)
        data = run.pop("data", None) or {}
        if not isinstance(data, dict):
            raise ConfigError("config section 'data' must be a mapping")
        data = dict(data)
        allowed = {f.name for f in dataclasses.fields(DataConfig)}
        for key in data:
            if key not in allowed:
                raise ConfigError(f"unknown config key 'data.{key}'")
        spec = data.pop("synthetic_spec", None) or {}
        spec_fields = {f.name for f in dataclasses.fields(SyntheticSpec)}
        for key in spec:
            if key not in spec_fields:
                raise ConfigError(f"unknown config key 'data.synthetic_spec.{key}'")
        try:
            data_cfg = DataConfig(synthetic_spec=SyntheticSpec(**spec), **data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data: {exc}") from exc
        return cls(model=model, data=data_cfg, **run)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
        return cls.from_dict(doc or {})

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d["data"] = dataclasses.asdict(self.data)
        d.update(out=self.out, eval_every=self.eval_every, checkpoint=self.checkpoint)
        return d


def palette(n: int = 256) -> list:
    """Fixed indexed-colour palette: the bit-interleaved colour map of PASCAL VOC.

    Class ``c`` takes the bits of ``c`` spread over R, G and B from the most
    significant bit down; index 255 (ignore) is white.
    """
    out = []
    for c in range(n):
        r = g = b = 0
        v = c
        for shift in range(7, -1, -1):
            r |= (v & 1) << shift
            g |= ((v >> 1) & 1) << shift
            b |= ((v >> 2) & 1) << shift
            v >>= 3
        out += [r, g, b]
    out[255 * 3:255 * 3 + 3] = [255, 255, 255]
    return out


# -- helpers -------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run.model.seed = args.seed
    if args.out is not None:
        run.out = args.out
    if getattr(args, "synthetic", False):
        run.data.synthetic = True
    if getattr(args, "data", None):
        run.data.root = args.data
    if getattr(args, "epochs", None) is not None:
        run.model.schedule.epochs = args.epochs
    return run


def _dataset(run: RunConfig, cfg: MateVitConfig) -> list:
    data = run.data
    if data.synthetic:
        spec = data.synthetic_spec
        classes = [h.n_classes for h in cfg.heads] + [spec.material_classes]
        try:
            spec = dataclasses.replace(spec, image_size=cfg.backbone.image_size,
                                       object_classes=classes[0], material_classes=classes[1])
        except ValueError as exc:
            raise ConfigError(f"synthetic data cannot serve this model: {exc}") from exc
        samples = generate_synthetic(spec)
        return [s for s in samples if s.task_id < cfg.n_tasks]
    if not data.root:
        raise ConfigError("no dataset: pass --data DIR, --synthetic, or set data.root")
    tasks = read_meta(data.root)
    for t, name, k in tasks:
        if t >= cfg.n_tasks:
            raise ConfigError(f"dataset task {t} ({name}) has no head in the model")
        if k != cfg.heads[t].n_classes:
            raise ConfigError(f"class-count mismatch for task {t} ({name}): dataset has {k}, "
                              f"model head has {cfg.heads[t].n_classes}")
    samples, _ = load_all(data.root)
    return samples


def _state(args, run: RunConfig) -> TrainState:
    path = getattr(args, "checkpoint", None) or run.checkpoint
    if not path:
        raise ConfigError("a checkpoint is required (--checkpoint PATH)")
    return load_checkpoint(path)


def _print_metrics(cfg, results):
    print(f"{'task':<12}{'pixel_acc':>10}{'mIoU':>8}  per-class IoU")
    for t, m in sorted(results.items()):
        ious = " ".join("  -  " if np.isnan(v) else f"{v:.3f}" for v in m["per_class_iou"])
        print(f"{cfg.heads[t].name:<12}{m['pixel_acc']:>10.4f}{m['miou']:>8.4f}  {ious}")


# -- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    run = _run_config(args)
    if args.resume:
        state = load_checkpoint(args.resume)
        cfg = state.model.cfg
    else:
        cfg = run.model
        state = TrainState.fresh(cfg)
    dataset = _dataset(run, cfg)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else print
    state, rows = fit(dataset, state=state, eval_every=run.eval_every, log=log)
    save_checkpoint(out / "checkpoint.mvt", state)
    write_metrics_csv(out / "metrics.csv", rows)
    results = evaluate(dataset, state.model)
    for t, m in sorted(results.items()):
        print(f"final {cfg.heads[t].name} mIoU={m['miou']:.4f} pixel_acc={m['pixel_acc']:.4f}")
    print(f"wrote {out / 'checkpoint.mvt'} and {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = _run_config(args)
    state = _state(args, run)
    dataset = _dataset(run, state.model.cfg)
    _print_metrics(state.model.cfg, evaluate(dataset, state.model))
    return EXIT_OK


def _input_images(args, run, size) -> list:
    paths = []
    for p in args.images or []:
        p = Path(p)
        paths += sorted(p.glob("*.png")) if p.is_dir() else [p]
    if paths:
        out = []
        for p in paths:
            try:
                img = Image.open(p).convert("RGB")
            except OSError as exc:
                raise DatasetError(f"cannot read image {p}: {exc}") from exc
            if img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            out.append((p.stem, np.asarray(img, dtype=np.float32) / 255.0))
        return out
    if run.data.synthetic or run.data.root:
        return None
    raise ConfigError("nothing to predict: pass --images, --data or --synthetic")


def cmd_predict(args) -> int:
    run = _run_config(args)
    state = _state(args, run)
    cfg = state.model.cfg
    images = _input_images(args, run, cfg.backbone.image_size)
    if images is None:
        seen = {}
        for s in _dataset(run, cfg):
            seen.setdefault(s.name, s.image)
        images = list(seen.items())
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    pal = palette()
    for stem, img in images:
        for head, mask in zip(cfg.heads, predict_masks(state.model, img)):
            im = Image.frombytes("P", mask.shape[::-1], np.ascontiguousarray(mask).tobytes())
            im.putpalette(pal)
            im.save(out / f"{stem}_{head.name}.png")
    print(f"wrote {len(images) * cfg.n_tasks} masks to {out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    run = _run_config(args)
    cfg = load_checkpoint(args.checkpoint).model.cfg if args.checkpoint else run.model
    ledger = count_flops(cfg, args.resolution, backbone_only=args.backbone_only)
    params = count_params(cfg)
    print(ledger.table())
    print(f"params: {params['total']:,} ({params['total'] / 1e6:.3f} M)")
    csv_text = ledger.to_csv()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "flops.csv").write_text(csv_text)
        print(f"wrote {out / 'flops.csv'}")
    else:
        print()
        print(csv_text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    err = end_to_end_gradcheck(seed=seed, max_entries=args.max_entries)
    ok = err < GRADCHECK_TOL
    print(f"max relative error {err:.3e} (tolerance {GRADCHECK_TOL:.0e}): {'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_route_stats(args) -> int:
    run = _run_config(args)
    if args.checkpoint or run.checkpoint:
        model = _state(args, run).model
    else:
        model = TrainState.fresh(run.model).model
    cfg = model.cfg
    seen = {}
    for s in _dataset(run, cfg):
        seen.setdefault(s.name, s.image)
    images = np.stack(list(seen.values()))
    counts = np.zeros((cfg.n_tasks, cfg.gate.n_experts), dtype=np.int64)
    for i in range(0, len(images), 8):
        counts += model.route_counts(images[i:i + 8])
    shares = counts / counts.sum(axis=1, keepdims=True)
    print(f"token share per expert ({len(images)} images, top-{cfg.gate.m} of {cfg.gate.n_experts})")
    for t, head in enumerate(cfg.heads):
        print(f"gate {head.name}:")
        for e, share in enumerate(shares[t]):
            print(f"  expert {e}: {share:6.3f} {'#' * int(round(share * 40))}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int, help="override the model seed")
    common.add_argument("--out", help="output directory")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory (images/, masks_<task>/, dataset.meta)")
    data.add_argument("--synthetic", action="store_true", help="use the generated two-task dataset")
    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", help="checkpoint file written by train")

    p = argparse.ArgumentParser(prog="matevit", description=__doc__.splitlines()[0].replace("``", ""))
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common, data], help="train and write checkpoint + metrics CSV")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common, data, ckpt], help="print per-task metrics")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", parents=[common, data, ckpt], help="write one indexed-colour PNG per task")
    pr.add_argument("--images", nargs="+", help="image files or directories of PNGs")
    pr.set_defaults(func=cmd_predict)

    f = sub.add_parser("flops", parents=[common, ckpt], help="itemized FLOP ledger")
    f.add_argument("--resolution", type=int, help="input side length (default: config image size)")
    f.add_argument("--backbone-only", action="store_true", help="stop the ledger after the upsampler")
    f.set_defaults(func=cmd_flops)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the mini model")
    g.add_argument("--max-entries", type=int, default=4, help="entries probed per tensor")
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("route-stats", parents=[common, data, ckpt], help="per-gate expert token shares")
    r.set_defaults(func=cmd_route_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, MateVitError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
