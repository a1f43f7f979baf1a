"""Command-line entry point: synth, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 runtime failure (one-line message on stderr),
2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .data import (emit_metrics_csv, load_dataset, read_manifest, read_pgm, synthesize_dataset,
                   write_pgm, MANIFEST)
from .errors import ConfigError, DataError
from .model import ModelConfig, MsvMamba
from .tensor import Tensor
from .train import Trainer, TrainConfig, evaluate

log = logging.getLogger("msvmamba")

CKPT_NAME = "model.ckpt"
METRICS_NAME = "metrics.csv"


# -- config files --------------------------------------------------------------

def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join("x".join(str(i) for i in w) for w in v)
        return ",".join(_format_value(i) for i in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], tuple):
                return tuple(tuple(int(v) for v in it.split("x")) for it in items)
            kind = type(default[0]) if default else float
            return tuple(kind(it) for it in items)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None


def _defaults() -> dict:
    out = {f.name: getattr(ModelConfig(), f.name) for f in dataclasses.fields(ModelConfig)}
    out.update({f.name: getattr(TrainConfig(), f.name) for f in dataclasses.fields(TrainConfig)})
    out["eval_every"] = 0
    return out


def parse_config_text(text: str, origin: str = "config") -> dict:
    """``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    defaults = _defaults()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        if key not in defaults:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, defaults[key])
    return values


def split_config(values: dict) -> tuple[dict, dict, int]:
    model_keys = set(ModelConfig.field_names())
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    return ({k: v for k, v in values.items() if k in model_keys},
            {k: v for k, v in values.items() if k in train_keys},
            int(values.get("eval_every", 0)))


def model_meta(cfg: ModelConfig) -> dict[str, str]:
    return {k: _format_value(v) for k, v in cfg.to_dict().items() if k != "windows"} | {
        "windows": _format_value(cfg.windows)}


def model_from_meta(meta: dict[str, str]) -> ModelConfig:
    known = set(ModelConfig.field_names())
    text = "\n".join(f"{k} = {v}" for k, v in meta.items() if k in known)
    model_kw, _, _ = split_config(parse_config_text(text, "checkpoint metadata"))
    return ModelConfig(**model_kw)


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    recs = synthesize_dataset(args.out, args.count, args.seed, classes=args.classes,
                              size=args.size, val_fraction=args.val_fraction)
    log.info("wrote %d phantoms to %s", len(recs), args.out)
    return 0


def _dataset_classes(data_dir) -> int:
    return max(r.spec.classes for r in read_manifest(Path(data_dir) / MANIFEST))


def cmd_train(args) -> int:
    values = parse_config_text(Path(args.config).read_text(encoding="utf-8"), args.config) \
        if args.config else {}
    model_kw, train_kw, eval_every = split_config(values)
    model_kw.setdefault("classes", _dataset_classes(args.data))
    for flag, key in ((args.no_lms, "use_lms"), (args.no_aux, "use_aux"), (args.no_msaa, "use_msaa")):
        if flag:
            model_kw[key] = False
    cfg = ModelConfig(**model_kw)
    tcfg = TrainConfig(**train_kw)
    images, masks, _ = load_dataset(args.data, "train")
    try:
        val = load_dataset(args.data, "val")
    except DataError:  # no validation split
        val = None
    if masks.max() >= max(cfg.classes, 2):
        raise ConfigError(f"dataset has label {int(masks.max())} but classes = {cfg.classes}")

    model = MsvMamba(cfg)
    trainer = Trainer(model, images, masks, tcfg)
    log.info("epsilon = %s (use_lms=%s use_aux=%s use_msaa=%s)", cfg.loss_config().epsilon,
             cfg.use_lms, cfg.use_aux, cfg.use_msaa)
    rows = []

    def evaluate_all():
        rows.extend(evaluate(model, images, masks, trainer.step, "train").rows)
        if val is not None:
            rows.extend(evaluate(model, val[0], val[1], trainer.step, "val", sample_ids=val[2]).rows)

    def on_step(tr, out):
        if eval_every and tr.step % eval_every == 0 and tr.step < tcfg.steps:
            evaluate_all()

    trainer.run(tcfg.steps, on_step)
    evaluate_all()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_io.save(out / CKPT_NAME, ckpt_io.from_trainer(trainer, model_meta(cfg)))
    emit_metrics_csv(rows, out / METRICS_NAME)
    final = [r for r in rows if r.cls == "mean" and r.step == trainer.step]
    for r in final:
        log.info("step %d %s mean dice %.4f", r.step, r.split, r.dice)
    return 0


def load_model(path) -> tuple[MsvMamba, int]:
    """Rebuild the network from checkpoint metadata; returns (model, step)."""
    ck = ckpt_io.load(path)
    model = MsvMamba(model_from_meta(ck.meta))
    model.load_state_dict(ck.tensors)
    model.eval()
    return model, ck.step


def cmd_eval(args) -> int:
    model, step = load_model(args.ckpt)
    images, masks, ids = load_dataset(args.data, args.split)
    result = evaluate(model, images, masks, step, args.split or "all", sample_ids=ids)
    emit_metrics_csv(result.rows + (result.per_sample if args.per_sample else []), args.csv)
    log.info("mean dice %.4f over %d samples", result.mean_dice, len(images))
    return 0


def overlay(image: np.ndarray, labels: np.ndarray, classes: int) -> np.ndarray:
    """Grey image with foreground classes blended toward white."""
    img = np.clip(np.rint(image * 255.0), 0, 255)
    top = max(classes - 1, 1)
    level = labels.astype(np.float64) / top * 255.0
    out = np.where(labels > 0, 0.5 * img + 0.5 * level, img)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def cmd_predict(args) -> int:
    model, _ = load_model(args.ckpt)
    image = read_pgm(args.image)
    h, w = image.shape
    labels = model.predict_labels(Tensor(image[None, None]))[0]
    write_pgm(args.mask_out, labels.astype(np.uint8))
    over = args.overlay_out or str(Path(args.mask_out).with_suffix("")) + "_overlay.pgm"
    write_pgm(over, overlay(image, labels, max(model.cfg.classes, 2)))
    log.info("wrote %s and %s (%dx%d)", args.mask_out, over, w, h)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    dtype = np.float64 if args.f64 else np.float32
    results = run_suite(dtype, log=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"({np.dtype(dtype).name}, tolerance {results[0].tolerance:g})")
    return 1 if failed else 0


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msvmamba", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a phantom dataset and manifest")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, choices=(2, 3), default=2)
    s.add_argument("--size", type=int, default=112)
    s.add_argument("--val-fraction", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--no-lms", action="store_true", help="replace LMS mixing by residual conv blocks")
    t.add_argument("--no-aux", action="store_true", help="drop the auxiliary losses (epsilon = 0)")
    t.add_argument("--no-msaa", action="store_true", help="disable the attention aggregation")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--csv", required=True)
    e.add_argument("--split", default=None, help="manifest split to use (default: all)")
    e.add_argument("--per-sample", action="store_true", help="append per-sample rows")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment one PGM image")
    r.add_argument("--image", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--mask-out", required=True)
    r.add_argument("--overlay-out")
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--f64", action="store_true", help="check in float64 (tolerance 1e-5)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("msvmamba: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # every runtime failure -> one line, exit 1
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"msvmamba {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
