"""``promptseg`` command line: train-clip, grid-search, segment, filter-masks, evaluate, train-classifier.

Configuration is one YAML file whose sections mirror the config types;
``--section.key=value`` flags override it. Every run writes into a run
directory holding ``config.yaml`` (the fully resolved config) and its
artifacts. Exit codes: 0 ok, 2 configuration error, 3 runtime failure; on
failure a JSON error object goes to stderr.
"""
import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .data import CaptionStyle, DatasetManifest, SplitSpec, build_caption, load_image, split_dataset
from .encoders import (EmbeddingModel, HashBackend, OraclePairedEncoder, PathImageBackend,
                       ProjectionHead)
from .errors import ConfigError, InvalidInputError
from .filters import FilterConfig, filter_pipeline, significant_overlaps
from .masks import ColorRegionProposer, load_masks_json, save_masks_json
from .selector import Pipeline, RandomChooser, RenderMode, select_segment
from .trainer import (GridResult, TrainerConfig, default_grid, grid_search, init_heads,
                      model_from_checkpoint, save_checkpoint, train, write_train_log)

log = logging.getLogger("promptseg")

HOME_ENV = "PROMPTSEG_HOME"
COMMANDS = ("train-clip", "grid-search", "segment", "filter-masks", "evaluate", "train-classifier")

DEFAULTS = {
    "command": None,
    "seed": 0,
    "run_dir": None,
    "jobs": 1,
    "data": {"manifest": None, "image_root": None, "train_fraction": 0.8, "stratify": False,
             "caption_style": "name_only"},
    "backend": {"image": "hash", "text": "hash", "width": 512, "classes": None},
    "trainer": {f.name: f.default for f in fields(TrainerConfig)},
    "grid": {"learning_rates": [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 0.5], "projection_dims": [128, 512]},
    "filter": {f.name: f.default for f in fields(FilterConfig)},
    "proposer": {"kind": "color", "quantize": 1, "duplicates": False, "dilated": False,
                 "min_area": 16, "sam_checkpoint": None, "sam_model": "vit_h"},
    "segment": {"image": None, "prompt": None, "checkpoint": None, "render_mode": "masked_crop"},
    "masks": None,
    "eval": {"n_samples": 400, "checkpoints": {"finetuned": None}, "exemplars": "synthetic",
             "classes": None, "per_class": 5, "oracle": "color_key", "render_mode": "masked_crop",
             "dump_composites": False, "random_baseline": False, "background_tol": 0},
    "classifier": {"epochs": 5, "learning_rate": 1e-3, "batch_size": 32, "pretrained": False},
}
FREE_FORM = {("eval", "checkpoints")}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _merge(base, update, path=()):
    for key, value in update.items():
        dotted = ".".join(path + (key,))
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}", field=dotted)
        if isinstance(base[key], dict) and path + (key,) not in FREE_FORM:
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted!r} must be a mapping", field=dotted)
            _merge(base[key], value, path + (key,))
        else:
            base[key] = value
    return base


def _set_dotted(cfg, dotted, value):
    parts = dotted.split(".")
    node = {}
    cur = node
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    _merge(cfg, node)


def load_config(path=None, overrides=()) -> dict:
    """Defaults <- YAML file <- ``(dotted_key, value)`` overrides; unknown keys are errors."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist", field="config")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping", field="config")
        _merge(cfg, loaded)
    for key, value in overrides:
        _set_dotted(cfg, key, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg) -> None:
    trainer_config(cfg)
    filter_config(cfg)
    split_spec(cfg)
    try:
        CaptionStyle(cfg["data"]["caption_style"])
    except ValueError:
        raise ConfigError(f"unknown caption style {cfg['data']['caption_style']!r}", field="data.caption_style")
    for section in ("segment", "eval"):
        try:
            RenderMode(cfg[section]["render_mode"])
        except ValueError:
            raise ConfigError(f"unknown render mode {cfg[section]['render_mode']!r}",
                              field=f"{section}.render_mode")
    if int(cfg["eval"]["n_samples"]) < 1:
        raise ConfigError("n_samples must be >= 1", field="eval.n_samples")
    if int(cfg["jobs"]) < 1:
        raise ConfigError("jobs must be >= 1", field="jobs")


def _coerce(section, cls, values):
    out = {}
    for f in fields(cls):
        v = values[f.name]
        default = f.default
        try:
            if v is None or isinstance(default, str):
                out[f.name] = v
            elif isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ValueError(v)
                out[f.name] = v
            elif isinstance(default, int) or (default is None and f.name.startswith("max_")):
                if isinstance(v, float) and not v.is_integer():
                    raise ValueError(v)
                out[f.name] = int(v)
            else:
                out[f.name] = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{f.name} has invalid value {v!r}", field=f"{section}.{f.name}")
    return cls(**out)


def trainer_config(cfg) -> TrainerConfig:
    return _coerce("trainer", TrainerConfig, cfg["trainer"])


def filter_config(cfg) -> FilterConfig:
    return _coerce("filter", FilterConfig, cfg["filter"])


def split_spec(cfg) -> SplitSpec:
    d = cfg["data"]
    try:
        fraction = float(d["train_fraction"])
    except (TypeError, ValueError):
        raise ConfigError(f"data.train_fraction has invalid value {d['train_fraction']!r}",
                          field="data.train_fraction")
    return SplitSpec(fraction, int(cfg["seed"]), bool(d["stratify"]))


def config_digest(cfg) -> str:
    body = {k: v for k, v in cfg.items() if k not in ("run_dir", "jobs")}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()[:12]


def prepare_run_dir(cfg) -> Path:
    if cfg["run_dir"]:
        run_dir = Path(cfg["run_dir"])
    else:
        root = Path(os.environ.get(HOME_ENV, "runs"))
        run_dir = root / f"{cfg['command']}-{config_digest(cfg)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return run_dir


def _require_file(cfg, dotted):
    node = cfg
    for p in dotted.split("."):
        node = node[p]
    if node is None or not Path(node).exists():
        raise ConfigError(f"{dotted} must name an existing path, got {node!r}", field=dotted)
    return Path(node)


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def load_manifest(cfg) -> DatasetManifest:
    d = cfg["data"]
    if d["manifest"]:
        return DatasetManifest.from_jsonl(_require_file(cfg, "data.manifest"))
    if d["image_root"]:
        return DatasetManifest.from_directory(_require_file(cfg, "data.image_root"))
    raise ConfigError("set data.manifest or data.image_root", field="data.manifest")


def build_backends(cfg, paths=False, palette=None):
    """(image_backend, text_backend) for ``backend.*``; ``paths`` wraps real image backends for file input."""
    b = cfg["backend"]
    oracle = None
    if "oracle" in (b["image"], b["text"]):
        labels = b["classes"] or (list(palette) if palette else None)
        if not labels:
            raise ConfigError("oracle backends need backend.classes", field="backend.classes")
        oracle = OraclePairedEncoder(labels, dim=max(int(b["width"]), len(labels) + 1))

    if b["image"] == "hash":
        image = HashBackend(int(b["width"]), "image")
    elif b["image"] == "oracle":
        if palette is None:
            raise ConfigError("the oracle image backend needs a colour palette", field="backend.image")
        image = oracle.image_backend(palette)
    elif b["image"] in ("resnet50", "resnet18"):
        from .encoders import TorchvisionImageBackend

        image = TorchvisionImageBackend(b["image"])
        image = PathImageBackend(image) if paths else image
    else:
        raise ConfigError(f"unknown image backend {b['image']!r}", field="backend.image")

    if b["text"] == "hash":
        text = HashBackend(int(b["width"]), "text")
    elif b["text"] == "oracle":
        text = oracle.text_backend()
    elif b["text"] in ("distilbert", "distilbert-base-uncased"):
        from .encoders import HFTextBackend

        text = HFTextBackend("distilbert-base-uncased")
    else:
        raise ConfigError(f"unknown text backend {b['text']!r}", field="backend.text")
    return image, text


def build_proposer(cfg):
    p = cfg["proposer"]
    if p["kind"] == "color":
        return ColorRegionProposer(quantize=int(p["quantize"]), duplicates=bool(p["duplicates"]),
                                   dilated=bool(p["dilated"]), min_area=int(p["min_area"]))
    if p["kind"] == "sam":
        from .masks import SamProposer

        return SamProposer(_require_file(cfg, "proposer.sam_checkpoint"), model_type=p["sam_model"],
                           min_area=int(p["min_area"]))
    raise ConfigError(f"unknown proposer {p['kind']!r}", field="proposer.kind")


def _samples(cfg, manifest):
    style = CaptionStyle(cfg["data"]["caption_style"])
    return manifest.captioned(style)


def _prompt(cfg, text):
    return build_caption(text, CaptionStyle(cfg["data"]["caption_style"]))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _split(cfg, run_dir):
    manifest = load_manifest(cfg)
    train_m, val_m = split_dataset(manifest, split_spec(cfg))
    style = CaptionStyle(cfg["data"]["caption_style"])
    train_m.to_jsonl(run_dir / "train_manifest.jsonl", style)
    val_m.to_jsonl(run_dir / "val_manifest.jsonl", style)
    return train_m, val_m


def cmd_train_clip(cfg, run_dir):
    tc = trainer_config(cfg)
    train_m, val_m = _split(cfg, run_dir)
    image_b, text_b = build_backends(cfg, paths=True)
    result = train(tc, _samples(cfg, train_m), _samples(cfg, val_m), image_b, text_b)
    write_train_log(result.records, run_dir / "train_log.jsonl")
    save_checkpoint(run_dir / "checkpoint.npz", result.image_head, result.text_head, tc, result.optimizer,
                    backends={"image": image_b.descriptor, "text": text_b.descriptor},
                    extra={"best_epoch": result.best_epoch, "caption_style": cfg["data"]["caption_style"]})
    summary = {"best_validation_loss": result.best_validation_loss, "best_epoch": result.best_epoch,
               "final_train_loss": result.records[-1].train_loss, "epochs": len(result.records)}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))


def cmd_grid_search(cfg, run_dir):
    base = trainer_config(cfg)
    grid = default_grid(base, cfg["grid"]["learning_rates"], cfg["grid"]["projection_dims"])
    train_m, val_m = _split(cfg, run_dir)
    image_b, text_b = build_backends(cfg, paths=True)
    result = grid_search(grid, _samples(cfg, train_m), _samples(cfg, val_m), image_b, text_b,
                         jobs=int(cfg["jobs"]))
    report = result.to_dict()
    (run_dir / "grid_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps({"winner": report["winner"], "cells": report["cells"]}, sort_keys=True))


def _overlay(image, mask, color=(255, 0, 0), alpha=0.5):
    out = image.astype(np.float64).copy()
    m = mask.decode()
    out[m] = (1 - alpha) * out[m] + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def cmd_segment(cfg, run_dir):
    from PIL import Image

    image = load_image(_require_file(cfg, "segment.image"))
    prompt = cfg["segment"]["prompt"]
    if not prompt:
        raise ConfigError("segment.prompt must be non-empty", field="segment.prompt")
    image_b, text_b = build_backends(cfg)
    model = model_from_checkpoint(cfg["segment"]["checkpoint"], image_b, text_b)
    pipe = Pipeline(build_proposer(cfg), model, filter_config(cfg), RenderMode(cfg["segment"]["render_mode"]))
    result, masks = pipe.run(image, _prompt(cfg, prompt))
    save_masks_json(masks, run_dir / "masks.json")
    (run_dir / "chosen_mask.json").write_text(json.dumps(result.chosen_mask.to_dict(), indent=1))
    result.chosen_mask.save_png(run_dir / "chosen_mask.png")
    (run_dir / "scores.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True))
    Image.fromarray(_overlay(image, result.chosen_mask)).save(run_dir / "overlay.png")
    print(json.dumps(result.to_dict(), sort_keys=True))


def cmd_filter_masks(cfg, run_dir):
    masks = load_masks_json(_require_file(cfg, "masks"))
    fc = filter_config(cfg)
    out = filter_pipeline(masks, fc)
    save_masks_json(out, run_dir / "masks_filtered.json")
    report = {"input": len(masks), "output": len(out),
              "significant_overlaps_before": [list(p) for p in significant_overlaps(masks, fc)]}
    (run_dir / "filter_report.json").write_text(json.dumps(report, indent=1))
    print(json.dumps({"input": len(masks), "output": len(out)}))


def _eval_pipelines(cfg, pool):
    e = cfg["eval"]
    fc = filter_config(cfg)
    mode = RenderMode(e["render_mode"])
    proposer = build_proposer(cfg)
    if e["random_baseline"]:
        return {"random": Pipeline(proposer, None, fc, mode, RandomChooser(int(cfg["seed"])), "random")}
    image_b, text_b = build_backends(cfg, palette=pool.palette)
    pipes = {}
    for name, ckpt in e["checkpoints"].items():
        if ckpt == "none":
            model = EmbeddingModel(image_b, text_b)
        elif ckpt == "untrained":
            ih, th = init_heads(trainer_config(cfg), image_b.width, text_b.width)
            model = EmbeddingModel(image_b, text_b, ih, th)
        else:
            model = model_from_checkpoint(ckpt, image_b, text_b)
        pipes[name] = Pipeline(proposer, model, fc, mode, select_segment, name)
    if not pipes:
        raise ConfigError("eval.checkpoints is empty", field="eval.checkpoints")
    return pipes


def cmd_evaluate(cfg, run_dir):
    from .evaluation import (DEFAULT_CLASSES, ColorKeyOracle, ExemplarPool, accuracy_table,
                             composite_stream, dump_composite, evaluate)

    e = cfg["eval"]
    if e["exemplars"] == "synthetic":
        classes = e["classes"] or list(DEFAULT_CLASSES[:8])
        pool = ExemplarPool.synthetic(classes, int(e["per_class"]), int(cfg["seed"]))
    else:
        pool = ExemplarPool.from_manifest(DatasetManifest.from_jsonl(_require_file(cfg, "eval.exemplars")))
    if e["oracle"] == "color_key":
        if pool.palette is None:
            raise ConfigError("the color_key oracle only works with synthetic exemplars", field="eval.oracle")
        oracle = ColorKeyOracle(pool.palette)
    else:
        from .classifier import ResNetOracle

        oracle = ResNetOracle(e["oracle"])
    pipes = _eval_pipelines(cfg, pool)
    n, seed, tol = int(e["n_samples"]), int(cfg["seed"]), int(e["background_tol"])
    reports = evaluate(pipes, oracle, pool, n, seed, tol)
    if e["dump_composites"]:
        for k, (sample, prompt) in enumerate(composite_stream(pool, n, seed, tol)):
            dump_composite(sample, prompt, run_dir / "composites", k)
    (run_dir / "eval_reports.json").write_text(
        json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=1, sort_keys=True))
    table = accuracy_table(reports)
    (run_dir / "accuracy_table.txt").write_text(table)
    print(table, end="")


def cmd_train_classifier(cfg, run_dir):
    from .classifier import ClassifierConfig, train_classifier

    c = cfg["classifier"]
    train_m, val_m = _split(cfg, run_dir)
    acc = train_classifier(train_m, val_m, ClassifierConfig(int(c["epochs"]), float(c["learning_rate"]),
                                                            int(c["batch_size"]), bool(c["pretrained"]),
                                                            int(cfg["seed"])),
                           run_dir / "classifier.pt")
    (run_dir / "summary.json").write_text(json.dumps({"val_accuracy": acc}))
    print(json.dumps({"val_accuracy": acc}))


HANDLERS = {
    "train-clip": cmd_train_clip,
    "grid-search": cmd_grid_search,
    "segment": cmd_segment,
    "filter-masks": cmd_filter_masks,
    "evaluate": cmd_evaluate,
    "train-classifier": cmd_train_classifier,
}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _parser():
    parser = argparse.ArgumentParser(prog="promptseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--run-dir", help="output directory (default: $PROMPTSEG_HOME/runs/...)")
        p.add_argument("--jobs", type=int, help="worker cap for parallel stages")
        p.add_argument("--seed", type=int)
        if name == "segment":
            p.add_argument("--image")
            p.add_argument("--prompt")
            p.add_argument("--checkpoint")
        if name == "filter-masks":
            p.add_argument("--masks")
    return parser


def _dotted_overrides(extra):
    out = []
    for tok in extra:
        if not tok.startswith("--") or "=" not in tok or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognised argument {tok!r}; use --section.key=value", field=tok)
        key, raw = tok[2:].split("=", 1)
        out.append((key, yaml.safe_load(raw)))
    return out


def _fail(code, exc):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if getattr(exc, "field", None):
        err["field"] = exc.field
    print(json.dumps(err), file=sys.stderr)
    return code


def run(argv=None) -> int:
    """Parse, resolve config, execute; returns the process exit code."""
    args, extra = _parser().parse_known_args(argv)
    try:
        overrides = [("command", args.command)]
        for flag, key in (("run_dir", "run_dir"), ("jobs", "jobs"), ("seed", "seed"), ("image", "segment.image"),
                          ("prompt", "segment.prompt"), ("checkpoint", "segment.checkpoint"), ("masks", "masks")):
            value = getattr(args, flag, None)
            if value is not None:
                overrides.append((key, value))
        overrides += _dotted_overrides(extra)
        cfg = load_config(args.config, overrides)
        cfg["command"] = args.command
        run_dir = prepare_run_dir(cfg)
    except (ConfigError, InvalidInputError) as exc:
        return _fail(2, exc)
    try:
        HANDLERS[args.command](cfg, run_dir)
    except ConfigError as exc:
        return _fail(2, exc)
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable JSON
        log.exception("command failed")
        return _fail(3, exc)
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
