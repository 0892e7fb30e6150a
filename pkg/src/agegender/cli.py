"""Command-line entry point: prepare, train, eval, predict, export-attention.

Settings resolve as: command-line flag > ``--config`` JSON > ``AAG_*``
environment variable > built-in default.  Every command writes its
resolved settings to ``config.json`` in the output directory; passing
that file back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 runtime failure, 2 bad input or configuration,
3 unsupported operation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    DEFAULT_SCHEME,
    DatasetError,
    ImageDecodeError,
    load_image,
    scan_dataset,
    split_dataset,
    subsample,
    write_json,
)
from .evaluation import evaluate, export_attention_maps
from .layers import ConfigurationError
from .models import (
    Ensemble,
    UnsupportedBackboneError,
    attention_net_spec,
    attention_taps,
    ensemble_predict,
    forward_multitask,
    resnet_lite_spec,
)
from .serialization import WeightFormatError, load_model
from .training import TrainConfig, TrainingDiverged, train

logger = logging.getLogger("agegender")

EXIT_OK, EXIT_RUNTIME, EXIT_BAD_INPUT, EXIT_UNSUPPORTED = 0, 1, 2, 3
ENV_PREFIX = "AAG_"


class UsageError(Exception):
    pass


# name -> (type, default); env var is AAG_<NAME upper>
SETTINGS = {
    "dataset": (str, None),
    "out": (str, None),
    "model": (str, "attention-net"),
    "weights": (list, None),
    "epochs": (int, 100),
    "batch_size": (int, 16),
    "lr": (float, 0.005),
    "seed": (int, 0),
    "input_size": (int, 64),
    "subset": (int, None),
    "precision": (str, "f32"),
    "detach_gender": (bool, False),
    "lambda_age": (float, 1.0),
    "split": (str, "test"),
    "no_augment": (bool, False),
    "resume": (str, None),
}


def _env_value(name: str, typ):
    raw = os.environ.get(ENV_PREFIX + name.upper())
    if raw is None:
        return None
    if typ is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if typ is list:
        return raw.split(os.pathsep)
    return typ(raw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python3 -m agegender", description="Multi-task age/gender prediction from face images.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *names):
        sp.add_argument("--config", help="JSON file of settings (e.g. a previous run's config.json)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        if "dataset" in names:
            sp.add_argument("--dataset", help="directory of UTK-style images")
        if "subset" in names:
            sp.add_argument("--subset", type=int, help="use only N records (seeded filename hash)")
        if "weights" in names:
            sp.add_argument("--weights", nargs="+", action="extend",
                            help="AAGW weight file(s); 2+ form an ensemble. Put image paths before "
                                 "this flag or after a lone --")

    sp = sub.add_parser("prepare", help="census and split manifest of a dataset directory")
    common(sp, "dataset", "subset")

    sp = sub.add_parser("train", help="train one backbone")
    common(sp, "dataset", "subset")
    sp.add_argument("--model", choices=["attention-net", "resnet-lite"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--input-size", type=int)
    sp.add_argument("--precision", choices=["f32", "f64"])
    sp.add_argument("--detach-gender", action="store_true", default=None)
    sp.add_argument("--lambda-age", type=float)
    sp.add_argument("--no-augment", action="store_true", default=None)
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = sub.add_parser("eval", help="metrics for one model or an ensemble")
    common(sp, "dataset", "subset", "weights")
    sp.add_argument("--split", choices=["train", "val", "test"])

    sp = sub.add_parser("predict", help="predict gender and age bucket for images")
    common(sp, "weights")
    sp.add_argument("images", nargs="+")

    sp = sub.add_parser("export-attention", help="write attention maps as PGM/PPM")
    common(sp, "weights")
    sp.add_argument("images", nargs="+")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags, config file, environment and defaults into one canonical dict."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    cfg = {"command": args.command}
    for name, (typ, default) in SETTINGS.items():
        if not hasattr(args, name):
            continue
        val = getattr(args, name)
        if val is None:
            val = file_cfg.get(name)
        if val is None:
            val = _env_value(name, typ)
        if val is None:
            val = default
        cfg[name] = val
    if hasattr(args, "images"):
        cfg["images"] = list(args.images)
    return cfg


def _write_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_json(cfg, out / "config.json")


def _require(cfg: dict, *keys):
    for k in keys:
        if not cfg.get(k):
            raise UsageError(f"--{k.replace('_', '-')} is required (or set {ENV_PREFIX}{k.upper()})")


def _records(cfg: dict):
    records, census = scan_dataset(cfg["dataset"])
    if cfg.get("subset"):
        records = subsample(records, cfg["subset"], cfg["seed"])
    return records, census


# -- commands -------------------------------------------------------------------------

def cmd_prepare(cfg: dict) -> int:
    _require(cfg, "dataset", "out")
    records, census = _records(cfg)
    split = split_dataset(records, cfg["seed"])
    out = Path(cfg["out"])
    _write_config(cfg, out)
    write_json(census.to_dict(), out / "census.json")
    write_json(split.manifest(), out / "split.json")
    print(json.dumps({"total": census.total, "male": census.male, "female": census.female,
                      "skipped": census.skipped}))
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    _require(cfg, "dataset", "out")
    records, _ = _records(cfg)
    split = split_dataset(records, cfg["seed"])
    make = attention_net_spec if cfg["model"] == "attention-net" else resnet_lite_spec
    spec = make(input_size=cfg["input_size"], detach_gender_input=cfg["detach_gender"],
                precision=cfg["precision"], seed=cfg["seed"])
    config = TrainConfig(learning_rate=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                         lambda_age=cfg["lambda_age"], seed=cfg["seed"], augment=not cfg["no_augment"])
    from .models import MultiTaskModel
    from .training import load_checkpoint

    model = MultiTaskModel(spec)
    resume = load_checkpoint(cfg["resume"]) if cfg.get("resume") else None
    out = Path(cfg["out"])
    _write_config(cfg, out)
    result = train(model, split, config, out_dir=out, resume=resume)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"epochs": len(result.log), "final_train_loss": last.get("train_loss"),
                      "weights": [str(out / "best.aagw"), str(out / "final.aagw")]}))
    return EXIT_OK


def _load_models(cfg: dict):
    _require(cfg, "weights")
    models = [load_model(w) for w in cfg["weights"]]
    if len({m.spec.num_age_buckets for m in models}) != 1:
        raise UsageError("weight files disagree on the number of age buckets")
    if len({m.spec.input_size for m in models}) != 1:
        raise UsageError("weight files disagree on input size")
    return models


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "dataset", "out")
    models = _load_models(cfg)
    records, _ = _records(cfg)
    part = split_dataset(records, cfg["seed"]).partition(cfg["split"])
    if not part:
        raise UsageError(f"partition {cfg['split']!r} is empty")
    out = Path(cfg["out"])
    _write_config(cfg, out)
    if len(models) == 1:
        report = evaluate(models[0], part)
    else:
        report, members = evaluate(Ensemble(models), part, with_members=True)
        for i, rep in enumerate(members):
            rep.write(out, stem=f"member{i}")
    report.write(out)
    print(json.dumps({k: v for k, v in report.to_dict().items() if not k.startswith("confusion")}))
    return EXIT_OK


def _decode_inputs(paths, size: int, dtype):
    ok_paths, images, entries = [], [], {}
    for p in paths:
        try:
            images.append(load_image(p, (size, size)))
            ok_paths.append(p)
        except (ImageDecodeError, OSError) as exc:
            entries[p] = {"path": p, "error": str(exc)}
    arr = np.stack(images).astype(dtype) if images else None
    return ok_paths, arr, entries


def cmd_predict(cfg: dict) -> int:
    models = _load_models(cfg)
    ref = models[0]
    ok_paths, images, entries = _decode_inputs(cfg["images"], ref.spec.input_size, ref.dtype)
    if images is not None:
        preds = [forward_multitask(m, images.astype(m.dtype)) for m in models]
        pred = preds[0] if len(preds) == 1 else ensemble_predict(preds)
        for i, p in enumerate(ok_paths):
            g, b = int(pred.gender_labels[i]), int(pred.age_buckets[i])
            entries[p] = {
                "path": p,
                "gender": {"label": ("male", "female")[g], "prob": float(pred.gender_probs[i, g]),
                           "probs": pred.gender_probs[i].tolist()},
                "age": {"label": DEFAULT_SCHEME.label(b), "bucket": b, "prob": float(pred.age_probs[i, b]),
                        "probs": pred.age_probs[i].tolist()},
            }
    results = [entries[p] for p in cfg["images"]]
    text = json.dumps(results, indent=2)
    if cfg.get("out"):
        out = Path(cfg["out"])
        _write_config(cfg, out)
        (out / "predictions.json").write_text(text + "\n")
    print(text)
    return EXIT_OK if ok_paths else EXIT_RUNTIME


def cmd_export_attention(cfg: dict) -> int:
    _require(cfg, "out")
    models = _load_models(cfg)
    if len(models) != 1:
        raise UsageError("export-attention takes exactly one weight file")
    model = models[0]
    if model.spec.backbone != "attention_net":
        raise UnsupportedBackboneError(f"{model.spec.backbone} has no attention modules")
    size = model.spec.input_size
    ok_paths, images, entries = _decode_inputs(cfg["images"], size, model.dtype)
    for e in entries.values():
        logger.warning("skipping %s", e["error"])
    if images is None:
        raise UsageError("no decodable images")
    out = Path(cfg["out"])
    _write_config(cfg, out)
    taps = attention_taps(model, images)
    ids = [Path(p).name.split(".")[0] for p in ok_paths]
    files = export_attention_maps(taps, out, ids, target_hw=(size, size))
    print(json.dumps({"files": [str(f) for f in files]}))
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "export-attention": cmd_export_attention,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_BAD_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UnsupportedBackboneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except (UsageError, DatasetError, ConfigurationError, WeightFormatError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (TrainingDiverged, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
