"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import harness
from .errors import (
    CheckpointError,
    ConfigError,
    InvalidInputError,
    RewardParseError,
    ShapeError,
    ValidationError,
    VocabRangeError,
)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

_VALIDATION_ERRORS = (
    ValidationError,
    ConfigError,
    CheckpointError,
    InvalidInputError,
    ShapeError,
    VocabRangeError,
    RewardParseError,
    FileNotFoundError,
)

log = logging.getLogger("zlalign")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("expected one or more positive integers")
    return vals


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON or YAML config file")
    p.add_argument("--width", type=int, help="mapper hidden width")
    p.add_argument("--data-size", type=int, help="number of labeled records for mapper training")
    p.add_argument("--variant", choices=["gt", "g"], help="mapper variant")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    p.add_argument("--cache-dir", type=Path, help="reuse the pretrained toy backend across runs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zlalign", description="Zero-label vision-text alignment for toy VLMs.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train-mapper", help="fit the text-to-vision mapper with the backend frozen")
    _common(p)

    p = sub.add_parser("train-vlm", help="zero-label LoRA training against a trained mapper")
    _common(p)
    p.add_argument("--mapper", type=Path, help="mapper checkpoint from train-mapper (required)")

    p = sub.add_parser("generate", help="caption the evaluation images")
    _common(p)
    p.add_argument("--adapters", type=Path, help="adapter checkpoint from train-vlm")

    p = sub.add_parser("evaluate", help="score captions, either from files or by generating them")
    _common(p)
    p.add_argument("--mapper", type=Path, help="mapper checkpoint (needed for CLIPScore)")
    p.add_argument("--adapters", type=Path, help="adapter checkpoint from train-vlm")
    p.add_argument("--predictions", type=Path, help="captions file (.jsonl with 'caption' or one per line)")
    p.add_argument("--references", type=Path, help="references file (.jsonl with 'captions' or tab-separated lines)")
    p.add_argument("--metrics", help="comma-separated metric names")

    p = sub.add_parser("ablate", help="mapper width x data size grid")
    _common(p)
    p.add_argument("--widths", type=_int_list, help="e.g. 128,256,512,1024")
    p.add_argument("--sizes", type=_int_list, help="e.g. 100,400,1000")
    p.add_argument("--variants", choices=["gt", "g", "both"], help="variants to run (overrides --variant)")
    p.add_argument("--no-zero-label", action="store_true", help="skip the zero-label stage per cell")

    p = sub.add_parser("visualize", help="2-D PCA of vision and mapped text features")
    _common(p)
    p.add_argument("--mapper", type=Path, help="mapper checkpoint (required)")
    p.add_argument("--adapters", type=Path, help="adapter checkpoint from train-vlm")
    p.add_argument("--n-images", type=int, default=8)
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if args.width is not None:
        o.setdefault("mapper", {})["width"] = args.width
    if args.data_size is not None:
        o.setdefault("data", {})["data_size"] = args.data_size
    if args.variant is not None:
        o.setdefault("train", {})["variant"] = args.variant
    if args.seed is not None:
        o.setdefault("train", {})["seed"] = args.seed
    if args.command == "ablate":
        ab = o.setdefault("ablation", {})
        if args.widths:
            ab["widths"] = args.widths
        if args.sizes:
            ab["sizes"] = args.sizes
        if args.variants:
            ab["variants"] = ["gt", "g"] if args.variants == "both" else [args.variants]
        elif args.variant:
            ab["variants"] = [args.variant]
        if args.no_zero_label:
            ab["zero_label"] = False
    return o


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


def _require(path, flag: str, what: str):
    if path is None:
        raise ValidationError(f"missing input: {flag} ({what}) is required")
    if not Path(path).exists():
        raise ValidationError(f"missing input: {flag} {path} does not exist")


def _load_mapper(ws: harness.Workspace, path):
    from .training import load_mapper

    params, meta = load_mapper(path)
    if params.config.in_dim != ws.backend.hidden_dim or params.config.out_dim != ws.backend.vision_dim:
        raise CheckpointError(f"{path}: mapper dimensions do not fit the configured backend")
    return params, meta


def _attach(ws: harness.Workspace, path):
    from .lora import attach_lora
    from .training import load_adapters

    adapters = attach_lora(ws.backend, ws.lora_config())
    if path is not None:
        _require(path, "--adapters", "adapter checkpoint")
        load_adapters(path, adapters)
    return adapters


def cmd_train_mapper(args, ws: harness.Workspace, out: Path) -> dict:
    from .training import save_mapper

    variant = ws.config["train"]["variant"]
    params, hist = ws.fit_mapper(variant)
    records = ws.mapper_records()
    from .data import fingerprint

    save_mapper(out / "mapper.pt", params, variant, fingerprint(records), {"resolved_config": ws.config})
    hist.write_log(out / "train_log.txt")
    return {"command": "train-mapper", "variant": variant, "history": hist.summary(), "mapper": str(out / "mapper.pt")}


def cmd_train_vlm(args, ws: harness.Workspace, out: Path) -> dict:
    from .training import mean_zero_label_loss, save_adapters, train_vlm_zero_label

    _require(args.mapper, "--mapper", "mapper checkpoint from train-mapper")
    mapper, _ = _load_mapper(ws, args.mapper)
    adapters = _attach(ws, None)
    images = [ws.image_loader(r) for r in ws.images]
    before = mean_zero_label_loss(ws.backend, mapper, images, ws.prompt, ws.config["train"]["max_new_tokens"])
    _, hist = train_vlm_zero_label(ws.backend, adapters, mapper, ws.images, ws.prompt, ws.train_config("zero_label"), image_loader=ws.image_loader)
    after = mean_zero_label_loss(ws.backend, mapper, images, ws.prompt, ws.config["train"]["max_new_tokens"])
    save_adapters(out / "adapters.pt", adapters, {"resolved_config": ws.config})
    hist.write_log(out / "train_log.txt")
    return {
        "command": "train-vlm",
        "history": hist.summary(),
        "mean_loss_before": before,
        "mean_loss_after": after,
        "adapters": str(out / "adapters.pt"),
    }


def cmd_generate(args, ws: harness.Workspace, out: Path) -> dict:
    if args.adapters is not None:
        _attach(ws, args.adapters)
    records = ws.eval_records
    caps = harness.generate_captions(ws.backend, records, ws.prompt, ws.config["eval"]["max_new_tokens"], ws.image_loader)
    path = out / "captions.jsonl"
    path.write_text("".join(json.dumps({"image": r.image_ref, "caption": c}) + "\n" for r, c in zip(records, caps)))
    return {"command": "generate", "n": len(caps), "captions": str(path), "adapters": str(args.adapters) if args.adapters else None}


def cmd_evaluate(args, ws: harness.Workspace, out: Path) -> dict:
    from .metrics import DEFAULT_METRICS, read_predictions, read_references, score_captions

    if args.predictions is not None or args.references is not None:
        _require(args.predictions, "--predictions", "captions file")
        _require(args.references, "--references", "references file")
        metrics = args.metrics.split(",") if args.metrics else list(DEFAULT_METRICS)
        if {"bertscore", "clipscore"} & set(metrics):
            raise ConfigError("file-based evaluation supports reference-based text metrics only")
        cands, refs = read_predictions(args.predictions), read_references(args.references)
        report = score_captions(cands, refs, metrics, config=ws.config)
    else:
        metrics = args.metrics.split(",") if args.metrics else list(ws.config["eval"]["metrics"])
        mapper = None
        if args.mapper is not None:
            _require(args.mapper, "--mapper", "mapper checkpoint")
            mapper, _ = _load_mapper(ws, args.mapper)
        elif "clipscore" in metrics:
            raise ConfigError("CLIPScore needs --mapper to place captions in the vision space")
        if args.adapters is not None:
            _attach(ws, args.adapters)
        report, _ = harness.evaluate_model(
            ws.backend,
            ws.eval_records,
            metrics,
            prompt=ws.prompt,
            mapper=mapper,
            max_new_tokens=ws.config["eval"]["max_new_tokens"],
            image_loader=ws.image_loader,
            config=ws.config,
        )
    report.write_json(out / "metrics.json")
    report.write_csv(out / "per_sample.csv")
    return {"command": "evaluate", "aggregates": report.aggregates, "report": str(out / "metrics.json")}


def cmd_ablate(args, ws: harness.Workspace, out: Path) -> dict:
    grid = harness.AblationGrid.from_config(ws.config["ablation"])
    rows = harness.run_ablation(ws, out, grid)
    return {"command": "ablate", "cells": len(rows), "table": str(out / "ablation.csv"), "note": harness.SIZE_NOTE}


def cmd_visualize(args, ws: harness.Workspace, out: Path) -> dict:
    _require(args.mapper, "--mapper", "mapper checkpoint from train-mapper")
    mapper, _ = _load_mapper(ws, args.mapper)
    if args.adapters is not None:
        _attach(ws, args.adapters)
    if args.n_images < 1:
        raise ValidationError("--n-images must be positive")
    feats, tags = harness.feature_views(ws, mapper, ws.eval_records[: args.n_images])
    proj = harness.pca_project(feats, tags)
    csv_path, png = harness.write_pca(proj, out, config=ws.config)
    return {"command": "visualize", "points": len(tags), "csv": str(csv_path), "plot": str(png), "explained_variance": proj.explained_variance.tolist()}


COMMANDS = {
    "train-mapper": cmd_train_mapper,
    "train-vlm": cmd_train_vlm,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = harness.resolve_config(args.config, _overrides(args))
        ws = harness.Workspace(cfg, cache_dir=args.cache_dir)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved_config.json", cfg)
        summary = COMMANDS[args.command](args, ws, out)
        summary["resolved_config"] = ws.config
        _write_json(out / "summary.json", summary)
    except _VALIDATION_ERRORS as exc:
        print(f"zlalign {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - everything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"zlalign {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({k: v for k, v in summary.items() if k != "resolved_config"}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
