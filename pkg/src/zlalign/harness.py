"""Run configuration, evaluation, PCA projection and the width x data-size ablation."""

from __future__ import annotations

import contextlib
import copy
import csv
import json
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property, partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import data as data_mod
from . import plotting
from .alignment import pool_rows
from .backend import BackendConfig, ToyBackend, config_hash, pretrain_captioner
from .errors import ConfigError, DegenerateInputError, InvalidInputError, ValidationError
from .lora import LoraConfig, attach_lora, detach_lora
from .mapper import ABLATION_WIDTHS, MapperConfig, MapperParams, map_generation_hidden, text_features_gt
from .metrics import ALL_METRICS, MetricReport, score_captions
from .training import (
    MAPPER_LR,
    ZERO_LABEL_LR,
    TrainConfig,
    mean_zero_label_loss,
    prepare_mapper_samples,
    train_mapper,
    train_vlm_zero_label,
)

log = logging.getLogger(__name__)

SECTIONS = ("backend", "mapper", "lora", "train", "data", "eval", "ablation")

DEFAULT_CONFIG: dict = {
    "backend": {
        "vision_patch_count": 16,
        "vision_dim": 32,
        "text_dim": 32,
        "hidden_dim": 32,
        "trunk_layers": 2,
        "n_heads": 2,
        "max_seq_len": 64,
        "seed": 0,
        "pretrain_steps": 200,
        "pretrain_lr": 3e-3,
        "pretrain_batch_size": 32,
    },
    "mapper": {"width": 256, "depth": 2, "seed": 0, "activation": "gelu", "reapply_trunk": False},
    "lora": {"rank": 32, "alpha": 64.0, "dropout": 0.1, "target_names": None, "seed": 0},
    "train": {
        "variant": "gt",
        "seed": 0,
        "pooling": "mean",
        "max_new_tokens": 12,
        "mapper": {"learning_rate": MAPPER_LR, "batch_size": 16, "epochs": 1, "weight_decay": 0.01},
        "zero_label": {"learning_rate": ZERO_LABEL_LR, "batch_size": 8, "epochs": 1, "weight_decay": 0.01},
    },
    "data": {
        # each source is "synthetic" or a JSONL manifest path
        "labeled": "synthetic",
        "labeled_mix": "synthetic",
        "mix_ratio": [1, 1],
        "images": "synthetic",
        "eval": "synthetic",
        "pretrain": "synthetic",
        "data_size": 400,
        "synthetic_counts": {"labeled": 500, "labeled_mix": 500, "images": 200, "eval": 50, "pretrain": 400},
        "synthetic_seeds": {"labeled": 1, "labeled_mix": 2, "images": 3, "eval": 4, "pretrain": 5},
        "captions_per_image": 2,
        "image_side": 32,
        "max_vocab": 256,
    },
    "eval": {
        "metrics": ["bleu", "rouge_l", "cider", "bertscore", "clipscore"],
        "model_family": "smolvlm",
        "max_new_tokens": 12,
    },
    "ablation": {
        "widths": list(ABLATION_WIDTHS),
        "sizes": [100, 400, 1000],
        "size_labels": {"100": "10k", "400": "40k", "1000": "100k"},
        "variants": ["gt", "g"],
        "g_max_width": 512,
        "zero_label": True,
        "zero_label_images": 64,
    },
}


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            out[key] = deep_merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix in (".yaml", ".yml"):
            import yaml

            obj = yaml.safe_load(text) or {}
        else:
            obj = json.loads(text)
    except Exception as exc:  # parse errors from either format
        raise ValidationError(f"could not parse config {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"config {path} must hold a mapping at the top level")
    return obj


def resolve_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides``; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        cfg = deep_merge(cfg, read_config_file(path))
    if overrides:
        cfg = deep_merge(cfg, overrides)
    return cfg


# ---- workspace -------------------------------------------------------------


def _source(source, kind: str, count: int, seed: int, n_captions: int):
    labeled = kind != "images"
    if source == "synthetic":
        return data_mod.make_synthetic_records(count, seed, labeled=labeled, n_captions=n_captions)
    if labeled:
        return data_mod.load_caption_manifest(source)
    return data_mod.load_image_manifest(source)


class Workspace:
    """Datasets, the pretrained backend and stage configs built from one resolved config."""

    def __init__(self, config: dict | None = None, cache_dir=None):
        self.config = copy.deepcopy(config) if config is not None else resolve_config()
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._samples: dict = {}

    @property
    def seed(self) -> int:
        return int(self.config["train"]["seed"])

    def _records(self, kind: str):
        d = self.config["data"]
        return _source(d[kind], kind, d["synthetic_counts"][kind], d["synthetic_seeds"][kind], d["captions_per_image"])

    @cached_property
    def labeled(self) -> list:
        d = self.config["data"]
        first = self._records("labeled")
        if d["labeled_mix"] is None:
            return first
        return data_mod.mix_records(first, self._records("labeled_mix"), d["mix_ratio"])

    @cached_property
    def images(self) -> list:
        return self._records("images")

    @cached_property
    def eval_records(self) -> list:
        return self._records("eval")

    @cached_property
    def pretrain_records(self) -> list:
        return self._records("pretrain")

    @property
    def image_loader(self) -> Callable:
        return partial(data_mod.load_image, side=self.config["data"]["image_side"])

    @cached_property
    def prompt_template(self):
        return data_mod.build_prompt(self.config["eval"]["model_family"])

    @cached_property
    def vocab(self) -> dict:
        return data_mod.build_vocab(
            [self.pretrain_records, self.labeled], self.config["data"]["max_vocab"], [self.prompt_template.render()]
        )

    def backend_config(self) -> BackendConfig:
        b = self.config["backend"]
        return BackendConfig(
            vision_patch_count=b["vision_patch_count"],
            vision_dim=b["vision_dim"],
            text_dim=b["text_dim"],
            hidden_dim=b["hidden_dim"],
            vocab_size=max(len(self.vocab), 4),
            trunk_layers=b["trunk_layers"],
            n_heads=b["n_heads"],
            max_seq_len=b["max_seq_len"],
            seed=b["seed"],
        )

    def _backend_key(self) -> str:
        return config_hash({"backend": self.config["backend"], "vocab": self.vocab, "data": data_mod.fingerprint(self.pretrain_records)})

    @cached_property
    def backend(self) -> ToyBackend:
        key = self._backend_key()
        cached = self.cache_dir / f"backend-{key[:16]}.pt" if self.cache_dir is not None else None
        if cached is not None and cached.exists():
            return ToyBackend.load(cached)
        b = self.config["backend"]
        backend = ToyBackend(self.backend_config(), self.vocab)
        if b["pretrain_steps"] > 0:
            pretrain_captioner(
                backend,
                self.pretrain_records,
                self.image_loader,
                steps=b["pretrain_steps"],
                batch_size=b["pretrain_batch_size"],
                lr=b["pretrain_lr"],
                seed=b["seed"],
                prompt=self.prompt,
            )
        if cached is not None:
            backend.save(cached)
        return backend

    @cached_property
    def prompt(self) -> list[int]:
        # built before the backend exists, so tokenize against the vocab directly
        from .backend import WordTokenizer

        return WordTokenizer(self.vocab).encode(self.prompt_template.render())

    def mapper_config(self, width: int | None = None) -> MapperConfig:
        m = self.config["mapper"]
        return MapperConfig(
            width=int(width if width is not None else m["width"]),
            in_dim=self.backend.hidden_dim,
            out_dim=self.backend.vision_dim,
            depth=m["depth"],
            seed=m["seed"],
            activation=m["activation"],
            reapply_trunk=m["reapply_trunk"],
        )

    def lora_config(self) -> LoraConfig:
        lc = self.config["lora"]
        targets = lc["target_names"]
        return LoraConfig(
            rank=lc["rank"], alpha=lc["alpha"], dropout=lc["dropout"], target_names=tuple(targets) if targets else None, seed=lc["seed"]
        )

    def train_config(self, stage: str, variant: str | None = None) -> TrainConfig:
        t = self.config["train"]
        section = t["mapper"] if stage == "mapper" else t["zero_label"]
        return TrainConfig(
            learning_rate=section["learning_rate"],
            weight_decay=section["weight_decay"],
            epochs=section["epochs"],
            batch_size=section["batch_size"],
            seed=self.seed,
            variant=variant or (t["variant"] if stage == "mapper" else "zero_label"),
            pooling=t["pooling"],
            max_new_tokens=t["max_new_tokens"],
        )

    def mapper_records(self, size: int | None = None) -> list:
        size = int(size if size is not None else self.config["data"]["data_size"])
        if size < 1:
            raise ConfigError("data size must be positive")
        if size > len(self.labeled):
            raise ConfigError(f"data size {size} exceeds the {len(self.labeled)} labeled records available")
        return self.labeled[:size]

    def mapper_samples(self, variant: str, size: int) -> list:
        """Cached frozen-backend features for the first ``size`` records."""
        key = variant
        if key not in self._samples:
            recs = self.labeled
            per_record = []
            for r in recs:
                per_record.append(
                    prepare_mapper_samples(
                        self.backend,
                        [r] if variant == "gt" else [r.image_only()],
                        variant,
                        prompt=self.prompt,
                        max_new_tokens=self.config["train"]["max_new_tokens"],
                        pooling=self.config["train"]["pooling"],
                        image_loader=self.image_loader,
                    )
                )
            self._samples[key] = per_record
        self.mapper_records(size)
        return [s for group in self._samples[key][:size] for s in group]

    def fit_mapper(self, variant: str, width: int | None = None, size: int | None = None):
        size = int(size if size is not None else self.config["data"]["data_size"])
        records = self.mapper_records(size)
        if variant == "g":
            records = [r.image_only() for r in records]
        return train_mapper(
            self.backend,
            records,
            self.mapper_config(width),
            self.train_config("mapper", variant),
            prompt=self.prompt,
            samples=self.mapper_samples(variant, size),
            image_loader=self.image_loader,
        )


# ---- evaluation ------------------------------------------------------------


@contextlib.contextmanager
def adapters_disabled(backend):
    """Temporarily route every forward through the base weights."""
    aset = getattr(backend, "adapters", None)
    if aset is None:
        yield
        return
    flags = {name: ad.enabled for name, ad in aset.adapters.items()}
    for ad in aset.adapters.values():
        ad.enabled = False
    try:
        yield
    finally:
        for name, ad in aset.adapters.items():
            ad.enabled = flags[name]


class ToyEmbedder:
    """Frozen base-model embeddings used by BERTScore and CLIPScore.

    Token embeddings are the contextual trunk states of the base model;
    the image/text pair for CLIPScore is pooled vision features against
    the pooled mapper output for the caption.
    """

    def __init__(self, backend, mapper: MapperParams | None = None, pooling: str = "mean"):
        self.backend = backend
        self.mapper = mapper
        self.pooling = pooling

    @torch.no_grad()
    def tokens(self, words: list[str]) -> np.ndarray:
        ids = self.backend.tokenize(" ".join(words))
        with adapters_disabled(self.backend):
            return self.backend.trunk_forward(self.backend.embed_text(ids)).numpy()

    @torch.no_grad()
    def image(self, image) -> np.ndarray:
        return pool_rows(self.backend.vision_encode(image), self.pooling).numpy()

    @torch.no_grad()
    def text(self, caption: str) -> np.ndarray:
        if self.mapper is None:
            raise ConfigError("CLIPScore needs a mapper to place captions in the vision space")
        ids = self.backend.tokenize(caption)
        if not ids:
            return np.zeros(self.backend.vision_dim)
        with adapters_disabled(self.backend):
            return pool_rows(text_features_gt(self.backend, self.mapper, ids), self.pooling).numpy()


def _clip_pairs(embedder: ToyEmbedder, images, captions):
    pairs = []
    for im, cap in zip(images, captions):
        txt = embedder.text(cap)
        if not np.any(txt):
            # an empty caption gets the floor score rather than an error
            txt = -embedder.image(im)
        pairs.append((embedder.image(im), txt))
    return pairs


def generate_captions(backend, records, prompt, max_new_tokens: int, image_loader, batch_size: int = 64) -> list[str]:
    backend.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i : i + batch_size]
            gens = backend.generate_batch([image_loader(r) for r in chunk], list(prompt), max_new_tokens)
            out.extend(backend.detokenize(cap) for cap, _ in gens)
    return out


def evaluate_model(
    backend,
    records: Sequence,
    metrics: Sequence[str],
    *,
    prompt: Sequence[int] = (),
    mapper: MapperParams | None = None,
    max_new_tokens: int = 12,
    image_loader: Callable = data_mod.load_image,
    config: dict | None = None,
) -> tuple[MetricReport, list[str]]:
    """Caption every record with the backend (adapters as attached) and score them."""
    if not records:
        raise ConfigError("evaluation set is empty")
    for r in records:
        if not getattr(r, "captions", ()):
            raise ValidationError(f"evaluation needs reference captions; {r.image_ref!r} has none")
    unknown = [m for m in metrics if m not in ALL_METRICS]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}; choose from {list(ALL_METRICS)}")
    captions = generate_captions(backend, list(records), prompt, max_new_tokens, image_loader)
    embedder = ToyEmbedder(backend, mapper)
    clip_pairs = None
    if "clipscore" in metrics:
        clip_pairs = _clip_pairs(embedder, [image_loader(r) for r in records], captions)
    report = score_captions(
        captions,
        [list(r.captions) for r in records],
        metrics,
        token_embedder=embedder.tokens if "bertscore" in metrics else None,
        clip_pairs=clip_pairs,
        config=config,
    )
    return report, captions


# ---- PCA -------------------------------------------------------------------


@dataclass
class PcaProjection:
    points: np.ndarray  # n x k
    components: np.ndarray  # k x d
    explained_variance: np.ndarray  # k
    mean: np.ndarray
    tags: list[str] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [{"tag": t, **{f"pc{j + 1}": float(v) for j, v in enumerate(p)}} for t, p in zip(self.tags, self.points)]


def pca_project(features, tags: Sequence[str] | None = None, k: int = 2) -> PcaProjection:
    """Project rows onto the top-``k`` covariance eigenvectors.

    Each component's sign is fixed so its largest-magnitude entry is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError("PCA needs a 2-D feature matrix with at least 2 rows")
    if not np.isfinite(x).all():
        raise InvalidInputError("PCA features contain NaN or inf")
    n, d = x.shape
    if k < 1 or k > d:
        raise InvalidInputError(f"k must be in [1, {d}], got {k}")
    tags = list(tags) if tags is not None else [""] * n
    if len(tags) != n:
        raise InvalidInputError("one tag per feature row is required")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    vals = np.clip(vals[order], 0.0, None)
    comps = vecs[:, order].T.copy()
    for j in range(k):
        if vals[j] <= 0 or not np.any(xc):
            continue
        if comps[j, np.argmax(np.abs(comps[j]))] < 0:
            comps[j] = -comps[j]
    points = xc @ comps.T
    return PcaProjection(points, comps, vals, mean, tags)


def write_pca(projection: PcaProjection, out_dir, config: dict | None = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "pca.csv"
    rows = projection.rows()
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    png = plotting.plot_pca(projection, out_dir / "pca.png", config=config)
    return csv_path, png


def feature_views(workspace: Workspace, mapper: MapperParams, records) -> tuple[np.ndarray, list[str]]:
    """Pooled vectors in the vision space, tagged by where they come from.

    ``vision``: the image; ``reference``: each reference caption through the
    caption path; ``text_gt``: the model's own caption through the caption
    path; ``text_g``: the generation-time hidden states of that caption.
    Captions come from the backend as currently adapted.
    """
    backend = workspace.backend
    pooling = workspace.config["train"]["pooling"]
    emb = ToyEmbedder(backend, mapper, pooling)
    images = [workspace.image_loader(r) for r in records]
    rows, tags = [], []

    def add(vec, tag):
        if np.linalg.norm(vec) > 0:
            rows.append(vec)
            tags.append(tag)

    backend.eval()
    with torch.no_grad():
        gens = backend.generate_batch(images, list(workspace.prompt), workspace.config["eval"]["max_new_tokens"])
        for im, r, (cap, hidden) in zip(images, records, gens):
            add(emb.image(im), "vision")
            for ref in r.captions:
                add(emb.text(ref), "reference")
            if cap:
                add(emb.text(backend.detokenize(cap)), "text_gt")
                add(pool_rows(map_generation_hidden(backend, mapper, hidden), pooling).numpy(), "text_g")
    if len(rows) < 2:
        raise DegenerateInputError("fewer than 2 non-degenerate feature vectors to project")
    return np.stack(rows), tags


# ---- ablation --------------------------------------------------------------


TABLE_METRICS = {
    "BLEU_1": "bleu_1",
    "BLEU_2": "bleu_2",
    "BLEU_3": "bleu_3",
    "BLEU_4": "bleu_4",
    "BERTS": "bertscore_f1",
    "ROUGE_L": "rouge_l_f1",
    "CIDEr": "cider",
}
TABLE_COLUMNS = ["variant", "size", "size_label", "width", *TABLE_METRICS, "mapper_loss", "zero_label_loss", "seed", "config"]
SIZE_NOTE = "sizes are desk-scale stand-ins at 100:1 for the labelled sizes"


@dataclass
class AblationGrid:
    widths: tuple[int, ...] = ABLATION_WIDTHS
    sizes: tuple[int, ...] = (100, 400, 1000)
    size_labels: dict = field(default_factory=lambda: {100: "10k", 400: "40k", 1000: "100k"})
    variants: tuple[str, ...] = ("gt", "g")
    g_max_width: int = 512

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.sizes = tuple(int(s) for s in self.sizes)
        self.size_labels = {int(k): str(v) for k, v in self.size_labels.items()}
        for v in self.variants:
            if v not in ("gt", "g"):
                raise ConfigError(f"ablation variant must be 'gt' or 'g', got {v!r}")
        if not self.widths or not self.sizes or not self.variants:
            raise ConfigError("ablation grid needs at least one width, size and variant")

    @classmethod
    def from_config(cls, section: dict) -> "AblationGrid":
        return cls(section["widths"], section["sizes"], section["size_labels"], tuple(section["variants"]), section["g_max_width"])

    def cells(self) -> list[tuple[str, int, int]]:
        """(variant, size, width) in table order: variant, then size, then width."""
        out = []
        for variant in self.variants:
            for size in self.sizes:
                out.extend((variant, size, w) for w in self.widths if variant == "gt" or w <= self.g_max_width)
        return out


def _cell_id(variant: str, size: int, width: int) -> str:
    return f"{variant}-n{size}-w{width}"


def _atomic_write_json(path: Path, obj):
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    os.replace(tmp, path)


def run_cell(workspace: Workspace, variant: str, size: int, width: int, zero_label: bool = True) -> dict:
    """Train the mapper (and optionally the adapters) for one cell and evaluate it."""
    backend = workspace.backend
    try:
        workspace.mapper_records(size)
    except ConfigError as exc:
        raise ConfigError(f"cell {_cell_id(variant, size, width)}: {exc}") from None
    mapper, mhist = workspace.fit_mapper(variant, width, size)
    ab = workspace.config["ablation"]
    zl_loss = None
    adapters = None
    try:
        if zero_label:
            adapters = attach_lora(backend, workspace.lora_config())
            images = workspace.images[: ab["zero_label_images"]]
            _, zhist = train_vlm_zero_label(
                backend, adapters, mapper, images, workspace.prompt, workspace.train_config("zero_label"), image_loader=workspace.image_loader
            )
            zl_loss = zhist.summary()["final_loss"]
        report, _ = evaluate_model(
            backend,
            workspace.eval_records,
            workspace.config["eval"]["metrics"],
            prompt=workspace.prompt,
            mapper=mapper,
            max_new_tokens=workspace.config["eval"]["max_new_tokens"],
            image_loader=workspace.image_loader,
        )
    finally:
        detach_lora(backend)
    agg = report.aggregates
    row = {
        "variant": variant,
        "size": size,
        "size_label": workspace_size_label(workspace, size),
        "width": width,
        **{col: agg.get(key) for col, key in TABLE_METRICS.items()},
        "mapper_loss": mhist.summary()["final_loss"],
        "zero_label_loss": zl_loss,
        "metrics": dict(sorted(agg.items())),
        "seed": workspace.seed,
        "config": cell_config(workspace, variant, size, width, zero_label),
    }
    return row


def cell_config(workspace: Workspace, variant: str, size: int, width: int, zero_label: bool) -> dict:
    cfg = copy.deepcopy(workspace.config)
    cfg["mapper"]["width"] = width
    cfg["data"]["data_size"] = size
    cfg["train"]["variant"] = variant
    cfg["ablation"] = {"zero_label": zero_label, "zero_label_images": cfg["ablation"]["zero_label_images"], "note": SIZE_NOTE}
    return cfg


def workspace_size_label(workspace: Workspace, size: int) -> str:
    labels = {int(k): v for k, v in workspace.config["ablation"]["size_labels"].items()}
    return labels.get(int(size), str(size))


def run_ablation(
    workspace: Workspace,
    out_dir,
    grid: AblationGrid | None = None,
    *,
    zero_label: bool | None = None,
    stop_after_cells: int | None = None,
) -> list[dict]:
    """Fill the grid, one JSON file per cell; finished cells are reused on rerun.

    Writes ``ablation.csv`` (one row per cell in table order) and an
    ``ablation.png`` figure once every cell is present.
    """
    grid = grid or AblationGrid.from_config(workspace.config["ablation"])
    zero_label = workspace.config["ablation"]["zero_label"] if zero_label is None else zero_label
    out_dir = Path(out_dir)
    cell_dir = out_dir / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    resolved = copy.deepcopy(workspace.config)
    base_key = config_hash({"config": resolved, "zero_label": zero_label})
    for variant, size, width in grid.cells():
        try:
            workspace.mapper_records(size)
        except ConfigError as exc:
            raise ConfigError(f"cell {_cell_id(variant, size, width)}: {exc}") from None
    rows, computed = [], 0
    for variant, size, width in grid.cells():
        path = cell_dir / f"{_cell_id(variant, size, width)}.json"
        cell_key = config_hash({"base": base_key, "cell": [variant, size, width]})
        if path.exists():
            try:
                saved = json.loads(path.read_text())
                if saved.get("key") == cell_key:
                    rows.append(saved["row"])
                    continue
            except (json.JSONDecodeError, KeyError):
                pass
            log.warning("recomputing cell %s: stored result is stale or unreadable", path.name)
        if stop_after_cells is not None and computed >= stop_after_cells:
            return rows
        log.info("ablation cell variant=%s size=%d width=%d", variant, size, width)
        row = run_cell(workspace, variant, size, width, zero_label)
        _atomic_write_json(path, {"key": cell_key, "row": row, "config": resolved, "cell": [variant, size, width]})
        rows.append(row)
        computed += 1
    write_ablation_table(rows, out_dir / "ablation.csv")
    (out_dir / "ablation.json").write_text(json.dumps({"rows": rows, "config": resolved, "note": SIZE_NOTE}, indent=2, sort_keys=True))
    plotting.plot_ablation(rows, out_dir / "ablation.png", config=resolved)
    return rows


def write_ablation_table(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for row in rows:
            out = {k: ("" if row.get(k) is None else row[k]) for k in TABLE_COLUMNS}
            out["config"] = json.dumps(row.get("config", {}), sort_keys=True, separators=(",", ":"))
            w.writerow(out)
    return path


def held_out_loss(workspace: Workspace, mapper: MapperParams, images) -> float:
    return mean_zero_label_loss(
        workspace.backend,
        mapper,
        [workspace.image_loader(r) if not isinstance(r, np.ndarray) else r for r in images],
        workspace.prompt,
        workspace.config["train"]["max_new_tokens"],
        workspace.config["train"]["pooling"],
    )
