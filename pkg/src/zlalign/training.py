"""Optimization loops: mapper training and zero-label adapter fine-tuning.

Both loops minimise the mean cosine distance between the pooled vision
features of an image and the pooled, mapped text-side hidden states.
Only the mapper (first loop) or only the LoRA tensors (second loop) are
updated; everything else is checksummed before and after.
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import data as data_mod
from .alignment import batch_alignment_loss, pool_rows
from .backend import config_hash
from .errors import CheckpointError, ConfigError, TrainingAborted, ValidationError
from .lora import AdapterSet
from .mapper import MapperConfig, MapperParams, init_mapper, map_generation_hidden, mapper_forward

log = logging.getLogger(__name__)

VARIANTS = ("gt", "g", "zero_label")
MAPPER_LR = 1e-3
ZERO_LABEL_LR = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = MAPPER_LR
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    variant: str = "gt"
    max_steps: int | None = None
    pooling: str = "mean"
    max_new_tokens: int = 12

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "TrainConfig":
        lr = ZERO_LABEL_LR if variant == "zero_label" else MAPPER_LR
        return cls(**{"learning_rate": lr, "variant": variant, **overrides})


# ---- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"step": self.step, "exp_avg": dict(self.exp_avg), "exp_avg_sq": dict(self.exp_avg_sq)}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(int(d["step"]), dict(d["exp_avg"]), dict(d["exp_avg_sq"]))


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState, config: TrainConfig):
    """One AdamW update, in place: decoupled decay first, then the bias-corrected Adam step."""
    for name in sorted(params):
        g = grads[name]
        if g.shape != params[name].shape:
            raise TrainingAborted(f"gradient for {name} has shape {tuple(g.shape)}, param {tuple(params[name].shape)}")
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise TrainingAborted(f"non-finite gradient in {name} at step {state.step + 1} ({bad} entries)")
    t = state.step + 1
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name in sorted(params):
        p, g = params[name], grads[name]
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = torch.zeros_like(p)
            v = torch.zeros_like(p)
        p.mul_(1.0 - lr * config.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + config.epsilon))
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
    state.step = t
    return params, state


# ---- history ---------------------------------------------------------------


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    skipped_samples: int = 0
    skipped_batches: int = 0
    wall_time: float = 0.0

    def record(self, step: int, epoch: int, loss: float, grad_norm: float, n_samples: int):
        if not math.isfinite(loss):
            raise TrainingAborted(f"non-finite loss at step {step}")
        if self.steps and step <= self.steps[-1]["step"]:
            raise TrainingAborted("step indices must increase")
        self.steps.append({"step": step, "epoch": epoch, "loss": loss, "grad_norm": grad_norm, "n_samples": n_samples})

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def close_epoch(self, epoch: int):
        vals = [s["loss"] for s in self.steps if s["epoch"] == epoch]
        if vals:
            self.epoch_losses.append(sum(vals) / len(vals))

    def log_lines(self) -> list[str]:
        return [f"step={s['step']} epoch={s['epoch']} loss={s['loss']:.12g} grad_norm={s['grad_norm']:.12g}" for s in self.steps]

    def write_log(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(line + "\n" for line in self.log_lines()))
        return path

    def summary(self) -> dict:
        return {
            "steps": len(self.steps),
            "final_loss": self.steps[-1]["loss"] if self.steps else None,
            "epoch_losses": self.epoch_losses,
            "skipped_samples": self.skipped_samples,
            "skipped_batches": self.skipped_batches,
            "wall_time_s": self.wall_time,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(**d)


# ---- checkpoints -----------------------------------------------------------


def save_checkpoint(path, tensors: dict, config: dict, optimizer: AdamState | None = None, meta: dict | None = None) -> Path:
    """Binary payload at ``path`` plus a JSON sidecar at ``path + '.json'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    h = config_hash(config)
    payload = {
        "tensors": {k: v.detach().clone() for k, v in tensors.items()},
        "optimizer": optimizer.to_dict() if optimizer is not None else None,
        "config": config,
        "config_hash": h,
        "meta": meta,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    sidecar = {"config": config, "config_hash": h, **{k: v for k, v in meta.items() if _jsonable(v)}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
    except TypeError:
        return False
    return True


def load_checkpoint(path, expected_config: dict | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:  # noqa: BLE001 - torch raises many types for corrupt files
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from exc
    if not isinstance(payload, dict) or not {"tensors", "config", "config_hash"} <= set(payload):
        raise CheckpointError(f"checkpoint {path} has an unexpected layout")
    if config_hash(payload["config"]) != payload["config_hash"]:
        raise CheckpointError(f"checkpoint {path}: stored config does not match its hash")
    sidecar_path = Path(str(path) + ".json")
    if sidecar_path.exists():
        try:
            sidecar = json.loads(sidecar_path.read_text())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"sidecar {sidecar_path} is not valid JSON") from exc
        if sidecar.get("config_hash") != payload["config_hash"]:
            raise CheckpointError(f"sidecar {sidecar_path} config hash does not match the checkpoint")
    if expected_config is not None and config_hash(expected_config) != payload["config_hash"]:
        raise CheckpointError(
            f"checkpoint {path} was written with config hash {payload['config_hash'][:12]}, "
            f"expected {config_hash(expected_config)[:12]}"
        )
    if payload.get("optimizer") is not None:
        payload["optimizer"] = AdamState.from_dict(payload["optimizer"])
    return payload


def save_mapper(path, params: MapperParams, variant: str, data_fingerprint: str = "", extra: dict | None = None) -> Path:
    meta = {"kind": "mapper", "variant": variant, "data_fingerprint": data_fingerprint, **(extra or {})}
    return save_checkpoint(path, params.tensors(), params.config.to_dict(), meta=meta)


def load_mapper(path, expected_variant: str | None = None) -> tuple[MapperParams, dict]:
    payload = load_checkpoint(path)
    meta = payload.get("meta", {})
    if meta.get("kind") != "mapper":
        raise CheckpointError(f"{path} is not a mapper checkpoint")
    if expected_variant is not None and meta.get("variant") != expected_variant:
        warnings.warn(
            f"mapper {path} was trained as variant {meta.get('variant')!r}, run expects {expected_variant!r}",
            stacklevel=2,
        )
    cfg = MapperConfig(**payload["config"])
    return MapperParams.from_tensors(cfg, payload["tensors"]), meta


def save_adapters(path, adapters: AdapterSet, extra: dict | None = None) -> Path:
    meta = {"kind": "lora", "enabled": adapters.enabled, **(extra or {})}
    return save_checkpoint(path, adapters.tensors(), adapters.config.to_dict(), meta=meta)


def load_adapters(path, adapters: AdapterSet) -> AdapterSet:
    payload = load_checkpoint(path, expected_config=adapters.config.to_dict())
    if payload.get("meta", {}).get("kind") != "lora":
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    adapters.load_state_dict({"tensors": payload["tensors"]})
    return adapters


# ---- feature preparation ---------------------------------------------------


@dataclass
class MapperSample:
    vision: torch.Tensor  # pooled vision feature, d_v
    hidden: torch.Tensor  # t x d_h trunk states to be mapped
    caption: tuple[int, ...]


def _batched(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def _vision_pooled(backend, images, pooling: str) -> list[torch.Tensor]:
    return [pool_rows(backend.vision_encode(im), pooling) for im in images]


def prepare_mapper_samples(
    backend,
    records: Sequence,
    variant: str,
    *,
    prompt: Sequence[int] = (),
    max_new_tokens: int = 12,
    pooling: str = "mean",
    image_loader: Callable = data_mod.load_image,
    generation_batch: int = 64,
) -> list[MapperSample | None]:
    """Frozen-backend features for mapper training; ``None`` marks a degenerate sample.

    GT yields one sample per (record, caption); G yields one per record from
    the backend's own greedy caption.
    """
    samples: list[MapperSample | None] = []
    if variant == "gt":
        for r in records:
            caps = getattr(r, "captions", ())
            if not caps:
                raise ValidationError(f"GT mapper training needs captions; record {r.image_ref!r} has none")
        with torch.no_grad():
            for r in records:
                vis = _vision_pooled(backend, [image_loader(r)], pooling)[0]
                for cap in r.captions:
                    ids = backend.tokenize(cap)
                    if not ids:
                        samples.append(None)
                        continue
                    hidden = backend.trunk_forward(backend.embed_text(ids))
                    samples.append(MapperSample(vis, hidden, tuple(ids)))
        return samples
    if variant == "g":
        with torch.no_grad():
            for chunk in _batched(list(records), generation_batch):
                images = [image_loader(r) for r in chunk]
                vis = _vision_pooled(backend, images, pooling)
                for v, (cap, hidden) in zip(vis, backend.generate_batch(images, list(prompt), max_new_tokens)):
                    samples.append(MapperSample(v, hidden, tuple(cap)) if cap else None)
        return samples
    raise ConfigError(f"mapper variant must be 'gt' or 'g', got {variant!r}")


def _mapped_pooled(params: MapperParams, hiddens: Sequence[torch.Tensor], pooling: str, backend=None) -> torch.Tensor:
    """Map every hidden matrix and pool per sample."""
    if backend is not None and params.config.reapply_trunk:
        mapped = [map_generation_hidden(backend, params, h) for h in hiddens]
    else:
        # one mapper call for the whole batch; rows are independent
        lengths = [h.shape[0] for h in hiddens]
        mapped = torch.split(mapper_forward(params, torch.cat(list(hiddens), dim=0)), lengths)
    return torch.stack([pool_rows(m, pooling) for m in mapped])


def mapper_batch_loss(params: MapperParams, batch: Sequence[MapperSample], pooling: str = "mean", backend=None) -> torch.Tensor:
    vision = torch.stack([s.vision for s in batch])
    text = _mapped_pooled(params, [s.hidden for s in batch], pooling, backend)
    return batch_alignment_loss(vision, text)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _schedule(n: int, cfg: TrainConfig) -> list[tuple[int, int, np.ndarray, bool]]:
    """Every batch of the run as (batch_number, epoch, indices, closes_epoch)."""
    out = []
    for epoch in range(cfg.epochs):
        chunks = list(_batched(_epoch_order(n, cfg.seed, epoch), cfg.batch_size))
        for j, idx in enumerate(chunks):
            out.append((len(out) + 1, epoch, idx, j == len(chunks) - 1))
    if cfg.max_steps is not None:
        out = out[: cfg.max_steps]
    return out


def _grad_norm(grads) -> float:
    return float(torch.sqrt(sum((g.detach() ** 2).sum() for g in grads)))


# ---- mapper training -------------------------------------------------------


def train_mapper(
    backend,
    dataset: Sequence,
    mapper_config: MapperConfig,
    train_config: TrainConfig,
    *,
    prompt: Sequence[int] = (),
    samples: Sequence[MapperSample | None] | None = None,
    image_loader: Callable = data_mod.load_image,
    resume: dict | None = None,
    checkpoint_path=None,
    checkpoint_every: int | None = None,
    stop_after: int | None = None,
) -> tuple[MapperParams, TrainHistory]:
    """Fit the mapper with the backend frozen.

    ``samples`` may carry features precomputed by :func:`prepare_mapper_samples`
    (the cache mode); otherwise they are computed here from ``dataset``.
    ``resume`` is a payload from :func:`load_checkpoint`; ``stop_after``
    halts after that many total steps (used to interrupt and resume).
    """
    variant = train_config.variant
    if variant not in ("gt", "g"):
        raise ConfigError("train_mapper runs the 'gt' or 'g' variant")
    if samples is None:
        if not dataset:
            raise ConfigError("mapper training dataset is empty")
        samples = prepare_mapper_samples(
            backend,
            dataset,
            variant,
            prompt=prompt,
            max_new_tokens=train_config.max_new_tokens,
            pooling=train_config.pooling,
            image_loader=image_loader,
        )
    if not samples:
        raise ConfigError("mapper training dataset is empty")

    checksum_before = backend.weights_checksum()
    t0 = time.perf_counter()
    params = init_mapper(mapper_config)
    state = AdamState()
    history = TrainHistory()
    step = 0
    if resume is not None:
        meta = resume.get("meta", {})
        if meta.get("train_config") != train_config.to_dict() or meta.get("mapper_config") != mapper_config.to_dict():
            raise CheckpointError("resume checkpoint was written with a different configuration")
        params = MapperParams.from_tensors(mapper_config, resume["tensors"])
        state = resume["optimizer"]
        history = TrainHistory.from_dict(meta["history"])
        step = int(meta["step"])
    params = params.clone().requires_grad_(True)
    tensors = params.tensors()
    names = sorted(tensors)

    def save(at_step):
        meta = {
            "kind": "mapper-train",
            "variant": variant,
            "step": at_step,
            "history": history.to_dict(),
            "train_config": train_config.to_dict(),
            "mapper_config": mapper_config.to_dict(),
        }
        save_checkpoint(checkpoint_path, tensors, {"mapper": mapper_config.to_dict(), "train": train_config.to_dict()}, state, meta)

    for number, epoch, idx, closes in _schedule(len(samples), train_config):
        if number <= step:
            continue  # consumed before the resume point
        if stop_after is not None and step >= stop_after:
            break
        batch = [samples[i] for i in idx if samples[i] is not None]
        history.skipped_samples += len(idx) - len(batch)
        if batch:
            loss = mapper_batch_loss(params, batch, train_config.pooling, backend if variant == "g" else None)
            grads = torch.autograd.grad(loss, [tensors[n] for n in names])
            adamw_step(tensors, dict(zip(names, grads)), state, train_config)
            history.record(number, epoch, float(loss.detach()), _grad_norm(grads), len(batch))
        else:
            history.skipped_batches += 1
            warnings.warn(f"batch {number} skipped: every sample was degenerate", stacklevel=2)
        step = number
        if closes:
            history.close_epoch(epoch)
        if checkpoint_path is not None and checkpoint_every and step % checkpoint_every == 0:
            save(step)
    if checkpoint_path is not None:
        save(step)

    if backend.weights_checksum() != checksum_before:
        raise TrainingAborted("backend weights changed during mapper training")
    history.wall_time += time.perf_counter() - t0
    out = params.clone()
    return out, history


# ---- zero-label training ---------------------------------------------------


def _check_image_only(images: Sequence):
    for item in images:
        if isinstance(item, data_mod.CaptionRecord):
            raise ValidationError(
                f"zero-label training accepts image-only records; {item.image_ref!r} is a captioned record"
            )


def _resolve_images(images, image_loader):
    return [image_loader(item) if isinstance(item, data_mod.ImageRecord) else item for item in images]


def zero_label_pair_loss(backend, mapper: MapperParams, images, prompt, captions, pooling: str = "mean") -> torch.Tensor:
    """Mean cosine distance for fixed captions; differentiable in adapter tensors."""
    vision = torch.stack([pool_rows(backend.vision_encode(im), pooling) for im in images])
    hidden = backend.caption_hidden(images, list(prompt), captions)
    text = torch.stack([pool_rows(map_generation_hidden(backend, mapper, h), pooling) for h in hidden])
    return batch_alignment_loss(vision, text)


@torch.no_grad()
def mean_zero_label_loss(backend, mapper: MapperParams, images, prompt, max_new_tokens: int = 12, pooling: str = "mean", batch_size: int = 64):
    """Mean L_zero over images whose generation is non-empty (evaluation mode)."""
    was_training = backend.model.training if hasattr(backend, "model") else False
    if hasattr(backend, "eval"):
        backend.eval()
    total, count = 0.0, 0
    for chunk in _batched(list(images), batch_size):
        gens = backend.generate_batch(chunk, list(prompt), max_new_tokens)
        keep = [(im, cap) for im, (cap, _) in zip(chunk, gens) if cap]
        if not keep:
            continue
        ims, caps = zip(*keep)
        loss = zero_label_pair_loss(backend, mapper, ims, prompt, caps, pooling)
        total += float(loss) * len(keep)
        count += len(keep)
    if hasattr(backend, "train"):
        backend.train(was_training)
    return total / count if count else float("nan")


def train_vlm_zero_label(
    backend,
    adapters: AdapterSet | None,
    mapper: MapperParams | None,
    image_dataset: Sequence,
    prompt: Sequence[int],
    train_config: TrainConfig,
    *,
    image_loader: Callable = data_mod.load_image,
    resume: dict | None = None,
    checkpoint_path=None,
    checkpoint_every: int | None = None,
    stop_after: int | None = None,
) -> tuple[AdapterSet, TrainHistory]:
    """Tune LoRA tensors so the backend's own captions align with the image.

    ``image_dataset`` holds :class:`~zlalign.data.ImageRecord` items or raw
    image arrays; captioned records are rejected outright.
    """
    if mapper is None:
        raise ConfigError("zero-label training needs a trained mapper (none given)")
    if adapters is None or len(adapters) == 0:
        raise ConfigError("zero-label training needs LoRA adapters attached to the backend")
    _check_image_only(image_dataset)
    if not image_dataset:
        raise ConfigError("zero-label image dataset is empty")

    mapper = mapper.clone().requires_grad_(False)
    mapper_sum = mapper.checksum()
    base_sum = backend.weights_checksum()
    t0 = time.perf_counter()
    tensors = adapters.tensors()
    names = sorted(tensors)
    state = AdamState()
    history = TrainHistory()
    step = 0
    if resume is not None:
        meta = resume.get("meta", {})
        if meta.get("train_config") != train_config.to_dict():
            raise CheckpointError("resume checkpoint was written with a different configuration")
        adapters.load_state_dict({"tensors": resume["tensors"], "generator": meta["generator"]})
        state = resume["optimizer"]
        history = TrainHistory.from_dict(meta["history"])
        step = int(meta["step"])
    prompt = list(prompt)

    def save(at_step):
        meta = {
            "kind": "zero-label-train",
            "step": at_step,
            "history": history.to_dict(),
            "train_config": train_config.to_dict(),
            "generator": adapters.generator.get_state(),
        }
        save_checkpoint(checkpoint_path, tensors, {"lora": adapters.config.to_dict(), "train": train_config.to_dict()}, state, meta)

    for number, epoch, idx, closes in _schedule(len(image_dataset), train_config):
        if number <= step:
            continue
        if stop_after is not None and step >= stop_after:
            break
        images = _resolve_images([image_dataset[i] for i in idx], image_loader)
        backend.eval()
        gens = backend.generate_batch(images, prompt, train_config.max_new_tokens)
        keep = [(im, cap) for im, (cap, _) in zip(images, gens) if cap]
        history.skipped_samples += len(images) - len(keep)
        if keep:
            ims, caps = zip(*keep)
            backend.train()
            loss = zero_label_pair_loss(backend, mapper, ims, prompt, caps, train_config.pooling)
            backend.eval()
            grads = torch.autograd.grad(loss, [tensors[n] for n in names])
            adamw_step(tensors, dict(zip(names, grads)), state, train_config)
            history.record(number, epoch, float(loss.detach()), _grad_norm(grads), len(keep))
        else:
            history.skipped_batches += 1
            warnings.warn(f"batch {number} skipped: every generation was empty", stacklevel=2)
        step = number
        if closes:
            history.close_epoch(epoch)
        if checkpoint_path is not None and checkpoint_every and step % checkpoint_every == 0:
            save(step)
    backend.eval()
    if checkpoint_path is not None:
        save(step)

    if backend.weights_checksum() != base_sum:
        raise TrainingAborted("base weights changed during zero-label training")
    if mapper.checksum() != mapper_sum:
        raise TrainingAborted("mapper changed during zero-label training")
    history.wall_time += time.perf_counter() - t0
    return adapters, history
