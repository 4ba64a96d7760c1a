"""Manifests, synthetic scenes, prompt templates and vocabulary building.

Manifest files are JSONL, one record per line::

    {"image": "synthetic:17", "captions": ["a small red circle on the left", ...]}

Image-only manifests (used for zero-label training) must omit the
``captions`` key entirely.  ``image`` is either ``synthetic:<seed>`` or a
path (``.npy`` or anything Pillow opens) relative to the manifest file.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backend import SPECIAL_TOKENS
from .errors import ConfigError, ValidationError

SYNTHETIC_PREFIX = "synthetic:"

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.6, 0.1, 0.7),
    "orange": (1.0, 0.55, 0.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
SHAPES = ("square", "circle", "triangle", "bar")
POSITIONS = {"left": (0.5, 0.25), "right": (0.5, 0.75), "top": (0.25, 0.5), "bottom": (0.75, 0.5), "center": (0.5, 0.5)}
SIZES = {"small": 0.15, "large": 0.3}

_TEMPLATES = (
    "a {size} {color} {shape} on the {pos}",
    "{color} {shape} at the {pos}",
    "there is a {size} {shape} that is {color} in the {pos}",
)


@dataclass(frozen=True)
class ImageRecord:
    """An image with no text attached."""

    image_ref: str
    split: str = "train"
    base_dir: str | None = None


@dataclass(frozen=True)
class CaptionRecord:
    image_ref: str
    captions: tuple[str, ...] = field(default_factory=tuple)
    split: str = "train"
    base_dir: str | None = None

    def image_only(self) -> ImageRecord:
        return ImageRecord(self.image_ref, self.split, self.base_dir)


@dataclass(frozen=True)
class PromptTemplate:
    model_family: str
    template: str
    image_marker: str = "<IMAGE>"

    def render(self, image_text: str = "") -> str:
        out = self.template.replace(self.image_marker, image_text)
        if self.image_marker in out:
            raise ValidationError("prompt rendering left an image marker unfilled")
        return out


QWEN2_VL_TEMPLATE = (
    "<|im_start|>system\n"
    "You are a helpful assistant.\n"
    "<|im_start|>user\n"
    "<|image_start|><IMAGE><|image_end|>\n"
    "Describe this image in the shortest form.\n"
    "<|im_start|>assistant\n"
)

REWARD_TEMPLATE = (
    "<|im_start|>assistant\n"
    "Score: \n"
    "<|im_start|>system\n"
    "You are a helpful assistant ...\n"
    "<|im_start|>user\n"
    "Look at this image and evaluate the caption quality. \n"
    "Reference (human-written): {reference} \n"
    "Generated caption: {generated} \n"
    "Rate the generated caption: \n"
    "A) Excellent - Perfect description, captures all key details \n"
    "B) Good - Accurate main objects/scene, minor missing details   \n"
    "C) Fair - Correct general scene but lacks specificity \n"
    "D) Poor - Some correct elements but major inaccuracies \n"
    "E) Wrong - Completely incorrect or irrelevant \n"
    "Answer with just the letter (A, B, C, D, or E): \n"
)

_PROMPTS = {
    "smolvlm": "",
    "qwen2-vl": QWEN2_VL_TEMPLATE,
}


def build_prompt(model_family: str) -> PromptTemplate:
    try:
        return PromptTemplate(model_family, _PROMPTS[model_family])
    except KeyError:
        raise ConfigError(f"unknown model family {model_family!r}; known: {sorted(_PROMPTS)}") from None


def build_reward_prompt(reference: str, generated: str) -> str:
    return REWARD_TEMPLATE.format(reference=reference, generated=generated)


# ---- synthetic scenes ------------------------------------------------------


def scene_attributes(seed: int) -> dict:
    rng = np.random.default_rng([seed, 7])
    return {
        "color": list(COLORS)[rng.integers(len(COLORS))],
        "shape": SHAPES[rng.integers(len(SHAPES))],
        "pos": list(POSITIONS)[rng.integers(len(POSITIONS))],
        "size": list(SIZES)[rng.integers(len(SIZES))],
        "background": float(rng.uniform(0.3, 0.6)),
    }


def render_scene(seed: int, side: int = 32) -> np.ndarray:
    """Deterministic HxWx3 image in [0, 1] for a synthetic seed."""
    attrs = scene_attributes(seed)
    rng = np.random.default_rng([seed, 11])
    img = np.full((side, side, 3), attrs["background"]) + 0.02 * rng.standard_normal((side, side, 3))
    cy, cx = (np.array(POSITIONS[attrs["pos"]]) * side).tolist()
    r = SIZES[attrs["size"]] * side
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    dy, dx = yy - cy, xx - cx
    shape = attrs["shape"]
    if shape == "square":
        mask = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif shape == "circle":
        mask = dy**2 + dx**2 <= r**2
    elif shape == "triangle":
        mask = (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    else:
        mask = (np.abs(dy) <= r / 3) & (np.abs(dx) <= 1.5 * r)
    img[mask] = COLORS[attrs["color"]]
    return np.clip(img, 0.0, 1.0)


def scene_captions(seed: int, n: int = 2) -> tuple[str, ...]:
    attrs = scene_attributes(seed)
    return tuple(_TEMPLATES[i % len(_TEMPLATES)].format(**attrs) for i in range(n))


def make_synthetic_records(n: int, seed: int = 0, labeled: bool = True, n_captions: int = 2, split: str = "train"):
    """``n`` synthetic records whose image seeds are ``seed * 100_000 + i``."""
    base = seed * 100_000
    if labeled:
        return [CaptionRecord(f"{SYNTHETIC_PREFIX}{base + i}", scene_captions(base + i, n_captions), split) for i in range(n)]
    return [ImageRecord(f"{SYNTHETIC_PREFIX}{base + i}", split) for i in range(n)]


def load_image(record, side: int = 32) -> np.ndarray:
    ref = record.image_ref
    if ref.startswith(SYNTHETIC_PREFIX):
        try:
            seed = int(ref[len(SYNTHETIC_PREFIX):])
        except ValueError:
            raise ValidationError(f"bad synthetic image reference {ref!r}") from None
        return render_scene(seed, side)
    path = Path(ref)
    if not path.is_absolute() and record.base_dir is not None:
        path = Path(record.base_dir) / path
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# ---- manifests -------------------------------------------------------------


def _parse_lines(path: Path):
    text = path.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("image"), str) or not obj["image"]:
            raise ValidationError(f"{path}: line {lineno}: record needs a non-empty string field 'image'")
        yield lineno, obj


def load_caption_manifest(path, require_captions: bool = True) -> list[CaptionRecord]:
    path = Path(path)
    base = str(path.parent)
    records = []
    for lineno, obj in _parse_lines(path):
        caps = obj.get("captions", [])
        if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
            raise ValidationError(f"{path}: line {lineno}: 'captions' must be a list of strings")
        if require_captions and not caps:
            raise ValidationError(f"{path}: line {lineno}: labeled record has no captions")
        records.append(CaptionRecord(obj["image"], tuple(caps), obj.get("split", "train"), base))
    return records


def load_image_manifest(path) -> list[ImageRecord]:
    path = Path(path)
    base = str(path.parent)
    records = []
    for lineno, obj in _parse_lines(path):
        if "captions" in obj:
            raise ValidationError(f"{path}: line {lineno}: image-only manifest must not carry 'captions'")
        records.append(ImageRecord(obj["image"], obj.get("split", "train"), base))
    if not records:
        warnings.warn(f"{path}: image manifest is empty", stacklevel=2)
    return records


def write_manifest(path, records: Iterable) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        obj = {"image": r.image_ref}
        if isinstance(r, CaptionRecord):
            obj["captions"] = list(r.captions)
        lines.append(json.dumps(obj))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def fingerprint(records: Sequence) -> str:
    h = hashlib.sha256()
    for r in records:
        caps = list(r.captions) if isinstance(r, CaptionRecord) else None
        h.update(json.dumps([r.image_ref, caps]).encode())
    return h.hexdigest()[:16]


def mix_records(first: Sequence, second: Sequence, ratio=(1, 1), n: int | None = None) -> list:
    """Deterministic interleave taking ``ratio[0]`` from ``first`` per ``ratio[1]`` from ``second``."""
    a, b = int(ratio[0]), int(ratio[1])
    if a < 0 or b < 0 or a + b == 0:
        raise ConfigError("mix ratio must be two non-negative integers, not both zero")
    total = len(first) + len(second) if n is None else n
    out, i, j = [], 0, 0
    while len(out) < total and (i < len(first) or j < len(second)):
        for _ in range(a):
            if i < len(first) and len(out) < total:
                out.append(first[i])
                i += 1
        for _ in range(b):
            if j < len(second) and len(out) < total:
                out.append(second[j])
                j += 1
        if (a == 0 or i >= len(first)) and (b == 0 or j >= len(second)):
            break
    return out


def build_vocab(manifests: Sequence[Sequence[CaptionRecord]], max_size: int, extra_texts: Sequence[str] = ()) -> dict[str, int]:
    """Frequency-ranked word vocabulary; ties break lexicographically."""
    if max_size < len(SPECIAL_TOKENS):
        raise ConfigError(f"max_size={max_size} is smaller than the {len(SPECIAL_TOKENS)} reserved tokens")
    if not manifests:
        raise ConfigError("build_vocab needs at least one manifest")
    counts = Counter()
    for records in manifests:
        for r in records:
            for cap in getattr(r, "captions", ()):
                counts.update(cap.lower().split())
    for text in extra_texts:
        counts.update(text.lower().split())
    for tok in SPECIAL_TOKENS:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for word, _ in ranked[: max_size - len(SPECIAL_TOKENS)]:
        vocab[word] = len(vocab)
    return vocab
