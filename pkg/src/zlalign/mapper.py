"""MLP mapper from trunk hidden states into the vision feature space.

Two text-feature paths feed it:

* ``text_features_gt``: a reference caption is embedded and run through
  the trunk on its own, then mapped.
* ``text_features_g``: the model captions the image itself; the trunk
  states at the generated positions are mapped.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch.nn import functional as F

from .backend import DTYPE, check_features, tensor_checksum
from .errors import ConfigError, DegenerateOutputError, InvalidInputError

ABLATION_WIDTHS = (128, 256, 512, 1024)
DEFAULT_DEPTH = 2

_ACTIVATIONS = {
    "gelu": F.gelu,
    "tanh": torch.tanh,
}


@dataclass(frozen=True)
class MapperConfig:
    width: int
    in_dim: int
    out_dim: int
    depth: int = DEFAULT_DEPTH
    seed: int = 0
    activation: str = "gelu"
    # apply the trunk again to generation-time states before the MLP (G variant only)
    reapply_trunk: bool = False

    def __post_init__(self):
        for name in ("width", "in_dim", "out_dim", "depth"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"MapperConfig.{name} must be a positive integer, got {v!r}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.depth != DEFAULT_DEPTH:
            warnings.warn(f"mapper depth {self.depth} differs from the default of {DEFAULT_DEPTH}", stacklevel=3)

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MapperParams:
    config: MapperConfig
    weights: list[torch.Tensor]
    biases: list[torch.Tensor]
    activation: str = field(default="gelu")

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layers.{i}.weight"] = w
            out[f"layers.{i}.bias"] = b
        return out

    def clone(self) -> "MapperParams":
        return MapperParams(
            self.config,
            [w.detach().clone() for w in self.weights],
            [b.detach().clone() for b in self.biases],
            self.activation,
        )

    def requires_grad_(self, flag: bool = True) -> "MapperParams":
        for t in self.tensors().values():
            t.requires_grad_(flag)
        return self

    def checksum(self) -> str:
        return tensor_checksum(self.tensors())

    @classmethod
    def from_tensors(cls, config: MapperConfig, tensors: dict[str, torch.Tensor]) -> "MapperParams":
        n = config.depth
        weights = [tensors[f"layers.{i}.weight"].to(DTYPE) for i in range(n)]
        biases = [tensors[f"layers.{i}.bias"].to(DTYPE) for i in range(n)]
        for (fan_in, fan_out), w, b in zip(config.layer_dims, weights, biases):
            if tuple(w.shape) != (fan_in, fan_out) or tuple(b.shape) != (fan_out,):
                raise ConfigError("mapper tensors do not match the configured layer dimensions")
        return cls(config, weights, biases, config.activation)


def init_mapper(config: MapperConfig) -> MapperParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    gen = torch.Generator().manual_seed(config.seed)
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims:
        bound = 1.0 / math.sqrt(fan_in)
        weights.append((torch.rand(fan_in, fan_out, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        biases.append(torch.zeros(fan_out, dtype=DTYPE))
    return MapperParams(config, weights, biases, config.activation)


def mapper_forward(params: MapperParams, hidden: torch.Tensor) -> torch.Tensor:
    check_features(hidden, params.config.in_dim, "mapper input")
    act = _ACTIVATIONS[params.activation]
    x = hidden
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w + b
        if i < last:
            x = act(x)
    return x


def text_features_gt(backend, params: MapperParams, caption_tokens: Sequence[int]) -> torch.Tensor:
    caption_tokens = list(caption_tokens)
    if not caption_tokens:
        raise InvalidInputError("caption must contain at least one token")
    return mapper_forward(params, backend.trunk_forward(backend.embed_text(caption_tokens)))


def map_generation_hidden(backend, params: MapperParams, hidden: torch.Tensor) -> torch.Tensor:
    if params.config.reapply_trunk:
        if hidden.shape[1] != backend.trunk_input_dim:
            raise ConfigError("reapply_trunk needs the trunk input width to equal the hidden width")
        hidden = backend.trunk_forward(hidden)
    return mapper_forward(params, hidden)


def text_features_g(backend, params: MapperParams, image, prompt: Sequence[int], max_new_tokens: int):
    """Caption ``image`` with the backend and map the generated positions.

    Raises :class:`DegenerateOutputError` when generation stops immediately.
    """
    caption, hidden = backend.generate_caption(image, prompt, max_new_tokens)
    if not caption:
        raise DegenerateOutputError("generation produced no tokens")
    return map_generation_hidden(backend, params, hidden), caption
