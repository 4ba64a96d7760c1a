"""Low-rank adapters on the toy trunk's linear projections.

Adapters are attached with forward hooks, so the base module tree and its
state dict are never modified (until an explicit :func:`merge_lora`).
A disabled adapter's hook returns ``None`` and the base output passes
through untouched.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import torch
from torch import nn

from .backend import DTYPE, tensor_checksum
from .errors import ConfigError, ShapeError

ATTENTION_PROJECTIONS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 32
    alpha: float = 64.0
    dropout: float = 0.1
    bias: bool = False
    target_names: tuple[str, ...] | None = None  # None: every attention projection
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.rank, int) or self.rank < 1:
            raise ConfigError("LoRA rank must be a positive integer")
        if self.alpha <= 0:
            raise ConfigError("LoRA alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("LoRA dropout must lie in [0, 1)")
        if self.bias:
            raise ConfigError("bias adapters are not supported")
        if self.target_names is not None:
            object.__setattr__(self, "target_names", tuple(self.target_names))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_names"] = list(self.target_names) if self.target_names is not None else None
        return d


def _dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    if p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class LoraAdapter(nn.Module):
    def __init__(self, d_in: int, d_out: int, config: LoraConfig, generator: torch.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.A = nn.Parameter((torch.rand(config.rank, d_in, generator=generator, dtype=DTYPE) * 2 - 1) * bound)
        self.B = nn.Parameter(torch.zeros(d_out, config.rank, dtype=DTYPE))
        self.scaling = config.scaling
        self.dropout = config.dropout
        self.enabled = True
        self.merged = False

    def delta(self, x: torch.Tensor, training: bool, generator: torch.Generator | None = None) -> torch.Tensor:
        xd = _dropout(x, self.dropout, generator) if training else x
        return self.scaling * ((xd @ self.A.T) @ self.B.T)


def lora_forward(adapter: LoraAdapter, base_weight: torch.Tensor, x: torch.Tensor, training: bool = False, generator=None):
    """``W x + (alpha/r) B A drop(x)`` on row vectors; dropout only when ``training``."""
    if x.shape[-1] != base_weight.shape[1] or adapter.A.shape[1] != base_weight.shape[1]:
        raise ShapeError("input width does not match the base weight / adapter")
    if adapter.B.shape[0] != base_weight.shape[0]:
        raise ShapeError("adapter output width does not match the base weight")
    base = x @ base_weight.T
    if not adapter.enabled or adapter.merged:
        return base
    return base + adapter.delta(x, training, generator)


class AdapterSet:
    """The adapters attached to one backend, keyed by target module name."""

    def __init__(self, config: LoraConfig):
        self.config = config
        self.adapters: dict[str, LoraAdapter] = {}
        self.generator = torch.Generator().manual_seed(config.seed)
        self._handles = []
        self._targets: dict[str, nn.Linear] = {}

    def __len__(self):
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters.items())

    def __getitem__(self, name) -> LoraAdapter:
        return self.adapters[name]

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, ad in sorted(self.adapters.items()):
            out[f"{name}.A"] = ad.A
            out[f"{name}.B"] = ad.B
        return out

    def checksum(self) -> str:
        return tensor_checksum(self.tensors())

    @property
    def enabled(self) -> bool:
        return any(ad.enabled for ad in self.adapters.values())

    def state_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "tensors": {k: v.detach().clone() for k, v in self.tensors().items()},
            "enabled": {k: ad.enabled for k, ad in self.adapters.items()},
            "generator": self.generator.get_state(),
        }

    @torch.no_grad()
    def load_state_dict(self, state: dict):
        tensors = state["tensors"]
        if set(tensors) != set(self.tensors()):
            raise ConfigError("adapter checkpoint targets do not match the attached adapters")
        for k, v in self.tensors().items():
            if v.shape != tensors[k].shape:
                raise ConfigError(f"adapter tensor {k} has shape {tuple(tensors[k].shape)}, expected {tuple(v.shape)}")
            v.copy_(tensors[k])
        for k, flag in state.get("enabled", {}).items():
            self.adapters[k].enabled = bool(flag)
        if "generator" in state:
            self.generator.set_state(state["generator"])

    def detach(self):
        for h in self._handles:
            h.remove()
        self._handles.clear()


def trunk_linear_names(backend) -> list[str]:
    names = []
    for name, module in backend.model.named_modules():
        if isinstance(module, nn.Linear) and name.startswith("trunk."):
            names.append(name)
    return names


def default_targets(backend) -> list[str]:
    return [n for n in trunk_linear_names(backend) if n.split(".")[-2:-1] == ["attn"] and n.split(".")[-1] in ATTENTION_PROJECTIONS]


def attach_lora(backend, config: LoraConfig | None = None) -> AdapterSet:
    config = config or LoraConfig()
    available = dict(backend.model.named_modules())
    valid = set(trunk_linear_names(backend))
    targets = list(config.target_names) if config.target_names is not None else default_targets(backend)
    if not targets:
        raise ConfigError("no LoRA targets selected")
    for name in targets:
        if name not in valid:
            raise ConfigError(f"unknown LoRA target {name!r}; choose from {sorted(valid)}")
    existing = backend.adapters
    if existing is not None:
        clash = sorted(set(targets) & set(existing.adapters))
        raise ConfigError(f"adapters already attached to {clash or sorted(existing.adapters)}")
    aset = AdapterSet(config)
    for name in targets:
        linear = available[name]
        adapter = LoraAdapter(linear.in_features, linear.out_features, config, aset.generator)
        aset.adapters[name] = adapter
        aset._targets[name] = linear

        def hook(module, inputs, output, adapter=adapter, aset=aset):
            if not adapter.enabled or adapter.merged:
                return None
            return output + adapter.delta(inputs[0], module.training, aset.generator)

        aset._handles.append(linear.register_forward_hook(hook))
    backend.adapters = aset
    return aset


def detach_lora(backend):
    if backend.adapters is not None:
        backend.adapters.detach()
        backend.adapters = None


def set_lora_enabled(adapters: AdapterSet | None, flag: bool) -> None:
    if adapters is None:
        return
    for ad in adapters.adapters.values():
        ad.enabled = bool(flag)


@torch.no_grad()
def merge_lora(adapters: AdapterSet) -> dict[str, torch.Tensor]:
    """Fold ``(alpha/r) B A`` into each target weight; returns the merged weights."""
    if any(ad.merged for ad in adapters.adapters.values()):
        raise ConfigError("adapters are already merged")
    if not all(ad.enabled for ad in adapters.adapters.values()):
        raise ConfigError("merge requires every adapter to be enabled")
    merged = {}
    for name, ad in adapters.adapters.items():
        linear = adapters._targets[name]
        linear.weight += ad.scaling * (ad.B @ ad.A)
        ad.merged = True
        merged[f"{name}.weight"] = linear.weight.detach().clone()
    return merged


def adapter_parameters(adapters: AdapterSet) -> Iterable[torch.Tensor]:
    return adapters.tensors().values()
