"""Feature pooling and the cosine-distance alignment loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateInputError, InvalidInputError, ShapeError

SOURCES = ("vision", "text_gt", "text_g")
POOLING = ("mean", "last")

NORM_FLOOR = 1e-12
MIN_NORM = 1e-8


@dataclass(frozen=True)
class PooledFeature:
    vector: np.ndarray
    source: str = "vision"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError(f"pooled feature must be a vector, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise InvalidInputError("pooled feature has non-finite entries")
        if self.source not in SOURCES:
            raise InvalidInputError(f"unknown source tag {self.source!r}")
        object.__setattr__(self, "vector", v)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def pool_rows(features: torch.Tensor, method: str = "mean") -> torch.Tensor:
    """Differentiable pooling used inside training loops."""
    if features.ndim != 2 or features.shape[0] == 0:
        raise InvalidInputError("pooling needs a matrix with at least one row")
    if method == "mean":
        return features.mean(dim=0)
    if method == "last":
        return features[-1]
    raise InvalidInputError(f"unknown pooling method {method!r}")


def pool_features(features, method: str = "mean", source: str = "vision") -> PooledFeature:
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError("pooling needs a matrix with at least one row")
    if method == "mean":
        vec = x.mean(axis=0)
    elif method == "last":
        vec = x[-1].copy()
    else:
        raise InvalidInputError(f"unknown pooling method {method!r}")
    return PooledFeature(vec, source)


def _vectors(f_i, f_t):
    a = f_i.vector if isinstance(f_i, PooledFeature) else np.asarray(f_i, dtype=np.float64)
    b = f_t.vector if isinstance(f_t, PooledFeature) else np.asarray(f_t, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < MIN_NORM or nb < MIN_NORM:
        raise DegenerateInputError("zero-norm feature in alignment loss")
    return a, b, max(na, NORM_FLOOR), max(nb, NORM_FLOOR)


def alignment_loss(f_i, f_t) -> float:
    """``1 - cos(f_i, f_t)``, clipped to [0, 2] against rounding."""
    a, b, na, nb = _vectors(f_i, f_t)
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def alignment_loss_grad(f_i, f_t) -> tuple[np.ndarray, np.ndarray]:
    a, b, na, nb = _vectors(f_i, f_t)
    dot = a @ b
    grad_a = -(b / (na * nb) - dot * a / (na**3 * nb))
    grad_b = -(a / (na * nb) - dot * b / (nb**3 * na))
    return grad_a, grad_b


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise ``1 - cos`` for torch tensors (``... x d``); autograd-friendly."""
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if (na.detach() < MIN_NORM).any() or (nb.detach() < MIN_NORM).any():
        raise DegenerateInputError("zero-norm feature in alignment loss")
    cos = (a * b).sum(dim=-1) / (na.clamp_min(NORM_FLOOR) * nb.clamp_min(NORM_FLOOR))
    return 1.0 - cos


def batch_alignment_loss(vision: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """Arithmetic mean of per-pair losses over a batch of pooled vectors."""
    return cosine_distance(vision, text).mean()
