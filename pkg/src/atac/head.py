"""Cosine-softmax zero-shot classification against fixed class embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import NORM_FLOOR
from .errors import DegenerateHead, DimensionMismatch, NotUnitNorm

UNIT_TOL = 1e-4


@dataclass(frozen=True)
class ZeroShotHead:
    class_embeddings: np.ndarray  # (k, D), unit rows
    temperature: float = 0.01
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        t = np.asarray(self.class_embeddings, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 2:
            raise DegenerateHead("a head needs at least two class embeddings")
        if np.any(np.abs(np.linalg.norm(t, axis=1) - 1.0) > 1e-6):
            raise NotUnitNorm("class embeddings must be unit norm")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "class_embeddings", t)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"class_{i}" for i in range(len(t))))
        elif len(self.labels) != len(t):
            raise ValueError("labels and class embeddings differ in length")

    @property
    def k(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.class_embeddings.shape[1]


@dataclass(frozen=True)
class Prediction:
    label_index: int
    probabilities: np.ndarray


def _check_dim(f: np.ndarray, head: ZeroShotHead):
    if f.shape[-1] != head.dim:
        raise DimensionMismatch(f"embedding dim {f.shape[-1]} vs head dim {head.dim}")


def logits(f, head: ZeroShotHead) -> np.ndarray:
    """Cosine logits ``cos(f, t_i) / T``; works on ``(D,)`` or ``(B, D)``."""
    f = np.asarray(f, dtype=np.float64)
    _check_dim(f, head)
    n = np.linalg.norm(f, axis=-1, keepdims=True)
    return (f / np.maximum(n, NORM_FLOOR)) @ head.class_embeddings.T / head.temperature


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_probabilities(f, head: ZeroShotHead) -> np.ndarray:
    return softmax(logits(f, head))


def predict(f, head: ZeroShotHead) -> Prediction:
    f = np.asarray(f, dtype=np.float64)
    _check_dim(f, head)
    if abs(np.linalg.norm(f) - 1.0) > UNIT_TOL:
        raise NotUnitNorm("predict expects a unit-norm embedding")
    p = class_probabilities(f, head)
    return Prediction(int(np.argmax(p)), p)


def predict_labels(f: np.ndarray, head: ZeroShotHead) -> np.ndarray:
    """Batch argmax with lowest-index tie-break (``np.argmax`` semantics)."""
    return np.argmax(logits(f, head), axis=-1)


def cross_entropy(f: np.ndarray, y, head: ZeroShotHead, grad: bool = False):
    """Per-row CE of the cosine logits against labels ``y``.

    ``f`` is assumed unit-norm. With ``grad=True`` also returns dCE/df for the
    unit embedding (the tangential projection is left to the encoder VJP).
    """
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    z = f @ head.class_embeddings.T / head.temperature
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(len(y))
    loss = lse - z[rows, y]
    if not grad:
        return loss
    p = np.exp(z - lse[:, None])
    p[rows, y] -= 1.0
    return loss, p @ head.class_embeddings / head.temperature


def normalize_backward(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """VJP of ``v -> v / |v|`` row-wise."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / n
    return (g - np.sum(g * u, axis=-1, keepdims=True) * u) / n
