"""Attack objectives over embeddings and images, with their gradients.

Each loss has a ``*_grad`` companion. Embedding-space gradients are pulled
back to pixels by the encoder adapter; the image-similarity term is
differentiated here directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, ZeroNorm
from .types import Embedding, ImageTensor, MODES

ZERO_NORM_TOL = 1e-12


def _vec(x: Embedding | np.ndarray) -> np.ndarray:
    return x.values if isinstance(x, Embedding) else np.asarray(x, dtype=np.float64)


def cosine_similarity(u: Embedding | np.ndarray, v: Embedding | np.ndarray) -> float:
    a, b = _vec(u), _vec(v)
    if a.shape != b.shape:
        raise ShapeMismatch(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM_TOL or nb < ZERO_NORM_TOL:
        raise ZeroNorm("cosine similarity of a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def cosine_similarity_grad(u: Embedding | np.ndarray, v: Embedding | np.ndarray) -> np.ndarray:
    """Gradient of ``CS(u, v)`` with respect to ``v``."""
    a, b = _vec(u), _vec(v)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM_TOL or nb < ZERO_NORM_TOL:
        raise ZeroNorm("cosine similarity of a zero-norm vector")
    cs = np.dot(a, b) / (na * nb)
    return a / (na * nb) - cs * b / (nb * nb)


@dataclass(frozen=True, eq=False)
class ObjectiveSpec:
    """Fixed half of the objective.

    ``reference_embedding`` is the clean image's embedding for untargeted
    runs and the target image's embedding for targeted runs.
    """

    mode: str
    lam: float
    reference_embedding: Embedding
    clean_image: ImageTensor

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if np.linalg.norm(self.reference_embedding.values) < ZERO_NORM_TOL:
            raise ZeroNorm("reference embedding has zero norm")


def untargeted_cs_loss(spec: ObjectiveSpec, adv_embedding: Embedding | np.ndarray) -> float:
    if spec.mode != "untargeted":
        raise ValueError("untargeted_cs_loss needs an untargeted spec")
    return cosine_similarity(spec.reference_embedding, adv_embedding)


def targeted_cs_loss(spec: ObjectiveSpec, adv_embedding: Embedding | np.ndarray) -> float:
    if spec.mode != "targeted":
        raise ValueError("targeted_cs_loss needs a targeted spec")
    return 1.0 - cosine_similarity(spec.reference_embedding, adv_embedding)


def cs_loss(spec: ObjectiveSpec, adv_embedding: Embedding | np.ndarray) -> float:
    if spec.mode == "untargeted":
        return untargeted_cs_loss(spec, adv_embedding)
    return targeted_cs_loss(spec, adv_embedding)


def cs_loss_grad(spec: ObjectiveSpec, adv_embedding: Embedding | np.ndarray) -> np.ndarray:
    g = cosine_similarity_grad(spec.reference_embedding, adv_embedding)
    return g if spec.mode == "untargeted" else -g


def _pixels(img: ImageTensor | np.ndarray) -> np.ndarray:
    return img.data if isinstance(img, ImageTensor) else np.asarray(img, dtype=np.float64)


def sim_loss(clean: ImageTensor | np.ndarray, adv: ImageTensor | np.ndarray) -> float:
    """Un-normalized L2 distance over every pixel channel."""
    if isinstance(clean, ImageTensor) and isinstance(adv, ImageTensor) and clean.domain != adv.domain:
        raise ShapeMismatch("images are in different domains")
    a, b = _pixels(clean), _pixels(adv)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a.astype(np.float64) - b) ** 2)))


def sim_loss_grad(clean: ImageTensor | np.ndarray, adv: ImageTensor | np.ndarray) -> np.ndarray:
    """Gradient of :func:`sim_loss` w.r.t. ``adv``; zero at ``adv == clean``."""
    a, b = _pixels(clean), _pixels(adv)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = b - a
    norm = np.sqrt(np.sum(diff**2))
    if norm == 0.0:
        return np.zeros_like(diff)
    return diff / norm


def total_loss(spec: ObjectiveSpec, adv: ImageTensor | np.ndarray, adv_embedding: Embedding | np.ndarray) -> float:
    """CS term for the spec's mode plus ``lam`` times the image L2 distance.

    The L-infinity budget is not part of this value; the attack engine
    enforces it by projection.
    """
    value = cs_loss(spec, adv_embedding)
    if spec.lam:
        value += spec.lam * sim_loss(spec.clean_image, adv)
    return value
