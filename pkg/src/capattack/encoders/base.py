"""Adapter contracts and the encoder-facing operations.

An image encoder adapter works on unit-domain pixel arrays at its own
``input_size``. Any normalization the backend needs happens inside the
adapter, so gradients always come back with respect to unit-domain pixels.
"""

from __future__ import annotations

from typing import Callable, Protocol, runtime_checkable

import numpy as np

from ..errors import CapAttackError, EncoderFailure, NonFiniteGradient, PipelineFailure, ShapeMismatch
from ..types import Embedding, ImageTensor

Pullback = Callable[[np.ndarray], np.ndarray]
# Maps embedding values to (loss value, d loss / d embedding).
EmbeddingLoss = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@runtime_checkable
class ImageEncoderAdapter(Protocol):
    encoder_id: str
    embedding_dim: int
    input_size: tuple[int, int]

    def forward(self, pixels: np.ndarray) -> tuple[np.ndarray, Pullback]:
        """Embed ``pixels`` and return a pullback for cotangents on the embedding."""
        ...

    def encode(self, pixels: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class TextEncoderAdapter(Protocol):
    encoder_id: str
    embedding_dim: int

    def encode_text(self, text: str) -> np.ndarray: ...


@runtime_checkable
class CaptionPipelineAdapter(Protocol):
    pipeline_id: str
    decoding: str

    def caption(self, pixels: np.ndarray) -> str: ...


@runtime_checkable
class ClipAdapter(Protocol):
    """Joint image-text model used for scoring."""

    clip_id: str
    image_encoder: ImageEncoderAdapter
    text_encoder: TextEncoderAdapter


def resize_bilinear(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an ``(H, W, C)`` float array, half-pixel centers."""
    h, w = pixels.shape[:2]
    th, tw = size
    if (h, w) == (th, tw):
        return pixels

    def coords(n_in: int, n_out: int):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(h, th)
    x0, x1, fx = coords(w, tw)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = pixels[y0][:, x0] * (1 - fx) + pixels[y0][:, x1] * fx
    bot = pixels[y1][:, x0] * (1 - fx) + pixels[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def prepare_pixels(adapter: ImageEncoderAdapter, img: ImageTensor) -> np.ndarray:
    if img.domain != "unit":
        raise ShapeMismatch("encoders take unit-domain images")
    if tuple(img.shape[:2]) == tuple(adapter.input_size):
        return img.data
    return np.clip(resize_bilinear(img.data, adapter.input_size), 0.0, 1.0)


def encode_image(adapter: ImageEncoderAdapter, img: ImageTensor) -> Embedding:
    pixels = prepare_pixels(adapter, img)
    try:
        values = adapter.encode(pixels)
    except CapAttackError:
        raise
    except Exception as exc:
        raise EncoderFailure(f"{adapter.encoder_id}: {exc}") from exc
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (adapter.embedding_dim,):
        raise EncoderFailure(
            f"{adapter.encoder_id} returned shape {values.shape}, expected ({adapter.embedding_dim},)"
        )
    return Embedding(values, "image_encoder")


def value_and_grad(
    adapter: ImageEncoderAdapter, pixels: np.ndarray, loss_fn: EmbeddingLoss
) -> tuple[np.ndarray, float, np.ndarray]:
    """One forward pass and one pullback.

    Returns ``(embedding, loss, d loss / d pixels)``.
    """
    try:
        emb, pullback = adapter.forward(pixels)
    except CapAttackError:
        raise
    except Exception as exc:
        raise EncoderFailure(f"{adapter.encoder_id}: {exc}") from exc
    emb = np.asarray(emb, dtype=np.float64)
    value, cot = loss_fn(emb)
    cot = np.asarray(cot, dtype=np.float64)
    if not np.all(np.isfinite(cot)) or not np.isfinite(value):
        raise NonFiniteGradient("loss or its embedding gradient is not finite")
    try:
        grad = np.asarray(pullback(cot), dtype=np.float64)
    except Exception as exc:
        raise EncoderFailure(f"{adapter.encoder_id} backward: {exc}") from exc
    if grad.shape != pixels.shape:
        raise EncoderFailure(f"gradient shape {grad.shape} != image shape {pixels.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("pixel gradient has NaN or Inf entries")
    return emb, float(value), grad


def grad_wrt_image(adapter: ImageEncoderAdapter, img: ImageTensor, loss_fn: EmbeddingLoss) -> np.ndarray:
    """Gradient of ``loss_fn(encode(img))`` with respect to the unit-domain pixels."""
    if tuple(img.shape[:2]) != tuple(adapter.input_size):
        raise ShapeMismatch(f"image {img.shape[:2]} is not at encoder resolution {adapter.input_size}")
    _, _, grad = value_and_grad(adapter, img.data, loss_fn)
    return grad


def encode_text(adapter: TextEncoderAdapter, text: str) -> Embedding:
    if not isinstance(text, str) or not text.strip():
        raise ValueError("text must be a non-empty string")
    try:
        values = np.asarray(adapter.encode_text(text), dtype=np.float64)
    except CapAttackError:
        raise
    except Exception as exc:
        raise EncoderFailure(f"{adapter.encoder_id}: {exc}") from exc
    return Embedding(values, "text_encoder")


def caption(adapter: CaptionPipelineAdapter, img: ImageTensor) -> str:
    if img.domain != "unit":
        raise ShapeMismatch("captioning takes unit-domain images")
    try:
        text = adapter.caption(img.data)
    except CapAttackError:
        raise
    except Exception as exc:
        raise PipelineFailure(f"{adapter.pipeline_id}: {exc}") from exc
    text = (text or "").strip()
    if not text:
        raise PipelineFailure(f"{adapter.pipeline_id} produced an empty caption")
    return text
