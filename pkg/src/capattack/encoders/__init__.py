"""Encoder, captioner and CLIP adapters plus the id-based loader.

Model ids are configuration strings:

* ``toy`` or ``toy:seed=7,size=16,patch=4,dim=32,hidden=64`` builds the
  numpy toy models (the same string works for encoder, captioner and CLIP,
  and they share weights when the parameters match);
* ``hf:<repo>`` loads a pretrained checkpoint. Image encoders accept a
  pooling suffix, ``hf:<repo>@mean``; captioners accept ``#beam4``.
"""

from __future__ import annotations

import os

from ..errors import ConfigError
from ..types import Embedding, ImageTensor
from .base import (
    CaptionPipelineAdapter,
    ClipAdapter,
    ImageEncoderAdapter,
    TextEncoderAdapter,
    caption,
    encode_image,
    encode_text,
    grad_wrt_image,
    resize_bilinear,
    value_and_grad,
)
from .cache import ContentCache, image_digest
from .toy import ToyCaptioner, ToyClip, ToyEncoder, ToyTextEncoder, ToyVocabulary

CACHE_ENV = "CAPATTACK_CACHE_DIR"

__all__ = [
    "CACHE_ENV",
    "CaptionPipelineAdapter",
    "ClipAdapter",
    "ContentCache",
    "ImageEncoderAdapter",
    "TextEncoderAdapter",
    "ToyCaptioner",
    "ToyClip",
    "ToyEncoder",
    "ToyTextEncoder",
    "ToyVocabulary",
    "cached_caption",
    "cached_encode_image",
    "caption",
    "default_cache_dir",
    "encode_image",
    "encode_text",
    "grad_wrt_image",
    "image_digest",
    "load_captioner",
    "load_clip",
    "load_image_encoder",
    "load_text_encoder",
    "resize_bilinear",
    "value_and_grad",
]

_TOY_KEYS = {"seed": "weight_seed", "patch": "patch_size", "dim": "embedding_dim", "hidden": "hidden_dim"}


def default_cache_dir() -> str:
    return os.environ.get(CACHE_ENV) or os.path.join(os.path.expanduser("~"), ".cache", "capattack")


def _toy_encoder(model_id: str) -> ToyEncoder:
    _, _, params = model_id.partition(":")
    kwargs: dict = {}
    for item in filter(None, (p.strip() for p in params.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"malformed toy parameter {item!r} in {model_id!r}")
        try:
            if key == "size":
                h, _, w = value.partition("x")
                kwargs["input_size"] = (int(h), int(w or h))
            elif key in _TOY_KEYS:
                kwargs[_TOY_KEYS[key]] = int(value)
            else:
                raise ConfigError(f"unknown toy parameter {key!r} in {model_id!r}")
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} in {model_id!r}") from exc
    return ToyEncoder(**kwargs)


def _is_toy(model_id: str) -> bool:
    return model_id == "toy" or model_id.startswith("toy:")


def _hf_name(model_id: str) -> str:
    if not model_id.startswith("hf:") or len(model_id) <= 3:
        raise ConfigError(f"unrecognized model id {model_id!r}; expected 'toy[:...]' or 'hf:<repo>'")
    return model_id[3:]


def load_image_encoder(model_id: str, cache_dir: str | None = None) -> ImageEncoderAdapter:
    if _is_toy(model_id):
        return _toy_encoder(model_id)
    from .hf import HFImageEncoder

    name, _, pooling = _hf_name(model_id).partition("@")
    return HFImageEncoder.from_pretrained(name, pooling or "cls", cache_dir=cache_dir)


def load_captioner(model_id: str, cache_dir: str | None = None) -> CaptionPipelineAdapter:
    if _is_toy(model_id):
        return ToyCaptioner(_toy_encoder(model_id))
    from .hf import HFCaptioner

    name, _, beam = _hf_name(model_id).partition("#")
    beams = 1
    if beam:
        if not beam.startswith("beam") or not beam[4:].isdigit():
            raise ConfigError(f"bad decoding suffix {beam!r}")
        beams = int(beam[4:])
    return HFCaptioner.from_pretrained(name, num_beams=beams, cache_dir=cache_dir)


def load_clip(model_id: str, cache_dir: str | None = None) -> ClipAdapter:
    if _is_toy(model_id):
        return ToyClip(_toy_encoder(model_id))
    from .hf import HFClip

    return HFClip.from_pretrained(_hf_name(model_id), cache_dir=cache_dir)


def load_text_encoder(model_id: str, cache_dir: str | None = None) -> TextEncoderAdapter:
    return load_clip(model_id, cache_dir).text_encoder


def cached_encode_image(adapter: ImageEncoderAdapter, img: ImageTensor, cache: ContentCache | None) -> Embedding:
    if cache is not None:
        hit = cache.get_embedding(adapter.encoder_id, img)
        if hit is not None:
            return Embedding(hit, "image_encoder")
    emb = encode_image(adapter, img)
    if cache is not None:
        cache.put_embedding(adapter.encoder_id, img, emb.values)
    return emb


def cached_caption(adapter: CaptionPipelineAdapter, img: ImageTensor, cache: ContentCache | None) -> str:
    if cache is not None:
        hit = cache.get_caption(adapter.pipeline_id, img)
        if hit is not None:
            return hit
    text = caption(adapter, img)
    if cache is not None:
        cache.put_caption(adapter.pipeline_id, img, text)
    return text
