"""Adapters over pretrained Hugging Face checkpoints.

torch and transformers are imported lazily so the rest of the package
(and the attack engine in particular) works without them.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import ModelLoadError
from .base import Pullback

VIT_GPT2 = "nlpconnect/vit-gpt2-image-captioning"
CLIP_B32 = "openai/clip-vit-base-patch32"
POOLINGS = ("cls", "mean", "flatten")


def _torch():
    import torch

    return torch


def _as_tensor(x):
    """transformers>=5 returns output objects from ``get_*_features``."""
    torch = _torch()
    if isinstance(x, torch.Tensor):
        return x
    pooled = getattr(x, "pooler_output", None)
    if pooled is None:
        raise TypeError(f"cannot extract features from {type(x).__name__}")
    return pooled


def _pixel_tensor(pixels: np.ndarray, size: tuple[int, int], mean, std, dtype):
    """(H, W, 3) unit array -> normalized (1, 3, h, w) tensor at ``size``."""
    torch = _torch()
    t = torch.tensor(np.asarray(pixels), dtype=dtype).permute(2, 0, 1)[None]
    return t, _normalize(t, size, mean, std)


def _normalize(t, size, mean, std):
    torch = _torch()
    if tuple(t.shape[-2:]) != tuple(size):
        t = torch.nn.functional.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    m = torch.as_tensor(mean, dtype=t.dtype).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=t.dtype).view(1, -1, 1, 1)
    return (t - m) / s


def _processor_stats(model_id: str, cache_dir, default_size: int):
    from transformers import AutoImageProcessor

    try:
        proc = AutoImageProcessor.from_pretrained(model_id, cache_dir=cache_dir)
    except Exception:
        return [0.5, 0.5, 0.5], [0.5, 0.5, 0.5], (default_size, default_size)
    size = getattr(proc, "size", None) or {}
    if isinstance(size, dict):
        h = size.get("height") or size.get("shortest_edge") or default_size
        w = size.get("width") or size.get("shortest_edge") or default_size
    else:
        h = w = int(size)
    return list(proc.image_mean), list(proc.image_std), (int(h), int(w))


class HFImageEncoder:
    """Vision transformer encoder returning a pooled token embedding.

    ``pooling`` selects the CLS token, the token mean, or the flattened
    token sequence.
    """

    def __init__(self, vision_model, encoder_id: str, image_mean, image_std, input_size, pooling: str = "cls"):
        if pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        self.model = vision_model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.encoder_id = encoder_id
        self.image_mean = list(image_mean)
        self.image_std = list(image_std)
        self.input_size = tuple(input_size)
        self.pooling = pooling
        self._dtype = next(self.model.parameters()).dtype
        cfg = self.model.config
        hidden = int(cfg.hidden_size)
        if pooling == "flatten":
            n_tokens = (self.input_size[0] // cfg.patch_size) * (self.input_size[1] // cfg.patch_size) + 1
            self.embedding_dim = n_tokens * hidden
        else:
            self.embedding_dim = hidden

    @classmethod
    def from_pretrained(cls, model_id: str = VIT_GPT2, pooling: str = "cls", cache_dir=None) -> "HFImageEncoder":
        try:
            from transformers import AutoModel, VisionEncoderDecoderModel

            try:
                vision = VisionEncoderDecoderModel.from_pretrained(model_id, cache_dir=cache_dir).encoder
            except Exception:
                vision = AutoModel.from_pretrained(model_id, cache_dir=cache_dir)
            size = int(getattr(vision.config, "image_size", 224))
            mean, std, input_size = _processor_stats(model_id, cache_dir, size)
        except Exception as exc:
            raise ModelLoadError(f"could not load image encoder {model_id!r}: {exc}") from exc
        return cls(vision, f"hf:{model_id}@{pooling}", mean, std, input_size, pooling)

    def _embed(self, x):
        hidden = self.model(pixel_values=x).last_hidden_state[0]
        if self.pooling == "cls":
            return hidden[0]
        if self.pooling == "mean":
            return hidden.mean(dim=0)
        return hidden.reshape(-1)

    def forward(self, pixels: np.ndarray) -> tuple[np.ndarray, Pullback]:
        torch = _torch()
        raw, _ = _pixel_tensor(pixels, self.input_size, self.image_mean, self.image_std, self._dtype)
        raw.requires_grad_(True)
        with torch.enable_grad():
            emb = self._embed(_normalize(raw, self.input_size, self.image_mean, self.image_std))

        def pullback(cot: np.ndarray) -> np.ndarray:
            g = torch.as_tensor(np.asarray(cot), dtype=emb.dtype)
            (grad,) = torch.autograd.grad(emb, raw, grad_outputs=g, retain_graph=True)
            return grad[0].permute(1, 2, 0).double().numpy()

        return emb.detach().double().numpy(), pullback

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        torch = _torch()
        with torch.no_grad():
            _, x = _pixel_tensor(pixels, self.input_size, self.image_mean, self.image_std, self._dtype)
            return self._embed(x).double().numpy()


class HFCaptioner:
    """End-to-end encoder-decoder captioner. Requests are serialized."""

    def __init__(self, model, tokenizer, pipeline_id: str, image_mean, image_std, input_size,
                 num_beams: int = 1, max_length: int = 16):
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.pipeline_id = pipeline_id
        self.image_mean, self.image_std = list(image_mean), list(image_std)
        self.input_size = tuple(input_size)
        self.num_beams = int(num_beams)
        self.max_length = int(max_length)
        self.decoding = "greedy" if self.num_beams == 1 else f"beam({self.num_beams})"
        self._lock = threading.Lock()

    @classmethod
    def from_pretrained(cls, model_id: str = VIT_GPT2, num_beams: int = 1, cache_dir=None) -> "HFCaptioner":
        try:
            from transformers import AutoTokenizer, VisionEncoderDecoderModel

            model = VisionEncoderDecoderModel.from_pretrained(model_id, cache_dir=cache_dir)
            tokenizer = AutoTokenizer.from_pretrained(model_id, cache_dir=cache_dir)
            size = int(getattr(model.config.encoder, "image_size", 224))
            mean, std, input_size = _processor_stats(model_id, cache_dir, size)
        except Exception as exc:
            raise ModelLoadError(f"could not load captioner {model_id!r}: {exc}") from exc
        pid = f"hf:{model_id}" + ("" if num_beams == 1 else f"#beam{num_beams}")
        return cls(model, tokenizer, pid, mean, std, input_size, num_beams)

    def caption(self, pixels: np.ndarray) -> str:
        torch = _torch()
        dtype = next(self.model.parameters()).dtype
        with self._lock, torch.no_grad():
            _, x = _pixel_tensor(pixels, self.input_size, self.image_mean, self.image_std, dtype)
            ids = self.model.generate(
                x, max_length=self.max_length, num_beams=self.num_beams, do_sample=False
            )
        return self.tokenizer.batch_decode(ids, skip_special_tokens=True)[0].strip()


class HFClipImage:
    """Image branch of a CLIP model, projected into the joint space."""

    def __init__(self, clip_model, encoder_id: str, image_mean, image_std, input_size):
        self.model = clip_model
        self.encoder_id = encoder_id
        self.image_mean, self.image_std = list(image_mean), list(image_std)
        self.input_size = tuple(input_size)
        self.embedding_dim = int(clip_model.config.projection_dim)
        self._dtype = next(clip_model.parameters()).dtype

    def forward(self, pixels: np.ndarray) -> tuple[np.ndarray, Pullback]:
        torch = _torch()
        raw, _ = _pixel_tensor(pixels, self.input_size, self.image_mean, self.image_std, self._dtype)
        raw.requires_grad_(True)
        with torch.enable_grad():
            x = _normalize(raw, self.input_size, self.image_mean, self.image_std)
            emb = _as_tensor(self.model.get_image_features(pixel_values=x))[0]

        def pullback(cot: np.ndarray) -> np.ndarray:
            g = torch.as_tensor(np.asarray(cot), dtype=emb.dtype)
            (grad,) = torch.autograd.grad(emb, raw, grad_outputs=g, retain_graph=True)
            return grad[0].permute(1, 2, 0).double().numpy()

        return emb.detach().double().numpy(), pullback

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        torch = _torch()
        with torch.no_grad():
            _, x = _pixel_tensor(pixels, self.input_size, self.image_mean, self.image_std, self._dtype)
            return _as_tensor(self.model.get_image_features(pixel_values=x))[0].double().numpy()


class HFClipText:
    def __init__(self, clip_model, tokenizer, encoder_id: str):
        self.model = clip_model
        self.tokenizer = tokenizer
        self.encoder_id = encoder_id
        self.embedding_dim = int(clip_model.config.projection_dim)

    def encode_text(self, text: str) -> np.ndarray:
        torch = _torch()
        tokens = self.tokenizer([text], padding=True, truncation=True, return_tensors="pt")
        with torch.no_grad():
            feats = _as_tensor(self.model.get_text_features(**tokens))
        return feats[0].double().numpy()


class HFClip:
    def __init__(self, clip_model, tokenizer, clip_id: str, image_mean, image_std, input_size):
        self.clip_id = clip_id
        self.model = clip_model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.image_encoder = HFClipImage(self.model, f"{clip_id}/image", image_mean, image_std, input_size)
        self.text_encoder = HFClipText(self.model, tokenizer, f"{clip_id}/text")

    @classmethod
    def from_pretrained(cls, model_id: str = CLIP_B32, cache_dir=None) -> "HFClip":
        try:
            from transformers import CLIPModel, CLIPTokenizer

            model = CLIPModel.from_pretrained(model_id, cache_dir=cache_dir)
            tokenizer = CLIPTokenizer.from_pretrained(model_id, cache_dir=cache_dir)
            size = int(model.config.vision_config.image_size)
            mean, std, input_size = _processor_stats(model_id, cache_dir, size)
        except Exception as exc:
            raise ModelLoadError(f"could not load CLIP model {model_id!r}: {exc}") from exc
        return cls(model, tokenizer, f"hf:{model_id}", mean, std, input_size)
