"""Small numpy models that honour the adapter contracts.

The toy encoder is patchify -> random linear -> tanh -> mean-pool ->
random linear, with a hand-written pullback. The toy captioner and toy CLIP
share a word-prototype vocabulary in the encoder's embedding space, so
captions and scores respond to embedding changes the way the real
pipeline's do, just far more crudely.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from ..errors import ShapeMismatch
from .base import Pullback, resize_bilinear


class ToyEncoder:
    def __init__(
        self,
        weight_seed: int = 7,
        patch_size: int = 4,
        embedding_dim: int = 32,
        hidden_dim: int = 64,
        input_size: tuple[int, int] = (16, 16),
    ):
        h, w = input_size
        if h % patch_size or w % patch_size:
            raise ShapeMismatch(f"input_size {input_size} not divisible by patch_size {patch_size}")
        self.weight_seed = int(weight_seed)
        self.patch_size = int(patch_size)
        self.embedding_dim = int(embedding_dim)
        self.hidden_dim = int(hidden_dim)
        self.input_size = (int(h), int(w))
        self.encoder_id = (
            f"toy:seed={self.weight_seed},size={h}x{w},patch={self.patch_size},"
            f"dim={self.embedding_dim},hidden={self.hidden_dim}"
        )

        rng = np.random.default_rng(self.weight_seed)
        fan_in = 3 * self.patch_size**2
        self.w_patch = rng.standard_normal((fan_in, self.hidden_dim)) * (2.0 / np.sqrt(fan_in))
        self.b_patch = rng.standard_normal(self.hidden_dim) * 0.1
        self.w_out = rng.standard_normal((self.hidden_dim, self.embedding_dim)) / np.sqrt(self.hidden_dim)
        for arr in (self.w_patch, self.b_patch, self.w_out):
            arr.setflags(write=False)

    def _patches(self, z: np.ndarray) -> np.ndarray:
        h, w = self.input_size
        p = self.patch_size
        return z.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4).reshape(-1, 3 * p * p)

    def _unpatch(self, patches: np.ndarray) -> np.ndarray:
        h, w = self.input_size
        p = self.patch_size
        return patches.reshape(h // p, w // p, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, 3)

    def forward(self, pixels: np.ndarray) -> tuple[np.ndarray, Pullback]:
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.shape != (*self.input_size, 3):
            raise ShapeMismatch(f"toy encoder expects {(*self.input_size, 3)}, got {pixels.shape}")
        # Folded normalization: unit pixels -> [-1, 1].
        patches = self._patches((pixels - 0.5) / 0.5)
        hidden = np.tanh(patches @ self.w_patch + self.b_patch)
        emb = hidden.mean(axis=0) @ self.w_out
        n = patches.shape[0]

        def pullback(cot: np.ndarray) -> np.ndarray:
            d_pooled = self.w_out @ np.asarray(cot, dtype=np.float64)
            d_pre = (d_pooled / n) * (1.0 - hidden**2)
            return self._unpatch(d_pre @ self.w_patch.T) / 0.5

        return emb, pullback

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        return self.forward(pixels)[0]


STOPWORDS = frozenset("a an the in on of at with is are and to its his her their".split())

SUBJECTS = ("dog", "man", "woman", "child", "cat", "horse", "bird", "car")
ACTIONS = ("running", "sitting", "jumping", "standing", "walking", "playing", "riding", "swimming")
PLACES = ("beach", "street", "park", "field", "snow", "water", "grass", "city")


def _word_vector(word: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class ToyVocabulary:
    """Unit-norm word prototypes in a ``dim``-dimensional space."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng([seed, dim])
        self.slots = (SUBJECTS, ACTIONS, PLACES)
        words = [w for slot in self.slots for w in slot]
        protos = rng.standard_normal((len(words), dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        self.prototypes = {w: protos[i] for i, w in enumerate(words)}

    def vector(self, word: str) -> np.ndarray:
        if word in self.prototypes:
            return self.prototypes[word]
        return _word_vector(word, self.dim)


def tokenize(text: str) -> list[str]:
    return [t for t in re.findall(r"[a-z]+", text.lower()) if t not in STOPWORDS]


class ToyTextEncoder:
    """Bag-of-words: sum of word prototypes, unknown words hashed."""

    def __init__(self, vocabulary: ToyVocabulary):
        self.vocabulary = vocabulary
        self.embedding_dim = vocabulary.dim
        self.encoder_id = f"toytext:dim={vocabulary.dim},vocab={vocabulary.seed}"

    def encode_text(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            return _word_vector(text.strip().lower(), self.embedding_dim)
        return np.sum([self.vocabulary.vector(t) for t in tokens], axis=0)


class ToyCaptioner:
    """Greedy slot filler: per slot, the word whose prototype best matches the image embedding."""

    decoding = "greedy"

    def __init__(self, encoder: ToyEncoder, vocabulary: ToyVocabulary | None = None):
        self.encoder = encoder
        self.vocabulary = vocabulary or ToyVocabulary(encoder.embedding_dim)
        self.pipeline_id = f"toycap:{encoder.encoder_id},vocab={self.vocabulary.seed}"

    def caption(self, pixels: np.ndarray) -> str:
        if pixels.shape[:2] != self.encoder.input_size:
            pixels = np.clip(resize_bilinear(pixels, self.encoder.input_size), 0.0, 1.0)
        emb = self.encoder.encode(pixels)
        emb = emb / (np.linalg.norm(emb) or 1.0)
        picks = []
        for slot in self.vocabulary.slots:
            scores = [float(emb @ self.vocabulary.prototypes[w]) for w in slot]
            picks.append(slot[int(np.argmax(scores))])
        subject, action, place = picks
        return f"a {subject} {action} in the {place}"


class ToyClip:
    def __init__(self, image_encoder: ToyEncoder, vocabulary: ToyVocabulary | None = None):
        self.image_encoder = image_encoder
        self.text_encoder = ToyTextEncoder(vocabulary or ToyVocabulary(image_encoder.embedding_dim))
        self.clip_id = f"toyclip:{image_encoder.encoder_id}"
