"""Content-addressed on-disk cache for embeddings and captions.

Keys are ``(model id, SHA-256 of the image bytes)``. Writes go through a
temporary file and ``os.replace`` so concurrent writers never expose a
partial entry; the same key always maps to the same deterministic value,
so last-write-wins is harmless.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import threading
from pathlib import Path

import numpy as np

from ..types import ImageTensor


def image_digest(img: ImageTensor) -> str:
    """Hash of the 8-bit pixel bytes when the image sits on the 8-bit grid, else of the float bytes."""
    data = img.data
    if img.domain == "unit":
        scaled = data * 255.0
        rounded = np.rint(scaled)
        if np.array_equal(scaled, rounded):
            data = rounded.astype(np.uint8)
    h = hashlib.sha256()
    h.update(f"{data.shape}|{data.dtype.str}|".encode())
    h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


def _slug(model_id: str) -> str:
    return hashlib.sha256(model_id.encode("utf-8")).hexdigest()[:16]


class ContentCache:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _count(self, hit: bool) -> None:
        with self._lock:
            if hit:
                self.hits += 1
            else:
                self.misses += 1

    def _path(self, kind: str, model_id: str, digest: str, suffix: str) -> Path:
        return self.root / kind / _slug(model_id) / digest[:2] / f"{digest}{suffix}"

    def _write(self, path: Path, payload: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def get_embedding(self, model_id: str, img: ImageTensor) -> np.ndarray | None:
        path = self._path("embeddings", model_id, image_digest(img), ".npy")
        if not path.exists():
            self._count(False)
            return None
        self._count(True)
        return np.load(path)

    def put_embedding(self, model_id: str, img: ImageTensor, values: np.ndarray) -> None:
        buf = io.BytesIO()
        np.save(buf, np.asarray(values, dtype=np.float64))
        self._write(self._path("embeddings", model_id, image_digest(img), ".npy"), buf.getvalue())

    def get_caption(self, pipeline_id: str, img: ImageTensor) -> str | None:
        path = self._path("captions", pipeline_id, image_digest(img), ".json")
        if not path.exists():
            self._count(False)
            return None
        self._count(True)
        return json.loads(path.read_text(encoding="utf-8"))["caption"]

    def put_caption(self, pipeline_id: str, img: ImageTensor, text: str) -> None:
        payload = json.dumps({"pipeline_id": pipeline_id, "caption": text}, ensure_ascii=False)
        self._write(self._path("captions", pipeline_id, image_digest(img), ".json"), payload.encode("utf-8"))
