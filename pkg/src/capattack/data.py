"""Image-caption dataset loading, the caption-agreement filter, and target pairing.

The index is a UTF-8 tab-separated file with one ``image<TAB>caption`` row
per caption, as in the Flickr30k token file (``name.jpg#3`` suffixes are
stripped).
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .encoders import CaptionPipelineAdapter, ContentCache, TextEncoderAdapter, cached_caption, encode_text
from .errors import CapAttackError, InsufficientSamples, MissingIndex
from .objectives import cosine_similarity
from .types import ImageTensor, load_png

log = logging.getLogger(__name__)

INDEX_NAMES = ("captions.tsv", "captions.txt", "results_20130124.token", "results.token")
IMAGE_DIRS = ("images", "flickr30k-images", "flickr30k_images")
_ROW_SUFFIX = re.compile(r"#\d+$")


@dataclass(frozen=True)
class CaptionedSample:
    sample_id: str
    image_path: str
    ground_truth_captions: tuple[str, ...]

    def __post_init__(self):
        caps = tuple(c.strip() for c in self.ground_truth_captions)
        if not caps or not all(caps):
            raise ValueError(f"sample {self.sample_id!r} needs at least one non-empty caption")
        object.__setattr__(self, "ground_truth_captions", caps)

    def load_image(self, size: tuple[int, int] | None = None) -> ImageTensor:
        return load_png(self.image_path, size)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_path": self.image_path,
            "ground_truth_captions": list(self.ground_truth_captions),
        }


def find_index(root: Path) -> Path:
    for name in INDEX_NAMES:
        if (root / name).is_file():
            return root / name
    tokens = sorted(root.glob("*.token"))
    if tokens:
        return tokens[0]
    raise MissingIndex(f"no caption index ({', '.join(INDEX_NAMES)}) under {root}")


def _image_dir(root: Path) -> Path:
    for name in IMAGE_DIRS:
        if (root / name).is_dir():
            return root / name
    return root


def read_index(path: Path) -> dict[str, list[str]]:
    """Map image filename -> captions, in file order."""
    captions: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            name, sep, text = line.partition("\t")
            if not sep:
                log.warning("%s:%d: no tab separator, skipped", path, lineno)
                continue
            name = _ROW_SUFFIX.sub("", name.strip())
            if lineno == 1 and name.lower() in ("image", "image_name", "filename"):
                continue
            text = text.strip()
            if text:
                captions.setdefault(name, []).append(text)
    return captions


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def load_dataset(
    root: str | Path,
    limit: int | None = None,
    seed: int = 0,
    index: str | Path | None = None,
) -> list[CaptionedSample]:
    """Seeded random sample of up to ``limit`` image-caption pairs.

    Unreadable or missing images are skipped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingIndex(f"dataset root {root} does not exist")
    index_path = Path(index) if index else find_index(root)
    if not index_path.is_file():
        raise MissingIndex(f"caption index {index_path} not found")
    table = read_index(index_path)
    if limit is not None and limit <= 0:
        return []
    image_dir = _image_dir(root)
    names = sorted(table)
    order = np.random.default_rng(seed).permutation(len(names))
    out: list[CaptionedSample] = []
    skipped = 0
    for i in order:
        if limit is not None and len(out) >= limit:
            break
        name = names[i]
        path = image_dir / name
        if not _decodable(path):
            skipped += 1
            log.warning("unreadable image %s skipped", path)
            continue
        out.append(CaptionedSample(Path(name).stem, str(path), tuple(table[name])))
    if skipped:
        log.warning("%d unreadable image(s) skipped", skipped)
    return out


def caption_score(predicted: str, ground_truth: Sequence[str], text_encoder: TextEncoderAdapter) -> float:
    """Best text-text cosine similarity of ``predicted`` against any reference caption."""
    pred = encode_text(text_encoder, predicted)
    return max(cosine_similarity(pred, encode_text(text_encoder, gt)) for gt in ground_truth)


@dataclass
class FilteredDataset:
    """Filter outcome. ``scores``/``predicted_captions`` cover every scored sample, retained or not."""

    samples: list[CaptionedSample]
    tau: float
    predicted_captions: dict[str, str]
    scores: dict[str, float] = field(default_factory=dict)
    candidates: list[CaptionedSample] = field(default_factory=list)
    pipeline_id: str = ""
    text_encoder_id: str = ""
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def rethreshold(self, tau: float) -> "FilteredDataset":
        """Re-apply the predicate at a new threshold from the stored scores."""
        kept = [s for s in self.candidates if self.scores[s.sample_id] >= tau]
        return FilteredDataset(
            kept, tau, dict(self.predicted_captions), dict(self.scores), list(self.candidates),
            self.pipeline_id, self.text_encoder_id, self.image_size,
        )

    def recheck(self, text_encoder: TextEncoderAdapter) -> list[str]:
        """Recompute every score from the stored captions; return the retained ids."""
        return [
            s.sample_id
            for s in self.candidates
            if caption_score(self.predicted_captions[s.sample_id], s.ground_truth_captions, text_encoder) >= self.tau
        ]

    def to_json(self) -> str:
        retained = set(self.sample_ids)
        rows = [
            {
                **s.to_dict(),
                "predicted_caption": self.predicted_captions[s.sample_id],
                "score": self.scores[s.sample_id],
                "retained": s.sample_id in retained,
            }
            for s in self.candidates
        ]
        payload = {
            "tau": self.tau,
            "pipeline_id": self.pipeline_id,
            "text_encoder_id": self.text_encoder_id,
            "image_size": list(self.image_size) if self.image_size else None,
            "n_total": len(self.candidates),
            "n_retained": len(self.samples),
            "samples": rows,
        }
        return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FilteredDataset":
        raw = json.loads(text)
        candidates, kept, preds, scores = [], [], {}, {}
        for row in raw["samples"]:
            s = CaptionedSample(row["sample_id"], row["image_path"], tuple(row["ground_truth_captions"]))
            candidates.append(s)
            preds[s.sample_id] = row["predicted_caption"]
            scores[s.sample_id] = float(row["score"])
            if row["retained"]:
                kept.append(s)
        size = raw.get("image_size")
        return cls(
            kept, float(raw["tau"]), preds, scores, candidates,
            raw.get("pipeline_id", ""), raw.get("text_encoder_id", ""), tuple(size) if size else None,
        )

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FilteredDataset":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def filter_hallucinations(
    samples: Sequence[CaptionedSample],
    captioner: CaptionPipelineAdapter,
    text_encoder: TextEncoderAdapter,
    tau: float = 0.7,
    cache: ContentCache | None = None,
    image_size: tuple[int, int] | None = None,
    workers: int = 1,
) -> FilteredDataset:
    """Caption each clean image and keep samples whose caption agrees with a reference.

    Agreement is the maximum text-embedding cosine similarity against the
    sample's ground-truth captions; a sample is kept iff it is ``>= tau``.
    Samples the captioner fails on are dropped and logged.
    """
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")

    def score_one(sample: CaptionedSample):
        try:
            img = sample.load_image(image_size)
            pred = cached_caption(captioner, img, cache)
            return pred, caption_score(pred, sample.ground_truth_captions, text_encoder)
        except CapAttackError as exc:
            log.warning("sample %s dropped: %s", sample.sample_id, exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(score_one, samples))
    else:
        outcomes = [score_one(s) for s in samples]

    candidates, kept, preds, scores = [], [], {}, {}
    for sample, outcome in zip(samples, outcomes):
        if outcome is None:
            continue
        pred, score = outcome
        candidates.append(sample)
        preds[sample.sample_id] = pred
        scores[sample.sample_id] = score
        if score >= tau:
            kept.append(sample)
    return FilteredDataset(
        kept, tau, preds, scores, candidates,
        captioner.pipeline_id, text_encoder.encoder_id, tuple(image_size) if image_size else None,
    )


def select_target_pairs(dataset: FilteredDataset, seed: int) -> list[tuple[CaptionedSample, CaptionedSample]]:
    """Shuffle the retained samples and pair them off as (source, target).

    Pairs are disjoint, so ``n`` samples give ``n // 2`` pairs.
    """
    samples = list(dataset.samples)
    if len(samples) < 2:
        raise InsufficientSamples(f"need at least 2 retained samples for pairing, got {len(samples)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    return [(samples[order[i]], samples[order[i + 1]]) for i in range(0, len(order) - 1, 2)]
