"""Synthetic image-caption dataset in the on-disk layout ``load_dataset`` reads.

Captions are built from the toy captioner's own output so the filter has
something real to decide: ``faithful`` samples paraphrase the toy caption,
``partial`` ones swap one word, ``hallucinated`` ones describe something else.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import ToyCaptioner, load_captioner
from .encoders.toy import ACTIONS, PLACES, SUBJECTS
from .types import load_png

KINDS = ("faithful", "partial", "hallucinated")


def _paraphrases(subject: str, action: str, place: str) -> list[str]:
    return [
        f"a {subject} {action} in the {place}",
        f"the {subject} is {action} on the {place}",
        f"a {subject} {action} at the {place}",
        f"one {subject} {action} near a {place}",
        f"a {subject} in the {place}",
    ]


def make_toy_dataset(
    root: str | Path,
    n: int = 24,
    seed: int = 0,
    image_size: int = 32,
    captioner_id: str = "toy",
    mix: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> dict[str, str]:
    """Write ``root/images/*.png`` and ``root/captions.tsv``; return sample kind by filename."""
    captioner = load_captioner(captioner_id)
    if not isinstance(captioner, ToyCaptioner):
        raise ValueError("synthetic datasets need a toy captioner id")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    kinds: dict[str, str] = {}
    rows: list[str] = []
    coarse = max(2, image_size // 4)
    for i in range(n):
        name = f"img_{i:04d}.png"
        low = (rng.random((coarse, coarse, 3)) * 255).astype(np.uint8)
        img = Image.fromarray(low, mode="RGB").resize((image_size, image_size), Image.BILINEAR)
        noise = rng.integers(-24, 25, size=(image_size, image_size, 3))
        arr = np.clip(np.asarray(img, dtype=np.int64) + noise, 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(root / "images" / name)

        pred = captioner.caption(load_png(root / "images" / name, captioner.encoder.input_size).data)
        words = pred.split()
        subject, action, place = words[1], words[2], words[-1]
        kind = KINDS[int(rng.choice(3, p=mix))]
        if kind == "partial":
            place = str(rng.choice([p for p in PLACES if p != place]))
        elif kind == "hallucinated":
            subject = str(rng.choice([s for s in SUBJECTS if s != subject]))
            action = str(rng.choice([a for a in ACTIONS if a != action]))
            place = str(rng.choice([p for p in PLACES if p != place]))
        kinds[name] = kind
        rows += [f"{name}#{j}\t{text}" for j, text in enumerate(_paraphrases(subject, action, place))]
    (root / "captions.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return kinds
