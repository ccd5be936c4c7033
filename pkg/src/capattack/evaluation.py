"""CLIP-score scoring of attacks and mean/std sweep reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import CaptionedSample
from .encoders import (
    CaptionPipelineAdapter,
    ClipAdapter,
    ContentCache,
    cached_caption,
    cached_encode_image,
    encode_image,
    encode_text,
)
from .errors import EmptyInput
from .objectives import cosine_similarity
from .types import AttackResult, ImageTensor, l2_norm, linf_norm, quantize_within

CSV_COLUMNS = (
    "sample_id", "mode", "epsilon", "clip_clean", "clip_adv", "linf", "l2", "clean_caption", "adv_caption",
)
EXTRA_COLUMN = "clip_adv_generated"


def clip_score(image: ImageTensor, text: str, clip: ClipAdapter, cache: ContentCache | None = None) -> float:
    """Cosine similarity of CLIP image and text embeddings."""
    if not isinstance(text, str) or not text.strip():
        raise ValueError("clip_score needs a non-empty text")
    if cache is not None:
        img_emb = cached_encode_image(clip.image_encoder, image, cache)
    else:
        img_emb = encode_image(clip.image_encoder, image)
    return cosine_similarity(img_emb, encode_text(clip.text_encoder, text))


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    epsilon: float
    mode: str
    clean_caption: str
    adv_caption: str
    clip_clean: float
    clip_adv: float
    linf: float
    l2: float
    clip_adv_generated: float | None = None

    def row(self, extra: bool = False) -> dict:
        out = {k: getattr(self, k) for k in CSV_COLUMNS}
        if extra:
            out[EXTRA_COLUMN] = "" if self.clip_adv_generated is None else self.clip_adv_generated
        return out


def evaluate_images(
    sample: CaptionedSample,
    clean_image: ImageTensor,
    adv_image: ImageTensor,
    captioner: CaptionPipelineAdapter,
    clip: ClipAdapter,
    *,
    epsilon: float,
    mode: str,
    clean_caption: str | None = None,
    cache: ContentCache | None = None,
) -> EvalRecord:
    """Score an already-quantized adversarial image against the clean sample.

    Both CLIP scores use the sample's first ground-truth caption as the text
    reference; ``clip_adv_generated`` scores the adversarial image against
    its own generated caption.
    """
    reference = sample.ground_truth_captions[0]
    if clean_caption is None:
        clean_caption = cached_caption(captioner, clean_image, cache)
    adv_caption = cached_caption(captioner, adv_image, cache)
    return EvalRecord(
        sample_id=sample.sample_id,
        epsilon=float(epsilon),
        mode=mode,
        clean_caption=clean_caption,
        adv_caption=adv_caption,
        clip_clean=clip_score(clean_image, reference, clip, cache),
        clip_adv=clip_score(adv_image, reference, clip, cache),
        linf=linf_norm(adv_image.data, clean_image.data),
        l2=l2_norm(adv_image.data, clean_image.data),
        clip_adv_generated=clip_score(adv_image, adv_caption, clip, cache),
    )


def evaluate_pair(
    clean: CaptionedSample,
    result: AttackResult,
    captioner: CaptionPipelineAdapter,
    clip: ClipAdapter,
    *,
    epsilon: float,
    mode: str,
    clean_image: ImageTensor | None = None,
    clean_caption: str | None = None,
    cache: ContentCache | None = None,
) -> EvalRecord:
    """Evaluate an attack result on its 8-bit (PNG-equivalent) adversarial image."""
    if clean_image is None:
        clean_image = clean.load_image(result.adversarial_image.shape[:2])
    adv = quantize_within(result.adversarial_image, clean_image, epsilon)
    return evaluate_images(
        clean, clean_image, adv, captioner, clip,
        epsilon=epsilon, mode=mode, clean_caption=clean_caption, cache=cache,
    )


@dataclass(frozen=True)
class SweepRow:
    mode: str
    epsilon: float
    mean_no_attack: float
    std_no_attack: float
    mean_attack: float
    std_attack: float
    n: int


@dataclass(frozen=True)
class SweepReport:
    rows: tuple[SweepRow, ...] = field(default_factory=tuple)

    def to_json(self) -> str:
        payload = {"std_convention": "population", "rows": [asdict(r) for r in self.rows]}
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SweepReport":
        return cls(tuple(SweepRow(**r) for r in json.loads(text)["rows"]))

    def modes(self) -> list[str]:
        return sorted({r.mode for r in self.rows}, key=lambda m: (m != "untargeted", m))


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def aggregate_sweep(records: Iterable[EvalRecord]) -> SweepReport:
    """Per (mode, epsilon) mean and population std of the clean and attacked CLIP scores."""
    groups: dict[tuple[str, float], list[EvalRecord]] = {}
    for rec in records:
        groups.setdefault((rec.mode, float(rec.epsilon)), []).append(rec)
    if not groups:
        raise EmptyInput("no evaluation records to aggregate")
    rows = []
    for mode, eps in sorted(groups, key=lambda k: (k[0] != "untargeted", k[0], k[1])):
        recs = groups[(mode, eps)]
        m0, s0 = _mean_std([r.clip_clean for r in recs])
        m1, s1 = _mean_std([r.clip_adv for r in recs])
        rows.append(SweepRow(mode, eps, m0, s0, m1, s1, len(recs)))
    return SweepReport(tuple(rows))


def _fmt_eps(eps: float) -> str:
    return f"{eps:g}"


def render_table(report: SweepReport, digits: int = 3) -> str:
    """Markdown tables, one per mode; the lowest attack score in each is bold."""
    out: list[str] = []
    for mode in report.modes():
        rows = [r for r in report.rows if r.mode == mode]
        best = min(r.mean_attack for r in rows)
        out += [f"### {mode.capitalize()}", "", "| ε | No Attack | Our Attack | n |", "|---|---|---|---|"]
        for r in rows:
            attack = f"{r.mean_attack:.{digits}f} ± {r.std_attack:.{digits}f}"
            if len(rows) > 1 and r.mean_attack == best:
                attack = f"**{attack}**"
            out.append(
                f"| {_fmt_eps(r.epsilon)} | {r.mean_no_attack:.{digits}f} ± {r.std_no_attack:.{digits}f} "
                f"| {attack} | {r.n} |"
            )
        out.append("")
    return "\n".join(out)


def report_csv(report: SweepReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mode", "epsilon", "mean_no_attack", "std_no_attack", "mean_attack", "std_attack", "n"])
    for r in report.rows:
        writer.writerow([r.mode, r.epsilon, r.mean_no_attack, r.std_no_attack, r.mean_attack, r.std_attack, r.n])
    return buf.getvalue()


def write_records_csv(records: Sequence[EvalRecord], path: str | Path, extra: bool = False) -> None:
    columns = list(CSV_COLUMNS) + ([EXTRA_COLUMN] if extra else [])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.row(extra))


def read_records_csv(path: str | Path) -> list[EvalRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise EmptyInput(f"{path} lacks columns {sorted(missing)}")
        out = []
        for row in reader:
            extra = row.get(EXTRA_COLUMN)
            out.append(
                EvalRecord(
                    sample_id=row["sample_id"],
                    epsilon=float(row["epsilon"]),
                    mode=row["mode"],
                    clean_caption=row["clean_caption"],
                    adv_caption=row["adv_caption"],
                    clip_clean=float(row["clip_clean"]),
                    clip_adv=float(row["clip_adv"]),
                    linf=float(row["linf"]),
                    l2=float(row["l2"]),
                    clip_adv_generated=float(extra) if extra else None,
                )
            )
    return out


def plot_report(report: SweepReport, path: str | Path) -> None:
    """Grouped bars of clean vs attacked score per epsilon, one panel per mode."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    modes = report.modes()
    fig, axes = plt.subplots(1, len(modes), figsize=(4.5 * len(modes), 3.5), squeeze=False)
    for ax, mode in zip(axes[0], modes):
        rows = [r for r in report.rows if r.mode == mode]
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [r.mean_no_attack for r in rows], 0.4, yerr=[r.std_no_attack for r in rows],
               capsize=3, label="No Attack", color="#8aa6c1")
        ax.bar(x + 0.2, [r.mean_attack for r in rows], 0.4, yerr=[r.std_attack for r in rows],
               capsize=3, label="Our Attack", color="#c1574a")
        ax.set_xticks(x, [_fmt_eps(r.epsilon) for r in rows])
        ax.set_xlabel("ε")
        ax.set_ylabel("CLIP score")
        ax.set_title(mode)
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)

